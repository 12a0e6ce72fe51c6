#pragma once

#include "gflowstate/env.hpp"
#include "gflowstate/errors.hpp"
#include "gflowstate/policy.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace gflowstate {

using Rng = std::mt19937_64;

struct TrajectoryStep {
  State state;
  Action action = Action::Stop;
  double p_forward = 1.0;
  // P_B(state | next state); 1 for the Stop step.
  double p_backward = 1.0;

  bool operator==(const TrajectoryStep &) const = default;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  State terminal;
  std::int64_t iteration = 0;
  std::int64_t trajectory_id = 0;

  bool operator==(const Trajectory &) const = default;
};

// Throws DomainError describing the first violated trajectory invariant.
void validate_trajectory(const Environment &env, const Trajectory &tau);

struct ActionProbability {
  Action action;
  double p;
};

struct ParentProbability {
  State parent;
  Action action;
  double p;
};

std::vector<ActionProbability> forward_policy(const PolicyNet<double> &net, const Environment &env,
                                              const State &s);
// Empty for the source state.
std::vector<ParentProbability> backward_policy(const PolicyNet<double> &net, const Environment &env,
                                               const State &s);

/// Samples one trajectory from the source. Actions are drawn from the
/// (1 - epsilon) * policy + epsilon * uniform mixture while the recorded
/// probabilities are those of the unmixed policy.
Trajectory sample_trajectory(const PolicyNet<double> &net, const Environment &env, double epsilon,
                             Rng &rng);

/// Squared trajectory-balance residual
///   (log Z + sum log P_F - log R - sum log P_B)^2
/// recomputed from `net`. When `grad` is given, `grad_scale` times the
/// gradient is accumulated into it.
template <typename Scalar>
Scalar tb_loss(const PolicyNet<Scalar> &net, const Environment &env, const Trajectory &tau,
               double reward, PolicyNet<Scalar> *grad = nullptr, Scalar grad_scale = Scalar(1)) {
  using std::log;
  if (!(reward > 0.0))
    throw DomainError("trajectory balance needs a positive reward");
  if (tau.steps.empty())
    throw DomainError("empty trajectory");

  const std::size_t n = tau.steps.size();
  std::vector<Activations<Scalar>> acts(n);
  std::vector<VectorX<Scalar>> log_pf(n), log_pb(n);
  std::vector<std::vector<int>> fwd_valid(n), bwd_valid(n);

  Scalar residual = net.log_z - Scalar(log(reward));
  for (std::size_t i = 0; i < n; ++i) {
    const State &s = tau.steps[i].state;
    acts[i] = evaluate(net, VectorX<Scalar>(env.features(s).template cast<Scalar>()));
    const auto actions = env.valid_forward_actions(s);
    fwd_valid[i] = forward_indices(actions);
    log_pf[i] = masked_log_softmax<Scalar>(acts[i].forward_logits, fwd_valid[i]);
    residual += log_pf[i][static_cast<int>(tau.steps[i].action)];
    if (i > 0) {
      const auto ps = env.parents(s);
      bwd_valid[i] = backward_indices(ps);
      log_pb[i] = masked_log_softmax<Scalar>(acts[i].backward_logits, bwd_valid[i]);
      residual -= log_pb[i][static_cast<int>(tau.steps[i - 1].action)];
    }
  }

  if (grad != nullptr) {
    const Scalar c = Scalar(2) * residual * grad_scale;
    grad->log_z += c;
    for (std::size_t i = 0; i < n; ++i) {
      VectorX<Scalar> d_f =
          c * masked_log_softmax_grad<Scalar>(log_pf[i], fwd_valid[i], static_cast<int>(tau.steps[i].action));
      VectorX<Scalar> d_b = VectorX<Scalar>::Zero(kBackwardActionCount);
      if (i > 0)
        d_b = -c * masked_log_softmax_grad<Scalar>(log_pb[i], bwd_valid[i],
                                                   static_cast<int>(tau.steps[i - 1].action));
      backpropagate(net, acts[i], d_f, d_b, *grad);
    }
  }
  return residual * residual;
}

/// Exact terminal distribution P_T by forward dynamic programming over the
/// enumerated state space. Throws CapabilityError when the environment
/// cannot be enumerated.
std::map<std::string, double> exact_terminal_distribution(const PolicyNet<double> &net,
                                                          const Environment &env);

struct EstimatorConfig {
  int samples = 1000; // backward trajectories per object
  std::uint64_t seed = 0;
};

/// Importance-sampling estimate of log P_T(x) from backward trajectories.
double estimate_log_ptx(const PolicyNet<double> &net, const Environment &env, const State &x,
                        const EstimatorConfig &cfg);

// Adaptive-moment optimizer over the flattened parameter vector; log_z gets
// its own learning rate.
class AdamOptimizer {
public:
  AdamOptimizer(Eigen::Index parameter_count, double learning_rate, double log_z_learning_rate,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(PolicyNet<double> &net, const PolicyNet<double> &grad);

private:
  Eigen::VectorXd lr_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
};

struct TrainConfig {
  int iterations = 10000;
  int batch_size = 16;
  double learning_rate = 5e-3;
  double log_z_learning_rate = 1e-1;
  double epsilon = 0.2;
  std::uint64_t seed = 0;
  int hidden_width = 64;
  double input_scale = kDefaultInputScale;

  void validate() const;
  nlohmann::json to_json() const;
};

struct LoggedSample {
  Trajectory trajectory;
  double reward = 0.0;
  double loss = 0.0;
};

// Called once per iteration with that iteration's batch.
using IterationSink = std::function<void(std::int64_t iteration, const std::vector<LoggedSample> &)>;

struct RunSummary {
  int iterations = 0;
  double final_mean_loss = 0.0;
  double log_z = 0.0;
  std::size_t distinct_terminal_states = 0;
  double wall_seconds = 0.0;

  // Persisted form; leaves out wall_seconds so stored runs stay reproducible.
  nlohmann::json to_json() const;
};

/// Trajectory-balance training loop. Deterministic given `cfg.seed`.
/// `net` is (re)initialized from the seed before the first iteration.
RunSummary train(const Environment &env, const TrainConfig &cfg, PolicyNet<double> &net,
                 const IterationSink &sink = {});

nlohmann::json net_to_json(const PolicyNet<double> &net);
PolicyNet<double> net_from_json(const nlohmann::json &j);

} // namespace gflowstate
