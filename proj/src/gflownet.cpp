#include "gflowstate/gflownet.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace gflowstate {

namespace {

VectorX<double> features_of(const Environment &env, const State &s) { return env.features(s); }

// Index drawn from an unnormalized-free probability vector restricted to `valid`.
int draw(std::span<const int> valid, const std::vector<double> &probs, Rng &rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double target = u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    acc += probs[i];
    if (target < acc)
      return valid[i];
  }
  return valid.back();
}

// Frozen-policy log-probabilities per state, computed on first use.
class PolicyTable {
public:
  PolicyTable(const PolicyNet<double> &net, const Environment &env) : net_(net), env_(env) {}

  struct Entry {
    std::vector<Action> actions;
    std::vector<Parent> parents;
    Eigen::VectorXd log_forward;
    Eigen::VectorXd log_backward;
  };

  const Entry &at(const State &s) {
    auto it = cache_.find(s);
    if (it != cache_.end())
      return it->second;
    Entry e;
    const auto act = evaluate(net_, features_of(env_, s));
    e.actions = env_.valid_forward_actions(s);
    e.parents = env_.parents(s);
    e.log_forward = masked_log_softmax<double>(act.forward_logits, forward_indices(e.actions));
    e.log_backward = masked_log_softmax<double>(act.backward_logits, backward_indices(e.parents));
    return cache_.emplace(s, std::move(e)).first->second;
  }

private:
  const PolicyNet<double> &net_;
  const Environment &env_;
  std::map<State, Entry> cache_;
};

} // namespace

void validate_trajectory(const Environment &env, const Trajectory &tau) {
  if (tau.steps.empty())
    throw DomainError("trajectory has no steps");
  if (tau.steps.front().state != env.source())
    throw DomainError("trajectory does not start at the source state");
  for (std::size_t i = 0; i < tau.steps.size(); ++i) {
    const auto &step = tau.steps[i];
    if (!(step.p_forward > 0.0 && step.p_forward <= 1.0) ||
        !(step.p_backward > 0.0 && step.p_backward <= 1.0))
      throw DomainError("step probability outside (0, 1]");
    const auto next = env.apply_action(step.state, step.action);
    const bool last = i + 1 == tau.steps.size();
    if (last) {
      if (!next.terminal)
        throw DomainError("trajectory does not end with Stop");
      if (step.p_backward != 1.0)
        throw DomainError("Stop step must carry p_backward = 1");
      if (next.state != tau.terminal)
        throw DomainError("terminal does not match the final state");
    } else if (next.terminal || next.state != tau.steps[i + 1].state) {
      throw DomainError("consecutive states are not linked by their action");
    }
  }
}

std::vector<ActionProbability> forward_policy(const PolicyNet<double> &net, const Environment &env,
                                              const State &s) {
  const auto actions = env.valid_forward_actions(s);
  const auto idx = forward_indices(actions);
  const auto act = evaluate(net, features_of(env, s));
  const auto logp = masked_log_softmax<double>(act.forward_logits, idx);
  std::vector<ActionProbability> out;
  out.reserve(actions.size());
  for (Action a : actions)
    out.push_back({a, std::exp(logp[static_cast<int>(a)])});
  return out;
}

std::vector<ParentProbability> backward_policy(const PolicyNet<double> &net, const Environment &env,
                                               const State &s) {
  const auto ps = env.parents(s);
  if (ps.empty())
    return {};
  const auto act = evaluate(net, features_of(env, s));
  const auto logp = masked_log_softmax<double>(act.backward_logits, backward_indices(ps));
  std::vector<ParentProbability> out;
  out.reserve(ps.size());
  for (const auto &p : ps)
    out.push_back({p.state, p.action, std::exp(logp[static_cast<int>(p.action)])});
  return out;
}

Trajectory sample_trajectory(const PolicyNet<double> &net, const Environment &env, double epsilon,
                             Rng &rng) {
  Trajectory tau;
  State s = env.source();
  auto current = evaluate(net, features_of(env, s));
  for (int len = 0;; ++len) {
    if (len >= env.max_trajectory_length())
      throw CapabilityError("trajectory exceeded the maximum length guard");
    const auto actions = env.valid_forward_actions(s);
    const auto idx = forward_indices(actions);
    const auto logp = masked_log_softmax<double>(current.forward_logits, idx);

    std::vector<double> mixed(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
      mixed[i] = (1.0 - epsilon) * std::exp(logp[idx[i]]) + epsilon / static_cast<double>(idx.size());
    const auto chosen = static_cast<Action>(draw(idx, mixed, rng));

    TrajectoryStep step{s, chosen, std::exp(logp[static_cast<int>(chosen)]), 1.0};
    const auto next = env.apply_action(s, chosen);
    if (next.terminal) {
      tau.steps.push_back(step);
      tau.terminal = next.state;
      return tau;
    }
    auto following = evaluate(net, features_of(env, next.state));
    const auto parents = env.parents(next.state);
    const auto logb = masked_log_softmax<double>(following.backward_logits, backward_indices(parents));
    step.p_backward = std::exp(logb[static_cast<int>(chosen)]);
    tau.steps.push_back(step);
    s = next.state;
    current = std::move(following);
  }
}

std::map<std::string, double> exact_terminal_distribution(const PolicyNet<double> &net,
                                                          const Environment &env) {
  const auto states = env.enumerate_states();
  if (!states)
    throw CapabilityError("state space too large for exact enumeration");
  std::map<State, double> reach;
  reach[env.source()] = 1.0;
  std::map<std::string, double> terminal;
  for (const State &s : *states) {
    const double mass = reach[s];
    for (const auto &[a, p] : forward_policy(net, env, s)) {
      const auto next = env.apply_action(s, a);
      if (next.terminal)
        terminal[env.state_key(s)] += mass * p;
      else
        reach[next.state] += mass * p;
    }
  }
  return terminal;
}

double estimate_log_ptx(const PolicyNet<double> &net, const Environment &env, const State &x,
                        const EstimatorConfig &cfg) {
  if (cfg.samples < 1)
    throw DomainError("importance sampling needs at least one backward trajectory");
  if (!env.is_valid(x))
    throw DomainError("estimate_log_ptx on an invalid state");
  PolicyTable table(net, env);
  Rng rng(cfg.seed);
  const double stop = table.at(x).log_forward[static_cast<int>(Action::Stop)];
  std::vector<double> log_weights;
  log_weights.reserve(static_cast<std::size_t>(cfg.samples));
  for (int k = 0; k < cfg.samples; ++k) {
    double log_w = stop;
    State s = x;
    for (int len = 0; s != env.source(); ++len) {
      if (len >= env.max_trajectory_length())
        throw CapabilityError("backward trajectory exceeded the maximum length guard");
      const auto &entry = table.at(s);
      const auto idx = backward_indices(entry.parents);
      std::vector<double> probs;
      probs.reserve(idx.size());
      for (int i : idx)
        probs.push_back(std::exp(entry.log_backward[i]));
      const int chosen = draw(idx, probs, rng);
      const auto it = std::find_if(entry.parents.begin(), entry.parents.end(),
                                   [&](const Parent &p) { return static_cast<int>(p.action) == chosen; });
      const Parent parent = *it;
      log_w += table.at(parent.state).log_forward[chosen] - entry.log_backward[chosen];
      s = parent.state;
    }
    log_weights.push_back(log_w);
  }
  const double peak = *std::max_element(log_weights.begin(), log_weights.end());
  double total = 0.0;
  for (double lw : log_weights)
    total += std::exp(lw - peak);
  return peak + std::log(total / static_cast<double>(cfg.samples));
}

AdamOptimizer::AdamOptimizer(Eigen::Index parameter_count, double learning_rate,
                             double log_z_learning_rate, double beta1, double beta2, double eps)
    : lr_(Eigen::VectorXd::Constant(parameter_count, learning_rate)),
      m_(Eigen::VectorXd::Zero(parameter_count)), v_(Eigen::VectorXd::Zero(parameter_count)),
      beta1_(beta1), beta2_(beta2), eps_(eps) {
  lr_[parameter_count - 1] = log_z_learning_rate;
}

void AdamOptimizer::step(PolicyNet<double> &net, const PolicyNet<double> &grad) {
  const Eigen::VectorXd g = grad.flatten();
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * g;
  v_ = beta2_ * v_ + (1.0 - beta2_) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const Eigen::ArrayXd m_hat = m_.array() / c1;
  const Eigen::ArrayXd v_hat = v_.array() / c2;
  Eigen::VectorXd params = net.flatten();
  params.array() -= lr_.array() * m_hat / (v_hat.sqrt() + eps_);
  net.unflatten(params);
}

void TrainConfig::validate() const {
  if (iterations < 0)
    throw DomainError("iterations must be nonnegative");
  if (batch_size < 1)
    throw DomainError("batch size must be positive");
  if (!(learning_rate > 0.0) || !(log_z_learning_rate > 0.0))
    throw DomainError("learning rates must be positive");
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw DomainError("exploration epsilon must lie in [0, 1)");
  if (hidden_width < 1)
    throw DomainError("hidden width must be positive");
  if (!(input_scale > 0.0) || !std::isfinite(input_scale))
    throw DomainError("input scale must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"iterations", iterations},   {"batch_size", batch_size},
          {"learning_rate", learning_rate}, {"log_z_learning_rate", log_z_learning_rate},
          {"epsilon", epsilon},         {"seed", seed},
          {"hidden_width", hidden_width}, {"input_scale", input_scale}};
}

nlohmann::json RunSummary::to_json() const {
  return {{"iterations", iterations},
          {"final_mean_loss", final_mean_loss},
          {"log_z", log_z},
          {"distinct_terminal_states", distinct_terminal_states}};
}

RunSummary train(const Environment &env, const TrainConfig &cfg, PolicyNet<double> &net,
                 const IterationSink &sink) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  net = PolicyNet<double>::initialize(env.feature_dim(), cfg.hidden_width, rng, cfg.input_scale);
  AdamOptimizer optimizer(net.parameter_count(), cfg.learning_rate, cfg.log_z_learning_rate);

  RunSummary summary;
  std::set<std::string> distinct;
  std::vector<LoggedSample> batch(static_cast<std::size_t>(cfg.batch_size));
  const double scale = 1.0 / cfg.batch_size;
  for (int it = 0; it < cfg.iterations; ++it) {
    auto grad = PolicyNet<double>::zeros(net.input_dim(), net.hidden_width());
    double total = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      auto &sample = batch[static_cast<std::size_t>(b)];
      sample.trajectory = sample_trajectory(net, env, cfg.epsilon, rng);
      sample.trajectory.iteration = it;
      sample.trajectory.trajectory_id = static_cast<std::int64_t>(it) * cfg.batch_size + b;
      sample.reward = env.reward(sample.trajectory.terminal);
      sample.loss = tb_loss<double>(net, env, sample.trajectory, sample.reward, &grad, scale);
      total += sample.loss;
      distinct.insert(env.state_key(sample.trajectory.terminal));
    }
    optimizer.step(net, grad);
    if (!net.all_finite())
      throw CapabilityError("non-finite parameters after iteration " + std::to_string(it));
    if (sink)
      sink(it, batch);
    summary.final_mean_loss = total * scale;
  }
  summary.iterations = cfg.iterations;
  summary.log_z = net.log_z;
  summary.distinct_terminal_states = distinct.size();
  summary.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return summary;
}

nlohmann::json net_to_json(const PolicyNet<double> &net) {
  const Eigen::VectorXd flat = net.flatten();
  return {{"input_dim", net.input_dim()},
          {"hidden_width", net.hidden_width()},
          {"parameters", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

PolicyNet<double> net_from_json(const nlohmann::json &j) {
  auto net = PolicyNet<double>::zeros(j.at("input_dim").get<Eigen::Index>(),
                                      j.at("hidden_width").get<Eigen::Index>());
  const auto params = j.at("parameters").get<std::vector<double>>();
  net.unflatten(Eigen::Map<const Eigen::VectorXd>(params.data(), static_cast<Eigen::Index>(params.size())));
  return net;
}

} // namespace gflowstate
