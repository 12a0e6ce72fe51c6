#pragma once

#include "gflowstate/env.hpp"
#include "gflowstate/errors.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace gflowstate {

template <typename Scalar> using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar> using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Feed-forward policy: features -> tanh -> tanh -> {forward head, backward head}.
///
/// The forward head scores IncX, IncY, Stop; the backward head scores the
/// parent reached through IncX and IncY. `log_z` is the learned log partition
/// function of trajectory balance. The same type doubles as a gradient
/// accumulator, since gradients share the parameter layout.
inline constexpr double kDefaultInputScale = 6.0;

template <typename Scalar> struct PolicyNet {
  MatrixX<Scalar> w1;
  VectorX<Scalar> b1;
  MatrixX<Scalar> w2;
  VectorX<Scalar> b2;
  MatrixX<Scalar> wf;
  VectorX<Scalar> bf;
  MatrixX<Scalar> wb;
  VectorX<Scalar> bb;
  Scalar log_z = Scalar(0);

  Eigen::Index input_dim() const { return w1.cols(); }
  Eigen::Index hidden_width() const { return w1.rows(); }

  // Zero-shaped network.
  static PolicyNet zeros(Eigen::Index input_dim, Eigen::Index width) {
    PolicyNet n;
    n.w1 = MatrixX<Scalar>::Zero(width, input_dim);
    n.b1 = VectorX<Scalar>::Zero(width);
    n.w2 = MatrixX<Scalar>::Zero(width, width);
    n.b2 = VectorX<Scalar>::Zero(width);
    n.wf = MatrixX<Scalar>::Zero(kForwardActionCount, width);
    n.bf = VectorX<Scalar>::Zero(kForwardActionCount);
    n.wb = MatrixX<Scalar>::Zero(kBackwardActionCount, width);
    n.bb = VectorX<Scalar>::Zero(kBackwardActionCount);
    return n;
  }

  // The first layer is drawn from U(-input_scale, input_scale) so that
  // features in [0, 1] reach the nonlinear range of tanh; the second layer is
  // Glorot-uniform. Output heads and log_z start at zero, so the initial
  // policies are uniform over valid actions.
  template <typename Rng>
  static PolicyNet initialize(Eigen::Index input_dim, Eigen::Index width, Rng &rng,
                              double input_scale = kDefaultInputScale) {
    PolicyNet n = zeros(input_dim, width);
    auto fill = [&rng](auto &m, double bound) {
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
          m(i, j) = Scalar(u(rng));
    };
    fill(n.w2, std::sqrt(6.0 / static_cast<double>(n.w2.rows() + n.w2.cols())));
    fill(n.w1, input_scale);
    fill(n.b1, input_scale);
    return n;
  }

  // Every parameter drawn uniformly from [-scale, scale].
  template <typename Rng> void randomize(double scale, Rng &rng) {
    std::uniform_real_distribution<double> u(-scale, scale);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> flat = flatten();
    for (Eigen::Index i = 0; i < flat.size(); ++i)
      flat[i] = Scalar(u(rng));
    unflatten(flat);
  }

  Eigen::Index parameter_count() const {
    return w1.size() + b1.size() + w2.size() + b2.size() + wf.size() + bf.size() + wb.size() +
           bb.size() + 1;
  }

  // Column-major concatenation in declaration order; log_z is last.
  VectorX<Scalar> flatten() const {
    VectorX<Scalar> out(parameter_count());
    Eigen::Index at = 0;
    auto put = [&](const auto &m) {
      out.segment(at, m.size()) = Eigen::Map<const VectorX<Scalar>>(m.data(), m.size());
      at += m.size();
    };
    put(w1), put(b1), put(w2), put(b2), put(wf), put(bf), put(wb), put(bb);
    out[at] = log_z;
    return out;
  }

  void unflatten(const VectorX<Scalar> &flat) {
    if (flat.size() != parameter_count())
      throw DomainError("parameter vector has the wrong length");
    Eigen::Index at = 0;
    auto take = [&](auto &m) {
      Eigen::Map<VectorX<Scalar>>(m.data(), m.size()) = flat.segment(at, m.size());
      at += m.size();
    };
    take(w1), take(b1), take(w2), take(b2), take(wf), take(bf), take(wb), take(bb);
    log_z = flat[at];
  }

  template <typename NewScalar> PolicyNet<NewScalar> cast() const {
    PolicyNet<NewScalar> n;
    n.w1 = w1.template cast<NewScalar>();
    n.b1 = b1.template cast<NewScalar>();
    n.w2 = w2.template cast<NewScalar>();
    n.b2 = b2.template cast<NewScalar>();
    n.wf = wf.template cast<NewScalar>();
    n.bf = bf.template cast<NewScalar>();
    n.wb = wb.template cast<NewScalar>();
    n.bb = bb.template cast<NewScalar>();
    n.log_z = static_cast<NewScalar>(log_z);
    return n;
  }

  bool all_finite() const { return flatten().allFinite(); }
};

template <typename Scalar> struct Activations {
  VectorX<Scalar> input;
  VectorX<Scalar> h1;
  VectorX<Scalar> h2;
  VectorX<Scalar> forward_logits;
  VectorX<Scalar> backward_logits;
};

template <typename Scalar>
Activations<Scalar> evaluate(const PolicyNet<Scalar> &net, const VectorX<Scalar> &input) {
  Activations<Scalar> a;
  a.input = input;
  a.h1 = (net.w1 * input + net.b1).array().tanh().matrix();
  a.h2 = (net.w2 * a.h1 + net.b2).array().tanh().matrix();
  a.forward_logits = net.wf * a.h2 + net.bf;
  a.backward_logits = net.wb * a.h2 + net.bb;
  return a;
}

// Accumulates into `grad` the parameter gradient given upstream gradients of
// the two heads' logits.
template <typename Scalar>
void backpropagate(const PolicyNet<Scalar> &net, const Activations<Scalar> &a,
                   const VectorX<Scalar> &d_forward, const VectorX<Scalar> &d_backward,
                   PolicyNet<Scalar> &grad) {
  grad.wf.noalias() += d_forward * a.h2.transpose();
  grad.bf += d_forward;
  grad.wb.noalias() += d_backward * a.h2.transpose();
  grad.bb += d_backward;
  VectorX<Scalar> d_h2 = net.wf.transpose() * d_forward + net.wb.transpose() * d_backward;
  VectorX<Scalar> d_z2 = (d_h2.array() * (Scalar(1) - a.h2.array().square())).matrix();
  grad.w2.noalias() += d_z2 * a.h1.transpose();
  grad.b2 += d_z2;
  VectorX<Scalar> d_h1 = net.w2.transpose() * d_z2;
  VectorX<Scalar> d_z1 = (d_h1.array() * (Scalar(1) - a.h1.array().square())).matrix();
  grad.w1.noalias() += d_z1 * a.input.transpose();
  grad.b1 += d_z1;
}

/// Log-softmax restricted to `valid` indices; other entries are -inf.
template <typename Scalar>
VectorX<Scalar> masked_log_softmax(const VectorX<Scalar> &logits, std::span<const int> valid) {
  using std::exp;
  using std::log;
  VectorX<Scalar> out = VectorX<Scalar>::Constant(logits.size(), -std::numeric_limits<Scalar>::infinity());
  if (valid.empty())
    return out;
  Scalar peak = logits[valid.front()];
  for (int i : valid)
    peak = std::max(peak, logits[i]);
  Scalar total(0);
  for (int i : valid)
    total += exp(logits[i] - peak);
  const Scalar lse = peak + log(total);
  for (int i : valid)
    out[i] = logits[i] - lse;
  return out;
}

// Gradient of log p[target] w.r.t. the logits of a masked softmax:
// one-hot(target) - p on valid entries, zero elsewhere.
template <typename Scalar>
VectorX<Scalar> masked_log_softmax_grad(const VectorX<Scalar> &log_probs, std::span<const int> valid,
                                        int target) {
  using std::exp;
  VectorX<Scalar> g = VectorX<Scalar>::Zero(log_probs.size());
  for (int i : valid)
    g[i] = -exp(log_probs[i]);
  g[target] += Scalar(1);
  return g;
}

inline std::vector<int> forward_indices(std::span<const Action> actions) {
  std::vector<int> out;
  out.reserve(actions.size());
  for (Action a : actions)
    out.push_back(static_cast<int>(a));
  return out;
}

inline std::vector<int> backward_indices(std::span<const Parent> parents) {
  std::vector<int> out;
  out.reserve(parents.size());
  for (const auto &p : parents)
    out.push_back(static_cast<int>(p.action));
  return out;
}

} // namespace gflowstate
