#pragma once

// Adaptive gate over the two task-specific updates. A small MLP maps batch
// statistics z = [loss ratio, gradient-norm ratio, sample ratio] through a
// temperature softmax to (alpha_src, alpha_rec).

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>

#include "gems/error.hpp"
#include "gems/linalg.hpp"
#include "gems/rng.hpp"

namespace gems {

struct TaskBatchStats {
  double loss_src = 0.0;
  double loss_rec = 0.0;
  double gradnorm_src = 0.0;
  double gradnorm_rec = 0.0;
  std::size_t count_src = 0;
  std::size_t count_rec = 0;
};

using GateFeatures = std::array<double, 3>;

struct GateWeights {
  double src = 0.5;
  double rec = 0.5;
};

inline GateFeatures gate_features(const TaskBatchStats& s) {
  if (s.count_src + s.count_rec == 0) fail(ErrorKind::invalid_argument, "gate_features: empty batch statistics");
  constexpr double guard = 1e-12;
  return {s.loss_src / (s.loss_src + s.loss_rec + guard),
          s.gradnorm_src / (s.gradnorm_src + s.gradnorm_rec + guard),
          static_cast<double>(s.count_src) / static_cast<double>(s.count_src + s.count_rec)};
}

inline GateWeights softmax_pair(double o_src, double o_rec, double temperature) {
  const double a = o_src / temperature;
  const double b = o_rec / temperature;
  const double m = std::max(a, b);
  const double ea = std::exp(a - m);
  const double eb = std::exp(b - m);
  const double s = ea + eb;
  return {ea / s, eb / s};
}

struct GatingNet {
  Matrix w1;  // hidden x 3
  std::vector<double> b1;
  Matrix w2;  // 2 x hidden
  std::array<double, 2> b2{0.0, 0.0};
  double temperature = 1.0;

  std::size_t hidden() const noexcept { return b1.size(); }

  static GatingNet zeros(std::size_t hidden, double temperature) {
    if (hidden == 0) fail(ErrorKind::config, "gate hidden width must be positive");
    if (!(temperature > 0.0)) fail(ErrorKind::config, "gate temperature must be positive");
    return GatingNet{Matrix(hidden, 3), std::vector<double>(hidden, 0.0), Matrix(2, hidden), {0.0, 0.0}, temperature};
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  static GatingNet random(std::size_t hidden, double temperature, Rng& rng) {
    GatingNet net = zeros(hidden, temperature);
    const double bound1 = 1.0 / std::sqrt(3.0);
    for (double& w : net.w1.data()) w = rng.uniform(-bound1, bound1);
    const double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (double& w : net.w2.data()) w = rng.uniform(-bound2, bound2);
    return net;
  }

  struct Activations {
    std::vector<double> pre;
    std::vector<double> h;
    std::array<double, 2> o;
  };

  Activations activations(const GateFeatures& z) const {
    Activations a{std::vector<double>(hidden()), std::vector<double>(hidden()), {b2[0], b2[1]}};
    for (std::size_t j = 0; j < hidden(); ++j) {
      double s = b1[j];
      for (std::size_t i = 0; i < 3; ++i) s += w1(j, i) * z[i];
      a.pre[j] = s;
      a.h[j] = s > 0.0 ? s : 0.0;
    }
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < hidden(); ++j) a.o[k] += w2(k, j) * a.h[j];
    return a;
  }

  friend bool operator==(const GatingNet&, const GatingNet&) = default;
};

inline GateWeights gate_forward(const GatingNet& net, const GateFeatures& z) {
  const auto a = net.activations(z);
  return softmax_pair(a.o[0], a.o[1], net.temperature);
}

struct GateTrainConfig {
  double lr = 0.05;
  double perturbation = 0.1;
};

/// One SPSA update of the gate parameters. `trial` returns the combined loss
/// after a step taken with the given gate weights. The output logits are
/// perturbed by ±delta along a Rademacher direction; the resulting estimate of
/// dL/do is backpropagated through the MLP and applied as one SGD step.
inline GatingNet gate_update(const GatingNet& net, const GateFeatures& z,
                             const std::function<double(const GateWeights&)>& trial, const GateTrainConfig& cfg,
                             Rng& rng) {
  const auto act = net.activations(z);
  const std::array<double, 2> dir{rng.bernoulli(0.5) ? 1.0 : -1.0, rng.bernoulli(0.5) ? 1.0 : -1.0};
  const double d = cfg.perturbation;
  const double loss_plus =
      trial(softmax_pair(act.o[0] + d * dir[0], act.o[1] + d * dir[1], net.temperature));
  const double loss_minus =
      trial(softmax_pair(act.o[0] - d * dir[0], act.o[1] - d * dir[1], net.temperature));
  if (!std::isfinite(loss_plus) || !std::isfinite(loss_minus))
    fail(ErrorKind::numeric, "gate_update: non-finite trial loss");
  const double diff = loss_plus - loss_minus;
  if (diff == 0.0) return net;

  const std::array<double, 2> grad_o{diff / (2.0 * d) * dir[0], diff / (2.0 * d) * dir[1]};
  GatingNet out = net;
  std::vector<double> grad_pre(net.hidden(), 0.0);
  for (std::size_t j = 0; j < net.hidden(); ++j) {
    double dh = net.w2(0, j) * grad_o[0] + net.w2(1, j) * grad_o[1];
    grad_pre[j] = act.pre[j] > 0.0 ? dh : 0.0;
  }
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t j = 0; j < net.hidden(); ++j) out.w2(k, j) -= cfg.lr * grad_o[k] * act.h[j];
    out.b2[k] -= cfg.lr * grad_o[k];
  }
  for (std::size_t j = 0; j < net.hidden(); ++j) {
    for (std::size_t i = 0; i < 3; ++i) out.w1(j, i) -= cfg.lr * grad_pre[j] * z[i];
    out.b1[j] -= cfg.lr * grad_pre[j];
  }
  return out;
}

}  // namespace gems
