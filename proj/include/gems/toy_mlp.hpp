#pragma once

// Two-layer tanh regressor y = W2 · tanh(W1 · x) with squared error. Small
// enough to check the training loop against an independent dense reference.

#include <cmath>
#include <vector>

#include "gems/model_api.hpp"
#include "gems/rng.hpp"

namespace gems {

class ToyMlp {
 public:
  struct Sample {
    std::vector<double> x;
    std::vector<double> target;
    Task task = Task::src;
  };

  ToyMlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    Parameter w1{"mlp.w1", Matrix(hidden, in), true};
    Parameter w2{"mlp.w2", Matrix(out, hidden), true};
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (double& v : w1.value.data()) v = s1 * rng.normal();
    for (double& v : w2.value.data()) v = s2 * rng.normal();
    params_ = {std::move(w1), std::move(w2)};
  }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Task task_of(const Sample& s) const { return s.task; }

  std::vector<double> forward(const std::vector<double>& x, std::vector<double>* hidden = nullptr) const {
    const Matrix& w1 = params_[0].value;
    const Matrix& w2 = params_[1].value;
    std::vector<double> h(w1.rows());
    for (std::size_t i = 0; i < w1.rows(); ++i) h[i] = std::tanh(dot(w1.row(i), x));
    std::vector<double> y(w2.rows());
    for (std::size_t i = 0; i < w2.rows(); ++i) y[i] = dot(w2.row(i), h);
    if (hidden) *hidden = std::move(h);
    return y;
  }

  double sample_loss(const Sample& s) const {
    const auto y = forward(s.x);
    double l = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) l += 0.5 * (y[i] - s.target[i]) * (y[i] - s.target[i]);
    return l;
  }

  double accumulate_gradient(const Sample& s, Gradients& g, double weight) const {
    std::vector<double> h;
    const auto y = forward(s.x, &h);
    const Matrix& w2 = params_[1].value;
    std::vector<double> dy(y.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      dy[i] = y[i] - s.target[i];
      loss += 0.5 * dy[i] * dy[i];
    }
    for (std::size_t i = 0; i < w2.rows(); ++i)
      for (std::size_t j = 0; j < w2.cols(); ++j) g[1](i, j) += weight * dy[i] * h[j];
    for (std::size_t j = 0; j < h.size(); ++j) {
      double dh = 0.0;
      for (std::size_t i = 0; i < dy.size(); ++i) dh += w2(i, j) * dy[i];
      const double dpre = dh * (1.0 - h[j] * h[j]);
      for (std::size_t k = 0; k < s.x.size(); ++k) g[0](j, k) += weight * dpre * s.x[k];
    }
    return loss;
  }

 private:
  std::vector<Parameter> params_;
};

}  // namespace gems
