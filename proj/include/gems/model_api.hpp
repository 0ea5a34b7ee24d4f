#pragma once

// The contract between the optimizer and a model. A model owns a flat list of
// named parameters; 2-D weights flagged as matrix layers get subspace
// treatment, everything else (biases, norm gains) gets dense Adam.

#include <concepts>
#include <span>
#include <string>
#include <vector>

#include "gems/error.hpp"
#include "gems/linalg.hpp"

namespace gems {

enum class Task { src, rec };

inline const char* to_string(Task t) { return t == Task::src ? "src" : "rec"; }

inline Task task_from_string(const std::string& s) {
  if (s == "src") return Task::src;
  if (s == "rec") return Task::rec;
  fail(ErrorKind::invalid_argument, "unknown task '" + s + "'");
}

struct Parameter {
  std::string name;
  Matrix value;
  bool matrix_layer = false;
};

using Gradients = std::vector<Matrix>;

inline Gradients zeros_like(const std::vector<Parameter>& params) {
  Gradients g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.value.rows(), p.value.cols());
  return g;
}

template <class M>
concept TrainableModel = requires(M& m, const M& cm, const typename M::Sample& s, Gradients& g, double w) {
  { m.parameters() } -> std::same_as<std::vector<Parameter>&>;
  { cm.parameters() } -> std::same_as<const std::vector<Parameter>&>;
  { cm.task_of(s) } -> std::same_as<Task>;
  // Adds w * d(loss)/d(params) into g and returns the sample loss.
  { cm.accumulate_gradient(s, g, w) } -> std::same_as<double>;
  { cm.sample_loss(s) } -> std::same_as<double>;
};

}  // namespace gems
