#pragma once

// Checkpoint container: one JSON header line describing every tensor and the
// scalar state, followed by the tensors in the matrix wire format.
//
//   params            one matrix per model parameter
//   gate              w1, b1, w2, b2
//   optimizer states  basis, m1, m2 per subspace; m1, m2 per dense Adam

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gems/error.hpp"
#include "gems/gems.hpp"
#include "gems/linalg.hpp"

namespace gems {

inline constexpr int checkpoint_version = 1;

struct CheckpointData {
  nlohmann::ordered_json header;
  std::vector<Matrix> tensors;
};

namespace detail {

inline Matrix row_matrix(std::span<const double> v) { return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end())); }

inline nlohmann::ordered_json adam_json(const AdamHyper& h) {
  nlohmann::ordered_json j;
  j["lr"] = h.lr;
  j["beta1"] = h.beta1;
  j["beta2"] = h.beta2;
  j["eps"] = h.eps;
  return j;
}

inline std::size_t expected_tensors(const nlohmann::ordered_json& header) {
  std::size_t n = header.at("params").size() + 4;
  for (const auto& s : header.at("states")) n += s.at("kind") == "dense" ? 2 : 3;
  return n;
}

}  // namespace detail

template <TrainableModel M>
CheckpointData capture_checkpoint(const M& model, const GemsOptimizer<M>& opt, const std::string& config_hash,
                                  const nlohmann::ordered_json& config = nullptr) {
  CheckpointData cp;
  auto& h = cp.header;
  h["format"] = "gems-checkpoint";
  h["version"] = checkpoint_version;
  h["config_hash"] = config_hash;
  if (!config.is_null()) h["config"] = config;
  h["step"] = opt.steps_taken();
  h["variant"] = to_string(opt.config().variant);
  h["gate_temperature"] = opt.gate().temperature;
  auto params = nlohmann::ordered_json::array();
  for (const auto& p : model.parameters()) {
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["rows"] = p.value.rows();
    e["cols"] = p.value.cols();
    e["matrix_layer"] = p.matrix_layer;
    params.push_back(std::move(e));
    cp.tensors.push_back(p.value);
  }
  h["params"] = std::move(params);
  const GatingNet& g = opt.gate();
  cp.tensors.push_back(g.w1);
  cp.tensors.push_back(detail::row_matrix(g.b1));
  cp.tensors.push_back(g.w2);
  cp.tensors.push_back(detail::row_matrix(g.b2));

  auto states = nlohmann::ordered_json::array();
  auto add_subspace = [&](std::size_t l, const SubspaceState& s) {
    nlohmann::ordered_json e;
    e["param"] = l;
    e["kind"] = to_string(s.tag());
    e["rank"] = s.rank();
    e["refresh_every"] = s.config().refresh_every;
    e["scale"] = s.config().scale;
    e["adam"] = detail::adam_json(s.config().adam);
    e["reset_moments_on_refresh"] = s.config().reset_moments_on_refresh;
    e["step"] = s.step();
    e["locked"] = s.basis_locked();
    states.push_back(std::move(e));
    cp.tensors.push_back(s.basis());
    cp.tensors.push_back(s.first_moment());
    cp.tensors.push_back(s.second_moment());
  };
  for (std::size_t l = 0; l < model.parameters().size(); ++l) {
    if (const auto& t = opt.tuners()[l]) {
      add_subspace(l, t->shared);
      if (t->src) add_subspace(l, *t->src);
      if (t->rec) add_subspace(l, *t->rec);
    }
    if (const auto& d = opt.dense_states()[l]) {
      nlohmann::ordered_json e;
      e["param"] = l;
      e["kind"] = "dense";
      e["step"] = d->step_count();
      states.push_back(std::move(e));
      cp.tensors.push_back(d->first_moment());
      cp.tensors.push_back(d->second_moment());
    }
  }
  h["states"] = std::move(states);
  return cp;
}

inline void write_checkpoint(std::ostream& os, const CheckpointData& cp) {
  if (cp.tensors.size() != detail::expected_tensors(cp.header))
    fail(ErrorKind::invalid_argument, "checkpoint tensor count does not match its header");
  os << cp.header.dump() << '\n';
  for (const auto& t : cp.tensors) write_matrix(os, t);
  if (!os) fail(ErrorKind::io, "failed writing checkpoint");
}

inline CheckpointData read_checkpoint(std::istream& is) {
  CheckpointData cp;
  std::string line;
  if (!std::getline(is, line)) fail(ErrorKind::io, "checkpoint is empty");
  try {
    cp.header = nlohmann::ordered_json::parse(line);
    if (cp.header.at("format") != "gems-checkpoint" || cp.header.at("version") != checkpoint_version)
      fail(ErrorKind::io, "not a version " + std::to_string(checkpoint_version) + " gems checkpoint");
    const std::size_t n = detail::expected_tensors(cp.header);
    for (std::size_t k = 0; k < n; ++k) cp.tensors.push_back(read_matrix(is));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("malformed checkpoint header: ") + e.what());
  }
  if (is.peek() != std::char_traits<char>::eof()) fail(ErrorKind::io, "trailing bytes after checkpoint");
  return cp;
}

/// Loads weights, gate and optimizer state. The model and optimizer must
/// have been built with the same architecture and variant.
template <TrainableModel M>
void restore_checkpoint(const CheckpointData& cp, M& model, GemsOptimizer<M>& opt) {
  const auto& h = cp.header;
  auto& params = model.parameters();
  if (h.at("params").size() != params.size()) fail(ErrorKind::io, "checkpoint parameter count mismatch");
  if (h.at("variant").get<std::string>() != to_string(opt.config().variant))
    fail(ErrorKind::io, "checkpoint variant does not match the optimizer");
  std::size_t next = 0;
  for (std::size_t l = 0; l < params.size(); ++l) {
    const auto& e = h.at("params")[l];
    if (e.at("name") != params[l].name || !cp.tensors[next].same_shape(params[l].value))
      fail(ErrorKind::io, "checkpoint parameter " + e.at("name").get<std::string>() + " does not match the model");
    params[l].value = cp.tensors[next++];
  }
  GatingNet g;
  g.w1 = cp.tensors[next++];
  const Matrix b1 = cp.tensors[next++];
  g.b1.assign(b1.data().begin(), b1.data().end());
  g.w2 = cp.tensors[next++];
  const Matrix b2 = cp.tensors[next++];
  if (b2.size() != 2 || g.w1.cols() != 3 || g.w1.rows() != g.b1.size() || g.w2.rows() != 2 || g.w2.cols() != g.b1.size())
    fail(ErrorKind::io, "checkpoint gate has inconsistent shapes");
  g.b2 = {b2.data()[0], b2.data()[1]};
  g.temperature = h.at("gate_temperature").get<double>();
  opt.gate() = std::move(g);

  for (const auto& s : h.at("states")) {
    const auto l = s.at("param").get<std::size_t>();
    const auto kind = s.at("kind").get<std::string>();
    const auto step = s.at("step").get<std::uint64_t>();
    if (l >= params.size()) fail(ErrorKind::io, "checkpoint state refers to a missing parameter");
    if (kind == "dense") {
      if (!opt.dense_states()[l]) fail(ErrorKind::io, "checkpoint has a dense state the optimizer lacks");
      Matrix m1 = cp.tensors[next++];
      Matrix m2 = cp.tensors[next++];
      opt.dense_states()[l]->restore(std::move(m1), std::move(m2), step);
      continue;
    }
    auto& t = opt.tuners()[l];
    if (!t) fail(ErrorKind::io, "checkpoint has a subspace state the optimizer lacks");
    SubspaceState* target = kind == "shared" ? &t->shared : kind == "src" ? (t->src ? &*t->src : nullptr)
                                                          : kind == "rec" ? (t->rec ? &*t->rec : nullptr) : nullptr;
    if (!target) fail(ErrorKind::io, "checkpoint subspace kind '" + kind + "' not present in the optimizer");
    Matrix basis = cp.tensors[next++];
    Matrix m1 = cp.tensors[next++];
    Matrix m2 = cp.tensors[next++];
    target->restore(std::move(basis), std::move(m1), std::move(m2), step, s.at("locked").get<bool>());
  }
  opt.set_steps_taken(h.at("step").get<std::uint64_t>());
}

}  // namespace gems
