#pragma once

// Knowledge-preserving projection. Hidden states of a frozen model on a probe
// corpus give the dominant input directions of each layer; updates are then
// right-multiplied by a projector so they act only on the complement of those
// directions (or, in `literal` mode, only on them).

#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gems/error.hpp"
#include "gems/linalg.hpp"

namespace gems {

enum class ProjectionMode { complement, literal };

inline const char* to_string(ProjectionMode mode) {
  return mode == ProjectionMode::complement ? "complement" : "literal";
}

inline ProjectionMode projection_mode_from_string(const std::string& s) {
  if (s == "complement") return ProjectionMode::complement;
  if (s == "literal") return ProjectionMode::literal;
  fail(ErrorKind::config, "unknown projection mode '" + s + "'");
}

/// Either an explicit k or the smallest k whose cumulative spectral energy
/// reaches `energy_fraction`.
struct RankSelection {
  std::optional<std::size_t> k;
  double energy_fraction = 0.9;
};

class KnowledgeProjector {
 public:
  KnowledgeProjector() = default;

  KnowledgeProjector(std::string layer, ProjectionMode mode, std::size_t dim, std::optional<Matrix> basis,
                     double energy_fraction)
      : layer_(std::move(layer)), mode_(mode), dim_(dim), basis_(std::move(basis)), energy_fraction_(energy_fraction) {
    // a full-rank basis spans everything; set the exact result instead of I - UU^T residue
    const bool full = basis_ && basis_->cols() == dim_;
    Matrix onto = full ? Matrix::identity(dim_) : basis_ ? projector_onto(*basis_) : Matrix(dim_, dim_);
    if (full && mode_ == ProjectionMode::complement) {
      projector_ = Matrix(dim_, dim_);
    } else if (mode_ == ProjectionMode::complement) {
      projector_ = Matrix::identity(dim_);
      projector_ -= onto;
    } else {
      projector_ = std::move(onto);
    }
  }

  const std::string& layer() const noexcept { return layer_; }
  ProjectionMode mode() const noexcept { return mode_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t k() const noexcept { return basis_ ? basis_->cols() : 0; }
  const std::optional<Matrix>& basis() const noexcept { return basis_; }
  const Matrix& projector() const noexcept { return projector_; }
  double energy_fraction() const noexcept { return energy_fraction_; }

  /// delta · P, acting on the input dimension of the layer.
  Matrix project_update(const Matrix& delta) const {
    if (delta.cols() != dim_)
      fail(ErrorKind::invalid_argument, "layer " + layer_ + ": update " + delta.shape_string() +
                                            " does not match projector dimension " + std::to_string(dim_));
    return matmul(delta, projector_);
  }

 private:
  std::string layer_;
  ProjectionMode mode_ = ProjectionMode::complement;
  std::size_t dim_ = 0;
  std::optional<Matrix> basis_;
  Matrix projector_;
  double energy_fraction_ = 1.0;
};

/// Number of leading eigen-directions needed to reach `fraction` of the total
/// energy of a non-increasing spectrum. A zero spectrum needs none.
inline std::size_t rank_for_energy(std::span<const double> spectrum, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) fail(ErrorKind::config, "energy fraction must lie in (0, 1]");
  double total = 0.0;
  for (double s : spectrum) total += s;
  if (total <= 0.0) return 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < spectrum.size(); ++k) {
    acc += spectrum[k];
    if (acc >= fraction * total * (1.0 - 1e-12)) return k + 1;
  }
  return spectrum.size();
}

/// Builds the projector from an n x C feature matrix. The spectrum used for
/// energy selection is the singular values of f·fᵀ (the covariance
/// eigenvalues).
inline KnowledgeProjector build_projector(const Matrix& f, const RankSelection& selection, ProjectionMode mode,
                                          std::string layer = {}) {
  const std::size_t n = f.rows();
  const SvdResult dec = svd(covariance(f));
  std::size_t k;
  if (selection.k) {
    k = *selection.k;
    if (k > n) fail(ErrorKind::invalid_argument, "build_projector: k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  } else {
    k = rank_for_energy(dec.sigma, selection.energy_fraction);
  }
  std::optional<Matrix> basis;
  if (k > 0) basis = leading_columns(dec.u, k);
  const double fraction = selection.k ? 1.0 : selection.energy_fraction;
  return KnowledgeProjector(std::move(layer), mode, n, std::move(basis), fraction);
}

/// Stacks per-instance hidden vectors as the columns of an n x C matrix.
inline Matrix stack_columns(const std::vector<std::vector<double>>& columns) {
  if (columns.empty()) fail(ErrorKind::invalid_argument, "collect_features: empty probe corpus");
  const std::size_t n = columns.front().size();
  Matrix f(n, columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c].size() != n) fail(ErrorKind::invalid_argument, "collect_features: ragged hidden states");
    for (std::size_t i = 0; i < n; ++i) f(i, c) = columns[c][i];
  }
  f.check_finite();
  return f;
}

/// Models that expose, for a token sequence, the input vector each weight
/// layer sees at the final position (indexed like the parameter list; empty
/// for parameters that are not matrix layers).
template <class M>
concept LayerInputSource = requires(const M& m, std::span<const int> tokens) {
  { m.final_layer_inputs(tokens) } -> std::same_as<std::vector<std::vector<double>>>;
};

template <LayerInputSource M>
Matrix collect_features(const M& model, const std::vector<std::vector<int>>& corpus, std::size_t layer) {
  if (corpus.empty()) fail(ErrorKind::invalid_argument, "collect_features: empty probe corpus");
  std::vector<std::vector<double>> columns;
  columns.reserve(corpus.size());
  for (const auto& tokens : corpus) {
    auto inputs = model.final_layer_inputs(tokens);
    if (layer >= inputs.size() || inputs[layer].empty())
      fail(ErrorKind::invalid_argument, "collect_features: parameter " + std::to_string(layer) + " is not a matrix layer");
    columns.push_back(std::move(inputs[layer]));
  }
  return stack_columns(columns);
}

/// Feature matrices for every matrix layer in one pass over the corpus.
template <LayerInputSource M>
std::vector<std::optional<Matrix>> collect_all_features(const M& model, const std::vector<std::vector<int>>& corpus) {
  if (corpus.empty()) fail(ErrorKind::invalid_argument, "collect_features: empty probe corpus");
  std::vector<std::vector<std::vector<double>>> per_layer;
  for (const auto& tokens : corpus) {
    auto inputs = model.final_layer_inputs(tokens);
    if (per_layer.empty()) per_layer.resize(inputs.size());
    for (std::size_t l = 0; l < inputs.size(); ++l)
      if (!inputs[l].empty()) per_layer[l].push_back(std::move(inputs[l]));
  }
  std::vector<std::optional<Matrix>> out(per_layer.size());
  for (std::size_t l = 0; l < per_layer.size(); ++l)
    if (!per_layer[l].empty()) out[l] = stack_columns(per_layer[l]);
  return out;
}

/// Mean over layers of the Frobenius distance between the stacked probe
/// hidden states of two models.
template <LayerInputSource M>
double drift_probe(const M& before, const M& after, const std::vector<std::vector<int>>& corpus) {
  const auto fb = collect_all_features(before, corpus);
  const auto fa = collect_all_features(after, corpus);
  if (fb.size() != fa.size()) fail(ErrorKind::invalid_argument, "drift_probe: architectures differ");
  double total = 0.0;
  std::size_t layers = 0;
  for (std::size_t l = 0; l < fb.size(); ++l) {
    if (!fb[l]) continue;
    if (!fa[l] || !fa[l]->same_shape(*fb[l])) fail(ErrorKind::invalid_argument, "drift_probe: architectures differ");
    total += frobenius_norm(*fa[l] - *fb[l]);
    ++layers;
  }
  return layers ? total / static_cast<double>(layers) : 0.0;
}

// ---- persistence ------------------------------------------------------------
//
// The basis is stored in the matrix wire format (n x k; an n x 0 matrix when
// k = 0) next to a JSON sidecar. The wire format is f32, so loading
// re-orthonormalizes the basis before rebuilding the projector.

inline nlohmann::ordered_json sidecar_json(const KnowledgeProjector& p) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(p.mode());
  j["k"] = p.k();
  j["energy_fraction"] = p.energy_fraction();
  j["layer"] = p.layer();
  return j;
}

inline void write_projector_basis(std::ostream& os, const KnowledgeProjector& p) {
  write_matrix(os, p.basis() ? *p.basis() : Matrix(p.dim(), 0));
}

inline KnowledgeProjector read_projector(std::istream& basis_stream, const nlohmann::json& sidecar) {
  try {
    const Matrix stored = read_matrix(basis_stream);
    const auto k = sidecar.at("k").get<std::size_t>();
    if (stored.cols() != k) fail(ErrorKind::io, "projector basis has " + std::to_string(stored.cols()) + " columns, sidecar says k=" + std::to_string(k));
    std::optional<Matrix> basis;
    if (k > 0) basis = orthonormalize_columns(stored);
    return KnowledgeProjector(sidecar.at("layer").get<std::string>(),
                              projection_mode_from_string(sidecar.at("mode").get<std::string>()), stored.rows(),
                              std::move(basis), sidecar.at("energy_fraction").get<double>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("malformed projector sidecar: ") + e.what());
  }
}

}  // namespace gems
