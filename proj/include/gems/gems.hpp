#pragma once

// Multi-subspace training controller.
//
// Each step computes the search and recommendation gradients separately,
// steps three low-rank Adam states per matrix layer (shared on the summed
// gradient, one per task on the task gradient), fuses the three updates with
// the shared one at weight 1 and the task ones at gate weights, optionally
// projects the result away from protected input directions and adds it to the
// weights.

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gems/error.hpp"
#include "gems/gating.hpp"
#include "gems/linalg.hpp"
#include "gems/model_api.hpp"
#include "gems/nullspace.hpp"
#include "gems/rng.hpp"
#include "gems/subspace.hpp"

namespace gems {

enum class Variant { full, shared_only, no_nullspace, subspace_only, dense_joint };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::shared_only: return "shared-only";
    case Variant::no_nullspace: return "no-nullspace";
    case Variant::subspace_only: return "subspace-only";
    case Variant::dense_joint: return "dense-joint";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::full, Variant::shared_only, Variant::no_nullspace, Variant::subspace_only,
                    Variant::dense_joint})
    if (s == to_string(v)) return v;
  fail(ErrorKind::config, "unknown variant '" + s + "'");
}

inline bool uses_task_subspaces(Variant v) { return v == Variant::full || v == Variant::no_nullspace; }
inline bool uses_nullspace(Variant v) { return v == Variant::full || v == Variant::shared_only; }
inline bool uses_dense(Variant v) { return v == Variant::dense_joint; }

struct GemsConfig {
  Variant variant = Variant::full;
  SubspaceConfig shared;          // rank r of the shared subspace
  std::size_t task_rank = 0;      // 0 means ceil(r / 2)
  AdamHyper dense_adam;           // 1-D parameters and the dense baseline
  std::size_t gate_hidden = 8;
  double temperature = 1.0;
  bool gate_training = false;
  GateTrainConfig gate_train;
  bool record_timing = false;

  std::size_t effective_task_rank() const { return task_rank ? task_rank : (shared.rank + 1) / 2; }
};

template <TrainableModel M>
struct TaskGradients {
  Gradients src;
  Gradients rec;
  TaskBatchStats stats;
};

inline double global_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& m : g) s += dot(m.data(), m.data());
  return std::sqrt(s);
}

/// Per-task mean losses and their gradients over a mixed batch. An absent
/// task contributes zero loss and zero gradient.
template <TrainableModel M>
TaskGradients<M> task_gradients(const M& model, std::span<const typename M::Sample> batch) {
  if (batch.empty()) fail(ErrorKind::invalid_argument, "task_gradients: empty batch");
  TaskGradients<M> out{zeros_like(model.parameters()), zeros_like(model.parameters()), {}};
  for (const auto& s : batch) (model.task_of(s) == Task::src ? out.stats.count_src : out.stats.count_rec) += 1;
  for (const auto& s : batch) {
    const bool is_src = model.task_of(s) == Task::src;
    const double w = 1.0 / static_cast<double>(is_src ? out.stats.count_src : out.stats.count_rec);
    const double loss = model.accumulate_gradient(s, is_src ? out.src : out.rec, w);
    (is_src ? out.stats.loss_src : out.stats.loss_rec) += w * loss;
  }
  out.stats.gradnorm_src = global_norm(out.src);
  out.stats.gradnorm_rec = global_norm(out.rec);
  if (!std::isfinite(out.stats.loss_src) || !std::isfinite(out.stats.loss_rec) ||
      !std::isfinite(out.stats.gradnorm_src) || !std::isfinite(out.stats.gradnorm_rec))
    fail(ErrorKind::numeric, "non-finite task loss or gradient; weights left unchanged");
  return out;
}

/// Gradient of the summed loss, by linearity the sum of the task gradients.
inline Gradients shared_gradient(const Gradients& src, const Gradients& rec) {
  if (src.size() != rec.size()) fail(ErrorKind::invalid_argument, "shared_gradient: layer count mismatch");
  Gradients out;
  out.reserve(src.size());
  for (std::size_t l = 0; l < src.size(); ++l) out.push_back(src[l] + rec[l]);
  return out;
}

inline Matrix fuse(const Matrix& delta_shared, const Matrix& delta_src, const Matrix& delta_rec, const GateWeights& a) {
  delta_shared.require_same_shape(delta_src, "fuse");
  delta_shared.require_same_shape(delta_rec, "fuse");
  Matrix out = delta_shared;
  if (a.src != 0.0) out.axpy(a.src, delta_src);
  if (a.rec != 0.0) out.axpy(a.rec, delta_rec);
  return out;
}

struct LayerTuner {
  SubspaceState shared;
  std::optional<SubspaceState> src;
  std::optional<SubspaceState> rec;
  std::optional<DenseAdam> dense;
};

struct LayerStepRecord {
  std::size_t layer = 0;
  std::optional<double> rho_raw;        // between raw task gradients
  // Between the per-task parts of the applied update, (Δ_shared + α_t·Δ_t)·P.
  // Variants without task subspaces have no per-task update and fall back to
  // the routed pairing below.
  std::optional<double> rho_component;
  double update_norm = 0.0;
  std::optional<double> null_residual;  // ||Δ_final · U_k||_F when a projector is attached
  // Between the task gradients as seen through the subspaces that carry them:
  // (P_shared·G_t + α_t·P_t·G_t)·P.
  std::optional<double> rho_routed;
};

struct StepReport {
  std::uint64_t step = 0;
  double loss_src = 0.0;
  double loss_rec = 0.0;
  std::size_t count_src = 0;
  std::size_t count_rec = 0;
  GateWeights alpha;
  std::vector<LayerStepRecord> layers;
  double mean_rho = 0.0;
  double max_rho = 0.0;
  double mean_rho_component = 0.0;
  double mean_rho_routed = 0.0;
  double wall_ms = 0.0;
};

/// ρ = 1 - cos(a, b); nullopt when either operand is zero.
inline std::optional<double> conflict_coefficient(const Matrix& a, const Matrix& b) {
  if (frobenius_norm(a) == 0.0 || frobenius_norm(b) == 0.0) return std::nullopt;
  return 1.0 - flat_cosine(a, b);
}

// Orthogonal projection of g onto the span a subspace state acts on.
inline Matrix subspace_projection(const SubspaceState& s, const Matrix& g) {
  return s.right_side() ? matmul_nt(matmul(g, s.basis()), s.basis()) : matmul(s.basis(), matmul_tn(s.basis(), g));
}

template <TrainableModel M>
class GemsOptimizer {
 public:
  using Sample = typename M::Sample;

  GemsOptimizer(const M& model, GemsConfig config, Rng gate_rng,
                std::vector<std::optional<KnowledgeProjector>> projectors = {})
      : config_(config), gate_rng_(std::move(gate_rng)), projectors_(std::move(projectors)) {
    const auto& params = model.parameters();
    if (!projectors_.empty() && projectors_.size() != params.size())
      fail(ErrorKind::config, "projector list does not match the parameter list");
    if (!uses_nullspace(config_.variant)) projectors_.clear();
    projectors_.resize(params.size());
    gate_ = GatingNet::random(config_.gate_hidden, config_.temperature, gate_rng_);
    SubspaceConfig task_cfg = config_.shared;
    task_cfg.rank = config_.effective_task_rank();
    tuners_.resize(params.size());
    dense_.resize(params.size());
    for (std::size_t l = 0; l < params.size(); ++l) {
      const Matrix& w = params[l].value;
      if (projectors_[l] && projectors_[l]->dim() != w.cols())
        fail(ErrorKind::config, "projector for " + params[l].name + " has dimension " +
                                    std::to_string(projectors_[l]->dim()) + ", layer has " + std::to_string(w.cols()) +
                                    " inputs");
      if (params[l].matrix_layer && !uses_dense(config_.variant)) {
        LayerTuner t{SubspaceState(w.rows(), w.cols(), config_.shared, SubspaceTag::shared), {}, {}, {}};
        if (uses_task_subspaces(config_.variant)) {
          t.src = SubspaceState(w.rows(), w.cols(), task_cfg, SubspaceTag::src);
          t.rec = SubspaceState(w.rows(), w.cols(), task_cfg, SubspaceTag::rec);
        }
        tuners_[l] = std::move(t);
      } else {
        dense_[l] = DenseAdam(w.rows(), w.cols(), config_.dense_adam);
      }
    }
  }

  const GemsConfig& config() const noexcept { return config_; }
  const GatingNet& gate() const noexcept { return gate_; }
  GatingNet& gate() noexcept { return gate_; }
  std::uint64_t steps_taken() const noexcept { return step_; }
  void set_steps_taken(std::uint64_t s) noexcept { step_ = s; }
  std::vector<std::optional<LayerTuner>>& tuners() noexcept { return tuners_; }
  const std::vector<std::optional<LayerTuner>>& tuners() const noexcept { return tuners_; }
  std::vector<std::optional<DenseAdam>>& dense_states() noexcept { return dense_; }
  const std::vector<std::optional<DenseAdam>>& dense_states() const noexcept { return dense_; }
  const std::vector<std::optional<KnowledgeProjector>>& projectors() const noexcept { return projectors_; }

  StepReport train_step(M& model, std::span<const Sample> batch) {
    const auto start = std::chrono::steady_clock::now();
    auto& params = model.parameters();
    TaskGradients<M> tg = task_gradients(model, batch);
    const Gradients g_shared = shared_gradient(tg.src, tg.rec);

    StepReport report;
    report.step = step_;
    report.loss_src = tg.stats.loss_src;
    report.loss_rec = tg.stats.loss_rec;
    report.count_src = tg.stats.count_src;
    report.count_rec = tg.stats.count_rec;

    const GateFeatures z = gate_features(tg.stats);
    report.alpha = gate_forward(gate_, z);

    // Stage on copies so a non-finite update leaves everything untouched.
    auto tuners = tuners_;
    auto dense = dense_;

    struct Parts {
      Matrix shared, src, rec;
    };
    std::vector<std::optional<Parts>> parts(params.size());
    std::vector<Matrix> finals(params.size());
    for (std::size_t l = 0; l < params.size(); ++l) {
      LayerStepRecord rec_row;
      rec_row.layer = l;
      rec_row.rho_raw = conflict_coefficient(tg.src[l], tg.rec[l]);
      if (tuners[l]) {
        LayerTuner& t = *tuners[l];
        Parts p;
        if (t.src) {
          p.src = t.src->step(tg.src[l]).delta;
          p.rec = t.rec->step(tg.rec[l]).delta;
        } else {
          p.src = Matrix(params[l].value.rows(), params[l].value.cols());
          p.rec = p.src;
        }
        p.shared = t.shared.step(g_shared[l]).delta;
        finals[l] = project(l, fuse(p.shared, p.src, p.rec, report.alpha));
        rec_row.rho_routed = routed_conflict(t, l, tg.src[l], tg.rec[l], report.alpha);
        if (t.src) {
          Matrix c_src = p.shared, c_rec = p.shared;
          c_src.axpy(report.alpha.src, p.src);
          c_rec.axpy(report.alpha.rec, p.rec);
          rec_row.rho_component = conflict_coefficient(project(l, std::move(c_src)), project(l, std::move(c_rec)));
        } else {
          rec_row.rho_component = rec_row.rho_routed;
        }
        parts[l] = std::move(p);
      } else {
        finals[l] = project(l, dense[l]->step(g_shared[l]));
        if (params[l].matrix_layer) {
          rec_row.rho_routed = conflict_coefficient(project(l, tg.src[l]), project(l, tg.rec[l]));
          rec_row.rho_component = rec_row.rho_routed;
        }
      }
      if (!params[l].matrix_layer) rec_row.rho_raw.reset();
      const std::size_t bad = finals[l].first_non_finite();
      if (bad != finals[l].size())
        fail(ErrorKind::numeric, "non-finite update for layer " + params[l].name + " at flat index " +
                                     std::to_string(bad) + "; weights left unchanged");
      rec_row.update_norm = frobenius_norm(finals[l]);
      if (projectors_[l] && projectors_[l]->basis())
        rec_row.null_residual = frobenius_norm(matmul(finals[l], *projectors_[l]->basis()));
      report.layers.push_back(rec_row);
    }

    if (config_.gate_training && uses_task_subspaces(config_.variant)) {
      auto trial = [&](const GateWeights& a) {
        M candidate = model;
        auto& cp = candidate.parameters();
        for (std::size_t l = 0; l < cp.size(); ++l) {
          if (parts[l])
            cp[l].value += project(l, fuse(parts[l]->shared, parts[l]->src, parts[l]->rec, a));
          else
            cp[l].value += finals[l];
        }
        double loss = 0.0;
        for (const auto& s : batch) loss += candidate.sample_loss(s);
        return loss / static_cast<double>(batch.size());
      };
      gate_ = gate_update(gate_, z, trial, config_.gate_train, gate_rng_);
    }

    for (std::size_t l = 0; l < params.size(); ++l) params[l].value += finals[l];
    tuners_ = std::move(tuners);
    dense_ = std::move(dense);

    summarize(report);
    ++step_;
    if (config_.record_timing)
      report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return report;
  }

 private:
  Matrix project(std::size_t l, Matrix delta) const {
    return projectors_[l] ? projectors_[l]->project_update(delta) : delta;
  }

  // Each task's gradient routed through the subspaces that carry it (shared
  // at weight 1, its own subspace at its gate weight), then the projector.
  std::optional<double> routed_conflict(const LayerTuner& t, std::size_t l, const Matrix& g_src,
                                           const Matrix& g_rec, const GateWeights& a) const {
    Matrix c_src = subspace_projection(t.shared, g_src);
    Matrix c_rec = subspace_projection(t.shared, g_rec);
    if (t.src) {
      c_src.axpy(a.src, subspace_projection(*t.src, g_src));
      c_rec.axpy(a.rec, subspace_projection(*t.rec, g_rec));
    }
    return conflict_coefficient(project(l, std::move(c_src)), project(l, std::move(c_rec)));
  }

  static void summarize(StepReport& r) {
    double sum = 0.0, max = 0.0, sum_c = 0.0, sum_r = 0.0;
    std::size_t n = 0, n_c = 0, n_r = 0;
    for (const auto& row : r.layers) {
      if (row.rho_raw) {
        sum += *row.rho_raw;
        max = std::max(max, *row.rho_raw);
        ++n;
      }
      if (row.rho_component) {
        sum_c += *row.rho_component;
        ++n_c;
      }
      if (row.rho_routed) {
        sum_r += *row.rho_routed;
        ++n_r;
      }
    }
    r.mean_rho = n ? sum / static_cast<double>(n) : 0.0;
    r.max_rho = max;
    r.mean_rho_component = n_c ? sum_c / static_cast<double>(n_c) : 0.0;
    r.mean_rho_routed = n_r ? sum_r / static_cast<double>(n_r) : 0.0;
  }

  GemsConfig config_;
  Rng gate_rng_;
  GatingNet gate_;
  std::vector<std::optional<KnowledgeProjector>> projectors_;
  std::vector<std::optional<LayerTuner>> tuners_;
  std::vector<std::optional<DenseAdam>> dense_;
  std::uint64_t step_ = 0;
};

}  // namespace gems
