#pragma once

// Low-rank Adam for a single weight matrix. The gradient is projected onto a
// rank-r basis taken from its own top singular vectors, Adam runs on the
// projected coordinates, and the step is mapped back to full size.
//
// The basis lives on the smaller side of the layer: for a wide or square
// layer (rows <= cols) it is the left basis U (rows x r) and the projected
// gradient is Uᵀ·G (r x cols); for a tall layer it is the right basis
// V (cols x r) and the projected gradient is G·V (rows x r).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "gems/error.hpp"
#include "gems/linalg.hpp"

namespace gems {

enum class SubspaceTag { shared, src, rec };

inline const char* to_string(SubspaceTag tag) {
  switch (tag) {
    case SubspaceTag::shared: return "shared";
    case SubspaceTag::src: return "src";
    case SubspaceTag::rec: return "rec";
  }
  return "?";
}

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SubspaceConfig {
  std::size_t rank = 8;
  std::uint64_t refresh_every = 50;
  double scale = 2.0;
  AdamHyper adam;
  bool reset_moments_on_refresh = false;
};

struct SubspaceUpdate {
  Matrix delta;
  SubspaceTag source_tag = SubspaceTag::shared;
};

class SubspaceState {
 public:
  SubspaceState() = default;

  SubspaceState(std::size_t rows, std::size_t cols, SubspaceConfig config, SubspaceTag tag = SubspaceTag::shared)
      : rows_(rows), cols_(cols), config_(config), tag_(tag) {
    if (config_.rank == 0 || config_.rank > std::min(rows, cols))
      fail(ErrorKind::config, "subspace rank " + std::to_string(config_.rank) + " out of range for layer " +
                                  std::to_string(rows) + "x" + std::to_string(cols));
    if (config_.refresh_every == 0) fail(ErrorKind::config, "refresh_every must be positive");
    if (!(config_.scale > 0.0)) fail(ErrorKind::config, "scale must be positive");
    basis_ = Matrix(basis_dim(), config_.rank);
    for (std::size_t k = 0; k < config_.rank; ++k) basis_(k, k) = 1.0;
    m1_ = Matrix(moment_rows(), moment_cols());
    m2_ = Matrix(moment_rows(), moment_cols());
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t rank() const noexcept { return config_.rank; }
  bool right_side() const noexcept { return rows_ > cols_; }
  const SubspaceConfig& config() const noexcept { return config_; }
  SubspaceTag tag() const noexcept { return tag_; }
  std::uint64_t step() const noexcept { return step_; }

  const Matrix& basis() const noexcept { return basis_; }
  const Matrix& first_moment() const noexcept { return m1_; }
  const Matrix& second_moment() const noexcept { return m2_; }

  /// Element count of the basis and both moments, as allocated.
  std::size_t state_elements() const noexcept { return basis_.size() + m1_.size() + m2_.size(); }

  // Test hook: pin the basis. A locked basis is never refreshed.
  void set_basis(Matrix basis, bool lock) {
    if (basis.rows() != basis_dim() || basis.cols() != config_.rank)
      fail(ErrorKind::invalid_argument, "set_basis: expected " + std::to_string(basis_dim()) + "x" +
                                            std::to_string(config_.rank) + ", got " + basis.shape_string());
    basis_ = std::move(basis);
    locked_ = lock;
  }
  bool basis_locked() const noexcept { return locked_; }

  // Restores a serialized state; shapes are validated.
  void restore(Matrix basis, Matrix m1, Matrix m2, std::uint64_t step, bool locked) {
    if (basis.rows() != basis_dim() || basis.cols() != config_.rank || m1.rows() != moment_rows() ||
        m1.cols() != moment_cols() || !m1.same_shape(m2))
      fail(ErrorKind::io, "subspace state shape mismatch on restore");
    basis_ = std::move(basis);
    m1_ = std::move(m1);
    m2_ = std::move(m2);
    step_ = step;
    locked_ = locked;
  }

  /// Refreshes the basis from g when the step count is a multiple of the
  /// refresh period. Returns true when a refresh happened.
  bool maybe_refresh_basis(const Matrix& g) {
    check_gradient(g);
    if (locked_ || step_ % config_.refresh_every != 0) return false;
    basis_ = right_side() ? truncated_basis(transpose(g), config_.rank) : truncated_basis(g, config_.rank);
    if (config_.reset_moments_on_refresh) {
      m1_.fill(0.0);
      m2_.fill(0.0);
    }
    return true;
  }

  /// Subspace coordinates of g: Uᵀ·g (left) or g·V (right).
  Matrix project(const Matrix& g) const {
    check_gradient(g);
    return right_side() ? matmul(g, basis_) : matmul_tn(basis_, g);
  }

  /// One bias-corrected Adam step on projected coordinates; returns the
  /// descent step -lr * m̂ / (sqrt(v̂) + eps).
  Matrix adam_step(const Matrix& g_proj) {
    if (g_proj.rows() != moment_rows() || g_proj.cols() != moment_cols())
      fail(ErrorKind::invalid_argument, "adam_step: projected gradient shape " + g_proj.shape_string());
    const AdamHyper& h = config_.adam;
    const double t = static_cast<double>(step_ + 1);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    Matrix delta(g_proj.rows(), g_proj.cols());
    auto gp = g_proj.data();
    auto m1 = m1_.data();
    auto m2 = m2_.data();
    auto out = delta.data();
    for (std::size_t k = 0; k < gp.size(); ++k) {
      m1[k] = h.beta1 * m1[k] + (1.0 - h.beta1) * gp[k];
      m2[k] = h.beta2 * m2[k] + (1.0 - h.beta2) * (gp[k] * gp[k]);
      const double mhat = m1[k] / c1;
      const double vhat = m2[k] / c2;
      out[k] = -h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
    ++step_;
    return delta;
  }

  /// Full-size update scale·U·Δr (left) or scale·Δr·Vᵀ (right).
  SubspaceUpdate project_back(const Matrix& delta_r) const {
    if (delta_r.rows() != moment_rows() || delta_r.cols() != moment_cols())
      fail(ErrorKind::invalid_argument, "project_back: subspace update shape " + delta_r.shape_string());
    Matrix full = right_side() ? matmul_nt(delta_r, basis_) : matmul(basis_, delta_r);
    full *= config_.scale;
    return {std::move(full), tag_};
  }

  /// refresh -> project -> adam -> project back.
  SubspaceUpdate step(const Matrix& g) {
    maybe_refresh_basis(g);
    Matrix delta_r = adam_step(project(g));
    return project_back(delta_r);
  }

 private:
  std::size_t basis_dim() const noexcept { return right_side() ? cols_ : rows_; }
  std::size_t moment_rows() const noexcept { return right_side() ? rows_ : config_.rank; }
  std::size_t moment_cols() const noexcept { return right_side() ? config_.rank : cols_; }

  void check_gradient(const Matrix& g) const {
    if (g.rows() != rows_ || g.cols() != cols_)
      fail(ErrorKind::invalid_argument, "gradient shape " + g.shape_string() + " does not match subspace layer " +
                                            std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  SubspaceConfig config_;
  SubspaceTag tag_ = SubspaceTag::shared;
  Matrix basis_;
  Matrix m1_;
  Matrix m2_;
  std::uint64_t step_ = 0;
  bool locked_ = false;
};

/// Plain Adam on a full matrix; used for 1-D parameters and the dense-joint
/// baseline.
class DenseAdam {
 public:
  DenseAdam() = default;
  DenseAdam(std::size_t rows, std::size_t cols, AdamHyper hyper) : hyper_(hyper), m1_(rows, cols), m2_(rows, cols) {}

  Matrix step(const Matrix& g) {
    m1_.require_same_shape(g, "DenseAdam::step");
    const double t = static_cast<double>(step_ + 1);
    const double c1 = 1.0 - std::pow(hyper_.beta1, t);
    const double c2 = 1.0 - std::pow(hyper_.beta2, t);
    Matrix delta(g.rows(), g.cols());
    auto gd = g.data();
    auto m1 = m1_.data();
    auto m2 = m2_.data();
    auto out = delta.data();
    for (std::size_t k = 0; k < gd.size(); ++k) {
      m1[k] = hyper_.beta1 * m1[k] + (1.0 - hyper_.beta1) * gd[k];
      m2[k] = hyper_.beta2 * m2[k] + (1.0 - hyper_.beta2) * (gd[k] * gd[k]);
      out[k] = -hyper_.lr * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + hyper_.eps);
    }
    ++step_;
    return delta;
  }

  const Matrix& first_moment() const noexcept { return m1_; }
  const Matrix& second_moment() const noexcept { return m2_; }
  std::uint64_t step_count() const noexcept { return step_; }
  void restore(Matrix m1, Matrix m2, std::uint64_t step) {
    if (!m1.same_shape(m1_) || !m2.same_shape(m2_)) fail(ErrorKind::io, "dense adam shape mismatch on restore");
    m1_ = std::move(m1);
    m2_ = std::move(m2);
    step_ = step;
  }

 private:
  AdamHyper hyper_;
  Matrix m1_;
  Matrix m2_;
  std::uint64_t step_ = 0;
};

}  // namespace gems
