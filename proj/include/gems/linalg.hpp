#pragma once

// Dense row-major matrices and the small set of decompositions the optimizer
// needs. Everything here is deterministic: fixed loop orders, fixed Jacobi
// sweep order and a fixed sign convention on singular vectors.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gems/error.hpp"

namespace gems {

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      fail(ErrorKind::invalid_argument, "matrix data length " + std::to_string(data_.size()) +
                                            " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    check_finite();
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) fail(ErrorKind::invalid_argument, "ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
    check_finite();
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  bool same_shape(const Matrix& other) const noexcept { return rows_ == other.rows_ && cols_ == other.cols_; }

  /// Index of the first non-finite entry, or size() when all are finite.
  std::size_t first_non_finite() const noexcept {
    for (std::size_t k = 0; k < data_.size(); ++k)
      if (!std::isfinite(data_[k])) return k;
    return data_.size();
  }

  bool all_finite() const noexcept { return first_non_finite() == data_.size(); }

  void check_finite() const {
    const std::size_t k = first_non_finite();
    if (k != data_.size())
      fail(ErrorKind::numeric, "non-finite matrix entry at (" + std::to_string(k / cols_) + "," +
                                   std::to_string(k % cols_) + ")");
  }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
    return *this;
  }

  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
    return *this;
  }

  Matrix& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  // this += s * o
  void axpy(double s, const Matrix& o) {
    require_same_shape(o, "axpy");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += s * o.data_[k];
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }
  friend Matrix operator-(Matrix a) { return a *= -1.0; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  void require_same_shape(const Matrix& o, const char* op) const {
    if (!same_shape(o))
      fail(ErrorKind::invalid_argument, std::string("shape mismatch in ") + op + ": " + shape_string() +
                                            " vs " + o.shape_string());
  }

  std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    fail(ErrorKind::invalid_argument, "matmul shape mismatch: " + a.shape_string() + " * " + b.shape_string());
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

// aᵀ * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    fail(ErrorKind::invalid_argument, "matmul_tn shape mismatch: " + a.shape_string() + "ᵀ * " + b.shape_string());
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto out = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aki * brow[j];
    }
  }
  return c;
}

// a * bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    fail(ErrorKind::invalid_argument, "matmul_nt shape mismatch: " + a.shape_string() + " * " + b.shape_string() + "ᵀ");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double frobenius_norm(const Matrix& a) { return std::sqrt(dot(a.data(), a.data())); }

/// Cosine of the flattened matrices. Throws on a zero-norm operand.
inline double flat_cosine(const Matrix& a, const Matrix& b) {
  a.require_same_shape(b, "flat_cosine");
  const double na = frobenius_norm(a);
  const double nb = frobenius_norm(b);
  if (na == 0.0 || nb == 0.0) fail(ErrorKind::numeric, "degenerate gradient: zero-norm operand in flat_cosine");
  return std::clamp(dot(a.data(), b.data()) / (na * nb), -1.0, 1.0);
}

/// f * fᵀ, symmetrized so the result is exactly symmetric.
inline Matrix covariance(const Matrix& f) {
  require(f.rows() > 0 && f.cols() > 0, "covariance of an empty matrix");
  Matrix c(f.rows(), f.rows());
  for (std::size_t i = 0; i < f.rows(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double s = dot(f.row(i), f.row(j));
      c(i, j) = s;
      c(j, i) = s;
    }
  }
  return c;
}

struct SvdResult {
  Matrix u;                    // m x p, orthonormal columns
  std::vector<double> sigma;   // p, non-increasing
  Matrix v;                    // n x p, orthonormal columns
};

namespace detail {

// Completes the zero columns of q (flagged in `filled` = false) to an
// orthonormal set, drawing candidates from the standard basis in order.
inline void complete_orthonormal(Matrix& q, std::vector<bool>& filled) {
  const std::size_t m = q.rows();
  std::size_t next_candidate = 0;
  for (std::size_t c = 0; c < q.cols(); ++c) {
    if (filled[c]) continue;
    while (next_candidate < m) {
      std::vector<double> x(m, 0.0);
      x[next_candidate++] = 1.0;
      // two passes of Gram-Schmidt against the filled columns
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < q.cols(); ++o) {
          if (!filled[o]) continue;
          double proj = 0.0;
          for (std::size_t i = 0; i < m; ++i) proj += q(i, o) * x[i];
          for (std::size_t i = 0; i < m; ++i) x[i] -= proj * q(i, o);
        }
      }
      double norm = 0.0;
      for (double xi : x) norm += xi * xi;
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (std::size_t i = 0; i < m; ++i) q(i, c) = x[i] / norm;
        filled[c] = true;
        break;
      }
    }
    if (!filled[c]) fail(ErrorKind::numeric, "could not complete orthonormal basis");
  }
}

// One-sided Jacobi (Hestenes) on a tall matrix (m >= n).
inline SvdResult jacobi_svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Work column-major: columns of `w` are the columns of a.
  std::vector<std::vector<double>> w(n, std::vector<double>(m));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) w[j][i] = a(i, j);
    v[j][j] = 1.0;
  }

  constexpr double tol = 1e-15;
  constexpr int max_sweeps = 80;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& wp = w[p];
        auto& wq = w[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = wp[i];
          const double y = wq[i];
          wp[i] = c * x - s * y;
          wq[i] = s * x + c * y;
        }
        auto& vp = v[p];
        auto& vq = v[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(w[j], w[j]));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  const double largest = n ? norms[order[0]] : 0.0;
  const double cutoff = std::max(largest * 1e-13, 1e-300);
  std::vector<bool> filled(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = norms[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v[j][i];
    if (norms[j] > cutoff) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = w[j][i] / norms[j];
      filled[k] = true;
    }
  }
  // Columns with (numerically) zero singular value carry no information about
  // a; give them a deterministic orthonormal completion.
  complete_orthonormal(out.u, filled);
  return out;
}

}  // namespace detail

/// Thin SVD a = u·diag(sigma)·vᵀ with p = min(m, n). The entry of largest
/// magnitude in every column of u is non-negative (first index wins ties).
inline SvdResult svd(const Matrix& a) {
  require(a.rows() > 0 && a.cols() > 0, "svd of an empty matrix");
  a.check_finite();
  SvdResult r;
  if (a.rows() >= a.cols()) {
    r = detail::jacobi_svd_tall(a);
  } else {
    SvdResult t = detail::jacobi_svd_tall(transpose(a));
    r = SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
  }
  for (std::size_t k = 0; k < r.sigma.size(); ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < r.u.rows(); ++i)
      if (std::abs(r.u(i, k)) > std::abs(r.u(arg, k))) arg = i;
    if (r.u(arg, k) < 0.0) {
      for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, k) = -r.u(i, k);
      for (std::size_t i = 0; i < r.v.rows(); ++i) r.v(i, k) = -r.v(i, k);
    }
  }
  return r;
}

/// First `count` columns of m.
inline Matrix leading_columns(const Matrix& m, std::size_t count) {
  require(count <= m.cols(), "leading_columns: count out of range");
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, j);
  return out;
}

/// Top-r left singular vectors of a (m x r, orthonormal columns).
inline Matrix truncated_basis(const Matrix& a, std::size_t r) {
  if (r == 0 || r > std::min(a.rows(), a.cols()))
    fail(ErrorKind::invalid_argument, "truncated_basis: rank " + std::to_string(r) + " out of range for " +
                                          a.shape_string());
  return leading_columns(svd(a).u, r);
}

inline Matrix projector_onto(const Matrix& basis) { return matmul_nt(basis, basis); }

/// Modified Gram-Schmidt with reorthogonalization. Columns must be linearly
/// independent; used to repair bases that went through f32 storage.
inline Matrix orthonormalize_columns(Matrix q) {
  const std::size_t m = q.rows();
  for (std::size_t c = 0; c < q.cols(); ++c) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t o = 0; o < c; ++o) {
        double proj = 0.0;
        for (std::size_t i = 0; i < m; ++i) proj += q(i, o) * q(i, c);
        for (std::size_t i = 0; i < m; ++i) q(i, c) -= proj * q(i, o);
      }
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) norm += q(i, c) * q(i, c);
    norm = std::sqrt(norm);
    if (!(norm > 1e-6)) fail(ErrorKind::numeric, "orthonormalize_columns: columns are linearly dependent");
    for (std::size_t i = 0; i < m; ++i) q(i, c) /= norm;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Serialization: one-line JSON header then little-endian f32, row-major.

inline std::uint32_t to_little_endian(std::uint32_t bits) {
  if constexpr (std::endian::native == std::endian::little) {
    return bits;
  } else {
    return ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
  }
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
  nlohmann::ordered_json header;
  header["rows"] = m.rows();
  header["cols"] = m.cols();
  header["dtype"] = "f32";
  os << header.dump() << '\n';
  std::vector<char> bytes(m.size() * 4);
  for (std::size_t k = 0; k < m.size(); ++k) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[k]));
    bits = to_little_endian(bits);
    std::memcpy(bytes.data() + 4 * k, &bits, 4);
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) fail(ErrorKind::io, "failed writing matrix payload");
}

inline Matrix read_matrix(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) fail(ErrorKind::io, "missing matrix header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("bad matrix header: ") + e.what());
  }
  if (!header.contains("dtype") || header["dtype"] != "f32") fail(ErrorKind::io, "unsupported matrix dtype");
  const auto rows = header.at("rows").get<std::size_t>();
  const auto cols = header.at("cols").get<std::size_t>();
  std::vector<char> bytes(rows * cols * 4);
  is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size()) fail(ErrorKind::io, "truncated matrix payload");
  std::vector<double> data(rows * cols);
  for (std::size_t k = 0; k < data.size(); ++k) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * k, 4);
    bits = to_little_endian(bits);
    data[k] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return Matrix(rows, cols, std::move(data));
}

}  // namespace gems
