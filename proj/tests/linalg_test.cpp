#include <gtest/gtest.h>

#include <sstream>

#include "gems/linalg.hpp"
#include "test_support.hpp"

using namespace gems;
using gems::testing::random_matrix;

namespace {

void expect_orthonormal_columns(const Matrix& q, double tol) {
  const Matrix gram = matmul_tn(q, q);
  EXPECT_LE(frobenius_norm(gram - Matrix::identity(q.cols())), tol);
}

Matrix reconstruct(const SvdResult& r) {
  Matrix us = r.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= r.sigma[k];
  return matmul_nt(us, r.v);
}

}  // namespace

TEST(Matrix, RejectsNonFiniteWithIndex) {
  std::vector<double> data{1.0, 2.0, std::nan(""), 4.0};
  try {
    Matrix m(2, 2, data);
    FAIL() << "expected rejection";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("(1,0)"), std::string::npos) << e.what();
  }
}

TEST(Matrix, RejectsWrongDataLength) { EXPECT_THROW(Matrix(2, 3, std::vector<double>(5)), Error); }

TEST(Svd, DiagonalMatrix) {
  const auto r = svd(Matrix{{3, 0}, {0, 1}});
  EXPECT_DOUBLE_EQ(r.sigma[0], 3.0);
  EXPECT_DOUBLE_EQ(r.sigma[1], 1.0);
}

TEST(Svd, SignedPermutation) {
  const auto r = svd(Matrix{{0, 2}, {1, 0}});
  EXPECT_NEAR(r.sigma[0], 2.0, 1e-15);
  EXPECT_NEAR(r.sigma[1], 1.0, 1e-15);
  EXPECT_LE(frobenius_norm(reconstruct(r) - Matrix{{0, 2}, {1, 0}}), 1e-14);
}

TEST(Svd, ZeroMatrixHasOrthonormalFactors) {
  const auto r = svd(Matrix(3, 3));
  for (double s : r.sigma) EXPECT_EQ(s, 0.0);
  expect_orthonormal_columns(r.u, 1e-12);
  expect_orthonormal_columns(r.v, 1e-12);
}

TEST(Svd, NonFiniteInputNamesIndex) {
  Matrix a(2, 3);
  a(1, 2) = std::numeric_limits<double>::infinity();
  try {
    svd(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("(1,2)"), std::string::npos);
  }
}

TEST(Svd, InvariantsOnRandomShapes) {
  const std::pair<std::size_t, std::size_t> shapes[] = {{1, 1}, {1, 5}, {5, 1}, {4, 4}, {7, 3}, {3, 9}, {16, 16}, {33, 20}};
  std::uint64_t seed = 11;
  for (auto [m, n] : shapes) {
    const Matrix a = random_matrix(m, n, seed++);
    const auto r = svd(a);
    ASSERT_EQ(r.sigma.size(), std::min(m, n));
    for (std::size_t k = 0; k + 1 < r.sigma.size(); ++k) EXPECT_GE(r.sigma[k], r.sigma[k + 1]);
    for (double s : r.sigma) EXPECT_GE(s, 0.0);
    expect_orthonormal_columns(r.u, 1e-10);
    expect_orthonormal_columns(r.v, 1e-10);
    EXPECT_LE(frobenius_norm(a - reconstruct(r)), 1e-8 * std::max(1.0, frobenius_norm(a)));
    // sign convention
    for (std::size_t k = 0; k < r.u.cols(); ++k) {
      std::size_t arg = 0;
      for (std::size_t i = 1; i < r.u.rows(); ++i)
        if (std::abs(r.u(i, k)) > std::abs(r.u(arg, k))) arg = i;
      EXPECT_GE(r.u(arg, k), 0.0);
    }
  }
}

TEST(Svd, SingularValuesMatchEigen) {
  const Matrix a = random_matrix(9, 6, 5);
  const auto r = svd(a);
  Eigen::JacobiSVD<Eigen::MatrixXd> ref(gems::testing::to_eigen(a));
  for (std::size_t k = 0; k < r.sigma.size(); ++k) EXPECT_NEAR(r.sigma[k], ref.singularValues()(k), 1e-12);
}

TEST(Svd, Deterministic) {
  const Matrix a = random_matrix(12, 8, 99);
  const auto r1 = svd(a);
  const auto r2 = svd(a);
  EXPECT_TRUE(r1.u == r2.u);
  EXPECT_TRUE(r1.v == r2.v);
  EXPECT_EQ(r1.sigma, r2.sigma);
}

TEST(TruncatedBasis, RankOneIsCollinear) {
  Matrix u{{0.6}, {-0.8}, {0.0}};
  Matrix v{{1.0, 2.0, -1.0, 0.5}};
  const Matrix basis = truncated_basis(matmul(u, v), 1);
  // sign-normalized: largest entry (-0.8) becomes positive
  EXPECT_NEAR(basis(0, 0), -0.6, 1e-12);
  EXPECT_NEAR(basis(1, 0), 0.8, 1e-12);
  EXPECT_NEAR(basis(2, 0), 0.0, 1e-12);
}

TEST(TruncatedBasis, FullRankGivesIdentityProjector) {
  const Matrix a = random_matrix(5, 8, 3);
  const Matrix b = truncated_basis(a, 5);
  EXPECT_LE(frobenius_norm(projector_onto(b) - Matrix::identity(5)), 1e-10);
}

TEST(TruncatedBasis, MatchesEigendecompositionOracle) {
  const Matrix a = random_matrix(4, 4, 2024);
  const Matrix basis = truncated_basis(a, 2);
  // Oracle: eigenvectors of a·aᵀ with the two largest eigenvalues.
  Eigen::MatrixXd e = gems::testing::to_eigen(a);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(e * e.transpose());
  Eigen::MatrixXd top(4, 2);
  top.col(0) = eig.eigenvectors().col(3);
  top.col(1) = eig.eigenvectors().col(2);
  gems::testing::normalize_signs(top);
  EXPECT_LE(gems::testing::max_abs_diff(basis, gems::testing::from_eigen(top)), 1e-8);
}

TEST(TruncatedBasis, RejectsRankOutOfRange) {
  const Matrix a = random_matrix(3, 5, 1);
  EXPECT_THROW(truncated_basis(a, 0), Error);
  EXPECT_THROW(truncated_basis(a, 4), Error);
}

TEST(TruncatedBasis, ProjectorPropertiesAndExactCapture) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix a = gems::testing::low_rank_matrix(10, 14, 3, 100 + seed);
    const Matrix b = truncated_basis(a, 4);
    const Matrix p = projector_onto(b);
    EXPECT_LE(frobenius_norm(matmul(p, p) - p), 1e-10);
    EXPECT_LE(frobenius_norm(p - transpose(p)), 1e-12);
    EXPECT_LE(frobenius_norm(matmul(p, a) - a), 1e-8 * frobenius_norm(a));
  }
}

TEST(Covariance, SmallCases) {
  EXPECT_TRUE(covariance(Matrix::identity(2)) == Matrix::identity(2));
  EXPECT_TRUE(covariance(Matrix{{1}, {2}}) == (Matrix{{1, 2}, {2, 4}}));
}

TEST(Covariance, MatchesNaiveTripleLoop) {
  const Matrix f = random_matrix(3, 5, 77);
  const Matrix c = covariance(f);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += f(i, k) * f(j, k);
      EXPECT_EQ(c(i, j), s);
    }
  }
  EXPECT_TRUE(c == transpose(c));
}

TEST(FrobeniusNorm, Cases) {
  EXPECT_EQ(frobenius_norm(Matrix(3, 3)), 0.0);
  EXPECT_EQ(frobenius_norm(Matrix{{3, 4}}), 5.0);
  const Matrix a = random_matrix(4, 4, 8);
  double s = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) s += a(i, j) * a(i, j);
  EXPECT_NEAR(frobenius_norm(a), std::sqrt(s), 1e-12);
}

TEST(FlatCosine, Cases) {
  const Matrix a = random_matrix(3, 4, 6);
  EXPECT_NEAR(flat_cosine(a, a), 1.0, 1e-15);
  EXPECT_NEAR(flat_cosine(a, -a), -1.0, 1e-15);
  EXPECT_EQ(flat_cosine(Matrix{{1, 0}}, Matrix{{0, 1}}), 0.0);
  try {
    flat_cosine(a, Matrix(3, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate gradient"), std::string::npos);
  }
}

TEST(Serialization, HeaderAndLayout) {
  std::ostringstream os;
  write_matrix(os, Matrix{{1.0, -2.0, 0.5}});
  const std::string bytes = os.str();
  const std::string header = "{\"rows\":1,\"cols\":3,\"dtype\":\"f32\"}\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  ASSERT_EQ(bytes.size(), header.size() + 12);
  // 1.0f little-endian = 00 00 80 3f
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 2]), 0x80);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 3]), 0x3f);
}

TEST(Serialization, RoundTripIsByteStable) {
  const Matrix a = random_matrix(6, 5, 31);
  std::stringstream s1;
  write_matrix(s1, a);
  const Matrix b = read_matrix(s1);
  ASSERT_TRUE(a.same_shape(b));
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(b.data()[k], static_cast<double>(static_cast<float>(a.data()[k])));
  std::stringstream s2, s3;
  write_matrix(s2, b);
  write_matrix(s3, read_matrix(s2));
  std::ostringstream again;
  write_matrix(again, b);
  EXPECT_EQ(s3.str(), again.str());
}

TEST(Serialization, TruncatedPayloadIsIoError) {
  std::stringstream s("{\"rows\":2,\"cols\":2,\"dtype\":\"f32\"}\nabc");
  try {
    read_matrix(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}
