#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "dgp/linalg.hpp"
#include "test_util.hpp"

using namespace dgp;
using dgp::testing::naive_matmul;
using dgp::testing::random_matrix;
using dgp::testing::rel_err;

namespace {

DenseMatrix diag(std::initializer_list<double> d) {
  DenseMatrix m(d.size(), d.size());
  std::size_t i = 0;
  for (double v : d) m(i, i) = v, ++i;
  return m;
}

void expect_valid_svd(const DenseMatrix& m, const SvdFactorization& f, double tol) {
  EXPECT_LE(rel_err(f.reconstruct(), m), tol);
  EXPECT_LE(orthonormality_residual(f.u), tol);
  EXPECT_LE(orthonormality_residual(f.vt.transposed()), tol);
  for (std::size_t i = 0; i < f.sigma.size(); ++i) {
    EXPECT_GE(f.sigma[i], 0.0);
    if (i > 0) EXPECT_LE(f.sigma[i], f.sigma[i - 1]);
  }
}

}  // namespace

TEST(Matmul, MatchesNaiveProduct) {
  std::mt19937_64 rng(1);
  for (auto [r, k, c] : {std::tuple{1, 1, 1}, {3, 7, 2}, {17, 5, 9}, {40, 33, 21}}) {
    const auto a = random_matrix(r, k, rng), b = random_matrix(k, c, rng);
    EXPECT_LE(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
    EXPECT_LE(max_abs_diff(matmul_tn(a.transposed(), b), naive_matmul(a, b)), 1e-12);
    EXPECT_LE(max_abs_diff(matmul_nt(a, b.transposed()), naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), ShapeError);
  EXPECT_THROW(DenseMatrix(2, 2, std::vector<double>(3)), ShapeError);
}

TEST(DenseMatrix, BlocksAndFiniteCheck) {
  DenseMatrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.row_block(1, 1), (DenseMatrix{{4, 5, 6}}));
  EXPECT_EQ(m.col_block(1, 2), (DenseMatrix{{2, 3}, {5, 6}}));
  EXPECT_EQ(m.transposed(), (DenseMatrix{{1, 4}, {2, 5}, {3, 6}}));
  EXPECT_DOUBLE_EQ(frobenius_norm(m), std::sqrt(91.0));
  m(0, 1) = std::nan("");
  EXPECT_FALSE(m.all_finite());
  EXPECT_THROW(m.require_finite("m"), NumericalError);
}

TEST(Svd, Identity) {
  const auto f = svd(DenseMatrix::identity(3));
  EXPECT_EQ(f.sigma, (std::vector<double>{1, 1, 1}));
  EXPECT_LE(max_abs_diff(f.v(), DenseMatrix::identity(3)), 1e-15);
}

TEST(Svd, Diagonal) {
  const auto f = svd(diag({3, 2, 1}));
  ASSERT_EQ(f.sigma.size(), 3u);
  EXPECT_NEAR(f.sigma[0], 3, 1e-14);
  EXPECT_NEAR(f.sigma[1], 2, 1e-14);
  EXPECT_NEAR(f.sigma[2], 1, 1e-14);
  const auto g = svd(diag({1, 3, 2}));
  EXPECT_NEAR(g.sigma[0], 3, 1e-14);
  EXPECT_NEAR(g.v()(1, 0), 1, 1e-14);
}

TEST(Svd, MatchesEigenDecompositionOfGram) {
  std::mt19937_64 rng(7);
  const auto m = random_matrix(8, 5, rng);
  const auto f = svd(m);
  expect_valid_svd(m, f, 1e-10);

  const auto g = matmul_tn(m, m);
  Eigen::MatrixXd eg(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) eg(i, j) = g(std::size_t(i), std::size_t(j));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(eg);
  for (int i = 0; i < 5; ++i) {
    const double lambda = es.eigenvalues()(4 - i);
    EXPECT_NEAR(f.sigma[std::size_t(i)], std::sqrt(lambda), 1e-10);
    // right singular vectors agree with eigenvectors up to sign
    double dot = 0.0;
    for (int r = 0; r < 5; ++r) dot += es.eigenvectors()(r, 4 - i) * f.vt(std::size_t(i), std::size_t(r));
    EXPECT_NEAR(std::abs(dot), 1.0, 1e-9);
  }
}

TEST(Svd, SignConvention) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto f = svd(random_matrix(6, 4, rng));
    for (std::size_t i = 0; i < f.vt.rows(); ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < f.vt.cols(); ++j)
        if (std::abs(f.vt(i, j)) > std::abs(f.vt(i, arg))) arg = j;
      EXPECT_GE(f.vt(i, arg), 0.0);
    }
  }
}

TEST(Svd, RoundTripUpTo64) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 64);
  for (int rep = 0; rep < 40; ++rep) {
    const auto m = random_matrix(dim(rng), dim(rng), rng);
    expect_valid_svd(m, svd(m), 1e-8);
  }
}

TEST(Svd, TallMatricesUseGramRoute) {
  std::mt19937_64 rng(5);
  const auto m = random_matrix(300, 20, rng);
  const auto f = svd(m);
  expect_valid_svd(m, f, 1e-8);
  EXPECT_EQ(f.sigma.size(), 20u);

  // rank-deficient tall matrix: tiny singular values are reported as zero
  const auto low = matmul(random_matrix(300, 3, rng), random_matrix(3, 20, rng));
  const auto g = svd(low);
  EXPECT_LE(rel_err(g.reconstruct(), low), 1e-8);
  for (std::size_t i = 3; i < g.sigma.size(); ++i) EXPECT_EQ(g.sigma[i], 0.0);
}

TEST(Svd, WideAndRankDeficient) {
  std::mt19937_64 rng(9);
  const auto m = matmul(random_matrix(6, 2, rng), random_matrix(2, 30, rng));
  const auto f = svd(m);
  expect_valid_svd(m, f, 1e-10);
  EXPECT_EQ(rank_select(f.sigma, 1.0 - 1e-12), 2u);
}

TEST(Svd, Deterministic) {
  std::mt19937_64 rng(2);
  const auto m = random_matrix(30, 12, rng);
  const auto a = svd(m), b = svd(m);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.vt, b.vt);
  EXPECT_EQ(a.sigma, b.sigma);
}

TEST(Svd, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(svd(DenseMatrix()), ShapeError);
  DenseMatrix m(2, 2, 1.0);
  m(1, 1) = INFINITY;
  EXPECT_ANY_THROW(svd(m));
}

TEST(RankSelect, HandCases) {
  EXPECT_EQ(rank_select(std::vector<double>{1, 1, 1, 1}, 1.0), 4u);
  EXPECT_EQ(rank_select(std::vector<double>{3, 2, 1}, 0.9), 2u);
  EXPECT_EQ(rank_select(std::vector<double>{3, 2, 1}, 0.5), 1u);
  EXPECT_EQ(rank_select(std::vector<double>{3, 2, 1}, 1.0), 3u);
  EXPECT_EQ(rank_select(std::vector<double>{5, 0, 0}, 0.5), 1u);
  EXPECT_EQ(rank_select(std::vector<double>{5, 0, 0}, 1.0), 1u);
  // boundary: 9/14 energy exactly
  EXPECT_EQ(rank_select(std::vector<double>{3, 2, 1}, 9.0 / 14.0), 1u);
}

TEST(RankSelect, ZeroSpectrumThrows) {
  try {
    rank_select(std::vector<double>{0, 0}, 0.9);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("zero matrix has no informative subspace"), std::string::npos);
  }
}

TEST(RankSelect, RejectsBadInput) {
  EXPECT_THROW(rank_select(std::vector<double>{1, 2}, 0.5), std::invalid_argument);
  EXPECT_THROW(rank_select(std::vector<double>{2, 1}, 0.0), std::invalid_argument);
  EXPECT_THROW(rank_select(std::vector<double>{2, 1}, 1.5), std::invalid_argument);
}

TEST(RankSelect, MonotoneInAlpha) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    auto s = svd(random_matrix(12, 10, rng)).sigma;
    std::size_t prev = 0;
    for (double a = 0.05; a <= 1.0 + 1e-12; a += 0.05) {
      const auto k = rank_select(s, std::min(a, 1.0));
      EXPECT_GE(k, prev);
      EXPECT_GE(k, 1u);
      prev = k;
    }
    EXPECT_EQ(rank_select(s, 1.0), s.size());
  }
}

TEST(ProjectOut, HandCase) {
  OrthonormalBasis b(3, DenseMatrix{{1}, {0}, {0}});
  const auto r = project_out(DenseMatrix{{1}, {1}, {0}}, b);
  EXPECT_EQ(r, (DenseMatrix{{0}, {1}, {0}}));
}

TEST(ProjectOut, EmptyAndFullBasis) {
  std::mt19937_64 rng(6);
  const auto m = random_matrix(5, 4, rng);
  EXPECT_EQ(project_out(m, OrthonormalBasis(5)), m);
  OrthonormalBasis full(5, DenseMatrix::identity(5));
  EXPECT_LE(max_abs(project_out(m, full)), 1e-15);
  EXPECT_THROW(project_out(random_matrix(4, 2, rng), full), ShapeError);
}

TEST(ProjectOut, IdempotentAndOrthogonal) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const auto basis = orthonormalize_append(OrthonormalBasis(20), random_matrix(20, 1 + rep % 15, rng));
    const auto m = random_matrix(20, 7, rng) * 10.0;
    const auto once = project_out(m, basis);
    EXPECT_LE(max_abs_diff(project_out(once, basis), once), 1e-10);
    EXPECT_LE(max_abs(matmul_tn(basis.vectors(), once)), 1e-8 * std::max(1.0, frobenius_norm(m)));
  }
}

TEST(OrthonormalizeAppend, HandCases) {
  const auto id = orthonormalize_append(OrthonormalBasis(3), DenseMatrix::identity(3));
  EXPECT_LE(max_abs_diff(id.vectors(), DenseMatrix::identity(3)), 1e-15);

  OrthonormalBasis e1(2, DenseMatrix{{1}, {0}});
  EXPECT_EQ(orthonormalize_append(e1, DenseMatrix{{1}, {0}}).count(), 1u);

  const double h = 1.0 / std::sqrt(2.0);
  const auto two = orthonormalize_append(e1, DenseMatrix{{h}, {h}});
  ASSERT_EQ(two.count(), 2u);
  EXPECT_LE(max_abs_diff(two.vectors(), DenseMatrix::identity(2)), 1e-15);
}

TEST(OrthonormalizeAppend, NeverExceedsDimension) {
  std::mt19937_64 rng(10);
  OrthonormalBasis b(6);
  for (int rep = 0; rep < 5; ++rep) {
    b = orthonormalize_append(b, random_matrix(6, 4, rng));
    EXPECT_LE(b.count(), 6u);
    EXPECT_NO_THROW(b.check(1e-8));
  }
  EXPECT_EQ(b.count(), 6u);
}

TEST(OrthonormalizeAppend, DropsDependentColumns) {
  std::mt19937_64 rng(12);
  auto a = random_matrix(10, 3, rng);
  DenseMatrix cols(10, 5);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 3; ++j) cols(i, j) = a(i, j);
    cols(i, 3) = a(i, 0) + 2 * a(i, 1);
    cols(i, 4) = a(i, 2) - a(i, 1);
  }
  const auto b = orthonormalize_append(OrthonormalBasis(10), cols);
  EXPECT_EQ(b.count(), 3u);
  EXPECT_LE(b.residual(), 1e-12);
}

TEST(OrthonormalBasis, CheckDetectsViolations) {
  EXPECT_THROW(OrthonormalBasis(2, DenseMatrix{{1, 1}, {0, 0}}).check(), NumericalError);
  EXPECT_NO_THROW(OrthonormalBasis(2, DenseMatrix::identity(2)).check());
}
