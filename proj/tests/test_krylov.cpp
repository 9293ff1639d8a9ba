#include "common.hpp"

#include <gtest/gtest.h>

using namespace orbitcont;

namespace {

void expect_monotone(const GmresReport& r) {
  for (std::size_t i = 1; i < r.residual_history.size(); ++i) {
    EXPECT_LE(r.residual_history[i], r.residual_history[i - 1] * (1.0 + 10.0 * 2.2e-16));
  }
}

Mat random_orthogonal(int n, std::mt19937_64& rng) {
  Mat g(n, n);
  std::normal_distribution<double> normal;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Mat> qr(g);
  return qr.householderQ() * Mat::Identity(n, n);
}

}  // namespace

TEST(Gmres, IdentityConvergesInOneIteration) {
  std::mt19937_64 rng(1);
  const Vec b = fixture::random_vec(7, rng);
  const auto r = gmres(LinearOperator::from_matrix(Mat::Identity(7, 7)), b, 1e-12, 7);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_LT((r.solution - b).norm(), 1e-14 * b.norm());
}

TEST(Gmres, DiagonalThreeByThree) {
  Mat a = Mat::Zero(3, 3);
  a.diagonal() << 1.0, 2.0, 3.0;
  const auto r = gmres(LinearOperator::from_matrix(a), Vec::Ones(3), 1e-12, 3);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, 3);
  EXPECT_NEAR(r.solution[0], 1.0, 1e-12);
  EXPECT_NEAR(r.solution[1], 0.5, 1e-12);
  EXPECT_NEAR(r.solution[2], 1.0 / 3.0, 1e-12);
}

TEST(Gmres, RandomDenseMatchesLu) {
  std::mt19937_64 rng(2);
  const int n = 20;
  Mat a = Mat::Identity(n, n) * 4.0;
  for (int j = 0; j < n; ++j) a.col(j) += 0.5 * fixture::random_vec(n, rng);
  const Vec b = fixture::random_vec(n, rng);
  const double tol = 1e-10;
  const auto r = gmres(LinearOperator::from_matrix(a), b, tol, n);
  ASSERT_TRUE(r.converged);
  const Vec x = a.partialPivLu().solve(b);
  const double cond = 1.0 / a.jacobiSvd().singularValues().tail(1)[0] * a.norm();
  EXPECT_LT((r.solution - x).norm(), 10.0 * tol * cond * x.norm());
  EXPECT_LE((a * r.solution - b).norm(), tol * b.norm() * 1.01);
  expect_monotone(r);
}

TEST(Gmres, NonConvergenceReturnsBestIterate) {
  std::mt19937_64 rng(3);
  const int n = 30;
  Mat a = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i) a(i, i) = 1.0 + i;
  const Vec b = fixture::random_vec(n, rng);
  const auto r = gmres(LinearOperator::from_matrix(a), b, 1e-14, 5);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 5);
  EXPECT_NEAR((a * r.solution - b).norm() / b.norm(), r.residual_history.back(), 1e-10);
  expect_monotone(r);
}

TEST(Gmres, ZeroRightHandSide) {
  const auto r = gmres(LinearOperator::from_matrix(Mat::Identity(4, 4)), Vec::Zero(4), 1e-8, 4);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.solution.norm(), 0.0);
}

TEST(Gmres, LuckyBreakdownGivesExactSolution) {
  // b lies in an invariant subspace of dimension 2.
  Mat a = Mat::Zero(5, 5);
  a.diagonal() << 2.0, 3.0, 5.0, 7.0, 11.0;
  Vec b = Vec::Zero(5);
  b[0] = 1.0;
  b[1] = 1.0;
  const auto r = gmres(LinearOperator::from_matrix(a), b, 1e-30, 5);
  EXPECT_LE(r.iterations, 2);
  EXPECT_LT((a * r.solution - b).norm(), 1e-14);
}

TEST(Gmres, RejectsBadArguments) {
  const auto op = LinearOperator::from_matrix(Mat::Identity(3, 3));
  EXPECT_THROW(gmres(op, Vec::Ones(2), 1e-8, 3), std::invalid_argument);
  EXPECT_THROW(gmres(op, Vec::Ones(3), 0.0, 3), std::invalid_argument);
  EXPECT_THROW(gmres(op, Vec::Ones(3), 1e-8, 4), std::invalid_argument);
  Vec bad = Vec::Ones(3);
  bad[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(gmres(op, bad, 1e-8, 3), std::invalid_argument);
}

TEST(KrylovProperties, HouseholderBasisStaysOrthogonalWhenIllConditioned) {
  std::mt19937_64 rng(4);
  const int n = 40;
  const Mat u = random_orthogonal(n, rng), v = random_orthogonal(n, rng);
  Vec s(n);
  for (int i = 0; i < n; ++i) s[i] = std::pow(10.0, -10.0 * i / (n - 1));
  const Mat a = u * s.asDiagonal() * v.transpose();  // condition number 1e10
  HouseholderArnoldi arnoldi(LinearOperator::from_matrix(a), fixture::random_vec(n, rng));
  for (int j = 0; j < 30 && !arnoldi.breakdown(); ++j) arnoldi.step();
  const Mat q = arnoldi.basis();
  const Mat gram = q.transpose() * q - Mat::Identity(q.cols(), q.cols());
  EXPECT_LE(gram.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(KrylovProperties, ArnoldiRelationHolds) {
  std::mt19937_64 rng(5);
  const int n = 12;
  Mat a(n, n);
  for (int j = 0; j < n; ++j) a.col(j) = fixture::random_vec(n, rng);
  HouseholderArnoldi arnoldi(LinearOperator::from_matrix(a), fixture::random_vec(n, rng));
  std::vector<Vec> h;
  for (int j = 0; j < 6; ++j) h.push_back(arnoldi.step());
  for (int j = 0; j < 6; ++j) {
    const Vec lhs = a * arnoldi.basis_vector(j);
    Vec rhs = Vec::Zero(n);
    const Vec& hj = h[static_cast<std::size_t>(j)];
    for (int i = 0; i < static_cast<int>(hj.size()); ++i) rhs += hj[i] * arnoldi.basis_vector(i);
    EXPECT_LT((lhs - rhs).norm(), 1e-12 * a.norm());
  }
}

TEST(KrylovProperties, JordanStructureBoundsIterations) {
  // m distinct eigenvalues, one of them in a Jordan block of size s:
  // GMRES needs at most m + s - 1 iterations.
  std::mt19937_64 rng(6);
  for (int s : {1, 2, 3, 4}) {
    const int distinct = 5;
    const int n = distinct - 1 + s + 3;  // three extra copies of simple eigenvalues
    Mat j = Mat::Zero(n, n);
    int row = 0;
    for (int b = 0; b < s; ++b, ++row) {
      j(row, row) = 1.0;
      if (b + 1 < s) j(row, row + 1) = 1.0;
    }
    const double others[] = {2.0, -1.5, 3.5, 0.5};
    for (int e = 0; row < n; ++row, ++e) j(row, row) = others[e % 4];
    Mat p(n, n);
    for (int c = 0; c < n; ++c) p.col(c) = fixture::random_vec(n, rng);
    p += 3.0 * Mat::Identity(n, n);
    const Mat a = p * j * p.inverse();
    const auto r = gmres(LinearOperator::from_matrix(a), fixture::random_vec(n, rng), 1e-9, n);
    EXPECT_TRUE(r.converged) << "s = " << s;
    EXPECT_LE(r.iterations, distinct + s - 1) << "s = " << s;
    expect_monotone(r);
  }
}

// ---- iteration bound on shooting operators -------------------------------

namespace {

struct BoundCase {
  int iterations;
  int bound;
  bool held;
  double dense_error;
};

BoundCase bound_on_lorenz(int k) {
  const auto& po = fixture::lorenz_ab();
  ShootingProblem p(models::lorenz(), LeftBoundary::periodic_orbit_ray(po), fixture::lorenz_bcs(k));
  const auto s = seed_initial_solution(p, 1e-6);
  const Vec z = s.z + 0.02 * s.tangent;
  const Layout l = p.layout();
  Vec rhs(l.size());
  rhs.head(l.residual_size()) = -residual(p, z);
  rhs[l.size() - 1] = 0.0;
  const auto op = bordered_operator(p, z, s.tangent);
  const auto rep = verify_iteration_bound(op, rhs, k, 1e-10);
  const Mat a = assemble_dense(p, z, s.tangent);
  const Vec direct = a.partialPivLu().solve(rhs);
  const auto g = gmres(op, rhs, 1e-12, l.size());
  return {rep.iterations, rep.bound, rep.held, (g.solution - direct).norm() / direct.norm()};
}

}  // namespace

TEST(IterationBound, LorenzTwoIntervals) {
  const auto c = bound_on_lorenz(2);
  EXPECT_EQ(c.bound, 5);
  EXPECT_TRUE(c.held);
  EXPECT_LE(c.iterations, 5);
  EXPECT_LT(c.dense_error, 1e-8);
}

TEST(IterationBound, ThreeIntervalsWithinEight) {
  const auto c = bound_on_lorenz(3);
  EXPECT_EQ(c.bound, 8);
  EXPECT_TRUE(c.held);
}

TEST(IterationBound, FiveIntervalsWithinFourteen) {
  const auto c = bound_on_lorenz(5);
  EXPECT_EQ(c.bound, 14);
  EXPECT_TRUE(c.held);
}

TEST(IterationBound, ReportsViolationInsteadOfThrowing) {
  Mat a = Mat::Zero(10, 10);
  for (int i = 0; i < 10; ++i) a(i, i) = 1.0 + i;
  const auto rep = verify_iteration_bound(LinearOperator::from_matrix(a), Vec::Ones(10), 1, 1e-10);
  EXPECT_EQ(rep.bound, 2);
  EXPECT_FALSE(rep.held);
  EXPECT_GT(rep.residual, 1e-10);
}
