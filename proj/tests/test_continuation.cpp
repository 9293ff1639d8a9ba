#include "common.hpp"

#include <gtest/gtest.h>

using namespace orbitcont;

namespace {

ContinuationConfig tight() {
  ContinuationConfig cc;
  cc.gmres_tol = 1e-8;
  cc.gmres_forcing = false;
  cc.ds0 = 0.1;
  cc.ds_max = 0.5;
  cc.mesh_samples = 40;
  return cc;
}

ShootingProblem lorenz_problem(int k) {
  return ShootingProblem(models::lorenz(), LeftBoundary::periodic_orbit_ray(fixture::lorenz_ab()),
                         fixture::lorenz_bcs(k));
}

RunResult saddle_run(const fixture::Saddle& s, int k, int steps, int workers = 1) {
  ShootingProblem p(s.field, LeftBoundary::periodic_orbit_ray(s.po), s.bcs(k));
  p.workers = workers;
  auto cc = tight();
  cc.max_steps = steps;
  return run(p, fixture::start_state(p, 1e-4, cc.ds0), cc);
}

/// Saddle cycle in R^3 whose plane condition x_1 = 1.2 becomes tangent to
/// the manifold orbits as eps grows: the continuation curve folds.
struct FoldCase {
  models::SaddleCycle model{1.0, 2.0, 3};
  PeriodicOrbit po;
  std::vector<BoundaryCondition> bcs;

  FoldCase() {
    po.base_point = model.cycle_point();
    po.period = model.period();
    po.mu1 = model.unstable_multiplier();
    po.u1 = model.unstable_direction();
    bcs = {BoundaryCondition::fixed_time(0.25), BoundaryCondition::poincare(Vec::Unit(3, 0), 1.2, Crossing::Any)};
  }
};

double gluing_norm(const ShootingProblem& p, const Vec& z) {
  const Layout l = p.layout();
  return residual(p, z).head((l.k - 1) * l.n).norm();
}

}  // namespace

TEST(Correct, ConvergedPointNeedsOneEvaluation) {
  const auto p = lorenz_problem(3);
  const auto s = seed_initial_solution(p, 1e-6);
  const auto pt = correct(p, s.z, s.tangent, tight());
  EXPECT_EQ(pt.newton_iters, 1);
  EXPECT_TRUE(pt.gmres_history.empty());
  EXPECT_EQ(pt.z, s.z);
}

TEST(Correct, LorenzConvergesSuperlinearlyWithinGmresBound) {
  const int k = 3;
  const auto p = lorenz_problem(k);
  const auto s = seed_initial_solution(p, 1e-6);
  std::mt19937_64 rng(4);
  Vec kick = fixture::random_vec(static_cast<int>(s.z.size()), rng);
  kick -= s.tangent * s.tangent.dot(kick);
  const auto pt = correct(p, s.z + 0.1 * s.tangent + 1e-2 * kick.normalized(), s.tangent, tight());
  EXPECT_LE(pt.residual_history.back(), 1e-8);
  ASSERT_GE(pt.residual_history.size(), 3u);
  for (const auto& h : pt.gmres_history) {
    EXPECT_LE(static_cast<int>(h.size()) - 1, 3 * k - 1);
    EXPECT_LE(h.back(), 1e-8);
  }
  const auto& r = pt.residual_history;
  for (std::size_t j = r.size() - 2; j + 1 < r.size(); ++j) {
    if (r[j] < 1e-3) {
      EXPECT_LE(r[j + 1], 10.0 * std::pow(r[j], 1.5)) << j;
    }
  }
}

TEST(Correct, UpdatesStayOrthogonalToTangent) {
  const auto p = lorenz_problem(2);
  const auto s = seed_initial_solution(p, 1e-6);
  Vec t = s.tangent;
  t[0] = 0.2;
  t.normalize();
  const auto pt = correct(p, s.z + 0.05 * t, t, tight());
  ASSERT_GT(pt.total_update.norm(), 0.0);
  EXPECT_LE(std::abs(t.dot(pt.total_update)), 1e-8 * pt.total_update.norm());
}

TEST(Correct, ReportsNonConvergence) {
  const auto p = lorenz_problem(2);
  const auto s = seed_initial_solution(p, 1e-6);
  auto cc = tight();
  cc.newton_max = 1;
  cc.newton_tol = 1e-15;
  EXPECT_THROW(correct(p, s.z + 0.3 * s.tangent, s.tangent, cc), ConvergenceError);
  EXPECT_THROW(correct(p, s.z.head(3), s.tangent, cc), std::invalid_argument);
}

TEST(TangentFd, NormalizesAndOrients) {
  Vec a = Vec::Zero(2), b(2), prev(2);
  b << 3.0, 4.0;
  prev << 1.0, 0.0;
  const Vec t = tangent_fd(a, b, prev);
  EXPECT_NEAR(t[0], 0.6, 1e-15);
  EXPECT_NEAR(t[1], 0.8, 1e-15);
  const Vec flipped = tangent_fd(a, b, -prev);
  EXPECT_NEAR(flipped[0], -0.6, 1e-15);
  EXPECT_THROW(tangent_fd(a, a, prev), std::invalid_argument);
}

TEST(TangentFd, StraightPathHasConstantTangent) {
  const Vec d = Vec::LinSpaced(5, -1.0, 2.0).normalized();
  const Vec z0 = Vec::Ones(5);
  Vec t = d;
  for (int i = 1; i < 5; ++i) {
    const Vec next = tangent_fd(z0 + (i - 1) * 0.3 * d, z0 + i * 0.3 * d, t);
    EXPECT_LT((next - d).norm(), 1e-14);
    t = next;
  }
}

TEST(StepControl, Rules) {
  ContinuationConfig cc;
  cc.ds_min = 0.01;
  cc.ds_max = 0.2;
  EXPECT_DOUBLE_EQ(step_control({false, 0}, 0.1, cc), 0.05);
  EXPECT_THROW(step_control({false, 0}, 0.015, cc), ConvergenceError);
  EXPECT_DOUBLE_EQ(step_control({true, 2}, 0.1, cc), 0.13);
  EXPECT_DOUBLE_EQ(step_control({true, 3}, 0.18, cc), 0.2);
  EXPECT_DOUBLE_EQ(step_control({true, 5}, 0.1, cc), 0.1);
}

TEST(ContinuationConfig, Validation) {
  EXPECT_NO_THROW(ContinuationConfig{}.validate());
  ContinuationConfig c;
  c.ds0 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.newton_tol = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.amplification_threshold = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.param_min = 1.0;
  c.param_max = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Run, ZeroStepsRecordsOnlyTheSeed) {
  auto p = lorenz_problem(2);
  auto cc = tight();
  cc.max_steps = 0;
  const auto r = run(p, fixture::start_state(p, 1e-6, cc.ds0), cc);
  EXPECT_FALSE(r.aborted);
  ASSERT_EQ(r.mesh.orbits.size(), 1u);
  EXPECT_EQ(r.points.size(), 1u);
  EXPECT_EQ(r.stop_reason, "max_steps reached");
  EXPECT_EQ(r.final_state.step, 0);
}

TEST(Run, SaddleManifoldStaysInUnstablePlane) {
  const fixture::Saddle s(6, 5);
  const auto r = saddle_run(s, 3, 10);
  ASSERT_FALSE(r.aborted) << r.error;
  ASSERT_EQ(r.points.size(), 11u);
  EXPECT_GT(r.diagram.back().param, r.diagram.front().param + 1.0);
  for (const auto& o : r.mesh.orbits) {
    double amp = 0.0, dist = 0.0;
    for (const auto& x : o.samples) amp = std::max(amp, (x - s.po.base_point).norm());
    for (const auto& x : o.samples) dist = std::max(dist, s.model.distance_to_plane(x));
    EXPECT_LE(dist / std::max(amp, 1.0), 1e-6) << o.step;
  }
}

TEST(Run, AcceptedPointsAreGluedAndReintegrate) {
  auto p = lorenz_problem(3);
  auto cc = tight();
  cc.max_steps = 6;
  const auto r = run(p, fixture::start_state(p, 1e-6, cc.ds0), cc);
  ASSERT_FALSE(r.aborted) << r.error;
  IntegratorConfig fine = p.integrator;
  fine.rel_tol = 1e-13;
  fine.abs_tol = 1e-15;
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    const auto& pt = r.points[i];
    EXPECT_LE(gluing_norm(p, pt.z), cc.newton_tol);
    EXPECT_LE(residual(p, pt.z).norm(), cc.newton_tol);
    EXPECT_NEAR(pt.tangent.norm(), 1.0, 1e-12);
    const auto& o = r.mesh.orbits[i];
    for (std::size_t seg = 0; seg < o.segment_starts.size(); ++seg) {
      const Vec again = flow(p.flow_field(), o.segment_starts[seg], o.z[p.layout().time(static_cast<int>(seg))] *
                                                                         p.left().time_scale(), fine).state;
      const double scale = p.integrator.rel_tol * again.norm() + p.integrator.abs_tol;
      EXPECT_LE((again - o.segment_ends[seg]).norm(), 10.0 * scale) << i << " " << seg;
    }
  }
}

TEST(Run, ConsecutiveOrbitsCoverTheManifold) {
  const fixture::Saddle s(4, 2);
  const auto r = saddle_run(s, 2, 8);
  ASSERT_FALSE(r.aborted) << r.error;
  ShootingProblem p(s.field, LeftBoundary::periodic_orbit_ray(s.po), s.bcs(2));
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    const double a = r.diagram[i - 1].param, b = r.diagram[i].param;
    EXPECT_LE((p.left().point(a) - p.left().point(b)).norm(), tight().ds_max);
    EXPECT_GT(b, a);
  }
}

TEST(Run, BitwiseIndependentOfWorkers) {
  const fixture::Saddle s(6, 5);
  const auto a = saddle_run(s, 5, 4, 1);
  const auto b = saddle_run(s, 5, 4, 3);
  ASSERT_EQ(a.points.size(), b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    EXPECT_EQ(a.points[i].z, b.points[i].z) << i;
    EXPECT_EQ(a.mesh.orbits[i].samples, b.mesh.orbits[i].samples) << i;
  }
}

TEST(Run, FoldIsLocatedOnTheTangentOrbit) {
  const FoldCase fc;
  const ShootingProblem proto(fc.model.field(), LeftBoundary::periodic_orbit_ray(fc.po), fc.bcs);
  auto p = proto;
  const auto seed = seed_initial_solution(p, 1e-3);
  ContinuationConfig cc;
  cc.ds0 = 0.05;
  cc.ds_max = 0.2;
  cc.max_steps = 30;
  cc.mesh_samples = 20;
  const auto r = run(p, {fc.bcs, seed.z, -seed.tangent, cc.ds0, 0}, cc);
  ASSERT_FALSE(r.aborted) << r.error;
  ASSERT_FALSE(r.folds.empty());
  const auto& f = r.folds.front();
  EXPECT_EQ(f.segment, 1);
  EXPECT_LE(std::abs(f.tangency), 1e-4);
  EXPECT_LE(residual(p, f.z).norm(), cc.newton_tol);
  const double h = section_tangency(p, f.z)[1];
  EXPECT_NEAR(h, f.tangency, 1e-12);
  EXPECT_TRUE(std::isnan(section_tangency(p, f.z)[0]));
  int flagged = 0;
  for (const auto& o : r.mesh.orbits) flagged += o.fold ? 1 : 0;
  EXPECT_EQ(flagged, static_cast<int>(r.folds.size()));
}

TEST(ManageIntervals, NoSplitBelowThreshold) {
  auto p = lorenz_problem(3);
  const auto s = seed_initial_solution(p, 1e-6);
  Vec z = s.z, t = s.tangent;
  std::vector<double> amp;
  EXPECT_FALSE(manage_intervals(p, z, t, ContinuationConfig{}, &amp));
  EXPECT_EQ(z, s.z);
  EXPECT_EQ(amp.size(), 3u);
}

TEST(ManageIntervals, ExponentialSegmentSplitsInHalf) {
  VectorField f;
  f.dim = 2;
  f.eval = [](const Vec& x) -> Vec { return Vec{{x[0], -x[1]}}; };
  f.jacobian_action = [](const Vec&, const Vec& v) -> Vec { return Vec{{v[0], -v[1]}}; };
  ShootingProblem p(f, LeftBoundary::equilibrium_circle(Vec::Zero(2), Vec::Unit(2, 0), Vec::Unit(2, 1), 1e-6, 1.0),
                    {BoundaryCondition::fixed_time(20.0)});
  const auto s = seed_initial_solution(p, 0.3);
  Vec z = s.z, t = s.tangent;
  std::vector<double> amp;
  ASSERT_TRUE(manage_intervals(p, z, t, ContinuationConfig{}, &amp));
  ASSERT_EQ(p.intervals(), 2);
  ASSERT_EQ(amp.size(), 2u);
  for (double a : amp) EXPECT_NEAR(a, std::exp(10.0), 0.01 * std::exp(10.0));
  EXPECT_NEAR(z[p.layout().time(0)], 10.0, 1e-12);
  EXPECT_NEAR(z[p.layout().time(1)], 10.0, 1e-12);
  EXPECT_LE(residual(p, z).norm(), 1e-9 * (1.0 + z.norm()));
  EXPECT_NEAR(t.norm(), 1.0, 1e-14);
}

TEST(ManageIntervals, LorenzPostCondition) {
  const auto& po = fixture::lorenz_ab();
  const VectorField lf = models::lorenz();
  const Vec w = lf(po.base_point);
  ShootingProblem p(lf, LeftBoundary::periodic_orbit_ray(po),
                    {BoundaryCondition::fixed_time(0.5 * po.period),
                     BoundaryCondition::poincare(w, w.dot(po.base_point), Crossing::Rising),
                     BoundaryCondition::fixed_time(15.0)});
  const auto s = seed_initial_solution(p, 1e-6);
  Vec z = s.z, t = s.tangent;
  ContinuationConfig cc;
  cc.amplification_threshold = 1e3;
  cc.amplification_probes = 3;
  std::vector<double> amp;
  std::vector<double> before_amp;
  manage_intervals(p, z, t, ContinuationConfig{}, &before_amp);
  EXPECT_GT(*std::max_element(before_amp.begin(), before_amp.end()), 1e3);
  EXPECT_TRUE(manage_intervals(p, z, t, cc, &amp));
  EXPECT_GT(p.intervals(), 3);
  for (double a : amp) EXPECT_LE(a, 1e3);
  EXPECT_LE(residual(p, z).norm(), 1e-7);
  double total = 0.0;
  for (int i = 0; i < p.intervals(); ++i) total += z[p.layout().time(i)];
  double before = 0.0;
  for (int i = 0; i < 3; ++i) before += s.z[Layout{3, 3}.time(i)];
  EXPECT_NEAR(total, before, 1e-12);
}

TEST(Run, RestartFromCheckpointIsBitwise) {
  const fixture::Saddle s(4, 2);
  ShootingProblem p(s.field, LeftBoundary::periodic_orbit_ray(s.po), s.bcs(3));
  auto cc = tight();
  cc.max_steps = 6;
  std::vector<ContinuationState> saved;
  RunCallbacks cb;
  cb.on_accept = [&](const ContinuationState& st) { saved.push_back(st); };
  const auto full = run(p, fixture::start_state(p, 1e-4, cc.ds0), cc, cb);
  ASSERT_EQ(saved.size(), 7u);
  ShootingProblem q(s.field, LeftBoundary::periodic_orbit_ray(s.po), s.bcs(3));
  const auto resumed = run(q, saved[3], cc);
  ASSERT_EQ(resumed.points.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(resumed.points[i].z, full.points[i + 4].z) << i;
  EXPECT_EQ(resumed.final_state.z, full.final_state.z);
}

TEST(Run, FailureKeepsPartialMesh) {
  const fixture::Saddle s(4, 2);
  ShootingProblem p(s.field, LeftBoundary::periodic_orbit_ray(s.po), s.bcs(2));
  auto cc = tight();
  cc.max_steps = 10;
  RunCallbacks cb;
  cb.on_accept = [](const ContinuationState& st) {
    if (st.step == 2) throw std::runtime_error("disk full");
  };
  const auto r = run(p, fixture::start_state(p, 1e-4, cc.ds0), cc, cb);
  EXPECT_TRUE(r.aborted);
  EXPECT_EQ(r.stop_reason, "aborted");
  EXPECT_NE(r.error.find("disk full"), std::string::npos);
  EXPECT_EQ(r.mesh.orbits.size(), 3u);
  EXPECT_EQ(r.final_state.step, 2);
}

TEST(Run, StopsAtParameterLimit) {
  const fixture::Saddle s(4, 2);
  ShootingProblem p(s.field, LeftBoundary::periodic_orbit_ray(s.po), s.bcs(2));
  auto cc = tight();
  cc.max_steps = 50;
  cc.param_max = std::log(1e-2);
  const auto r = run(p, fixture::start_state(p, 1e-4, cc.ds0), cc);
  EXPECT_EQ(r.stop_reason, "param_max reached");
  EXPECT_GT(r.diagram.back().param, cc.param_max);
  EXPECT_LT(r.diagram[r.diagram.size() - 2].param, cc.param_max);
}
