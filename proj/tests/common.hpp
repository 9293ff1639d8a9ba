#pragma once

// Shared fixtures: the refined Lorenz AB orbit and the saddle-cycle test model.

#include "oracles.hpp"

#include <orbitcont/cli.hpp>
#include <orbitcont/continuation.hpp>

#include <cmath>
#include <numbers>

namespace fixture {

using namespace orbitcont;

/// Lorenz AB orbit with its Floquet pair, computed once per process.
inline const PeriodicOrbit& lorenz_ab() {
  static const PeriodicOrbit po = [] {
    const IntegratorConfig cfg;
    const VectorField f = models::lorenz();
    const auto g = oracle::lorenz_ab_guess();
    return with_floquet(refine_periodic_orbit(g.point, g.period, f, cfg), f, cfg);
  }();
  return po;
}

/// Mixed conditions on Lorenz: fixed-time intervals, a plane through the
/// base point and a half-length arclength interval (see cli::verify_bcs).
inline std::vector<BoundaryCondition> lorenz_bcs(int k) {
  return cli::verify_bcs(lorenz_ab(), models::lorenz(), k, IntegratorConfig{});
}

struct Saddle {
  models::SaddleCycle model;
  VectorField field;
  PeriodicOrbit po;

  Saddle(int dim, unsigned rotation_seed)
      : model(1.0, 2.0, dim, 2.0 * std::numbers::pi, rotation_seed), field(model.field()) {
    po.base_point = model.cycle_point();
    po.period = model.period();
    po = with_floquet(po, field, IntegratorConfig{});
  }

  /// Fixed-time intervals over half a loop, then a plane through the base
  /// point, then a growing fixed-time tail.
  std::vector<BoundaryCondition> bcs(int k, double tail = 2.0) const {
    const Vec w = field(po.base_point);
    const auto plane = BoundaryCondition::poincare(w, w.dot(po.base_point), Crossing::Rising);
    if (k == 1) return {plane};
    if (k == 2) return {BoundaryCondition::fixed_time(0.5 * po.period), plane};
    std::vector<BoundaryCondition> out;
    for (int i = 0; i < k - 2; ++i) out.push_back(BoundaryCondition::fixed_time(0.5 * po.period / (k - 2)));
    out.push_back(plane);
    out.push_back(BoundaryCondition::fixed_time(tail));
    return out;
  }
};

inline ContinuationState start_state(const ShootingProblem& p, double value, double ds) {
  const auto s = seed_initial_solution(p, value);
  return {p.bcs(), s.z, s.tangent, ds, 0};
}

inline Vec random_vec(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace fixture
