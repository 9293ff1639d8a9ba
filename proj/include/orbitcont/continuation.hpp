#pragma once

#include <orbitcont/bvp.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace orbitcont {

struct ContinuationConfig {
  double ds0 = 0.05;
  double ds_min = 1e-6;
  double ds_max = 0.5;
  double newton_tol = 1e-8;
  int newton_max = 8;  ///< maximum Newton updates per corrector call
  /// Inner GMRES tolerance d. With forcing on, d = min(gmres_tol, |F|).
  double gmres_tol = 1e-3;
  bool gmres_forcing = true;
  int gmres_max_iter = 0;  ///< 0: min(N, 200)
  int max_steps = 20;
  double param_min = -std::numeric_limits<double>::infinity();
  double param_max = std::numeric_limits<double>::infinity();
  double max_total_time = std::numeric_limits<double>::infinity();  ///< physical time
  bool manage_intervals = false;
  double amplification_threshold = 1e6;
  int amplification_probes = 4;
  int max_intervals = 64;
  unsigned probe_seed = 11;
  int mesh_samples = 200;

  void validate() const {
    if (!(ds_min > 0.0) || !(ds_min <= ds0) || !(ds0 <= ds_max)) {
      throw std::invalid_argument("step sizes must satisfy 0 < ds_min <= ds0 <= ds_max");
    }
    if (!(newton_tol > 0.0) || !(gmres_tol > 0.0)) throw std::invalid_argument("tolerances must be positive");
    if (newton_max < 1) throw std::invalid_argument("newton_max must be at least 1");
    if (max_steps < 0) throw std::invalid_argument("max_steps must be non-negative");
    if (gmres_max_iter < 0) throw std::invalid_argument("gmres_max_iter must be non-negative");
    if (!(amplification_threshold > 1.0)) throw std::invalid_argument("amplification threshold must exceed 1");
    if (amplification_probes < 1) throw std::invalid_argument("amplification_probes must be positive");
    if (mesh_samples < 2) throw std::invalid_argument("mesh_samples must be at least 2");
    if (!(param_min < param_max)) throw std::invalid_argument("param_min must be below param_max");
  }

  bool operator==(const ContinuationConfig&) const = default;
};

/// A converged member of the orbit family.
struct ContinuationPoint {
  Vec z;
  Vec tangent;
  int newton_iters = 0;  ///< residual evaluations; 1 means z was already converged
  std::vector<double> residual_history;               ///< |F| before each update and at the end
  std::vector<std::vector<double>> gmres_history;     ///< one relative-residual sequence per update
  Vec total_update;  ///< sum of the Newton updates
  bool fold = false;
};

namespace detail {

inline int gmres_cap(const ContinuationConfig& cfg, int nn) {
  const int cap = cfg.gmres_max_iter > 0 ? cfg.gmres_max_iter : 200;
  return std::min(cap, nn);
}

}  // namespace detail

/// Newton iteration on the bordered system [DF; t^T] dz = (-F, 0). The
/// updates stay orthogonal to the tangent, so the iterates remain on the
/// hyperplane through z_pred. Throws ConvergenceError on divergence or when
/// newton_max updates do not reach newton_tol; integration failures
/// propagate as SegmentError.
inline ContinuationPoint correct(const ShootingProblem& p, const Vec& z_pred, const Vec& tangent,
                                 const ContinuationConfig& cfg) {
  const Layout l = p.layout();
  if (z_pred.size() != l.size() || tangent.size() != l.size()) {
    throw std::invalid_argument("prediction or tangent has wrong length");
  }
  ContinuationPoint pt;
  pt.z = z_pred;
  pt.tangent = tangent;
  pt.total_update = Vec::Zero(l.size());
  double first = 0.0;
  for (int it = 0;; ++it) {
    const Vec f = residual(p, pt.z);
    const double fn = f.norm();
    pt.residual_history.push_back(fn);
    pt.newton_iters = it + 1;
    if (!std::isfinite(fn)) throw ConvergenceError("non-finite residual", pt.residual_history);
    if (it == 0) first = fn;
    if (fn <= cfg.newton_tol) return pt;
    if (it >= cfg.newton_max) {
      throw ConvergenceError("Newton did not reach tolerance in " + std::to_string(cfg.newton_max) + " updates",
                             pt.residual_history);
    }
    if (it > 0 && fn > 1e3 * std::max(first, cfg.newton_tol)) {
      throw ConvergenceError("Newton diverged", pt.residual_history);
    }
    Vec rhs(l.size());
    rhs.head(l.residual_size()) = -f;
    rhs[l.size() - 1] = 0.0;
    const double d = cfg.gmres_forcing ? std::min(cfg.gmres_tol, fn) : cfg.gmres_tol;
    const auto op = bordered_operator(p, pt.z, tangent);
    const auto sol = gmres(op, rhs, d, detail::gmres_cap(cfg, l.size()));
    pt.gmres_history.push_back(sol.residual_history);
    if (!sol.solution.allFinite()) throw ConvergenceError("GMRES produced a non-finite update", pt.residual_history);
    pt.z += sol.solution;
    pt.total_update += sol.solution;
  }
}

/// Secant tangent (z - z_prev) / |z - z_prev| oriented to have a positive
/// inner product with the previous tangent.
inline Vec tangent_fd(const Vec& z_prev, const Vec& z, const Vec& previous_tangent) {
  if (z_prev.size() != z.size()) throw std::invalid_argument("secant points have different lengths");
  Vec t = z - z_prev;
  const double tn = t.norm();
  if (!(tn > 0.0)) throw std::invalid_argument("secant tangent of identical points is undefined");
  t /= tn;
  if (previous_tangent.size() == t.size() && t.dot(previous_tangent) < 0.0) t = -t;
  return t;
}

struct StepOutcome {
  bool converged = false;
  int newton_iters = 0;
};

/// Step-size rule: halve on rejection (error below ds_min), grow by 1.3 up to
/// ds_max after fast convergence (at most 3 iterations), otherwise keep.
inline double step_control(const StepOutcome& o, double ds, const ContinuationConfig& cfg) {
  if (!o.converged) {
    const double next = 0.5 * ds;
    if (next < cfg.ds_min) {
      throw ConvergenceError("continuation step size fell below ds_min = " + std::to_string(cfg.ds_min), {});
    }
    return next;
  }
  if (o.newton_iters <= 3) return std::min(1.3 * ds, cfg.ds_max);
  return ds;
}

/// One orbit of the manifold mesh.
struct MeshOrbit {
  int step = 0;
  Vec z;
  double param = 0.0;
  double total_time = 0.0;  ///< sum of physical segment times
  std::vector<BoundaryCondition> bcs;
  std::vector<Vec> segment_starts;
  std::vector<Vec> segment_ends;
  std::vector<double> arclength;  ///< uniform samples of the accumulated arclength
  std::vector<Vec> samples;       ///< states at those arclengths
  bool fold = false;  ///< located fold orbit (inserted between two accepted points)
};

struct ManifoldMesh {
  std::vector<MeshOrbit> orbits;
};

struct DiagramRow {
  int step = 0;
  double param = 0.0;
  double eps = 0.0;
  double sum_tau = 0.0;
  double total_time = 0.0;
  bool fold = false;
};

struct ConvergenceRow {
  int step = 0;
  int newton_iter = 0;
  int gmres_iter = 0;
  double relative_residual = 0.0;
};

struct NewtonRow {
  int step = 0;
  int newton_iter = 0;
  double residual = 0.0;
};

struct TimingRow {
  int step = 0;
  int segment = -1;  ///< -1: whole continuation step
  double seconds = 0.0;
};

/// Orbit at a fold of the continuation curve, where a Poincare segment ends
/// tangent to its plane.
struct FoldPoint {
  int step = 0;      ///< accepted step whose predecessor bracket contains the fold
  int segment = -1;  ///< interval whose right boundary condition is tangent
  Vec z;
  double tangency = 0.0;  ///< w . f(gamma(T)) / |f(gamma(T))|
};

/// Everything needed to resume a run from an accepted point.
struct ContinuationState {
  std::vector<BoundaryCondition> bcs;
  Vec z;
  Vec tangent;
  double ds = 0.0;
  int step = 0;
};

struct RunResult {
  ManifoldMesh mesh;
  std::vector<DiagramRow> diagram;
  std::vector<ConvergenceRow> convergence;
  std::vector<NewtonRow> newton;
  std::vector<TimingRow> timing;
  std::vector<ContinuationPoint> points;
  std::vector<FoldPoint> folds;
  ContinuationState final_state;
  std::string stop_reason;
  bool aborted = false;
  std::string error;
};

/// Dense samples of the orbit at uniformly spaced arclength.
inline MeshOrbit make_mesh_orbit(const ShootingProblem& p, const Vec& z, int step, int samples) {
  const Layout l = p.layout();
  const SegmentSetup s = segment_setup(p, z);
  MeshOrbit o;
  o.step = step;
  o.z = z;
  o.param = z[l.param()];
  o.bcs = p.bcs();
  o.segment_starts = s.starts;
  std::vector<Trajectory> trs(static_cast<std::size_t>(l.k));
  parallel_for(trs.size(), p.workers, [&](std::size_t i) {
    trs[i] = integrate(p.flow_field(), s.starts[i], s.durations[i], p.integrator, true);
  });
  double total_arc = 0.0;
  std::vector<double> offsets;
  for (std::size_t i = 0; i < trs.size(); ++i) {
    o.total_time += s.durations[i];
    o.segment_ends.push_back(trs[i].final_state());
    offsets.push_back(total_arc);
    total_arc += trs[i].arclength().back();
  }
  for (int j = 0; j < samples; ++j) {
    const double target = total_arc * static_cast<double>(j) / static_cast<double>(samples - 1);
    std::size_t seg = 0;
    while (seg + 1 < trs.size() && offsets[seg + 1] <= target) ++seg;
    const Trajectory& tr = trs[seg];
    const double local = std::min(target - offsets[seg], tr.arclength().back());
    double lo = 0.0, hi = tr.final_time();
    for (int it = 0; it < 80 && hi - lo > 1e-15 * std::max(1.0, hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      if (tr.arclength_at(mid) < local) lo = mid;
      else hi = mid;
    }
    o.arclength.push_back(target);
    o.samples.push_back(tr.dense_eval(0.5 * (lo + hi)));
  }
  return o;
}

/// Splits segments whose flow-map amplification exceeds the threshold at
/// their time midpoint. The first half gets a fixed-time condition, the
/// second keeps the original one (shortened if it is fixed-time). Returns true when the problem changed;
/// z and tangent are rewritten in the new layout.
inline bool manage_intervals(ShootingProblem& p, Vec& z, Vec& tangent, const ContinuationConfig& cfg,
                             std::vector<double>* amplifications = nullptr) {
  bool changed = false;
  for (;;) {
    const Layout l = p.layout();
    const SegmentSetup s = segment_setup(p, z);
    std::vector<double> amp(static_cast<std::size_t>(l.k));
    parallel_for(amp.size(), p.workers, [&](std::size_t i) {
      amp[i] = segment_amplification(p.flow_field(), s.starts[i], s.durations[i], p.integrator,
                                     cfg.amplification_probes, cfg.probe_seed);
    });
    std::size_t worst = 0;
    for (std::size_t i = 1; i < amp.size(); ++i)
      if (amp[i] > amp[worst]) worst = i;
    if (amp[worst] <= cfg.amplification_threshold || l.k >= cfg.max_intervals) {
      if (amplifications) *amplifications = amp;
      return changed;
    }
    const int w = static_cast<int>(worst);
    const double scale = p.left().time_scale();
    const double half = 0.5 * s.durations[worst];
    const Unknowns u = Unknowns::unpack(z, l);
    const Unknowns du = Unknowns::unpack(tangent, l);

    // Midpoint state and its derivative along the tangent. The first half
    // has fixed duration, so only the start point varies.
    const Vec dx0 = w == 0 ? Vec(p.left().derivative(u.param) * du.param)
                           : Vec(du.interior[static_cast<std::size_t>(w - 1)]);
    const auto [mid, dmid] = integrate_extended(p.flow_field(), s.starts[worst], dx0, half, p.integrator);

    Unknowns nu, ndu;
    nu.param = u.param;
    ndu.param = du.param;
    for (int i = 0; i < l.k; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (i > 0) {
        nu.interior.push_back(u.interior[ui - 1]);
        ndu.interior.push_back(du.interior[ui - 1]);
      }
      if (i == w) {
        nu.times.push_back(half / scale);
        ndu.times.push_back(0.0);
        nu.interior.push_back(mid);
        ndu.interior.push_back(dmid);
        nu.times.push_back(u.times[ui] - half / scale);
        ndu.times.push_back(du.times[ui]);
      } else {
        nu.times.push_back(u.times[ui]);
        ndu.times.push_back(du.times[ui]);
      }
    }
    auto bcs = p.bcs();
    auto& rest = bcs[worst];
    if (rest.kind == BoundaryCondition::Kind::FixedTime) rest = BoundaryCondition::fixed_time(rest.target - half);
    bcs.insert(bcs.begin() + w, BoundaryCondition::fixed_time(half));
    p.set_bcs(std::move(bcs));
    const Layout nl = p.layout();
    z = nu.pack(nl);
    tangent = ndu.pack(nl);
    tangent.normalize();
    changed = true;
  }
}

/// w . f / |f| at the end of every Poincare segment (NaN for other kinds).
inline std::vector<double> section_tangency(const ShootingProblem& p, const Vec& z) {
  const SegmentEnds e = segment_ends(p, z);
  std::vector<double> out(e.ends.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < e.ends.size(); ++i) {
    const auto& bc = p.bcs()[i];
    if (bc.kind != BoundaryCondition::Kind::Poincare) continue;
    const Vec f = p.flow_field()(e.ends[i]);
    const double fn = f.norm();
    out[i] = fn > 0.0 ? bc.normal.dot(f) / fn : 0.0;
  }
  return out;
}

/// Locates the fold between the accepted points z_a and z_b: the point of
/// the curve, on hyperplanes orthogonal to t_a, where a Poincare segment's
/// tangency changes sign. Returns nothing when no Poincare tangency
/// brackets the fold or a correction fails.
inline std::optional<FoldPoint> locate_fold(const ShootingProblem& p, const Vec& z_a, const Vec& t_a, const Vec& z_b,
                                            const ContinuationConfig& cfg, double tol = 1e-7) {
  const auto ha = section_tangency(p, z_a);
  const auto hb = section_tangency(p, z_b);
  int seg = -1;
  for (std::size_t i = 0; i < ha.size(); ++i) {
    if (std::isfinite(ha[i]) && (ha[i] < 0.0) != (hb[i] < 0.0)) {
      seg = static_cast<int>(i);
      break;
    }
  }
  if (seg < 0) return std::nullopt;
  const auto si = static_cast<std::size_t>(seg);
  double a = 0.0, b = t_a.dot(z_b - z_a);
  double fa = ha[si], fb = hb[si];
  FoldPoint best;
  best.segment = seg;
  best.z = std::abs(fa) < std::abs(fb) ? z_a : z_b;
  best.tangency = std::abs(fa) < std::abs(fb) ? fa : fb;
  int side = 0;
  try {
    for (int it = 0; it < 60 && std::abs(best.tangency) > tol; ++it) {
      double s = b - fb * (b - a) / (fb - fa);
      if (!(s > std::min(a, b) && s < std::max(a, b))) s = 0.5 * (a + b);
      const ContinuationPoint pt = correct(p, z_a + s * t_a, t_a, cfg);
      const double h = section_tangency(p, pt.z)[si];
      if (std::abs(h) < std::abs(best.tangency)) {
        best.z = pt.z;
        best.tangency = h;
      }
      if ((h < 0.0) == (fa < 0.0)) {
        a = s;
        fa = h;
        if (side == -1) fb *= 0.5;
        side = -1;
      } else {
        b = s;
        fb = h;
        if (side == 1) fa *= 0.5;
        side = 1;
      }
    }
  } catch (const Error&) {
    return std::nullopt;
  }
  return best;
}

struct RunCallbacks {
  /// Called after every accepted point (including the seed) with the
  /// state needed to resume.
  std::function<void(const ContinuationState&)> on_accept;
  std::function<void(const std::string&)> log;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Pseudo-arclength continuation from `state`. With state.step == 0 the
/// state's z is first corrected and recorded as the seed orbit. Failures
/// end the run early; the partial result is returned with aborted set.
inline RunResult run(ShootingProblem& p, ContinuationState state, const ContinuationConfig& cfg,
                     const RunCallbacks& cb = {}) {
  cfg.validate();
  p.set_bcs(state.bcs);
  RunResult res;
  auto say = [&](const std::string& m) {
    if (cb.log) cb.log(m);
  };
  if (!p.clock) p.clock = std::make_shared<SegmentClock>();

  auto record = [&](const ContinuationPoint& pt, int step, double seconds) {
    const Layout l = p.layout();
    const double scale = p.left().time_scale();
    DiagramRow d;
    d.step = step;
    d.param = pt.z[l.param()];
    d.eps = p.left().kind() == LeftBoundary::Kind::PeriodicOrbitRay ? std::exp(d.param) : 0.0;
    for (int i = 0; i < l.k; ++i) d.sum_tau += pt.z[l.time(i)];
    d.total_time = d.sum_tau * scale;
    d.fold = pt.fold;
    res.diagram.push_back(d);
    for (std::size_t j = 0; j < pt.gmres_history.size(); ++j) {
      const auto& h = pt.gmres_history[j];
      for (std::size_t g = 0; g < h.size(); ++g) {
        res.convergence.push_back({step, static_cast<int>(j), static_cast<int>(g), h[g]});
      }
    }
    for (std::size_t j = 0; j < pt.residual_history.size(); ++j) {
      res.newton.push_back({step, static_cast<int>(j), pt.residual_history[j]});
    }
    res.timing.push_back({step, -1, seconds});
    for (std::size_t i = 0; i < p.clock->seconds.size(); ++i) {
      res.timing.push_back({step, static_cast<int>(i), p.clock->seconds[i]});
    }
    res.mesh.orbits.push_back(make_mesh_orbit(p, pt.z, step, cfg.mesh_samples));
    res.points.push_back(pt);
  };

  auto stop_reason = [&](const Vec& z) -> std::string {
    const Layout l = p.layout();
    const double param = z[l.param()];
    if (param > cfg.param_max) return "param_max reached";
    if (param < cfg.param_min) return "param_min reached";
    double total = 0.0;
    for (int i = 0; i < l.k; ++i) total += z[l.time(i)];
    if (total * p.left().time_scale() > cfg.max_total_time) return "max_total_time reached";
    return {};
  };

  std::vector<double> tangency_prev;
  auto any_poincare = [&] {
    for (const auto& bc : p.bcs())
      if (bc.kind == BoundaryCondition::Kind::Poincare) return true;
    return false;
  };
  bool has_poincare = any_poincare();

  try {
    if (state.step == 0) {
      p.clock->reset(p.intervals());
      const auto t0 = std::chrono::steady_clock::now();
      if (state.tangent.size() != state.z.size()) state.tangent = initial_tangent(p.layout());
      ContinuationPoint seed = correct(p, state.z, state.tangent, cfg);
      state.z = seed.z;
      if (state.ds <= 0.0) state.ds = cfg.ds0;
      record(seed, 0, detail::seconds_since(t0));
      say("seed orbit converged, |F| = " + std::to_string(seed.residual_history.back()));
      state.bcs = p.bcs();
      if (cb.on_accept) cb.on_accept(state);
    }
    while (state.step < cfg.max_steps) {
      if (auto why = stop_reason(state.z); !why.empty()) {
        res.stop_reason = why;
        break;
      }
      const int step = state.step + 1;
      p.clock->reset(p.intervals());
      const auto t0 = std::chrono::steady_clock::now();
      std::optional<ContinuationPoint> accepted;
      while (!accepted) {
        const Vec z_pred = state.z + state.ds * state.tangent;
        try {
          ContinuationPoint pt = correct(p, z_pred, state.tangent, cfg);
          const double jump = (pt.z - state.z).norm();
          const double gap =
              (p.left().point(pt.z[p.layout().param()]) - p.left().point(state.z[p.layout().param()])).norm();
          if (jump > 2.0 * state.ds || gap > cfg.ds_max) {
            throw ConvergenceError("corrector left the step neighbourhood", pt.residual_history);
          }
          state.ds = step_control({true, pt.newton_iters}, state.ds, cfg);
          accepted = std::move(pt);
        } catch (const Error& e) {
          say("step " + std::to_string(step) + " rejected at ds = " + std::to_string(state.ds) + ": " + e.what());
          state.ds = step_control({false, 0}, state.ds, cfg);
        }
      }
      const Layout l = p.layout();
      Vec t_new = tangent_fd(state.z, accepted->z, state.tangent);
      accepted->fold = (t_new[l.param()] > 0.0) != (state.tangent[l.param()] > 0.0);
      accepted->tangent = t_new;
      // The secant tangent lags by one step, so the tangency sign change is
      // tracked on every bracket rather than only on flagged ones.
      if (has_poincare) {
        if (tangency_prev.empty()) tangency_prev = section_tangency(p, state.z);
        auto tangency_new = section_tangency(p, accepted->z);
        bool flip = false;
        for (std::size_t i = 0; i < tangency_new.size(); ++i) {
          flip = flip || (std::isfinite(tangency_new[i]) && (tangency_new[i] < 0.0) != (tangency_prev[i] < 0.0));
        }
        if (flip) {
          if (auto fp = locate_fold(p, state.z, state.tangent, accepted->z, cfg)) {
            fp->step = step;
            MeshOrbit o = make_mesh_orbit(p, fp->z, step, cfg.mesh_samples);
            o.fold = true;
            res.mesh.orbits.push_back(std::move(o));
            res.folds.push_back(std::move(*fp));
            say("step " + std::to_string(step) + ": fold located");
          } else {
            say("step " + std::to_string(step) + ": tangency change not located");
          }
        }
        tangency_prev = std::move(tangency_new);
      }
      state.z = accepted->z;
      state.tangent = t_new;
      state.step = step;
      if (cfg.manage_intervals) {
        if (manage_intervals(p, state.z, state.tangent, cfg)) {
          tangency_prev.clear();
          say("step " + std::to_string(step) + ": split into " + std::to_string(p.intervals()) + " intervals");
        }
      }
      accepted->z = state.z;
      accepted->tangent = state.tangent;
      state.bcs = p.bcs();
      record(*accepted, step, detail::seconds_since(t0));
      if (cb.on_accept) cb.on_accept(state);
    }
    if (res.stop_reason.empty()) res.stop_reason = "max_steps reached";
  } catch (const std::exception& e) {
    res.aborted = true;
    res.error = e.what();
    res.stop_reason = "aborted";
  }
  state.bcs = p.bcs();
  res.final_state = state;
  return res;
}

}  // namespace orbitcont
