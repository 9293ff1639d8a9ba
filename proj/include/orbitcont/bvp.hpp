#pragma once

#include <orbitcont/parallel.hpp>
#include <orbitcont/stability.hpp>

#include <chrono>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace orbitcont {

/// Right boundary condition of one shooting interval, g(gamma, T) = target.
struct BoundaryCondition {
  enum class Kind { FixedTime, Poincare, Arclength };

  Kind kind = Kind::FixedTime;
  double target = 0.0;
  Vec normal;  ///< unit normal w of the plane w . x = target (Poincare only)
  Crossing crossing = Crossing::Any;

  static BoundaryCondition fixed_time(double t) {
    if (!(t > 0.0)) throw std::invalid_argument("fixed-time target must be positive");
    BoundaryCondition bc;
    bc.kind = Kind::FixedTime;
    bc.target = t;
    return bc;
  }

  /// Plane w . x = offset; w and offset are scaled together so |w| = 1.
  static BoundaryCondition poincare(const Vec& w, double offset, Crossing c = Crossing::Any) {
    const double wn = w.norm();
    if (!(wn > 0.0) || !w.allFinite()) throw std::invalid_argument("Poincare normal must be nonzero and finite");
    BoundaryCondition bc;
    bc.kind = Kind::Poincare;
    bc.normal = w / wn;
    bc.target = offset / wn;
    bc.crossing = c;
    return bc;
  }

  static BoundaryCondition arclength(double c) {
    if (!(c > 0.0)) throw std::invalid_argument("arclength target must be positive");
    BoundaryCondition bc;
    bc.kind = Kind::Arclength;
    bc.target = c;
    return bc;
  }

  bool needs_arclength() const { return kind == Kind::Arclength; }

  bool operator==(const BoundaryCondition& o) const {
    return kind == o.kind && target == o.target && crossing == o.crossing && normal.size() == o.normal.size() &&
           (normal.size() == 0 || normal == o.normal);
  }
};

inline const char* to_string(BoundaryCondition::Kind k) {
  switch (k) {
    case BoundaryCondition::Kind::FixedTime: return "fixed_time";
    case BoundaryCondition::Kind::Poincare: return "poincare";
    case BoundaryCondition::Kind::Arclength: return "arclength";
  }
  return "?";
}

/// Value of a boundary condition on the segment x0 -> phi(x0, T) together
/// with its derivatives.
struct BcEval {
  double value = 0.0;     ///< g: T, w . x(T) or the arclength
  double residual = 0.0;  ///< g - target
  Vec gradient;           ///< dg / dx0
  double time_derivative = 0.0;  ///< dg / dT
};

/// Evaluates a boundary condition and its first derivatives by integrating
/// the variational equations with V0 = I.
inline BcEval bc_value_and_gradient(const BoundaryCondition& bc, const Vec& x0, double t, const VectorField& field,
                                    const IntegratorConfig& cfg) {
  const int n = field.dim;
  BcEval out;
  if (bc.kind == BoundaryCondition::Kind::FixedTime) {
    out.value = t;
    out.residual = t - bc.target;
    out.gradient = Vec::Zero(n);
    out.time_derivative = 1.0;
    return out;
  }
  const auto r = integrate_variational(field, x0, Mat::Identity(n, n), t, cfg, bc.needs_arclength());
  if (bc.kind == BoundaryCondition::Kind::Poincare) {
    out.value = bc.normal.dot(r.state);
    out.gradient = r.directions.transpose() * bc.normal;
    out.time_derivative = bc.normal.dot(r.rate);
  } else {
    out.value = r.arclength;
    out.gradient = r.arclength_gradient;
    out.time_derivative = r.rate.norm();
  }
  out.residual = out.value - bc.target;
  return out;
}

/// How the first segment's initial point gamma1(0) depends on the
/// continuation parameter.
class LeftBoundary {
 public:
  enum class Kind { PeriodicOrbitRay, EquilibriumCircle };

  /// gamma1(0) = x_bar + sign * exp(delta) * u1; the parameter is delta = ln eps.
  static LeftBoundary periodic_orbit_ray(const PeriodicOrbit& po, double sign = 1.0, bool reverse_time = false) {
    if (!po.has_floquet()) throw std::invalid_argument("periodic orbit has no Floquet data");
    if (!(po.period > 0.0)) throw std::invalid_argument("periodic orbit period must be positive");
    if (sign != 1.0 && sign != -1.0) throw std::invalid_argument("u1 sign must be +1 or -1");
    const double m = std::abs(po.mu1);
    if (!reverse_time && !(m > 1.0)) {
      throw std::invalid_argument("unstable manifold needs |mu1| > 1, got " + std::to_string(po.mu1));
    }
    if (reverse_time && !(m < 1.0)) {
      throw std::invalid_argument("stable manifold needs |mu1| < 1, got " + std::to_string(po.mu1));
    }
    LeftBoundary lb;
    lb.kind_ = Kind::PeriodicOrbitRay;
    lb.center_ = po.base_point;
    lb.e1_ = sign * po.u1.normalized();
    lb.scale_ = po.period;
    lb.reverse_ = reverse_time;
    lb.orbit_ = po;
    lb.sign_ = sign;
    return lb;
  }

  /// gamma1(0) = x_eq + r (cos theta e1 + sin theta e2); the parameter is theta.
  static LeftBoundary equilibrium_circle(const Vec& point, const Vec& e1, const Vec& e2, double radius,
                                         double reference_time, bool reverse_time = false) {
    if (point.size() != e1.size() || point.size() != e2.size()) {
      throw std::invalid_argument("equilibrium circle vectors have inconsistent lengths");
    }
    if (!(radius > 0.0)) throw std::invalid_argument("circle radius must be positive");
    if (!(reference_time > 0.0)) throw std::invalid_argument("reference time must be positive");
    const Vec a = e1.normalized();
    const Vec b0 = e2 - a * a.dot(e2);
    if (!(b0.norm() > 1e-12 * e2.norm())) throw std::invalid_argument("circle vectors are parallel");
    LeftBoundary lb;
    lb.kind_ = Kind::EquilibriumCircle;
    lb.center_ = point;
    lb.e1_ = a;
    lb.e2_ = b0.normalized();
    lb.radius_ = radius;
    lb.scale_ = reference_time;
    lb.reverse_ = reverse_time;
    return lb;
  }

  Kind kind() const { return kind_; }
  bool reverse_time() const { return reverse_; }
  /// Unit of the stored integration times (period or reference time).
  double time_scale() const { return scale_; }
  const Vec& center() const { return center_; }
  const Vec& e1() const { return e1_; }
  const Vec& e2() const { return e2_; }
  double radius() const { return radius_; }
  double sign() const { return sign_; }
  const PeriodicOrbit& orbit() const { return orbit_; }
  int dim() const { return static_cast<int>(center_.size()); }

  Vec point(double param) const {
    if (kind_ == Kind::PeriodicOrbitRay) return center_ + std::exp(param) * e1_;
    return center_ + radius_ * (std::cos(param) * e1_ + std::sin(param) * e2_);
  }

  Vec derivative(double param) const {
    if (kind_ == Kind::PeriodicOrbitRay) return std::exp(param) * e1_;
    return radius_ * (-std::sin(param) * e1_ + std::cos(param) * e2_);
  }

  /// Parameter value for eps (ray) or theta (circle).
  double parameter_for(double value) const {
    if (kind_ == Kind::PeriodicOrbitRay) {
      if (!(value > 0.0)) throw std::invalid_argument("eps must be positive (delta = ln eps)");
      return std::log(value);
    }
    return value;
  }

 private:
  Kind kind_ = Kind::PeriodicOrbitRay;
  Vec center_, e1_, e2_;
  double radius_ = 0.0;
  double scale_ = 1.0;
  double sign_ = 1.0;
  bool reverse_ = false;
  PeriodicOrbit orbit_;
};

/// Index map of the unknown vector
/// z = (gamma2(0), ..., gammak(0), tau_1, ..., tau_k, param).
struct Layout {
  int n = 0;
  int k = 0;

  int size() const { return (k - 1) * n + k + 1; }
  int residual_size() const { return size() - 1; }
  /// Offset of the initial point of segment s (1 <= s < k).
  int point(int s) const { return (s - 1) * n; }
  int time(int s) const { return (k - 1) * n + s; }
  int param() const { return size() - 1; }
  /// Offset of the right-BC row of segment s in the residual.
  int bc_row(int s) const { return (k - 1) * n + s; }
};

/// Unpacked form of z.
struct Unknowns {
  std::vector<Vec> interior;  ///< gamma2(0) .. gammak(0)
  std::vector<double> times;  ///< normalized times tau_i
  double param = 0.0;

  Vec pack(const Layout& l) const {
    if (static_cast<int>(interior.size()) != l.k - 1 || static_cast<int>(times.size()) != l.k) {
      throw std::invalid_argument("unknowns do not match the layout");
    }
    Vec z(l.size());
    for (int s = 1; s < l.k; ++s) z.segment(l.point(s), l.n) = interior[static_cast<std::size_t>(s - 1)];
    for (int s = 0; s < l.k; ++s) z[l.time(s)] = times[static_cast<std::size_t>(s)];
    z[l.param()] = param;
    return z;
  }

  static Unknowns unpack(const Vec& z, const Layout& l) {
    if (z.size() != l.size()) throw std::invalid_argument("unknown vector has wrong length");
    Unknowns u;
    for (int s = 1; s < l.k; ++s) u.interior.push_back(z.segment(l.point(s), l.n));
    for (int s = 0; s < l.k; ++s) u.times.push_back(z[l.time(s)]);
    u.param = z[l.param()];
    return u;
  }
};

enum class JacobianMode { Variational, FiniteDifference };

/// Wall-clock seconds spent integrating each segment, accumulated over calls.
struct SegmentClock {
  std::vector<double> seconds;
  void reset(int k) { seconds.assign(static_cast<std::size_t>(k), 0.0); }
};

/// Multiple-shooting problem: field, left boundary and one right boundary
/// condition per interval.
class ShootingProblem {
 public:
  ShootingProblem(VectorField field, LeftBoundary left, std::vector<BoundaryCondition> bcs,
                  IntegratorConfig integrator_cfg = {})
      : integrator(integrator_cfg), field_(std::move(field)), left_(std::move(left)) {
    if (field_.dim <= 0) throw std::invalid_argument("field dimension must be positive");
    if (left_.dim() != field_.dim) throw std::invalid_argument("left boundary dimension does not match the field");
    flow_ = left_.reverse_time() ? field_.reversed() : field_;
    set_bcs(std::move(bcs));
    integrator.validate();
  }

  IntegratorConfig integrator;
  int workers = 1;
  JacobianMode jacobian_mode = JacobianMode::Variational;
  /// Optional per-segment timing sink (not thread-shared across problems).
  std::shared_ptr<SegmentClock> clock;

  const VectorField& field() const { return field_; }
  /// The field actually integrated (time-reversed in stable-manifold mode).
  const VectorField& flow_field() const { return flow_; }
  const LeftBoundary& left() const { return left_; }
  const std::vector<BoundaryCondition>& bcs() const { return bcs_; }
  int dim() const { return field_.dim; }
  int intervals() const { return static_cast<int>(bcs_.size()); }
  Layout layout() const { return {field_.dim, intervals()}; }

  void set_bcs(std::vector<BoundaryCondition> bcs) {
    if (bcs.empty()) throw std::invalid_argument("at least one shooting interval is required");
    for (const auto& bc : bcs) {
      if (bc.kind == BoundaryCondition::Kind::Poincare && bc.normal.size() != field_.dim) {
        throw std::invalid_argument("Poincare normal has wrong length");
      }
    }
    bcs_ = std::move(bcs);
  }

 private:
  VectorField field_;
  VectorField flow_;
  LeftBoundary left_;
  std::vector<BoundaryCondition> bcs_;
};

/// Start point and physical integration time of each segment.
struct SegmentSetup {
  std::vector<Vec> starts;
  std::vector<double> durations;
};

inline SegmentSetup segment_setup(const ShootingProblem& p, const Vec& z) {
  const Layout l = p.layout();
  if (z.size() != l.size()) {
    throw std::invalid_argument("unknown vector has length " + std::to_string(z.size()) + ", expected " +
                                std::to_string(l.size()));
  }
  if (!z.allFinite()) throw std::invalid_argument("unknown vector is not finite");
  SegmentSetup s;
  s.starts.push_back(p.left().point(z[l.param()]));
  for (int i = 1; i < l.k; ++i) s.starts.push_back(z.segment(l.point(i), l.n));
  for (int i = 0; i < l.k; ++i) s.durations.push_back(z[l.time(i)] * p.left().time_scale());
  return s;
}

namespace detail {

class ScopedSegmentTimer {
 public:
  ScopedSegmentTimer(const std::shared_ptr<SegmentClock>& clock, std::size_t i) : clock_(clock.get()), i_(i) {
    if (clock_) start_ = std::chrono::steady_clock::now();
  }
  ~ScopedSegmentTimer() {
    if (clock_ && i_ < clock_->seconds.size()) {
      clock_->seconds[i_] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
  }
  ScopedSegmentTimer(const ScopedSegmentTimer&) = delete;
  ScopedSegmentTimer& operator=(const ScopedSegmentTimer&) = delete;

 private:
  SegmentClock* clock_;
  std::size_t i_;
  std::chrono::steady_clock::time_point start_;
};

inline void check_duration(std::size_t i, double t) {
  if (!(t > 0.0)) throw SegmentError(i, "integration time must be positive, got " + std::to_string(t));
}

template <class Fn>
void for_each_segment(const ShootingProblem& p, Fn&& fn) {
  const auto k = static_cast<std::size_t>(p.intervals());
  if (p.clock && p.clock->seconds.size() != k) p.clock->reset(static_cast<int>(k));
  parallel_for(k, p.workers, [&](std::size_t i) {
    ScopedSegmentTimer timer(p.clock, i);
    try {
      fn(i);
    } catch (const SegmentError&) {
      throw;
    } catch (const Error& e) {
      throw SegmentError(i, e.what());
    }
  });
}

}  // namespace detail

/// End point and arclength of every segment.
struct SegmentEnds {
  std::vector<Vec> ends;
  std::vector<double> arclength;
};

inline SegmentEnds segment_ends(const ShootingProblem& p, const Vec& z) {
  const SegmentSetup s = segment_setup(p, z);
  const auto k = static_cast<std::size_t>(p.intervals());
  SegmentEnds out;
  out.ends.resize(k);
  out.arclength.assign(k, 0.0);
  detail::for_each_segment(p, [&](std::size_t i) {
    detail::check_duration(i, s.durations[i]);
    const bool arc = p.bcs()[i].needs_arclength();
    const FlowEnd e = flow(p.flow_field(), s.starts[i], s.durations[i], p.integrator, arc);
    out.ends[i] = e.state;
    out.arclength[i] = e.arclength;
  });
  return out;
}

/// F(z): (k - 1) n gluing mismatches gamma_{i+1}(0) - gamma_i(T_i) followed
/// by the k right-BC residuals g_i - c_i.
inline Vec residual(const ShootingProblem& p, const Vec& z) {
  const Layout l = p.layout();
  const SegmentSetup s = segment_setup(p, z);
  const SegmentEnds e = segment_ends(p, z);
  Vec r(l.residual_size());
  for (int i = 0; i + 1 < l.k; ++i) {
    r.segment(i * l.n, l.n) = s.starts[static_cast<std::size_t>(i + 1)] - e.ends[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < l.k; ++i) {
    const auto& bc = p.bcs()[static_cast<std::size_t>(i)];
    const auto ui = static_cast<std::size_t>(i);
    double g = 0.0;
    switch (bc.kind) {
      case BoundaryCondition::Kind::FixedTime: g = s.durations[ui]; break;
      case BoundaryCondition::Kind::Poincare: g = bc.normal.dot(e.ends[ui]); break;
      case BoundaryCondition::Kind::Arclength: g = e.arclength[ui]; break;
    }
    r[l.bc_row(i)] = g - bc.target;
  }
  return r;
}

/// DF(z) v, computed from one extended integration per segment (or by
/// central differences of F in FiniteDifference mode).
inline Vec residual_derivative(const ShootingProblem& p, const Vec& z, const Vec& v) {
  const Layout l = p.layout();
  if (v.size() != l.size()) throw std::invalid_argument("direction has wrong length");
  if (p.jacobian_mode == JacobianMode::FiniteDifference) {
    const double vn = v.norm();
    if (vn == 0.0) return Vec::Zero(l.residual_size());
    const double h = 1e-6 * (1.0 + z.norm()) / vn;
    return (residual(p, z + h * v) - residual(p, z - h * v)) / (2.0 * h);
  }
  const SegmentSetup s = segment_setup(p, z);
  const auto k = static_cast<std::size_t>(l.k);
  const double scale = p.left().time_scale();
  std::vector<Vec> dend(k);
  std::vector<double> dbc(k, 0.0);
  detail::for_each_segment(p, [&](std::size_t i) {
    detail::check_duration(i, s.durations[i]);
    const int si = static_cast<int>(i);
    const Vec dx0 = i == 0 ? Vec(p.left().derivative(z[l.param()]) * v[l.param()]) : Vec(v.segment(l.point(si), l.n));
    const double dt = v[l.time(si)] * scale;
    const auto& bc = p.bcs()[i];
    const bool arc = bc.needs_arclength();
    const auto r = integrate_variational(p.flow_field(), s.starts[i], Mat(dx0), s.durations[i], p.integrator, arc);
    dend[i] = r.directions.col(0) + r.rate * dt;
    switch (bc.kind) {
      case BoundaryCondition::Kind::FixedTime: dbc[i] = dt; break;
      case BoundaryCondition::Kind::Poincare: dbc[i] = bc.normal.dot(dend[i]); break;
      case BoundaryCondition::Kind::Arclength: dbc[i] = r.arclength_gradient[0] + r.rate.norm() * dt; break;
    }
  });
  Vec out(l.residual_size());
  for (int i = 0; i + 1 < l.k; ++i) {
    out.segment(i * l.n, l.n) = v.segment(l.point(i + 1), l.n) - dend[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < l.k; ++i) out[l.bc_row(i)] = dbc[static_cast<std::size_t>(i)];
  return out;
}

/// Bordered product [DF(z); tangent^T] v.
inline Vec jacobian_apply(const ShootingProblem& p, const Vec& z, const Vec& tangent, const Vec& v) {
  const Layout l = p.layout();
  if (tangent.size() != l.size()) throw std::invalid_argument("tangent has wrong length");
  Vec out(l.size());
  out.head(l.residual_size()) = residual_derivative(p, z, v);
  out[l.size() - 1] = tangent.dot(v);
  return out;
}

inline LinearOperator bordered_operator(const ShootingProblem& p, const Vec& z, const Vec& tangent) {
  return {p.layout().size(), [&p, z, tangent](const Vec& v) -> Vec { return jacobian_apply(p, z, tangent, v); }};
}

/// Dense bordered matrix, column by column through jacobian_apply.
inline Mat assemble_dense(const ShootingProblem& p, const Vec& z, const Vec& tangent, int dense_limit = 2000) {
  const int nn = p.layout().size();
  if (nn > dense_limit) {
    throw std::invalid_argument("dense assembly of " + std::to_string(nn) + " unknowns exceeds the limit " +
                                std::to_string(dense_limit));
  }
  Mat a(nn, nn);
  for (int j = 0; j < nn; ++j) a.col(j) = jacobian_apply(p, z, tangent, Vec::Unit(nn, j));
  return a;
}

/// Unit vector e_N: the initial continuation tangent.
inline Vec initial_tangent(const Layout& l) { return Vec::Unit(l.size(), l.param()); }

struct SeedResult {
  Vec z;
  Vec tangent;
  std::vector<Trajectory> segments;
  std::vector<bool> grazing;
};

/// Initial solution by forward integration from the left boundary point,
/// cutting the trajectory at each successive right boundary condition.
/// `value` is eps for a periodic-orbit ray and theta for an equilibrium circle.
inline SeedResult seed_initial_solution(const ShootingProblem& p, double value, double t_max = 0.0) {
  const Layout l = p.layout();
  const double param = p.left().parameter_for(value);
  const double scale = p.left().time_scale();
  if (t_max <= 0.0) t_max = 100.0 * scale;
  Unknowns u;
  u.param = param;
  SeedResult out;
  Vec x = p.left().point(param);
  for (int i = 0; i < l.k; ++i) {
    const auto& bc = p.bcs()[static_cast<std::size_t>(i)];
    StopCondition stop;
    switch (bc.kind) {
      case BoundaryCondition::Kind::FixedTime: stop = StopCondition::at_time(bc.target); break;
      case BoundaryCondition::Kind::Arclength: stop = StopCondition::at_arclength(bc.target); break;
      case BoundaryCondition::Kind::Poincare: {
        const Vec w = bc.normal;
        const double c = bc.target;
        stop = StopCondition::on_event([w, c](const Vec& y) { return w.dot(y) - c; }, bc.crossing,
                                       [w](const Vec&) { return w; });
        break;
      }
    }
    StopResult r;
    try {
      r = integrate_until(p.flow_field(), x, stop, p.integrator, t_max);
    } catch (const Error& e) {
      throw SegmentError(static_cast<std::size_t>(i), std::string("seeding failed: ") + e.what());
    }
    if (i > 0) u.interior.push_back(x);
    u.times.push_back(r.hit_time / scale);
    x = r.trajectory.final_state();
    out.grazing.push_back(r.grazing);
    out.segments.push_back(std::move(r.trajectory));
  }
  out.z = u.pack(l);
  out.tangent = initial_tangent(l);
  return out;
}

}  // namespace orbitcont
