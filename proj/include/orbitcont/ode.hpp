#pragma once

#include <orbitcont/core.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace orbitcont {

/// Right-hand side f of an autonomous ODE x' = f(x), with an optional
/// analytic Jacobian action (x, v) -> Df(x) v.
struct VectorField {
  int dim = 0;
  std::function<Vec(const Vec&)> eval;
  std::function<Vec(const Vec&, const Vec&)> jacobian_action;

  Vec operator()(const Vec& x) const {
    Vec out = eval(x);
    if (out.size() != dim) {
      throw std::invalid_argument("vector field returned length " + std::to_string(out.size()) +
                                  ", expected " + std::to_string(dim));
    }
    return out;
  }

  bool has_analytic_jacobian() const { return static_cast<bool>(jacobian_action); }

  /// Df(x) v. Falls back to a central difference along v/|v| with step
  /// sqrt(eps) (1 + |x|) when no analytic action was supplied.
  Vec jacobian(const Vec& x, const Vec& v) const {
    if (jacobian_action) return jacobian_action(x, v);
    return jacobian_fd(x, v);
  }

  Vec jacobian_fd(const Vec& x, const Vec& v) const {
    const double vn = v.norm();
    if (vn == 0.0) return Vec::Zero(dim);
    const double h = std::sqrt(std::numeric_limits<double>::epsilon()) * (1.0 + x.norm());
    const Vec dir = v / vn;
    return vn * ((*this)(x + h * dir) - (*this)(x - h * dir)) / (2.0 * h);
  }

  /// The same field with time running backwards, x' = -f(x).
  VectorField reversed() const {
    VectorField r;
    r.dim = dim;
    auto f = eval;
    r.eval = [f](const Vec& x) -> Vec { return -f(x); };
    if (jacobian_action) {
      auto j = jacobian_action;
      r.jacobian_action = [j](const Vec& x, const Vec& v) -> Vec { return -j(x, v); };
    }
    return r;
  }
};

/// Settings of the embedded Dormand-Prince 5(4) integrator.
struct IntegratorConfig {
  double rel_tol = 1e-10;
  double abs_tol = 1e-12;
  double max_step = std::numeric_limits<double>::infinity();
  long max_steps = 2'000'000;
  /// Absolute tolerance on the event function when locating stop events.
  double event_tol = 1e-10;

  void validate() const {
    if (!(rel_tol > 0.0) || !(abs_tol > 0.0)) throw std::invalid_argument("integrator tolerances must be positive");
    if (!(max_step > 0.0)) throw std::invalid_argument("max_step must be positive");
    if (max_steps <= 0) throw std::invalid_argument("max_steps must be positive");
    if (!(event_tol > 0.0)) throw std::invalid_argument("event_tol must be positive");
  }

  bool operator==(const IntegratorConfig&) const = default;
};

/// Sampled solution x(t) on [0, T] with cubic Hermite dense output.
/// Optionally carries the accumulated arclength s(t) = int_0^t |f(x)| dt.
class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(std::vector<double> times, std::vector<Vec> states, std::vector<Vec> rates,
             std::vector<double> arclength = {})
      : times_(std::move(times)),
        states_(std::move(states)),
        rates_(std::move(rates)),
        arclength_(std::move(arclength)) {
    if (times_.empty() || times_.size() != states_.size() || times_.size() != rates_.size()) {
      throw std::invalid_argument("trajectory: inconsistent sample arrays");
    }
    if (!arclength_.empty() && arclength_.size() != times_.size()) {
      throw std::invalid_argument("trajectory: arclength samples do not match times");
    }
  }

  const std::vector<double>& times() const { return times_; }
  const std::vector<Vec>& states() const { return states_; }
  const std::vector<Vec>& rates() const { return rates_; }
  const std::vector<double>& arclength() const { return arclength_; }
  bool has_arclength() const { return !arclength_.empty(); }

  std::size_t size() const { return times_.size(); }
  int dim() const { return static_cast<int>(states_.front().size()); }
  double final_time() const { return times_.back(); }
  const Vec& initial_state() const { return states_.front(); }
  const Vec& final_state() const { return states_.back(); }

  Vec dense_eval(double t) const {
    const auto [i, theta, h] = locate(t);
    if (theta == 0.0) return states_[i];
    if (theta == 1.0) return states_[i + 1];
    const double t2 = theta * theta, t3 = t2 * theta;
    const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + theta;
    const double h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
    return h00 * states_[i] + (h10 * h) * rates_[i] + h01 * states_[i + 1] + (h11 * h) * rates_[i + 1];
  }

  /// Arclength at time t, Hermite-interpolated with |f| as the derivative.
  double arclength_at(double t) const {
    if (!has_arclength()) throw std::logic_error("trajectory carries no arclength");
    const auto [i, theta, h] = locate(t);
    if (theta == 0.0) return arclength_[i];
    if (theta == 1.0) return arclength_[i + 1];
    const double t2 = theta * theta, t3 = t2 * theta;
    const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + theta;
    const double h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
    return h00 * arclength_[i] + h10 * h * rates_[i].norm() + h01 * arclength_[i + 1] +
           h11 * h * rates_[i + 1].norm();
  }

 private:
  struct Where {
    std::size_t index;
    double theta;
    double h;
  };

  Where locate(double t) const {
    if (!(t >= times_.front() && t <= times_.back())) {
      throw std::out_of_range("dense_eval: t outside trajectory range");
    }
    if (times_.size() == 1) return {0, 0.0, 0.0};
    auto it = std::upper_bound(times_.begin(), times_.end(), t);
    std::size_t i = (it == times_.begin()) ? 0 : static_cast<std::size_t>(it - times_.begin()) - 1;
    if (i >= times_.size() - 1) return {times_.size() - 2, 1.0, times_.back() - times_[times_.size() - 2]};
    const double h = times_[i + 1] - times_[i];
    if (t == times_[i]) return {i, 0.0, h};
    return {i, (t - times_[i]) / h, h};
  }

  std::vector<double> times_;
  std::vector<Vec> states_;
  std::vector<Vec> rates_;
  std::vector<double> arclength_;
};

namespace detail {

/// Dormand-Prince 5(4) pair with FSAL and standard step-size control.
/// `Rhs` is callable as rhs(const Vec& y, Vec& dy).
template <class Rhs>
class Dopri5 {
 public:
  Dopri5(Rhs rhs, const IntegratorConfig& cfg) : rhs_(std::move(rhs)), cfg_(cfg) { cfg_.validate(); }

  /// One trial step of size h from (y, k1 = f(y)). Returns the scaled error
  /// norm; y_new and k_new = f(y_new) are filled.
  double attempt(const Vec& y, const Vec& k1, double h, Vec& y_new, Vec& k_new) {
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                            e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

    const Eigen::Index m = y.size();
    k2_.resize(m), k3_.resize(m), k4_.resize(m), k5_.resize(m), k6_.resize(m), k_new.resize(m);
    rhs_(y + h * (a21 * k1), k2_);
    rhs_(y + h * (a31 * k1 + a32 * k2_), k3_);
    rhs_(y + h * (a41 * k1 + a42 * k2_ + a43 * k3_), k4_);
    rhs_(y + h * (a51 * k1 + a52 * k2_ + a53 * k3_ + a54 * k4_), k5_);
    rhs_(y + h * (a61 * k1 + a62 * k2_ + a63 * k3_ + a64 * k4_ + a65 * k5_), k6_);
    y_new = y + h * (b1 * k1 + b3 * k3_ + b4 * k4_ + b5 * k5_ + b6 * k6_);
    rhs_(y_new, k_new);
    const Vec err = h * (e1 * k1 + e3 * k3_ + e4 * k4_ + e5 * k5_ + e6 * k6_ + e7 * k_new);
    return error_norm(err, y, y_new);
  }

  /// State after a single step of size h (no error control); used to
  /// evaluate stop events consistently with the step sequence.
  Vec evaluate(const Vec& y, const Vec& k1, double h) {
    Vec y_new, k_new;
    attempt(y, k1, h, y_new, k_new);
    return y_new;
  }

  Vec rate(const Vec& y) {
    Vec k(y.size());
    rhs_(y, k);
    return k;
  }

  /// Integrates y from 0 to t_final. `hook(t0, y0, k0, t1, y1, k1)` sees
  /// every accepted step and may return true to stop early, in which case
  /// the hook owns the final state. Returns the number of accepted steps.
  template <class Hook>
  long run(const Vec& y0, double t_final, Hook&& hook) {
    if (!(t_final >= 0.0) || !std::isfinite(t_final)) {
      throw IntegrationError(IntegrationError::Reason::BadInput, 0.0,
                             "integration end time must be finite and non-negative");
    }
    if (!all_finite(y0)) {
      throw IntegrationError(IntegrationError::Reason::NonFinite, 0.0, "non-finite initial state");
    }
    Vec y = y0;
    Vec k = rate(y);
    if (t_final == 0.0) return 0;

    double t = 0.0;
    double h = std::min(initial_step(y, k), t_final);
    Vec y_new, k_new;
    long accepted = 0, attempts = 0;
    bool rejected_last = false, nonfinite_last = false;
    while (t < t_final) {
      if (++attempts > cfg_.max_steps) {
        throw IntegrationError(IntegrationError::Reason::TooManySteps, t, "step budget exhausted");
      }
      bool last = false;
      if (h >= t_final - t) {
        h = t_final - t;
        last = true;
      }
      const double err = attempt(y, k, h, y_new, k_new);
      if (!std::isfinite(err) || !all_finite(y_new)) {
        nonfinite_last = true;
        rejected_last = true;
        h *= 0.1;
      } else if (err <= 1.0) {
        const double t_new = last ? t_final : t + h;
        ++accepted;
        if (hook(t, y, k, t_new, y_new, k_new)) return accepted;
        t = t_new;
        y.swap(y_new);
        k.swap(k_new);
        double fac = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
        if (rejected_last) fac = std::min(fac, 1.0);
        h *= fac;
        rejected_last = nonfinite_last = false;
      } else {
        h *= std::max(0.2, 0.9 * std::pow(err, -0.2));
        rejected_last = true;
      }
      h = std::min(h, cfg_.max_step);
      if (t < t_final && h < 1e-14 * std::max(1.0, std::abs(t))) {
        if (nonfinite_last) {
          throw IntegrationError(IntegrationError::Reason::NonFinite, t,
                                 "solution became non-finite at t = " + std::to_string(t));
        }
        throw IntegrationError(IntegrationError::Reason::StepSizeUnderflow, t,
                               "step size underflow at t = " + std::to_string(t));
      }
    }
    return accepted;
  }

 private:
  double error_norm(const Vec& err, const Vec& y, const Vec& y_new) const {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < err.size(); ++i) {
      const double sc = cfg_.abs_tol + cfg_.rel_tol * std::max(std::abs(y[i]), std::abs(y_new[i]));
      const double r = err[i] / sc;
      sum += r * r;
    }
    return std::sqrt(sum / static_cast<double>(err.size()));
  }

  double scaled_norm(const Vec& v, const Vec& y) const {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double r = v[i] / (cfg_.abs_tol + cfg_.rel_tol * std::abs(y[i]));
      sum += r * r;
    }
    return std::sqrt(sum / static_cast<double>(v.size()));
  }

  // Hairer, Norsett & Wanner starting step heuristic.
  double initial_step(const Vec& y, const Vec& k) {
    const double d0 = scaled_norm(y, y), d1 = scaled_norm(k, y);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, cfg_.max_step);
    const Vec y1 = y + h0 * k;
    const Vec k1 = rate(y1);
    const double d2 = scaled_norm(k1 - k, y) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    return std::min({100.0 * h0, h1, cfg_.max_step});
  }

  Rhs rhs_;
  IntegratorConfig cfg_;
  Vec k2_, k3_, k4_, k5_, k6_;
};

template <class Rhs>
Dopri5<Rhs> make_stepper(Rhs rhs, const IntegratorConfig& cfg) {
  return Dopri5<Rhs>(std::move(rhs), cfg);
}

// y = [x; s?], s' = |f(x)|.
struct FlowRhs {
  const VectorField* field;
  bool arclength;

  void operator()(const Vec& y, Vec& dy) const {
    const int n = field->dim;
    const Vec fx = (*field)(y.head(n));
    dy.head(n) = fx;
    if (arclength) dy[n] = fx.norm();
  }
};

// y = [x; V (n*m, column-major); s; s_V (m)]; V' = Df V and
// s_V' = f . (Df V) / |f| when arclength sensitivities are requested.
struct VariationalRhs {
  const VectorField* field;
  int m;
  bool arclength;

  void operator()(const Vec& y, Vec& dy) const {
    const int n = field->dim;
    const Vec x = y.head(n);
    const Vec fx = (*field)(x);
    dy.head(n) = fx;
    const double speed = fx.norm();
    for (int j = 0; j < m; ++j) {
      const Vec vj = y.segment(n + j * n, n);
      const Vec jv = field->jacobian(x, vj);
      dy.segment(n + j * n, n) = jv;
      if (arclength) dy[n + n * m + 1 + j] = speed > 0.0 ? fx.dot(jv) / speed : 0.0;
    }
    if (arclength) dy[n + n * m] = speed;
  }
};

inline void check_start(const VectorField& field, const Vec& x0) {
  if (x0.size() != field.dim) {
    throw std::invalid_argument("initial state has length " + std::to_string(x0.size()) + ", expected " +
                                std::to_string(field.dim));
  }
}

}  // namespace detail

/// Endpoint of the flow, optionally with the accumulated arclength.
struct FlowEnd {
  Vec state;
  double arclength = 0.0;
};

/// phi(x0, t_final) without storing the trajectory.
inline FlowEnd flow(const VectorField& field, const Vec& x0, double t_final, const IntegratorConfig& cfg,
                    bool with_arclength = false) {
  detail::check_start(field, x0);
  const int n = field.dim;
  Vec y0(n + (with_arclength ? 1 : 0));
  y0.head(n) = x0;
  if (with_arclength) y0[n] = 0.0;
  Vec end = y0;
  auto stepper = detail::make_stepper(detail::FlowRhs{&field, with_arclength}, cfg);
  stepper.run(y0, t_final, [&](double, const Vec&, const Vec&, double, const Vec& y1, const Vec&) {
    end = y1;
    return false;
  });
  return {end.head(n), with_arclength ? end[n] : 0.0};
}

/// Integrates x' = f(x) from x0 over [0, t_final] and records every step.
inline Trajectory integrate(const VectorField& field, const Vec& x0, double t_final, const IntegratorConfig& cfg,
                            bool with_arclength = false) {
  detail::check_start(field, x0);
  const int n = field.dim;
  Vec y0(n + (with_arclength ? 1 : 0));
  y0.head(n) = x0;
  if (with_arclength) y0[n] = 0.0;

  std::vector<double> times{0.0}, arc;
  std::vector<Vec> states{x0}, rates;
  auto stepper = detail::make_stepper(detail::FlowRhs{&field, with_arclength}, cfg);
  rates.push_back(field(x0));
  if (with_arclength) arc.push_back(0.0);
  stepper.run(y0, t_final, [&](double, const Vec&, const Vec&, double t1, const Vec& y1, const Vec& k1) {
    times.push_back(t1);
    states.push_back(y1.head(n));
    rates.push_back(k1.head(n));
    if (with_arclength) arc.push_back(y1[n]);
    return false;
  });
  return Trajectory(std::move(times), std::move(states), std::move(rates), std::move(arc));
}

/// Result of integrating the first variational equations along a flow.
struct VariationalEnd {
  Vec state;              ///< phi(x0, T)
  Mat directions;         ///< Dphi(x0, T) V0
  Vec rate;               ///< f(phi(x0, T))
  double arclength = 0.0; ///< int_0^T |f|
  Vec arclength_gradient; ///< derivative of the arclength along each column of V0
};

/// Integrates x together with V' = Df(x) V for the columns of V0, on one
/// shared error controller.
inline VariationalEnd integrate_variational(const VectorField& field, const Vec& x0, const Mat& v0, double t_final,
                                            const IntegratorConfig& cfg, bool with_arclength = false) {
  detail::check_start(field, x0);
  const int n = field.dim;
  if (v0.rows() != n) throw std::invalid_argument("direction block must have field.dim rows");
  const int m = static_cast<int>(v0.cols());
  const int size = n + n * m + (with_arclength ? 1 + m : 0);
  Vec y0 = Vec::Zero(size);
  y0.head(n) = x0;
  for (int j = 0; j < m; ++j) y0.segment(n + j * n, n) = v0.col(j);

  Vec end = y0;
  auto stepper = detail::make_stepper(detail::VariationalRhs{&field, m, with_arclength}, cfg);
  stepper.run(y0, t_final, [&](double, const Vec&, const Vec&, double, const Vec& y1, const Vec&) {
    end = y1;
    return false;
  });

  VariationalEnd out;
  out.state = end.head(n);
  out.directions = Eigen::Map<const Mat>(end.data() + n, n, m);
  out.rate = field(out.state);
  if (with_arclength) {
    out.arclength = end[n + n * m];
    out.arclength_gradient = end.segment(n + n * m + 1, m);
  } else {
    out.arclength_gradient = Vec::Zero(m);
  }
  return out;
}

/// (phi(x0, T), Dphi(x0, T) v0).
inline std::pair<Vec, Vec> integrate_extended(const VectorField& field, const Vec& x0, const Vec& v0, double t_final,
                                              const IntegratorConfig& cfg) {
  if (v0.size() != field.dim) throw std::invalid_argument("direction must have length field.dim");
  auto r = integrate_variational(field, x0, Mat(v0), t_final, cfg, false);
  return {std::move(r.state), r.directions.col(0)};
}

enum class Crossing { Any, Rising, Falling };

/// When to terminate integrate_until.
struct StopCondition {
  enum class Kind { Event, Arclength, Time };

  Kind kind = Kind::Time;
  double target = 0.0;
  Crossing crossing = Crossing::Any;
  std::function<double(const Vec&)> event;
  /// Optional gradient of the event function, used for the grazing check.
  std::function<Vec(const Vec&)> event_gradient;

  /// Zero of g(x), approached in the given direction.
  static StopCondition on_event(std::function<double(const Vec&)> g, Crossing c = Crossing::Any,
                                std::function<Vec(const Vec&)> grad = {}) {
    StopCondition s;
    s.kind = Kind::Event;
    s.event = std::move(g);
    s.crossing = c;
    s.event_gradient = std::move(grad);
    return s;
  }
  static StopCondition at_arclength(double c) {
    if (!(c > 0.0)) throw std::invalid_argument("arclength target must be positive");
    StopCondition s;
    s.kind = Kind::Arclength;
    s.target = c;
    s.crossing = Crossing::Rising;
    return s;
  }
  static StopCondition at_time(double c) {
    if (!(c >= 0.0)) throw std::invalid_argument("time target must be non-negative");
    StopCondition s;
    s.kind = Kind::Time;
    s.target = c;
    return s;
  }
};

struct StopResult {
  Trajectory trajectory;  ///< truncated at the hit; ends at (hit_time, state at hit)
  double hit_time = 0.0;
  double event_rate = 0.0;  ///< d g / dt at the hit
  bool grazing = false;     ///< |d g / dt| below the grazing threshold
};

/// Integrates until the stop condition fires. Events are bracketed on
/// accepted steps and located by bisection followed by secant (Illinois)
/// refinement, each trial point being a single integrator step from the
/// start of the bracketing step.
inline StopResult integrate_until(const VectorField& field, const Vec& x0, const StopCondition& stop,
                                  const IntegratorConfig& cfg, double t_max, double grazing_tol = 1e-8) {
  detail::check_start(field, x0);
  if (stop.kind == StopCondition::Kind::Time) {
    if (stop.target > t_max) throw EventNotFound("time target beyond t_max");
    const bool arc = false;
    Trajectory tr = integrate(field, x0, stop.target, cfg, arc);
    StopResult r{std::move(tr), stop.target, 1.0, false};
    return r;
  }
  if (!(t_max > 0.0)) throw std::invalid_argument("t_max must be positive");

  const int n = field.dim;
  const bool with_arc = stop.kind == StopCondition::Kind::Arclength;
  auto g_of = [&](const Vec& y) -> double {
    if (with_arc) return y[n] - stop.target;
    return stop.event(y.head(n));
  };

  Vec y0(n + (with_arc ? 1 : 0));
  y0.head(n) = x0;
  if (with_arc) y0[n] = 0.0;

  auto stepper = detail::make_stepper(detail::FlowRhs{&field, with_arc}, cfg);
  std::vector<double> times{0.0}, arc;
  std::vector<Vec> states{x0}, rates{field(x0)};
  if (with_arc) arc.push_back(0.0);

  const double arm_tol = 100.0 * cfg.event_tol;
  double g_prev = g_of(y0);
  bool armed = std::abs(g_prev) > arm_tol;
  bool hit = false;
  double hit_time = 0.0;

  auto record = [&](double t, const Vec& y, const Vec& k) {
    times.push_back(t);
    states.push_back(y.head(n));
    rates.push_back(k.head(n));
    if (with_arc) arc.push_back(y[n]);
  };

  auto crosses = [&](double ga, double gb) {
    switch (stop.crossing) {
      case Crossing::Rising: return ga < 0.0 && gb >= 0.0;
      case Crossing::Falling: return ga > 0.0 && gb <= 0.0;
      case Crossing::Any: return (ga < 0.0 && gb >= 0.0) || (ga > 0.0 && gb <= 0.0);
    }
    return false;
  };

  stepper.run(y0, t_max, [&](double t0, const Vec& ya, const Vec& ka, double t1, const Vec& yb, const Vec& kb) {
    const double gb = g_of(yb);
    if (!armed) {
      armed = std::abs(gb) > arm_tol;
      g_prev = gb;
      record(t1, yb, kb);
      return false;
    }
    if (!crosses(g_prev, gb)) {
      g_prev = gb;
      record(t1, yb, kb);
      return false;
    }
    // Root of g on (0, h] along the one-step map from (t0, ya).
    const double h = t1 - t0;
    double a = 0.0, ga = g_prev, b = h, gbb = gb;
    double theta = h;
    Vec y_hit = yb;
    double g_hit = gb;
    int side = 0;
    for (int it = 0; it < 200 && std::abs(g_hit) > cfg.event_tol; ++it) {
      double trial;
      if (it < 4) {
        trial = 0.5 * (a + b);
      } else {
        trial = b - gbb * (b - a) / (gbb - ga);
        if (!(trial > a && trial < b)) trial = 0.5 * (a + b);
      }
      Vec y_t = stepper.evaluate(ya, ka, trial);
      const double g_t = g_of(y_t);
      theta = trial;
      y_hit = std::move(y_t);
      g_hit = g_t;
      if ((g_t < 0.0) == (ga < 0.0)) {
        a = trial;
        ga = g_t;
        if (side == -1) gbb *= 0.5;
        side = -1;
      } else {
        b = trial;
        gbb = g_t;
        if (side == 1) ga *= 0.5;
        side = 1;
      }
      if (b - a <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, t1)) break;
    }
    hit = true;
    hit_time = (theta == h) ? t1 : t0 + theta;
    record(hit_time, y_hit, stepper.rate(y_hit));
    return true;
  });

  if (!hit) {
    throw EventNotFound("stop condition not met before t_max = " + std::to_string(t_max));
  }

  const Vec& x_hit = states.back();
  const Vec f_hit = rates.back();
  double rate = 0.0;
  double scale = 1.0;
  if (with_arc) {
    rate = f_hit.norm();
  } else if (stop.event_gradient) {
    const Vec grad = stop.event_gradient(x_hit);
    rate = grad.dot(f_hit);
    scale = grad.norm() * f_hit.norm();
  } else {
    const double fn = f_hit.norm();
    if (fn > 0.0) {
      const double h = 1e-7 * (1.0 + x_hit.norm()) / fn;
      rate = (stop.event(x_hit + h * f_hit) - stop.event(x_hit - h * f_hit)) / (2.0 * h);
    }
    scale = fn;
  }
  StopResult r;
  r.trajectory = Trajectory(std::move(times), std::move(states), std::move(rates), std::move(arc));
  r.hit_time = hit_time;
  r.event_rate = rate;
  r.grazing = std::abs(rate) < grazing_tol * std::max(scale, 1e-300);
  return r;
}

}  // namespace orbitcont
