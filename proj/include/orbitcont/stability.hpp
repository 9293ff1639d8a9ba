#pragma once

#include <orbitcont/krylov.hpp>
#include <orbitcont/ode.hpp>

#include <cmath>
#include <complex>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace orbitcont {

/// Hyperbolic periodic orbit through base_point with its leading Floquet pair.
/// mu1 is NaN and u1 empty until leading_floquet has been run.
struct PeriodicOrbit {
  Vec base_point;
  double period = 0.0;
  double mu1 = std::numeric_limits<double>::quiet_NaN();
  Vec u1;
  double residual = 0.0;  ///< |phi(base_point, period) - base_point|

  bool has_floquet() const { return std::isfinite(mu1) && u1.size() == base_point.size(); }
};

/// Leading-multiplier computation failed; carries the Ritz values seen.
class FloquetError : public Error {
 public:
  FloquetError(const std::string& what, std::vector<std::complex<double>> ritz)
      : Error(what), ritz_(std::move(ritz)) {}
  const std::vector<std::complex<double>>& ritz_values() const noexcept { return ritz_; }
  const char* kind() const noexcept override { return "floquet"; }

 private:
  std::vector<std::complex<double>> ritz_;
};

/// M v = Dphi(x_bar, P) v.
inline Vec monodromy_action(const PeriodicOrbit& po, const Vec& v, const VectorField& field,
                            const IntegratorConfig& cfg) {
  if (!(v.norm() > 0.0)) throw std::invalid_argument("monodromy_action: direction must be nonzero");
  return integrate_extended(field, po.base_point, v, po.period, cfg).second;
}

/// Makes the first entry with magnitude above 1e-10 positive.
inline Vec canonical_sign(Vec u) {
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    if (std::abs(u[i]) > 1e-10) {
      if (u[i] < 0.0) u = -u;
      break;
    }
  }
  return u;
}

struct FloquetConfig {
  double eig_tol = 1e-8;
  int max_dim = 30;
  int max_restarts = 25;
  unsigned seed = 7;
  /// Run a second Arnoldi sequence from an independent start vector and
  /// reject the result if the two disagree (non-simple leading multiplier).
  bool check_simple = true;

  bool operator==(const FloquetConfig&) const = default;
};

struct FloquetResult {
  double mu1 = 0.0;
  Vec u1;
  double residual = 0.0;  ///< |M u1 - mu1 u1|
  int restarts = 0;
  std::vector<std::complex<double>> ritz_values;
};

namespace detail {

inline Vec random_unit(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = normal(rng);
  return v / v.norm();
}

// Dominant eigenpair of the monodromy matrix by explicitly restarted
// Householder Arnoldi. The flow direction f(x_bar), an eigenvector for the
// trivial multiplier 1, is removed by Wielandt deflation M - f y^T with
// y = f / |f|^2; eigenvectors of M are recovered afterwards.
inline FloquetResult dominant_pair(const PeriodicOrbit& po, const VectorField& field, const IntegratorConfig& cfg,
                                   const FloquetConfig& fc, Vec start) {
  const int n = field.dim;
  const Vec f = field(po.base_point);
  const bool deflate = f.norm() > 1e-12 * (1.0 + po.base_point.norm());
  const Vec y = deflate ? Vec(f / f.squaredNorm()) : Vec::Zero(n);
  const LinearOperator mono{n, [&](const Vec& v) -> Vec {
                              if (v.norm() == 0.0) return Vec::Zero(n);
                              return monodromy_action(po, v, field, cfg);
                            }};
  const LinearOperator op{n, [&](const Vec& v) -> Vec {
                            Vec w = mono(v);
                            if (deflate) w -= f * y.dot(v);
                            return w;
                          }};
  const int m = std::min(n, std::max(1, fc.max_dim));

  FloquetResult out;
  for (int restart = 0; restart <= fc.max_restarts; ++restart) {
    HouseholderArnoldi arnoldi(op, start);
    std::vector<Vec> cols;
    while (arnoldi.size() < m && !arnoldi.breakdown()) cols.push_back(arnoldi.step());
    const int s = arnoldi.size();
    if (s == 0) throw FloquetError("Arnoldi produced an empty Krylov space", {});
    Mat h = Mat::Zero(s, s);
    for (int j = 0; j < s; ++j) {
      const int rows = std::min<int>(s, static_cast<int>(cols[static_cast<std::size_t>(j)].size()));
      h.col(j).head(rows) = cols[static_cast<std::size_t>(j)].head(rows);
    }
    Eigen::EigenSolver<Mat> es(h);
    const auto vals = es.eigenvalues();
    out.ritz_values.assign(vals.data(), vals.data() + vals.size());
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < vals.size(); ++i)
      if (std::abs(vals[i]) > std::abs(vals[best])) best = i;
    const std::complex<double> lam = vals[best];
    if (std::abs(lam.imag()) > 1e-8 * std::abs(lam)) {
      throw FloquetError("leading multiplier is complex", out.ritz_values);
    }
    Vec ritz_vec = es.eigenvectors().col(best).real();
    Vec u = arnoldi.combine(ritz_vec);
    u.normalize();
    const double mu = lam.real();
    if (deflate && std::abs(mu - 1.0) > 1e-12) u += f * (y.dot(u) / (mu - 1.0));
    u.normalize();
    const Vec mu_vec = mono(u);
    out.mu1 = mu;
    out.u1 = u;
    out.residual = (mu_vec - mu * u).norm();
    out.restarts = restart;
    if (out.residual <= fc.eig_tol * std::abs(mu)) return out;
    start = mu_vec / mu_vec.norm();
  }
  throw FloquetError("Arnoldi did not converge: residual " + std::to_string(out.residual), out.ritz_values);
}

}  // namespace detail

/// Leading Floquet multiplier and unit eigenvector of the monodromy matrix,
/// with the sign fixed by canonical_sign.
inline FloquetResult leading_floquet(const PeriodicOrbit& po, const VectorField& field, const IntegratorConfig& cfg,
                                     const FloquetConfig& fc = {}) {
  if (po.base_point.size() != field.dim || !(po.period > 0.0)) {
    throw std::invalid_argument("leading_floquet: invalid periodic orbit");
  }
  std::mt19937_64 rng(fc.seed);
  const Vec s1 = detail::random_unit(field.dim, rng);
  FloquetResult a = detail::dominant_pair(po, field, cfg, fc, s1);
  if (fc.check_simple && field.dim > 1) {
    const Vec s2 = detail::random_unit(field.dim, rng);
    FloquetResult b = detail::dominant_pair(po, field, cfg, fc, s2);
    const bool same_value = std::abs(a.mu1 - b.mu1) <= 10.0 * fc.eig_tol * std::abs(a.mu1);
    const bool same_vector = std::abs(a.u1.dot(b.u1)) >= 1.0 - 1e-6;
    if (!same_value || !same_vector) {
      auto ritz = a.ritz_values;
      ritz.insert(ritz.end(), b.ritz_values.begin(), b.ritz_values.end());
      throw FloquetError("leading multiplier is not simple (independent Arnoldi runs disagree)", ritz);
    }
  }
  a.u1 = canonical_sign(a.u1);
  return a;
}

/// Attaches the leading Floquet pair to the orbit.
inline PeriodicOrbit with_floquet(PeriodicOrbit po, const VectorField& field, const IntegratorConfig& cfg,
                                  const FloquetConfig& fc = {}) {
  const auto r = leading_floquet(po, field, cfg, fc);
  po.mu1 = r.mu1;
  po.u1 = r.u1;
  return po;
}

struct RefineConfig {
  double po_tol = 1e-9;  ///< on |phi(x, P) - x| / (1 + |x|)
  int max_iter = 20;
  double gmres_tol = 1e-10;
  double divergence_factor = 1e4;
};

struct RefineReport {
  std::vector<double> residual_history;
  int iterations = 0;  ///< Newton updates performed
};

/// Newton-Krylov solve of phi(x, P) - x = 0 with the phase condition
/// f(guess) . (x - guess) = 0.
inline PeriodicOrbit refine_periodic_orbit(const Vec& guess_point, double guess_period, const VectorField& field,
                                           const IntegratorConfig& cfg, const RefineConfig& rc = {},
                                           RefineReport* report = nullptr) {
  const int n = field.dim;
  if (guess_point.size() != n) throw std::invalid_argument("refine_periodic_orbit: guess has wrong length");
  if (!(guess_period > 0.0)) throw std::invalid_argument("refine_periodic_orbit: period must be positive");
  const Vec anchor = guess_point;
  const Vec normal = field(anchor);
  if (normal.norm() == 0.0) throw Error("refine_periodic_orbit: guess is an equilibrium");

  Vec x = guess_point;
  double period = guess_period;
  RefineReport rep;
  double first = 0.0;
  for (int it = 0;; ++it) {
    Vec end;
    try {
      end = flow(field, x, period, cfg).state;
    } catch (const IntegrationError& e) {
      throw ConvergenceError(std::string("periodic orbit Newton left the integrable region: ") + e.what(),
                             rep.residual_history);
    }
    const Vec r = end - x;
    const double res = r.norm();
    rep.residual_history.push_back(res);
    if (it == 0) first = res;
    if (!std::isfinite(res) || res > rc.divergence_factor * std::max(first, 1e-300)) {
      throw ConvergenceError("periodic orbit Newton diverged", rep.residual_history);
    }
    if (res <= rc.po_tol * (1.0 + x.norm())) {
      rep.iterations = it;
      if (report) *report = rep;
      PeriodicOrbit po;
      po.base_point = x;
      po.period = period;
      po.residual = res;
      return po;
    }
    if (it >= rc.max_iter) {
      throw ConvergenceError("periodic orbit Newton did not converge in " + std::to_string(rc.max_iter) +
                                 " iterations",
                             rep.residual_history);
    }
    const Vec f_end = field(end);
    const LinearOperator op{n + 1, [&](const Vec& v) -> Vec {
                              Vec out(n + 1);
                              const Vec dx = v.head(n);
                              Vec dphi = dx.norm() == 0.0 ? Vec::Zero(n)
                                                           : integrate_extended(field, x, dx, period, cfg).second;
                              out.head(n) = dphi - dx + f_end * v[n];
                              out[n] = normal.dot(dx);
                              return out;
                            }};
    Vec rhs(n + 1);
    rhs.head(n) = -r;
    rhs[n] = -normal.dot(x - anchor);
    const auto sol = gmres(op, rhs, rc.gmres_tol, std::min(n + 1, 200));
    if (sol.residual_history.back() > 0.5) {
      throw ConvergenceError("periodic orbit Newton system is singular (phase condition tangent to flow?)",
                             rep.residual_history);
    }
    x += sol.solution.head(n);
    period += sol.solution[n];
    // A period collapsing to zero makes phi(x, P) = x trivially true.
    if (!(period > 1e-6 * guess_period) || !x.allFinite()) {
      throw ConvergenceError("periodic orbit Newton produced an invalid iterate", rep.residual_history);
    }
  }
}

/// Estimate of |Dphi(x0, T)|_2: the largest singular value of Dphi applied
/// to an orthonormal set of `probes` random directions (exact when
/// probes >= dim).
inline double segment_amplification(const VectorField& field, const Vec& x0, double t, const IntegratorConfig& cfg,
                                    int probes = 4, unsigned seed = 11) {
  if (!(t >= 0.0)) throw std::invalid_argument("segment_amplification: T must be non-negative");
  if (t == 0.0) return 1.0;
  const int n = field.dim;
  const int p = std::clamp(probes, 1, n);
  Mat v;
  if (p == n) {
    v = Mat::Identity(n, n);
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Mat g(n, p);
    for (int j = 0; j < p; ++j)
      for (int i = 0; i < n; ++i) g(i, j) = normal(rng);
    Eigen::HouseholderQR<Mat> qr(g);
    v = qr.householderQ() * Mat::Identity(n, p);
  }
  const auto r = integrate_variational(field, x0, v, t, cfg);
  Eigen::JacobiSVD<Mat> svd(r.directions);
  return svd.singularValues()[0];
}

/// Unstable plane of an equilibrium with exactly two eigenvalues of positive
/// real part (dense Jacobian; small systems only).
struct UnstablePlane {
  Vec e1, e2;               ///< orthonormal basis
  double reference_time = 1.0;  ///< 1 / sqrt(|lambda_1 lambda_2|)
  std::vector<std::complex<double>> eigenvalues;
};

inline UnstablePlane equilibrium_unstable_plane(const VectorField& field, const Vec& x_eq) {
  const int n = field.dim;
  Mat jac(n, n);
  for (int j = 0; j < n; ++j) jac.col(j) = field.jacobian(x_eq, Vec::Unit(n, j));
  Eigen::EigenSolver<Mat> es(jac);
  const auto vals = es.eigenvalues();
  UnstablePlane out;
  out.eigenvalues.assign(vals.data(), vals.data() + vals.size());
  std::vector<Eigen::Index> unstable;
  for (Eigen::Index i = 0; i < vals.size(); ++i)
    if (vals[i].real() > 0.0) unstable.push_back(i);
  if (unstable.size() != 2) {
    throw FloquetError("equilibrium must have exactly two unstable eigenvalues, found " +
                           std::to_string(unstable.size()),
                       out.eigenvalues);
  }
  const auto l1 = vals[unstable[0]], l2 = vals[unstable[1]];
  Vec a, b;
  if (std::abs(l1.imag()) > 0.0) {
    a = es.eigenvectors().col(unstable[0]).real();
    b = es.eigenvectors().col(unstable[0]).imag();
  } else {
    a = es.eigenvectors().col(unstable[0]).real();
    b = es.eigenvectors().col(unstable[1]).real();
  }
  out.e1 = a.normalized();
  out.e2 = (b - out.e1 * out.e1.dot(b)).normalized();
  out.reference_time = 1.0 / std::sqrt(std::abs(l1) * std::abs(l2));
  return out;
}

}  // namespace orbitcont
