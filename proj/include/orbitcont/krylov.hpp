#pragma once

#include <orbitcont/core.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace orbitcont {

/// Matrix-free linear map on R^dim.
struct LinearOperator {
  int dim = 0;
  std::function<Vec(const Vec&)> apply;

  Vec operator()(const Vec& v) const { return apply(v); }

  static LinearOperator from_matrix(Mat m) {
    if (m.rows() != m.cols()) throw std::invalid_argument("operator matrix must be square");
    const int n = static_cast<int>(m.rows());
    return {n, [m = std::move(m)](const Vec& v) -> Vec { return m * v; }};
  }
};

/// Arnoldi process with the Krylov basis kept implicitly as a product of
/// Householder reflectors P_0 P_1 ... (Walker's variant). The j-th basis
/// vector is v_j = P_0 ... P_j e_j; orthogonality holds to machine
/// precision regardless of the conditioning of the operator.
class HouseholderArnoldi {
 public:
  HouseholderArnoldi(const LinearOperator& op, const Vec& start) : op_(op), n_(op.dim) {
    if (start.size() != n_) throw std::invalid_argument("Arnoldi start vector has wrong length");
    Vec z = start;
    beta_ = reflect_from(z, 0);
    if (beta_ == 0.0) breakdown_ = true;
  }

  /// Signed first entry of P_0 r0; |beta| = |r0|.
  double beta() const { return beta_; }
  int size() const { return steps_; }
  bool breakdown() const { return breakdown_; }
  int dim() const { return n_; }

  /// Extends the basis by one vector. Returns column j of the Hessenberg
  /// matrix (length j + 2, or j + 1 when the space is exhausted).
  Vec step() {
    const int j = steps_;
    if (breakdown_ || j >= n_) throw std::logic_error("Arnoldi cannot be extended");
    Vec z = op_(basis_vector(j));
    for (int i = 0; i <= j; ++i) reflect(i, z);
    const double scale = z.norm();
    Vec h;
    if (j + 1 < n_) {
      const double sub = reflect_from(z, j + 1);
      h = z.head(j + 2);
      h[j + 1] = sub;
      if (std::abs(sub) <= 64.0 * std::numeric_limits<double>::epsilon() * scale) {
        h[j + 1] = 0.0;
        breakdown_ = true;
      }
    } else {
      h = z.head(j + 1);
      breakdown_ = true;
    }
    ++steps_;
    return h;
  }

  /// v_j = P_0 ... P_j e_j.
  Vec basis_vector(int j) const {
    Vec v = Vec::Zero(n_);
    v[j] = 1.0;
    for (int i = j; i >= 0; --i) reflect(i, v);
    return v;
  }

  Mat basis() const {
    Mat q(n_, steps_);
    for (int j = 0; j < steps_; ++j) q.col(j) = basis_vector(j);
    return q;
  }

  /// sum_j y_j v_j for the first y.size() basis vectors.
  Vec combine(const Vec& y) const {
    Vec z = Vec::Zero(n_);
    for (int j = static_cast<int>(y.size()) - 1; j >= 0; --j) {
      z[j] += y[j];
      reflect(j, z);
    }
    return z;
  }

 private:
  // Builds the reflector P_j that maps z[j:] onto a multiple of e_j and
  // applies it to z. Returns the resulting z[j].
  double reflect_from(Vec& z, int j) {
    const int m = n_ - j;
    Vec w = Vec::Zero(n_);
    const double alpha = z.tail(m).norm();
    if (alpha == 0.0) {
      reflectors_.push_back(std::move(w));
      return 0.0;
    }
    const double x0 = z[j];
    const double signed_alpha = x0 >= 0.0 ? -alpha : alpha;
    w.tail(m) = z.tail(m);
    w[j] -= signed_alpha;
    const double wn = w.norm();
    if (wn == 0.0) {
      reflectors_.push_back(Vec::Zero(n_));
      return z[j];
    }
    w /= wn;
    reflectors_.push_back(std::move(w));
    z.tail(m).setZero();
    z[j] = signed_alpha;
    return signed_alpha;
  }

  void reflect(int i, Vec& z) const {
    const Vec& w = reflectors_[static_cast<std::size_t>(i)];
    const int start = i;
    const double d = w.tail(n_ - start).dot(z.tail(n_ - start));
    if (d != 0.0) z.tail(n_ - start) -= 2.0 * d * w.tail(n_ - start);
  }

  LinearOperator op_;
  int n_;
  double beta_ = 0.0;
  int steps_ = 0;
  bool breakdown_ = false;
  std::vector<Vec> reflectors_;
};

/// Outcome of a GMRES solve. residual_history[i] is the relative residual
/// |b - A x_i| / |b| after i iterations (entry 0 is 1).
struct GmresReport {
  Vec solution;
  std::vector<double> residual_history;
  int iterations = 0;
  bool converged = false;
  bool breakdown = false;
};

/// Unrestarted, unpreconditioned GMRES with zero initial guess and
/// Householder orthogonalization. Stops when the relative residual drops to
/// `tol`, on breakdown, or after max_iter iterations (best iterate returned).
inline GmresReport gmres(const LinearOperator& op, const Vec& rhs, double tol, int max_iter) {
  if (rhs.size() != op.dim) throw std::invalid_argument("gmres: rhs has wrong length");
  if (!(tol > 0.0)) throw std::invalid_argument("gmres: tol must be positive");
  if (max_iter < 0 || max_iter > op.dim) throw std::invalid_argument("gmres: max_iter must be in [0, dim]");
  if (!rhs.allFinite()) throw std::invalid_argument("gmres: rhs is not finite");

  GmresReport rep;
  const double bnorm = rhs.norm();
  if (bnorm == 0.0) {
    rep.solution = Vec::Zero(op.dim);
    rep.residual_history = {0.0};
    rep.converged = true;
    return rep;
  }
  rep.residual_history.push_back(1.0);

  HouseholderArnoldi arnoldi(op, rhs);
  Mat r = Mat::Zero(max_iter + 1, max_iter);  // triangularized Hessenberg
  Vec g = Vec::Zero(max_iter + 1);
  std::vector<double> cs, sn;
  g[0] = arnoldi.beta();

  int m = 0;
  while (m < max_iter) {
    Vec h = arnoldi.step();
    const int j = m;
    for (int i = 0; i < j; ++i) {
      const double t = cs[i] * h[i] + sn[i] * h[i + 1];
      h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
      h[i] = t;
    }
    const double sub = h.size() > j + 1 ? h[j + 1] : 0.0;
    const double rho = std::hypot(h[j], sub);
    const double c = rho == 0.0 ? 1.0 : h[j] / rho;
    const double s = rho == 0.0 ? 0.0 : sub / rho;
    cs.push_back(c);
    sn.push_back(s);
    h[j] = rho;
    r.col(j).head(j + 1) = h.head(j + 1);
    g[j + 1] = -s * g[j];
    g[j] = c * g[j];
    ++m;
    const double rel = std::abs(g[j + 1]) / bnorm;
    rep.residual_history.push_back(rel);
    if (rel <= tol) {
      rep.converged = true;
      break;
    }
    if (arnoldi.breakdown() || rho == 0.0) {
      rep.breakdown = true;
      break;
    }
  }
  rep.iterations = m;

  Vec y = Vec::Zero(m);
  if (m > 0) {
    // Back substitution; singular diagonal entries (numerical breakdown)
    // leave the corresponding coefficient at zero.
    for (int i = m - 1; i >= 0; --i) {
      double acc = g[i];
      for (int l = i + 1; l < m; ++l) acc -= r(i, l) * y[l];
      y[i] = r(i, i) != 0.0 ? acc / r(i, i) : 0.0;
    }
  }
  rep.solution = arnoldi.combine(y);
  if (rep.breakdown && !rep.converged) rep.converged = rep.residual_history.back() <= tol;
  return rep;
}

/// Result of checking the a-priori GMRES iteration bound 3k - 1 for a
/// bordered k-interval shooting operator.
struct IterationBoundReport {
  int intervals = 0;
  int bound = 0;
  int iterations = 0;        ///< iterations used (<= bound)
  double residual = 0.0;     ///< relative residual reached
  double tolerance = 0.0;
  bool held = false;         ///< tolerance reached within the bound
  std::vector<double> history;
};

inline IterationBoundReport verify_iteration_bound(const LinearOperator& op, const Vec& rhs, int k,
                                                   double tol = 1e-10) {
  if (k < 1) throw std::invalid_argument("interval count must be positive");
  IterationBoundReport out;
  out.intervals = k;
  out.bound = 3 * k - 1;
  out.tolerance = tol;
  const auto rep = gmres(op, rhs, tol, std::min(out.bound, op.dim));
  out.iterations = rep.iterations;
  out.residual = rep.residual_history.back();
  out.held = out.residual <= tol;
  out.history = rep.residual_history;
  return out;
}

}  // namespace orbitcont
