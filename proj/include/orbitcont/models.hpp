#pragma once

#include <orbitcont/ode.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace orbitcont::models {

/// Name, dimension and parameters of a bundled model.
struct ModelSpec {
  std::string name;
  int dim = 0;
  std::map<std::string, double> parameters;
  std::string note;
};

/// x' = sigma (y - x), y' = x (rho - z) - y, z' = x y - beta z.
inline VectorField lorenz(double sigma = 10.0, double rho = 28.0, double beta = 8.0 / 3.0) {
  VectorField f;
  f.dim = 3;
  f.eval = [=](const Vec& x) -> Vec {
    Vec d(3);
    d << sigma * (x[1] - x[0]), x[0] * (rho - x[2]) - x[1], x[0] * x[1] - beta * x[2];
    return d;
  };
  f.jacobian_action = [=](const Vec& x, const Vec& v) -> Vec {
    Vec d(3);
    d << sigma * (v[1] - v[0]), (rho - x[2]) * v[0] - v[1] - x[0] * v[2],
        x[1] * v[0] + x[0] * v[1] - beta * v[2];
    return d;
  };
  return f;
}

/// Saddle cycle with an exactly planar two-dimensional unstable manifold.
///
/// In coordinates (p, q, y_3 .. y_{dim-1}) the plane y = 0 is invariant and
/// transversally attracting (y' = -b y). In that plane, with r^2 = p^2 + q^2,
///
///   r' = (a / 6) r (r^2 - 1)(4 - r^2),   angle' = omega,
///
/// so the unit circle is a periodic orbit of period 2 pi / omega with
/// multipliers exp(a P) (radial), 1 (flow) and exp(-b P) (dim - 2 times).
/// Its unstable manifold is the annulus 0 < r < 2 of the plane. When
/// `rotation_seed` is nonzero the whole system is conjugated by a random
/// orthogonal matrix, so the plane is span(Q e_0, Q e_1).
class SaddleCycle {
 public:
  SaddleCycle(double a, double b, int dim, double omega = 2.0 * std::numbers::pi, unsigned rotation_seed = 0)
      : a_(a), b_(b), omega_(omega), dim_(dim), q_(Mat::Identity(dim, dim)) {
    if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("saddle cycle rates a and b must be positive");
    if (dim < 3) throw std::invalid_argument("saddle cycle needs dim >= 3");
    if (!(omega > 0.0)) throw std::invalid_argument("saddle cycle frequency must be positive");
    if (rotation_seed != 0) {
      std::mt19937_64 rng(rotation_seed);
      std::normal_distribution<double> normal;
      Mat g(dim, dim);
      for (int j = 0; j < dim; ++j)
        for (int i = 0; i < dim; ++i) g(i, j) = normal(rng);
      Eigen::HouseholderQR<Mat> qr(g);
      q_ = qr.householderQ() * Mat::Identity(dim, dim);
    }
  }

  double period() const { return 2.0 * std::numbers::pi / omega_; }
  double unstable_multiplier() const { return std::exp(a_ * period()); }
  const Mat& rotation() const { return q_; }

  /// Orthonormal basis of the unstable plane in original coordinates.
  Mat plane_basis() const { return q_.leftCols(2); }

  /// Point of the cycle at angle 0, and its unstable direction.
  Vec cycle_point() const { return q_.col(0); }
  Vec unstable_direction() const { return q_.col(0); }

  /// Distance of x from the unstable plane.
  double distance_to_plane(const Vec& x) const {
    const Mat basis = plane_basis();
    return (x - basis * (basis.transpose() * x)).norm();
  }

  VectorField field() const {
    VectorField f;
    f.dim = dim_;
    const auto self = *this;
    f.eval = [self](const Vec& x) -> Vec { return self.q_ * self.local_rhs(self.q_.transpose() * x); };
    f.jacobian_action = [self](const Vec& x, const Vec& v) -> Vec {
      return self.q_ * self.local_jac(self.q_.transpose() * x, self.q_.transpose() * v);
    };
    return f;
  }

 private:
  Vec local_rhs(const Vec& u) const {
    Vec d(dim_);
    const double r2 = u[0] * u[0] + u[1] * u[1];
    const double s = a_ / 6.0 * (r2 - 1.0) * (4.0 - r2);
    d[0] = s * u[0] - omega_ * u[1];
    d[1] = s * u[1] + omega_ * u[0];
    for (int i = 2; i < dim_; ++i) d[i] = -b_ * u[i];
    return d;
  }

  Vec local_jac(const Vec& u, const Vec& v) const {
    Vec d(dim_);
    const double r2 = u[0] * u[0] + u[1] * u[1];
    const double s = a_ / 6.0 * (r2 - 1.0) * (4.0 - r2);
    const double ds = a_ / 6.0 * (5.0 - 2.0 * r2);  // d s / d r2
    const double dr2 = 2.0 * (u[0] * v[0] + u[1] * v[1]);
    d[0] = s * v[0] + u[0] * ds * dr2 - omega_ * v[1];
    d[1] = s * v[1] + u[1] * ds * dr2 + omega_ * v[0];
    for (int i = 2; i < dim_; ++i) d[i] = -b_ * v[i];
    return d;
  }

  double a_, b_, omega_;
  int dim_;
  Mat q_;
};

inline VectorField linear_saddle(double a, double b, int dim, double omega = 2.0 * std::numbers::pi,
                                 unsigned rotation_seed = 0) {
  return SaddleCycle(a, b, dim, omega, rotation_seed).field();
}

/// dx_i/dt = b_i + sum_j L_ij x_j + sum_jk Q_ijk x_j x_k, stored sparse.
class QuadraticModel {
 public:
  struct Linear {
    int i, j;
    double value;
  };
  struct Quadratic {
    int i, j, k;
    double value;
  };

  explicit QuadraticModel(int dim) : dim_(dim), constant_(Vec::Zero(dim)) {
    if (dim <= 0) throw std::invalid_argument("quadratic model dimension must be positive");
  }

  int dim() const { return dim_; }

  void add_constant(int i, double value) {
    check(i);
    constant_[i] += value;
  }
  void add_linear(int i, int j, double value) {
    check(i), check(j);
    linear_.push_back({i, j, value});
  }
  void add_quadratic(int i, int j, int k, double value) {
    check(i), check(j), check(k);
    quadratic_.push_back({i, j, k, value});
  }

  const std::vector<Quadratic>& quadratic_terms() const { return quadratic_; }

  Vec eval(const Vec& x) const {
    Vec d = constant_;
    for (const auto& t : linear_) d[t.i] += t.value * x[t.j];
    for (const auto& t : quadratic_) d[t.i] += t.value * x[t.j] * x[t.k];
    return d;
  }

  /// Only the quadratic part Q(x, x).
  Vec quadratic_part(const Vec& x) const {
    Vec d = Vec::Zero(dim_);
    for (const auto& t : quadratic_) d[t.i] += t.value * x[t.j] * x[t.k];
    return d;
  }

  Vec jacobian(const Vec& x, const Vec& v) const {
    Vec d = Vec::Zero(dim_);
    for (const auto& t : linear_) d[t.i] += t.value * v[t.j];
    for (const auto& t : quadratic_) d[t.i] += t.value * (v[t.j] * x[t.k] + x[t.j] * v[t.k]);
    return d;
  }

  VectorField field() const {
    VectorField f;
    f.dim = dim_;
    const auto self = std::make_shared<const QuadraticModel>(*this);
    f.eval = [self](const Vec& x) { return self->eval(x); };
    f.jacobian_action = [self](const Vec& x, const Vec& v) { return self->jacobian(x, v); };
    return f;
  }

 private:
  void check(int idx) const {
    if (idx < 0 || idx >= dim_) {
      throw std::out_of_range("index " + std::to_string(idx) + " out of range for dimension " +
                              std::to_string(dim_));
    }
  }

  int dim_;
  Vec constant_;
  std::vector<Linear> linear_;
  std::vector<Quadratic> quadratic_;
};

/// Malformed quadratic-model text.
class ModelFormatError : public Error {
 public:
  ModelFormatError(int line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const noexcept { return line_; }
  const char* kind() const noexcept override { return "model_format"; }

 private:
  int line_;
};

/// Parses the line-oriented model format:
///
///   [dim]        n
///   [constant]   i value
///   [linear]     i j value
///   [quadratic]  i j k value
///
/// Indices are 0-based; '#' starts a comment; repeated entries accumulate.
inline QuadraticModel parse_quadratic_model(std::istream& in) {
  enum class Section { None, Dim, Constant, Linear, Quadratic };
  Section section = Section::None;
  std::optional<QuadraticModel> model;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    std::string line = raw.substr(0, hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    if (first.front() == '[') {
      if (first == "[dim]") section = Section::Dim;
      else if (first == "[constant]") section = Section::Constant;
      else if (first == "[linear]") section = Section::Linear;
      else if (first == "[quadratic]") section = Section::Quadratic;
      else throw ModelFormatError(lineno, "unknown section " + first);
      std::string rest;
      if (ls >> rest) throw ModelFormatError(lineno, "trailing text after section header");
      continue;
    }
    std::istringstream entry(line);
    auto read_index = [&](int& v) {
      long long tmp;
      if (!(entry >> tmp)) throw ModelFormatError(lineno, "expected integer index");
      v = static_cast<int>(tmp);
    };
    auto read_value = [&](double& v) {
      if (!(entry >> v)) throw ModelFormatError(lineno, "expected real coefficient");
    };
    auto finish = [&] {
      std::string extra;
      if (entry >> extra) throw ModelFormatError(lineno, "too many fields");
    };
    try {
      switch (section) {
        case Section::None:
          throw ModelFormatError(lineno, "entry before any section header");
        case Section::Dim: {
          if (model) throw ModelFormatError(lineno, "dimension declared twice");
          int n;
          read_index(n);
          finish();
          if (n <= 0) throw ModelFormatError(lineno, "dimension must be positive");
          model.emplace(n);
          break;
        }
        case Section::Constant: {
          if (!model) throw ModelFormatError(lineno, "[dim] must come first");
          int i;
          double v;
          read_index(i), read_value(v), finish();
          model->add_constant(i, v);
          break;
        }
        case Section::Linear: {
          if (!model) throw ModelFormatError(lineno, "[dim] must come first");
          int i, j;
          double v;
          read_index(i), read_index(j), read_value(v), finish();
          model->add_linear(i, j, v);
          break;
        }
        case Section::Quadratic: {
          if (!model) throw ModelFormatError(lineno, "[dim] must come first");
          int i, j, k;
          double v;
          read_index(i), read_index(j), read_index(k), read_value(v), finish();
          model->add_quadratic(i, j, k, v);
          break;
        }
      }
    } catch (const std::out_of_range& e) {
      throw ModelFormatError(lineno, e.what());
    }
  }
  if (!model) throw ModelFormatError(lineno, "missing [dim] section");
  return *model;
}

inline QuadraticModel parse_quadratic_model(const std::string& text) {
  std::istringstream in(text);
  return parse_quadratic_model(in);
}

inline QuadraticModel load_quadratic_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model file " + path);
  return parse_quadratic_model(in);
}

/// Field of a quadratic model read from a plugin file.
inline VectorField shear_model_plugin(const std::string& path) { return load_quadratic_model(path).field(); }

/// The Lorenz system written in the quadratic-model text format.
inline std::string lorenz_model_text(double sigma = 10.0, double rho = 28.0, double beta = 8.0 / 3.0) {
  std::ostringstream out;
  out.precision(17);
  out << "# Lorenz system as a quadratic model\n[dim]\n3\n[linear]\n"
      << "0 0 " << -sigma << "\n0 1 " << sigma << "\n"
      << "1 0 " << rho << "\n1 1 -1\n"
      << "2 2 " << -beta << "\n"
      << "[quadratic]\n1 0 2 -1\n2 0 1 1\n";
  return out.str();
}

}  // namespace orbitcont::models
