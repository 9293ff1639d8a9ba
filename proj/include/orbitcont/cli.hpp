#pragma once

#include <orbitcont/io.hpp>
#include <orbitcont/models.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace orbitcont::cli {

using io::ConfigError;
using io::json;

// ---- logging ----------------------------------------------------------------

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

/// Level from MANIFOLD_LOG (error, warn, info, debug); warn by default.
inline LogLevel log_level_from_env() {
  const char* v = std::getenv("MANIFOLD_LOG");
  if (!v) return LogLevel::Warn;
  const std::string s(v);
  if (s == "error") return LogLevel::Error;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  return LogLevel::Warn;
}

inline void log(LogLevel level, const std::string& msg) {
  static const LogLevel threshold = log_level_from_env();
  if (level > threshold) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

// ---- configuration ----------------------------------------------------------

struct ModelConfig {
  std::string name = "lorenz";  ///< lorenz | saddle_cycle | quadratic
  std::map<std::string, double> parameters;
  std::string path;  ///< model file for `quadratic`

  bool operator==(const ModelConfig&) const = default;
};

struct OrbitConfig {
  std::vector<double> guess;
  double period = 0.0;
  double po_tol = 1e-9;
  int max_iter = 20;

  bool operator==(const OrbitConfig&) const = default;
};

struct LeftConfig {
  double eps0 = 1e-6;
  int u1_sign = 1;
  double theta0 = 0.0;
  double radius = 1e-3;
  std::vector<double> equilibrium;

  bool operator==(const LeftConfig&) const = default;
};

/// One right boundary condition. With `relative` set, fixed_time values are
/// in units of the period (or reference time), arclength values in units of
/// the periodic orbit's length, and a poincare entry means the plane through
/// the base point with normal f(base point).
struct BcConfig {
  std::string kind = "fixed_time";
  double value = 0.0;
  std::vector<double> normal;
  std::string crossing = "any";
  bool relative = false;

  bool operator==(const BcConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  std::string mode = "unstable-po";  ///< unstable-po | stable-po | unstable-eq | stable-eq
  OrbitConfig orbit;
  LeftConfig left;
  std::vector<BcConfig> boundary_conditions;
  ContinuationConfig continuation;
  IntegratorConfig integrator;
  FloquetConfig floquet;
  std::string jacobian = "variational";  ///< variational | finite_difference
  int workers = 0;                        ///< 0: min(cores, intervals)
  std::string output_dir = "out";
  unsigned seed = 1;         ///< seeds Arnoldi start vectors and amplification probes
  double seed_t_max = 0.0;   ///< 0: 100 time units of the left boundary

  bool equilibrium_mode() const { return mode == "unstable-eq" || mode == "stable-eq"; }
  bool reverse_time() const { return mode == "stable-po" || mode == "stable-eq"; }

  bool operator==(const RunConfig&) const = default;
};

inline json to_json(const RunConfig& c) {
  json bcs = json::array();
  for (const auto& b : c.boundary_conditions) {
    bcs.push_back({{"kind", b.kind},
                   {"value", b.value},
                   {"normal", b.normal},
                   {"crossing", b.crossing},
                   {"relative", b.relative}});
  }
  json fl = io::to_json(c.floquet);
  fl.erase("seed");
  json co = io::to_json(c.continuation);
  co.erase("probe_seed");
  return {{"model", {{"name", c.model.name}, {"parameters", c.model.parameters}, {"path", c.model.path}}},
          {"mode", c.mode},
          {"orbit",
           {{"guess", c.orbit.guess},
            {"period", c.orbit.period},
            {"po_tol", c.orbit.po_tol},
            {"max_iter", c.orbit.max_iter}}},
          {"left",
           {{"eps0", c.left.eps0},
            {"u1_sign", c.left.u1_sign},
            {"theta0", c.left.theta0},
            {"radius", c.left.radius},
            {"equilibrium", c.left.equilibrium}}},
          {"boundary_conditions", bcs},
          {"continuation", co},
          {"integrator", io::to_json(c.integrator)},
          {"floquet", fl},
          {"jacobian", c.jacobian},
          {"workers", c.workers},
          {"output_dir", c.output_dir},
          {"seed", c.seed},
          {"seed_t_max", c.seed_t_max}};
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  io::ObjectReader r(j, "");
  if (const json* m = r.child("model")) {
    io::ObjectReader mr(*m, "model");
    mr.get("name", c.model.name);
    mr.get("parameters", c.model.parameters);
    mr.get("path", c.model.path);
    mr.finish();
  }
  r.get("mode", c.mode);
  if (const json* o = r.child("orbit")) {
    io::ObjectReader orr(*o, "orbit");
    orr.get("guess", c.orbit.guess);
    orr.get("period", c.orbit.period);
    orr.get("po_tol", c.orbit.po_tol);
    orr.get("max_iter", c.orbit.max_iter);
    orr.finish();
  }
  if (const json* l = r.child("left")) {
    io::ObjectReader lr(*l, "left");
    lr.get("eps0", c.left.eps0);
    lr.get("u1_sign", c.left.u1_sign);
    lr.get("theta0", c.left.theta0);
    lr.get("radius", c.left.radius);
    lr.get("equilibrium", c.left.equilibrium);
    lr.finish();
  }
  if (const json* b = r.child("boundary_conditions")) {
    if (!b->is_array()) throw ConfigError("boundary_conditions: expected an array");
    for (std::size_t i = 0; i < b->size(); ++i) {
      BcConfig bc;
      io::ObjectReader br((*b)[i], "boundary_conditions[" + std::to_string(i) + "]");
      br.get("kind", bc.kind);
      br.get("value", bc.value);
      br.get("normal", bc.normal);
      br.get("crossing", bc.crossing);
      br.get("relative", bc.relative);
      br.finish();
      c.boundary_conditions.push_back(bc);
    }
  }
  if (const json* x = r.child("continuation")) c.continuation = io::continuation_from_json(*x);
  if (const json* x = r.child("integrator")) c.integrator = io::integrator_from_json(*x);
  if (const json* x = r.child("floquet")) c.floquet = io::floquet_from_json(*x);
  r.get("jacobian", c.jacobian);
  r.get("workers", c.workers);
  r.get("output_dir", c.output_dir);
  r.get("seed", c.seed);
  r.get("seed_t_max", c.seed_t_max);
  r.finish();

  c.floquet.seed = c.seed;
  c.continuation.probe_seed = c.seed + 1;

  static const std::vector<std::string> modes = {"unstable-po", "stable-po", "unstable-eq", "stable-eq"};
  if (std::find(modes.begin(), modes.end(), c.mode) == modes.end()) {
    throw ConfigError("mode: expected unstable-po, stable-po, unstable-eq or stable-eq");
  }
  if (c.jacobian != "variational" && c.jacobian != "finite_difference") {
    throw ConfigError("jacobian: expected variational or finite_difference");
  }
  if (c.left.u1_sign != 1 && c.left.u1_sign != -1) throw ConfigError("left.u1_sign: expected 1 or -1");
  if (!(c.left.eps0 > 0.0)) throw ConfigError("left.eps0: must be positive");
  if (!(c.left.radius > 0.0)) throw ConfigError("left.radius: must be positive");
  if (c.workers < 0) throw ConfigError("workers: must be non-negative");
  for (std::size_t i = 0; i < c.boundary_conditions.size(); ++i) {
    const auto& b = c.boundary_conditions[i];
    const std::string where = "boundary_conditions[" + std::to_string(i) + "]";
    if (b.kind != "fixed_time" && b.kind != "poincare" && b.kind != "arclength") {
      throw ConfigError(where + ".kind: expected fixed_time, poincare or arclength");
    }
    io::crossing_from_string(b.crossing, where + ".crossing");
  }
  return c;
}

inline RunConfig load_config(const std::string& path) { return config_from_json(io::read_json_file(path)); }

inline std::string config_hash(const RunConfig& c) { return io::fnv1a_hex(to_json(c).dump()); }

// ---- pipeline pieces ----------------------------------------------------------

inline VectorField make_field(const ModelConfig& m) {
  auto params = m.parameters;
  auto take = [&](const char* key, double fallback) {
    auto it = params.find(key);
    if (it == params.end()) return fallback;
    const double v = it->second;
    params.erase(it);
    return v;
  };
  VectorField f;
  if (m.name == "lorenz") {
    const double sigma = take("sigma", 10.0), rho = take("rho", 28.0), beta = take("beta", 8.0 / 3.0);
    f = models::lorenz(sigma, rho, beta);
  } else if (m.name == "saddle_cycle") {
    const double a = take("a", 1.0), b = take("b", 2.0), dim = take("dim", 3.0);
    const double omega = take("omega", 2.0 * std::numbers::pi), seed = take("rotation_seed", 0.0);
    if (dim != std::floor(dim) || seed < 0.0 || seed != std::floor(seed)) {
      throw ConfigError("model.parameters: dim and rotation_seed must be non-negative integers");
    }
    try {
      f = models::linear_saddle(a, b, static_cast<int>(dim), omega, static_cast<unsigned>(seed));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("model.parameters: ") + e.what());
    }
  } else if (m.name == "quadratic") {
    if (m.path.empty()) throw ConfigError("model.path: required for the quadratic model");
    f = models::shear_model_plugin(m.path);
  } else {
    throw ConfigError("model.name: unknown model '" + m.name + "'");
  }
  if (!params.empty()) throw ConfigError("model.parameters: unknown parameter '" + params.begin()->first + "'");
  return f;
}

inline VectorField flow_field(const RunConfig& c, const VectorField& f) {
  return c.reverse_time() ? f.reversed() : f;
}

inline PeriodicOrbit refine_from_config(const RunConfig& c, const VectorField& f, RefineReport* report = nullptr) {
  if (c.equilibrium_mode()) throw ConfigError("mode: periodic orbit refinement needs a *-po mode");
  if (static_cast<int>(c.orbit.guess.size()) != f.dim) {
    throw ConfigError("orbit.guess: expected " + std::to_string(f.dim) + " components");
  }
  if (!(c.orbit.period > 0.0)) throw ConfigError("orbit.period: must be positive");
  RefineConfig rc;
  rc.po_tol = c.orbit.po_tol;
  rc.max_iter = c.orbit.max_iter;
  return refine_periodic_orbit(from_std(c.orbit.guess), c.orbit.period, f, c.integrator, rc, report);
}

/// Leading Floquet pair in the direction of time used by the mode. For the
/// stable modes the multiplier is stored in forward-time convention (|mu1| < 1).
inline PeriodicOrbit floquet_from_config(const RunConfig& c, const VectorField& f, PeriodicOrbit po) {
  const VectorField g = flow_field(c, f);
  const auto r = leading_floquet(po, g, c.integrator, c.floquet);
  po.mu1 = c.reverse_time() ? 1.0 / r.mu1 : r.mu1;
  po.u1 = r.u1;
  return po;
}

inline double orbit_arclength(const PeriodicOrbit& po, const VectorField& f, const IntegratorConfig& cfg) {
  return flow(f, po.base_point, po.period, cfg, true).arclength;
}

struct Setup {
  VectorField field;
  std::optional<PeriodicOrbit> orbit;
  LeftBoundary left;
  std::vector<BoundaryCondition> bcs;
  double seed_value = 0.0;  ///< eps0 or theta0
};

inline LeftBoundary left_from_config(const RunConfig& c, const VectorField& f, const std::optional<PeriodicOrbit>& po) {
  if (!c.equilibrium_mode()) {
    if (!po) throw ConfigError("periodic orbit required");
    return LeftBoundary::periodic_orbit_ray(*po, static_cast<double>(c.left.u1_sign), c.reverse_time());
  }
  if (static_cast<int>(c.left.equilibrium.size()) != f.dim) {
    throw ConfigError("left.equilibrium: expected " + std::to_string(f.dim) + " components");
  }
  const Vec xe = from_std(c.left.equilibrium);
  const auto plane = equilibrium_unstable_plane(flow_field(c, f), xe);
  return LeftBoundary::equilibrium_circle(xe, plane.e1, plane.e2, c.left.radius, plane.reference_time,
                                          c.reverse_time());
}

inline std::vector<BoundaryCondition> bcs_from_config(const RunConfig& c, const VectorField& f,
                                                      const LeftBoundary& left,
                                                      const std::optional<PeriodicOrbit>& po) {
  if (c.boundary_conditions.empty()) throw ConfigError("boundary_conditions: at least one entry is required");
  std::vector<BoundaryCondition> out;
  std::optional<double> length;
  for (std::size_t i = 0; i < c.boundary_conditions.size(); ++i) {
    const auto& b = c.boundary_conditions[i];
    const std::string where = "boundary_conditions[" + std::to_string(i) + "]";
    try {
      if (b.kind == "fixed_time") {
        out.push_back(BoundaryCondition::fixed_time(b.relative ? b.value * left.time_scale() : b.value));
      } else if (b.kind == "arclength") {
        double v = b.value;
        if (b.relative) {
          if (!po) throw ConfigError(where + ": relative arclength needs a periodic orbit");
          if (!length) length = orbit_arclength(*po, f, c.integrator);
          v *= *length;
        }
        out.push_back(BoundaryCondition::arclength(v));
      } else {
        const Crossing cr = io::crossing_from_string(b.crossing, where + ".crossing");
        if (b.relative) {
          if (!po) throw ConfigError(where + ": relative poincare plane needs a periodic orbit");
          if (!b.normal.empty()) throw ConfigError(where + ": relative plane takes no normal");
          const Vec w = flow_field(c, f)(po->base_point);
          out.push_back(BoundaryCondition::poincare(w, w.dot(po->base_point), cr));
        } else {
          if (static_cast<int>(b.normal.size()) != f.dim) throw ConfigError(where + ".normal: wrong length");
          out.push_back(BoundaryCondition::poincare(from_std(b.normal), b.value, cr));
        }
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return out;
}

inline int resolve_workers(int requested, int intervals) {
  if (requested > 0) return requested;
  return std::max(1, std::min(hardware_workers(), intervals));
}

inline ShootingProblem make_problem(const RunConfig& c, const Setup& s, int workers) {
  ShootingProblem p(s.field, s.left, s.bcs, c.integrator);
  p.workers = resolve_workers(workers, p.intervals());
  p.jacobian_mode = c.jacobian == "finite_difference" ? JacobianMode::FiniteDifference : JacobianMode::Variational;
  return p;
}

// ---- commands ---------------------------------------------------------------

struct Options {
  std::string config;
  std::string checkpoint;
  std::string po;
  std::string out;
  int workers = -1;  ///< -1: from config
  int side = 0;      ///< 0: from config
};

inline std::string out_dir(const RunConfig& c, const Options& o) {
  const std::string dir = o.out.empty() ? c.output_dir : o.out;
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline json orbit_file(const RunConfig& c, const PeriodicOrbit& po) {
  return {{"meta", io::meta(config_hash(c))}, {"orbit", io::to_json(po)}};
}

inline PeriodicOrbit read_orbit_file(const std::string& path) {
  const json j = io::read_json_file(path);
  if (!j.contains("orbit")) throw ConfigError(path + ": missing orbit");
  return io::orbit_from_json(j.at("orbit"));
}

inline json cmd_refine_po(const RunConfig& c, const Options& o) {
  const VectorField f = make_field(c.model);
  RefineReport rep;
  const PeriodicOrbit po = refine_from_config(c, f, &rep);
  const std::string dir = out_dir(c, o);
  json file = orbit_file(c, po);
  file["refine"] = {{"iterations", rep.iterations}, {"residual_history", rep.residual_history}};
  io::write_json_file(join(dir, "po.json"), file);
  log(LogLevel::Info, "periodic orbit refined: period " + io::format_real(po.period));
  return {{"command", "refine-po"}, {"period", po.period}, {"residual", po.residual},
          {"iterations", rep.iterations}, {"file", join(dir, "po.json")}};
}

inline json cmd_floquet(const RunConfig& c, const Options& o) {
  const VectorField f = make_field(c.model);
  const std::string dir = out_dir(c, o);
  const std::string src = o.po.empty() ? join(dir, "po.json") : o.po;
  PeriodicOrbit po = std::filesystem::exists(src) ? read_orbit_file(src) : refine_from_config(c, f);
  po = floquet_from_config(c, f, po);
  io::write_json_file(join(dir, "po.json"), orbit_file(c, po));
  return {{"command", "floquet"}, {"mu1", po.mu1}, {"u1", to_std(po.u1)}, {"file", join(dir, "po.json")}};
}

/// Builds field, left boundary and BCs; refines the orbit and computes the
/// Floquet pair when the orbit file lacks them.
inline Setup make_setup(const RunConfig& c, const Options& o, const std::string& dir) {
  Setup s{make_field(c.model), std::nullopt, LeftBoundary{}, {}, 0.0};
  RunConfig cc = c;
  if (o.side != 0) cc.left.u1_sign = o.side;
  if (!c.equilibrium_mode()) {
    const std::string src = o.po.empty() ? join(dir, "po.json") : o.po;
    PeriodicOrbit po = std::filesystem::exists(src) ? read_orbit_file(src) : refine_from_config(c, s.field);
    if (!po.has_floquet()) po = floquet_from_config(c, s.field, po);
    s.orbit = po;
    s.seed_value = c.left.eps0;
  } else {
    s.seed_value = c.left.theta0;
  }
  s.left = left_from_config(cc, s.field, s.orbit);
  s.bcs = bcs_from_config(cc, s.field, s.left, s.orbit);
  return s;
}

inline io::CsvWriter mesh_csv(const std::string& hash, const ManifoldMesh& m, int n) {
  std::vector<std::string> cols = {"orbit", "step", "sample", "arclength"};
  for (int i = 0; i < n; ++i) cols.push_back("x" + std::to_string(i));
  io::CsvWriter mesh(hash, cols);
  for (std::size_t k = 0; k < m.orbits.size(); ++k) {
    const auto& orb = m.orbits[k];
    for (std::size_t j = 0; j < orb.samples.size(); ++j) {
      std::vector<std::string> cells = {std::to_string(k), std::to_string(orb.step), std::to_string(j),
                                        io::format_real(orb.arclength[j])};
      for (int i = 0; i < n; ++i) cells.push_back(io::format_real(orb.samples[j][i]));
      mesh.row_values(cells);
    }
  }
  return mesh;
}

inline void write_run_outputs(const RunConfig& c, const std::string& dir, const RunResult& res, int n) {
  const std::string hash = config_hash(c);
  json orbits = json::array();
  for (const auto& orb : res.mesh.orbits) orbits.push_back(io::to_json(orb));
  io::write_json_file(join(dir, "mesh.json"), {{"meta", io::meta(hash)}, {"model", c.model.name},
                                               {"mode", c.mode}, {"orbits", orbits}});
  mesh_csv(hash, res.mesh, n).save(join(dir, "mesh.csv"));

  io::CsvWriter diagram(hash, {"step", "delta", "eps", "sum_tau", "total_time", "fold_flag"});
  for (const auto& d : res.diagram) diagram.row(d.step, d.param, d.eps, d.sum_tau, d.total_time, d.fold);
  diagram.save(join(dir, "diagram.csv"));

  io::CsvWriter conv(hash, {"continuation_step", "newton_iter", "gmres_iter", "relative_residual"});
  for (const auto& r : res.convergence) conv.row(r.step, r.newton_iter, r.gmres_iter, r.relative_residual);
  conv.save(join(dir, "convergence.csv"));

  io::CsvWriter newton(hash, {"continuation_step", "newton_iter", "residual_norm"});
  for (const auto& r : res.newton) newton.row(r.step, r.newton_iter, r.residual);
  newton.save(join(dir, "newton.csv"));

  io::CsvWriter timing(hash, {"continuation_step", "segment", "seconds"});
  for (const auto& r : res.timing) timing.row(r.step, r.segment, r.seconds);
  timing.save(join(dir, "timing.csv"));
}

inline json checkpoint_json(const RunConfig& c, const ContinuationState& s) {
  return {{"meta", io::meta(config_hash(c))}, {"state", io::to_json(s)}};
}

inline json cmd_continue(const RunConfig& c, const Options& o) {
  const std::string dir = out_dir(c, o);
  const Setup s = make_setup(c, o, dir);
  ShootingProblem p = make_problem(c, s, o.workers >= 0 ? o.workers : c.workers);
  if (s.orbit) io::write_json_file(join(dir, "po.json"), orbit_file(c, *s.orbit));

  ContinuationState state;
  std::string resumed_from;
  if (!o.checkpoint.empty() && std::filesystem::exists(o.checkpoint)) {
    const json j = io::read_json_file(o.checkpoint);
    if (!j.contains("state")) throw ConfigError(o.checkpoint + ": missing state");
    ContinuationState saved = io::state_from_json(j.at("state"), "state");
    resumed_from = o.checkpoint;
    if (saved.bcs == s.bcs) {
      state = saved;
      if (state.z.size() != Layout{p.dim(), static_cast<int>(state.bcs.size())}.size()) {
        throw ConfigError(o.checkpoint + ": state does not match the model dimension");
      }
    } else {
      // New boundary conditions: re-seed from the checkpoint's parameter.
      const Layout l{p.dim(), static_cast<int>(saved.bcs.size())};
      if (saved.z.size() != l.size()) throw ConfigError(o.checkpoint + ": inconsistent state");
      const double param = saved.z[l.param()];
      const double value = p.left().kind() == LeftBoundary::Kind::PeriodicOrbitRay ? std::exp(param) : param;
      log(LogLevel::Info, "boundary conditions changed; re-seeding from the checkpoint parameter");
      const auto seed = seed_initial_solution(p, value, c.seed_t_max);
      state.bcs = s.bcs;
      state.z = seed.z;
      state.tangent = seed.tangent;
      state.ds = saved.ds;
      state.step = 0;
    }
  } else {
    const auto seed = seed_initial_solution(p, s.seed_value, c.seed_t_max);
    for (std::size_t i = 0; i < seed.grazing.size(); ++i) {
      if (seed.grazing[i]) log(LogLevel::Warn, "segment " + std::to_string(i) + " grazes its Poincare plane");
    }
    state.bcs = s.bcs;
    state.z = seed.z;
    state.tangent = seed.tangent;
    state.ds = c.continuation.ds0;
  }
  p.set_bcs(state.bcs);

  const std::string ckpt = join(dir, "checkpoint.json");
  RunCallbacks cb;
  cb.on_accept = [&](const ContinuationState& st) { io::write_json_file(ckpt, checkpoint_json(c, st)); };
  cb.log = [](const std::string& m) { log(LogLevel::Info, m); };
  const RunResult res = run(p, state, c.continuation, cb);
  write_run_outputs(c, dir, res, p.dim());

  json summary = {{"command", "continue"},
                  {"orbits", res.mesh.orbits.size()},
                  {"stop_reason", res.stop_reason},
                  {"aborted", res.aborted},
                  {"intervals", p.intervals()},
                  {"workers", p.workers},
                  {"checkpoint", ckpt},
                  {"output_dir", dir}};
  if (!resumed_from.empty()) summary["resumed_from"] = resumed_from;
  if (res.aborted) summary["error"] = res.error;
  io::write_json_file(join(dir, "run.json"), {{"meta", io::meta(config_hash(c))}, {"summary", summary}});
  if (res.aborted) throw ConvergenceError("continuation aborted: " + res.error, {});
  return summary;
}

/// Dense-oracle checks on k-interval problems built around the configured
/// periodic orbit: eigenvalue-1 multiplicities of the bordered matrix, the
/// GMRES iteration bound, and matrix-free versus finite-difference products.
struct VerifyCase {
  int k = 0;
  int n = 0;
  int unknowns = 0;
  int eig_one_algebraic = 0;
  int eig_one_required = 0;
  int rank_deficiency = 0;
  int rank_deficiency_required = 0;
  int gmres_iterations = 0;     ///< to reach 1e-8
  int gmres_bound = 0;
  double gmres_residual_at_bound = 0.0;
  bool bound_held_tight = false;  ///< 1e-10 within the bound
  double jacobian_fd_error = 0.0;
  std::vector<double> history;
  bool lemma_checked = true;  ///< the eigenvalue count is only resolvable for k <= 4
  bool lemma_ok() const {
    return !lemma_checked || (eig_one_algebraic >= eig_one_required && rank_deficiency >= rank_deficiency_required);
  }
  bool bound_ok() const { return gmres_iterations <= gmres_bound; }
};

/// Mixed boundary conditions for verification: k - 2 fixed-time intervals
/// covering half a period, a Poincare plane through the base point and a
/// final arclength condition of half the orbit length.
inline std::vector<BoundaryCondition> verify_bcs(const PeriodicOrbit& po, const VectorField& f, int k,
                                                 const IntegratorConfig& cfg) {
  // The first interval never ends on the plane through the base point: the
  // start lies within eps of it and would hit it almost at once.
  std::vector<BoundaryCondition> bcs;
  const Vec w = f(po.base_point);
  const auto plane = BoundaryCondition::poincare(w, w.dot(po.base_point), Crossing::Rising);
  if (k == 2) return {BoundaryCondition::fixed_time(0.5 * po.period), plane};
  for (int i = 0; i < k - 2; ++i) bcs.push_back(BoundaryCondition::fixed_time(0.5 * po.period / (k - 2)));
  bcs.push_back(plane);
  bcs.push_back(BoundaryCondition::arclength(0.5 * orbit_arclength(po, f, cfg)));
  return bcs;
}

/// Eigenvalues within `tol` of 1. The QR iteration runs in long double:
/// eigenvalue 1 sits in Jordan blocks whose computed eigenvalues spread like
/// (rounding)^(1/size), which in double exceeds 1e-6 already for size 3.
inline int count_near_one(const Mat& a, double tol) {
  using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  Eigen::EigenSolver<MatL> es(a.cast<long double>(), false);
  int count = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
    if (std::abs(es.eigenvalues()[i] - std::complex<long double>(1.0L, 0.0L)) <= tol) ++count;
  return count;
}

inline int rank_deficiency(const Mat& m, double rel_tol) {
  Eigen::JacobiSVD<Mat> svd(m);
  const auto& s = svd.singularValues();
  const double cut = rel_tol * std::max(1.0, s[0]);
  int d = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s[i] <= cut) ++d;
  return d;
}

inline VerifyCase verify_case(const ShootingProblem& p, double eps0, double ds, unsigned seed) {
  VerifyCase vc;
  const Layout l = p.layout();
  vc.k = l.k;
  vc.n = l.n;
  vc.unknowns = l.size();
  ContinuationConfig cc;
  cc.gmres_tol = 1e-12;
  cc.gmres_forcing = false;
  const auto s = seed_initial_solution(p, eps0);
  const ContinuationPoint pt = correct(p, s.z, s.tangent, cc);

  const Mat a = assemble_dense(p, pt.z, s.tangent);
  vc.eig_one_algebraic = count_near_one(a, 1e-6);
  vc.eig_one_required = (l.k - 1) * (l.n - 1);
  vc.rank_deficiency = rank_deficiency(a - Mat::Identity(l.size(), l.size()), 1e-10);
  vc.rank_deficiency_required = l.n - 1;
  vc.lemma_checked = l.k <= 4;

  const Vec z_pred = pt.z + ds * s.tangent;
  Vec rhs(l.size());
  rhs.head(l.residual_size()) = -residual(p, z_pred);
  rhs[l.size() - 1] = 0.0;
  const auto op = bordered_operator(p, z_pred, s.tangent);
  const auto loose = gmres(op, rhs, 1e-8, l.size());
  vc.gmres_iterations = loose.iterations;
  vc.history = loose.residual_history;
  const auto tight = verify_iteration_bound(op, rhs, l.k, 1e-10);
  vc.gmres_bound = tight.bound;
  vc.gmres_residual_at_bound = tight.residual;
  vc.bound_held_tight = tight.held;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vec v(l.size());
  for (int i = 0; i < l.size(); ++i) v[i] = normal(rng);
  v.normalize();
  ShootingProblem fd = p;
  fd.jacobian_mode = JacobianMode::FiniteDifference;
  const Vec exact = residual_derivative(p, pt.z, v);
  const Vec approx = residual_derivative(fd, pt.z, v);
  vc.jacobian_fd_error = (exact - approx).norm() / std::max(exact.norm(), 1e-300);
  return vc;
}

inline json cmd_verify(const RunConfig& c, const Options& o, bool* all_ok = nullptr) {
  if (c.equilibrium_mode()) throw ConfigError("mode: verify needs a periodic orbit mode");
  const std::string dir = out_dir(c, o);
  const VectorField f = make_field(c.model);
  const std::string src = o.po.empty() ? join(dir, "po.json") : o.po;
  PeriodicOrbit po = std::filesystem::exists(src) ? read_orbit_file(src) : refine_from_config(c, f);
  if (!po.has_floquet()) po = floquet_from_config(c, f, po);
  const LeftBoundary left = LeftBoundary::periodic_orbit_ray(po, c.left.u1_sign, c.reverse_time());
  const VectorField g = flow_field(c, f);

  json cases = json::array();
  bool ok = true;
  const std::string hash = config_hash(c);
  io::CsvWriter conv(hash, {"intervals", "gmres_iter", "relative_residual"});
  for (int k : {2, 3, 4, 5}) {
    ShootingProblem p(f, left, verify_bcs(po, g, k, c.integrator), c.integrator);
    p.workers = resolve_workers(o.workers >= 0 ? o.workers : c.workers, k);
    const VerifyCase vc = verify_case(p, c.left.eps0, c.continuation.ds0, c.seed);
    const bool lemma = vc.lemma_ok(), bound = vc.bound_ok(), jac = vc.jacobian_fd_error <= 1e-5;
    ok = ok && lemma && bound && jac;
    for (std::size_t i = 0; i < vc.history.size(); ++i) conv.row(k, static_cast<int>(i), vc.history[i]);
    cases.push_back({{"intervals", k},
                     {"unknowns", vc.unknowns},
                     {"eigenvalue_one_count", vc.eig_one_algebraic},
                     {"eigenvalue_one_required", vc.eig_one_required},
                     {"rank_deficiency", vc.rank_deficiency},
                     {"rank_deficiency_required", vc.rank_deficiency_required},
                     {"lemma_checked", vc.lemma_checked},
                     {"lemma_ok", lemma},
                     {"gmres_iterations_1e-8", vc.gmres_iterations},
                     {"gmres_bound", vc.gmres_bound},
                     {"gmres_bound_ok", bound},
                     {"gmres_residual_at_bound", vc.gmres_residual_at_bound},
                     {"bound_held_at_1e-10", vc.bound_held_tight},
                     {"jacobian_fd_relative_error", vc.jacobian_fd_error},
                     {"jacobian_ok", jac}});
    log(LogLevel::Info, "verify k=" + std::to_string(k) + ": gmres " + std::to_string(vc.gmres_iterations) + "/" +
                            std::to_string(vc.gmres_bound));
  }
  conv.save(join(dir, "verify_convergence.csv"));
  json report = {{"command", "verify"}, {"mu1", po.mu1}, {"period", po.period}, {"cases", cases}, {"ok", ok}};
  io::write_json_file(join(dir, "verify.json"), {{"meta", io::meta(hash)}, {"report", report}});
  if (all_ok) *all_ok = ok;
  return report;
}

/// Re-exports mesh.json as mesh.csv and a Wavefront OBJ surface joining
/// consecutive orbits sample by sample (first three coordinates).
inline json cmd_export(const RunConfig& c, const Options& o) {
  const std::string dir = out_dir(c, o);
  const json j = io::read_json_file(join(dir, "mesh.json"));
  if (!j.contains("orbits")) throw ConfigError("mesh.json: missing orbits");
  RunResult res;
  int n = 0;
  for (std::size_t i = 0; i < j.at("orbits").size(); ++i) {
    res.mesh.orbits.push_back(io::mesh_orbit_from_json(j.at("orbits")[i], "orbits[" + std::to_string(i) + "]"));
    if (!res.mesh.orbits.back().samples.empty()) n = static_cast<int>(res.mesh.orbits.back().samples[0].size());
  }
  std::ostringstream obj;
  obj << "# orbitcont " << io::version << " config_hash=" << config_hash(c) << "\n";
  std::size_t vertices = 0, faces = 0;
  std::vector<std::size_t> first_vertex;
  for (const auto& orb : res.mesh.orbits) {
    first_vertex.push_back(vertices + 1);
    for (const auto& x : orb.samples) {
      obj << "v";
      for (int i = 0; i < 3; ++i) obj << " " << io::format_real(i < x.size() ? x[i] : 0.0);
      obj << "\n";
      ++vertices;
    }
  }
  for (std::size_t k = 0; k + 1 < res.mesh.orbits.size(); ++k) {
    const std::size_t m = std::min(res.mesh.orbits[k].samples.size(), res.mesh.orbits[k + 1].samples.size());
    for (std::size_t s = 0; s + 1 < m; ++s) {
      const std::size_t a = first_vertex[k] + s, b = first_vertex[k + 1] + s;
      obj << "f " << a << " " << b << " " << b + 1 << "\n";
      obj << "f " << a << " " << b + 1 << " " << a + 1 << "\n";
      faces += 2;
    }
  }
  io::write_text_file(join(dir, "surface.obj"), obj.str());
  mesh_csv(config_hash(c), res.mesh, n).save(join(dir, "mesh.csv"));
  return {{"command", "export"}, {"orbits", res.mesh.orbits.size()}, {"vertices", vertices}, {"faces", faces}};
}

/// Machine-readable error report.
inline json error_json(const std::string& kind, const std::string& message) {
  return {{"error", {{"kind", kind}, {"message", message}}}};
}

}  // namespace orbitcont::cli
