#pragma once

#include <orbitcont/continuation.hpp>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifndef ORBITCONT_VERSION
#define ORBITCONT_VERSION "0.0.0"
#endif

namespace orbitcont::io {

using json = nlohmann::json;

inline constexpr const char* version = ORBITCONT_VERSION;

/// Invalid configuration or state file.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// 64-bit FNV-1a of a string, as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

inline json vec_json(const Vec& v) { return json(to_std(v)); }

inline Vec json_vec(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of numbers");
  std::vector<double> out;
  for (const auto& e : j) {
    if (!e.is_number()) throw ConfigError(where + ": expected an array of numbers");
    out.push_back(e.get<double>());
  }
  return from_std(out);
}

/// Infinite values are written as null (JSON has no infinity).
inline json real_json(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

/// Reads the members of one JSON object, rejecting unknown keys.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path(key) + ": wrong type");
    }
  }

  /// Real that may be null, meaning `null_value` (used for unbounded limits).
  void get_real(const char* key, double& out, double null_value) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    if (v.is_null()) out = null_value;
    else if (v.is_number()) out = v.get<double>();
    else throw ConfigError(path(key) + ": expected a number or null");
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + path(it.key()));
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

// ---- integrator / floquet / continuation settings -------------------------

inline json to_json(const IntegratorConfig& c) {
  return {{"rel_tol", c.rel_tol}, {"abs_tol", c.abs_tol}, {"max_step", real_json(c.max_step)},
          {"max_steps", c.max_steps}, {"event_tol", c.event_tol}};
}

inline IntegratorConfig integrator_from_json(const json& j, const std::string& where = "integrator") {
  IntegratorConfig c;
  ObjectReader r(j, where);
  r.get("rel_tol", c.rel_tol);
  r.get("abs_tol", c.abs_tol);
  r.get_real("max_step", c.max_step, std::numeric_limits<double>::infinity());
  r.get("max_steps", c.max_steps);
  r.get("event_tol", c.event_tol);
  r.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return c;
}

inline json to_json(const FloquetConfig& c) {
  return {{"eig_tol", c.eig_tol}, {"max_dim", c.max_dim}, {"max_restarts", c.max_restarts},
          {"seed", c.seed}, {"check_simple", c.check_simple}};
}

inline FloquetConfig floquet_from_json(const json& j, const std::string& where = "floquet") {
  FloquetConfig c;
  ObjectReader r(j, where);
  r.get("eig_tol", c.eig_tol);
  r.get("max_dim", c.max_dim);
  r.get("max_restarts", c.max_restarts);
  r.get("seed", c.seed);
  r.get("check_simple", c.check_simple);
  r.finish();
  if (!(c.eig_tol > 0.0) || c.max_dim < 1 || c.max_restarts < 0) throw ConfigError(where + ": invalid values");
  return c;
}

inline json to_json(const ContinuationConfig& c) {
  return {{"ds0", c.ds0},
          {"ds_min", c.ds_min},
          {"ds_max", c.ds_max},
          {"newton_tol", c.newton_tol},
          {"newton_max", c.newton_max},
          {"gmres_tol", c.gmres_tol},
          {"gmres_forcing", c.gmres_forcing},
          {"gmres_max_iter", c.gmres_max_iter},
          {"max_steps", c.max_steps},
          {"param_min", real_json(c.param_min)},
          {"param_max", real_json(c.param_max)},
          {"max_total_time", real_json(c.max_total_time)},
          {"manage_intervals", c.manage_intervals},
          {"amplification_threshold", c.amplification_threshold},
          {"amplification_probes", c.amplification_probes},
          {"max_intervals", c.max_intervals},
          {"probe_seed", c.probe_seed},
          {"mesh_samples", c.mesh_samples}};
}

inline ContinuationConfig continuation_from_json(const json& j, const std::string& where = "continuation") {
  ContinuationConfig c;
  const double inf = std::numeric_limits<double>::infinity();
  ObjectReader r(j, where);
  r.get("ds0", c.ds0);
  r.get("ds_min", c.ds_min);
  r.get("ds_max", c.ds_max);
  r.get("newton_tol", c.newton_tol);
  r.get("newton_max", c.newton_max);
  r.get("gmres_tol", c.gmres_tol);
  r.get("gmres_forcing", c.gmres_forcing);
  r.get("gmres_max_iter", c.gmres_max_iter);
  r.get("max_steps", c.max_steps);
  r.get_real("param_min", c.param_min, -inf);
  r.get_real("param_max", c.param_max, inf);
  r.get_real("max_total_time", c.max_total_time, inf);
  r.get("manage_intervals", c.manage_intervals);
  r.get("amplification_threshold", c.amplification_threshold);
  r.get("amplification_probes", c.amplification_probes);
  r.get("max_intervals", c.max_intervals);
  r.get("probe_seed", c.probe_seed);
  r.get("mesh_samples", c.mesh_samples);
  r.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return c;
}

// ---- state objects --------------------------------------------------------

inline json to_json(const PeriodicOrbit& po) {
  json j = {{"base_point", vec_json(po.base_point)}, {"period", po.period}, {"residual", po.residual}};
  j["mu1"] = std::isfinite(po.mu1) ? json(po.mu1) : json(nullptr);
  j["u1"] = po.u1.size() ? vec_json(po.u1) : json(nullptr);
  return j;
}

inline PeriodicOrbit orbit_from_json(const json& j, const std::string& where = "orbit") {
  PeriodicOrbit po;
  ObjectReader r(j, where);
  if (const json* b = r.child("base_point")) po.base_point = json_vec(*b, r.path("base_point"));
  else throw ConfigError(where + ": missing base_point");
  r.get("period", po.period);
  r.get("residual", po.residual);
  r.get_real("mu1", po.mu1, std::numeric_limits<double>::quiet_NaN());
  if (const json* u = r.child("u1"); u && !u->is_null()) po.u1 = json_vec(*u, r.path("u1"));
  r.finish();
  if (!(po.period > 0.0)) throw ConfigError(where + ": period must be positive");
  if (po.u1.size() && po.u1.size() != po.base_point.size()) throw ConfigError(where + ": u1 has wrong length");
  return po;
}

inline const char* to_string(Crossing c) {
  switch (c) {
    case Crossing::Any: return "any";
    case Crossing::Rising: return "rising";
    case Crossing::Falling: return "falling";
  }
  return "any";
}

inline Crossing crossing_from_string(const std::string& s, const std::string& where) {
  if (s == "any") return Crossing::Any;
  if (s == "rising") return Crossing::Rising;
  if (s == "falling") return Crossing::Falling;
  throw ConfigError(where + ": crossing must be any, rising or falling");
}

inline json to_json(const BoundaryCondition& bc) {
  json j = {{"kind", to_string(bc.kind)}, {"target", bc.target}};
  if (bc.kind == BoundaryCondition::Kind::Poincare) {
    j["normal"] = vec_json(bc.normal);
    j["crossing"] = to_string(bc.crossing);
  }
  return j;
}

inline BoundaryCondition bc_from_json(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  std::string kind;
  double target = 0.0;
  std::string crossing = "any";
  Vec normal;
  r.get("kind", kind);
  r.get("target", target);
  r.get("crossing", crossing);
  if (const json* n = r.child("normal")) normal = json_vec(*n, r.path("normal"));
  r.finish();
  try {
    if (kind == "fixed_time") return BoundaryCondition::fixed_time(target);
    if (kind == "arclength") return BoundaryCondition::arclength(target);
    if (kind == "poincare") {
      // Stored normals are unit length already; keep them bitwise.
      BoundaryCondition bc = BoundaryCondition::poincare(normal, target, crossing_from_string(crossing, where));
      bc.normal = normal;
      bc.target = target;
      return bc;
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  throw ConfigError(where + ": unknown boundary condition kind '" + kind + "'");
}

inline json to_json(const ContinuationState& s) {
  json bcs = json::array();
  for (const auto& bc : s.bcs) bcs.push_back(to_json(bc));
  return {{"step", s.step}, {"ds", s.ds}, {"z", vec_json(s.z)}, {"tangent", vec_json(s.tangent)}, {"bcs", bcs}};
}

inline ContinuationState state_from_json(const json& j, const std::string& where = "state") {
  ContinuationState s;
  ObjectReader r(j, where);
  r.get("step", s.step);
  r.get("ds", s.ds);
  if (const json* z = r.child("z")) s.z = json_vec(*z, r.path("z"));
  if (const json* t = r.child("tangent")) s.tangent = json_vec(*t, r.path("tangent"));
  if (const json* b = r.child("bcs")) {
    if (!b->is_array()) throw ConfigError(r.path("bcs") + ": expected an array");
    for (std::size_t i = 0; i < b->size(); ++i) {
      s.bcs.push_back(bc_from_json((*b)[i], r.path("bcs[" + std::to_string(i) + "]")));
    }
  }
  r.finish();
  if (s.z.size() == 0 || s.z.size() != s.tangent.size() || s.bcs.empty()) {
    throw ConfigError(where + ": incomplete continuation state");
  }
  return s;
}

// ---- files ------------------------------------------------------------------

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Writes via a temporary file and rename, so readers never see a
/// half-written file.
inline void write_text_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp);
    out << text;
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void write_json_file(const std::string& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// CSV with a leading comment line carrying version and config hash.
class CsvWriter {
 public:
  CsvWriter(const std::string& config_hash, const std::vector<std::string>& columns) {
    out_ << "# orbitcont " << version << " config_hash=" << config_hash << "\n";
    for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
    out_ << "\n";
  }

  template <class... Ts>
  void row(const Ts&... values) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(values), first = false), ...);
    out_ << "\n";
  }

  void row_values(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
  }

  std::string str() const { return out_.str(); }
  void save(const std::string& path) const { write_text_file(path, str()); }

  static std::string cell(double x) { return format_real(x); }
  static std::string cell(int x) { return std::to_string(x); }
  static std::string cell(bool x) { return x ? "1" : "0"; }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }

 private:
  std::ostringstream out_;
};

inline json meta(const std::string& config_hash) { return {{"version", version}, {"config_hash", config_hash}}; }

inline json to_json(const MeshOrbit& o) {
  json samples = json::array();
  for (const auto& s : o.samples) samples.push_back(vec_json(s));
  json starts = json::array(), ends = json::array(), bcs = json::array();
  for (const auto& s : o.segment_starts) starts.push_back(vec_json(s));
  for (const auto& s : o.segment_ends) ends.push_back(vec_json(s));
  for (const auto& b : o.bcs) bcs.push_back(to_json(b));
  return {{"step", o.step},         {"param", o.param},          {"total_time", o.total_time},
          {"fold", o.fold},         {"z", vec_json(o.z)},        {"bcs", bcs},
          {"segment_starts", starts}, {"segment_ends", ends},    {"arclength", o.arclength},
          {"samples", samples}};
}

inline MeshOrbit mesh_orbit_from_json(const json& j, const std::string& where) {
  MeshOrbit o;
  ObjectReader r(j, where);
  r.get("step", o.step);
  r.get("param", o.param);
  r.get("total_time", o.total_time);
  r.get("fold", o.fold);
  r.get("arclength", o.arclength);
  if (const json* z = r.child("z")) o.z = json_vec(*z, r.path("z"));
  auto vecs = [&](const char* key, std::vector<Vec>& out) {
    if (const json* a = r.child(key)) {
      if (!a->is_array()) throw ConfigError(r.path(key) + ": expected an array");
      for (const auto& e : *a) out.push_back(json_vec(e, r.path(key)));
    }
  };
  vecs("segment_starts", o.segment_starts);
  vecs("segment_ends", o.segment_ends);
  vecs("samples", o.samples);
  if (const json* b = r.child("bcs")) {
    for (std::size_t i = 0; i < b->size(); ++i) o.bcs.push_back(bc_from_json((*b)[i], r.path("bcs")));
  }
  r.finish();
  return o;
}

}  // namespace orbitcont::io
