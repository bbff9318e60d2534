#include "uflow/scenario.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "uflow/analysis.hpp"
#include "uflow/errors.hpp"
#include "uflow/sensitivity.hpp"

namespace uflow {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- config parsing -------------------------------------------------------

void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(fmt::format("{}: unknown key '{}'", where, k));
  }
}

template <class T>
T get_or(const json& j, const char* key, const T& fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}.{}: {}", where, key, e.what()));
  }
}

Vector to_vector(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(where + ": expected an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

Matrix to_matrix(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw ConfigError(where + ": expected a non-empty array of rows");
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    const Vector row = to_vector(j[r], where);
    if (static_cast<std::size_t>(row.size()) != cols) throw ConfigError(where + ": ragged rows");
    m.row(static_cast<Eigen::Index>(r)) = row.transpose();
  }
  return m;
}

json from_vector(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json from_matrix(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(from_vector(m.row(r).transpose()));
  return rows;
}

json from_set(const ActiveSet& s) { return s.indices(); }

json word_json(const std::vector<ActiveSet>& w) {
  json out = json::array();
  for (const auto& s : w) out.push_back(from_set(s));
  return out;
}

SimConfig parse_sim(const json& j, double* sample_dt) {
  only_keys(j, "sim",
            {"rel_tol", "abs_tol", "max_step", "event_tol", "zeno_max_events", "zeno_min_dt", "zeno_min_dt_count",
             "zeno_geometric_window", "zeno_ratio", "simultaneity_window", "t_final", "sample_dt"});
  SimConfig c;
  c.rel_tol = get_or(j, "rel_tol", c.rel_tol, "sim");
  c.abs_tol = get_or(j, "abs_tol", c.abs_tol, "sim");
  c.max_step = get_or(j, "max_step", c.max_step, "sim");
  c.event_tol = get_or(j, "event_tol", c.event_tol, "sim");
  c.zeno_max_events = get_or(j, "zeno_max_events", c.zeno_max_events, "sim");
  c.zeno_min_dt = get_or(j, "zeno_min_dt", c.zeno_min_dt, "sim");
  c.zeno_min_dt_count = get_or(j, "zeno_min_dt_count", c.zeno_min_dt_count, "sim");
  c.zeno_geometric_window = get_or(j, "zeno_geometric_window", c.zeno_geometric_window, "sim");
  c.zeno_ratio = get_or(j, "zeno_ratio", c.zeno_ratio, "sim");
  c.simultaneity_window = get_or(j, "simultaneity_window", c.simultaneity_window, "sim");
  c.t_final = get_or(j, "t_final", c.t_final, "sim");
  *sample_dt = get_or(j, "sample_dt", *sample_dt, "sim");
  if (!(*sample_dt > 0.0)) throw ConfigError("sim.sample_dt must be positive");
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("sim: ") + e.what());
  }
  return c;
}

json sim_json(const SimConfig& c, double sample_dt) {
  return {{"rel_tol", c.rel_tol},
          {"abs_tol", c.abs_tol},
          {"max_step", c.max_step},
          {"event_tol", c.event_tol},
          {"zeno_max_events", c.zeno_max_events},
          {"zeno_min_dt", c.zeno_min_dt},
          {"zeno_min_dt_count", c.zeno_min_dt_count},
          {"zeno_geometric_window", c.zeno_geometric_window},
          {"zeno_ratio", c.zeno_ratio},
          {"simultaneity_window", c.simultaneity_window},
          {"t_final", c.t_final},
          {"sample_dt", sample_dt}};
}

SectionSpec parse_section(const json& j) {
  only_keys(j, "analysis.section",
            {"name", "index", "offset", "sign", "t_min", "refine", "tol_fp", "max_iter", "damping", "weight_diag",
             "search_norm", "samples"});
  const std::string w = "analysis.section";
  SectionSpec s;
  if (!j.contains("index")) throw ConfigError(w + ": 'index' is required");
  s.name = get_or(j, "name", s.name, w);
  s.index = get_or(j, "index", s.index, w);
  s.offset = get_or(j, "offset", s.offset, w);
  s.sign = get_or(j, "sign", s.sign, w);
  s.t_min = get_or(j, "t_min", s.t_min, w);
  s.refine = get_or(j, "refine", s.refine, w);
  s.tol_fp = get_or(j, "tol_fp", s.tol_fp, w);
  s.max_iter = get_or(j, "max_iter", s.max_iter, w);
  s.damping = get_or(j, "damping", s.damping, w);
  s.weight_diag = get_or(j, "weight_diag", s.weight_diag, w);
  s.search_norm = get_or(j, "search_norm", s.search_norm, w);
  s.samples = get_or(j, "samples", s.samples, w);
  if (s.sign == 0.0) throw ConfigError(w + ".sign must be nonzero");
  return s;
}

json section_json(const SectionSpec& s) {
  return {{"name", s.name},       {"index", s.index},           {"offset", s.offset},
          {"sign", s.sign},       {"t_min", s.t_min},           {"refine", s.refine},
          {"tol_fp", s.tol_fp},   {"max_iter", s.max_iter},     {"damping", s.damping},
          {"weight_diag", s.weight_diag}, {"search_norm", s.search_norm}, {"samples", s.samples}};
}

SweepSpec parse_sweep(const json& j) {
  only_keys(j, "analysis.sweep", {"parameter", "range", "count", "at", "component", "threads"});
  const std::string w = "analysis.sweep";
  SweepSpec s;
  s.parameter = get_or(j, "parameter", s.parameter, w);
  const auto range = get_or(j, "range", std::vector<double>{}, w);
  if (range.size() != 2) throw ConfigError(w + ".range must hold two numbers");
  s.lo = range[0];
  s.hi = range[1];
  s.count = get_or(j, "count", s.count, w);
  s.at = get_or(j, "at", s.at, w);
  s.component = get_or(j, "component", s.component, w);
  s.threads = get_or(j, "threads", s.threads, w);
  if (s.parameter.empty()) throw ConfigError(w + ".parameter is required");
  if (s.count < 1) throw ConfigError(w + ".count must be positive");
  if (s.at != "final" && s.at != "return") throw ConfigError(w + ".at must be 'final' or 'return'");
  return s;
}

json sweep_json(const SweepSpec& s) {
  return {{"parameter", s.parameter}, {"range", {s.lo, s.hi}}, {"count", s.count},
          {"at", s.at},               {"component", s.component}, {"threads", s.threads}};
}

DerivativeSpec parse_derivative(const json& j) {
  only_keys(j, "analysis.derivative", {"directions", "random", "alpha", "k_max"});
  const std::string w = "analysis.derivative";
  DerivativeSpec s;
  if (j.contains("directions")) {
    const auto& d = j.at("directions");
    if (d.is_string()) {
      if (d.get<std::string>() != "basis") throw ConfigError(w + ".directions: expected \"basis\" or a list");
      s.basis = true;
    } else {
      if (!d.is_array()) throw ConfigError(w + ".directions: expected \"basis\" or a list");
      for (const auto& v : d) {
        const Vector dv = to_vector(v, w + ".directions");
        s.directions.emplace_back(dv.data(), dv.data() + dv.size());
      }
    }
  }
  s.random = get_or(j, "random", s.random, w);
  s.alpha = get_or(j, "alpha", s.alpha, w);
  s.k_max = get_or(j, "k_max", s.k_max, w);
  if (!(s.alpha > 0.0)) throw ConfigError(w + ".alpha must be positive");
  return s;
}

json derivative_json(const DerivativeSpec& s) {
  json j = {{"random", s.random}, {"alpha", s.alpha}, {"k_max", s.k_max}};
  if (s.basis) {
    j["directions"] = "basis";
  } else {
    j["directions"] = s.directions;
  }
  return j;
}

}  // namespace

ScenarioConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  only_keys(root, "config", {"system", "initial", "sim", "seed", "analysis"});
  ScenarioConfig c;

  if (!root.contains("system")) throw ConfigError("config: 'system' is required");
  const json& sys = root.at("system");
  only_keys(sys, "system", {"name", "params"});
  c.system = get_or(sys, "name", std::string{}, "system");
  const auto& entry = registry_entry(c.system);
  c.params = merge_params(entry, get_or(sys, "params", Params{}, "system"));
  const MechSystem built = entry.build(c.params);

  if (!root.contains("initial")) throw ConfigError("config: 'initial' is required");
  const json& init = root.at("initial");
  only_keys(init, "initial", {"t", "q", "qd", "J", "u"});
  c.t0 = get_or(init, "t", 0.0, "initial");
  if (!init.contains("q") || !init.contains("qd")) throw ConfigError("initial: 'q' and 'qd' are required");
  c.q = to_vector(init.at("q"), "initial.q");
  c.qd = to_vector(init.at("qd"), "initial.qd");
  for (const auto& [key, v] : {std::pair{"q", &c.q}, std::pair{"qd", &c.qd}}) {
    if (v->size() != built.dof) {
      throw ConfigError(fmt::format("initial.{}: system '{}' has {} degrees of freedom, got {}", key, c.system,
                                    built.dof, v->size()));
    }
  }
  const auto J = get_or(init, "J", std::vector<int>{}, "initial");
  for (int i : J) {
    if (i < 0 || i >= built.num_constraints) throw ConfigError(fmt::format("initial.J: no constraint {}", i));
  }
  c.J = ActiveSet(J);
  if (init.contains("u")) {
    if (!entry.build_controlled) throw ConfigError(fmt::format("initial.u: system '{}' takes no input", c.system));
    c.u = to_vector(init.at("u"), "initial.u");
    if (c.u->size() != entry.build_controlled(c.params).m) throw ConfigError("initial.u: wrong input dimension");
  }

  c.sim = parse_sim(root.value("sim", json::object()), &c.sample_dt);
  c.seed = get_or(root, "seed", c.seed, "config");

  if (root.contains("analysis")) {
    const json& an = root.at("analysis");
    only_keys(an, "analysis", {"section", "sweep", "derivative", "controllability", "pl_map"});
    if (an.contains("section")) {
      c.section = parse_section(an.at("section"));
      if (c.section->index < 0 || c.section->index >= 2 * built.dof) {
        throw ConfigError("analysis.section.index out of range");
      }
    }
    if (an.contains("sweep")) {
      c.sweep = parse_sweep(an.at("sweep"));
      if (c.sweep->component < 0 || c.sweep->component >= 2 * built.dof) {
        throw ConfigError("analysis.sweep.component out of range");
      }
      if (c.sweep->at == "return" && !c.section) throw ConfigError("analysis.sweep.at = 'return' needs a section");
    }
    if (an.contains("derivative")) c.derivative = parse_derivative(an.at("derivative"));
    if (an.contains("controllability")) {
      const json& cj = an.at("controllability");
      only_keys(cj, "analysis.controllability", {"horizon", "k_max"});
      ControlSpec cs;
      cs.horizon = get_or(cj, "horizon", cs.horizon, "analysis.controllability");
      cs.k_max = get_or(cj, "k_max", cs.k_max, "analysis.controllability");
      if (!(cs.horizon > 0.0)) throw ConfigError("analysis.controllability.horizon must be positive");
      if (!c.u) throw ConfigError("analysis.controllability needs initial.u");
      c.controllability = cs;
    }
    if (an.contains("pl_map")) {
      const json& pj = an.at("pl_map");
      only_keys(pj, "analysis.pl_map", {"pieces", "cones"});
      PlMapSpec pl;
      for (const auto& m : pj.at("pieces")) pl.pieces.push_back(to_matrix(m, "analysis.pl_map.pieces"));
      for (const auto& m : pj.at("cones")) pl.cones.push_back(to_matrix(m, "analysis.pl_map.cones"));
      if (pl.pieces.empty() || pl.pieces.size() != pl.cones.size()) {
        throw ConfigError("analysis.pl_map: one cone per piece required");
      }
      const auto n = pl.pieces.front().rows();
      for (std::size_t i = 0; i < pl.pieces.size(); ++i) {
        if (pl.pieces[i].rows() != n || pl.pieces[i].cols() != n || pl.cones[i].cols() != n) {
          throw ConfigError("analysis.pl_map: inconsistent dimensions");
        }
      }
      c.pl_map = std::move(pl);
    }
  }
  return c;
}

ScenarioConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ScenarioConfig& c) {
  json root;
  root["system"] = {{"name", c.system}, {"params", c.params}};
  json init = {{"t", c.t0}, {"q", from_vector(c.q)}, {"qd", from_vector(c.qd)}, {"J", from_set(c.J)}};
  if (c.u) init["u"] = from_vector(*c.u);
  root["initial"] = init;
  root["sim"] = sim_json(c.sim, c.sample_dt);
  root["seed"] = c.seed;
  json an = json::object();
  if (c.section) an["section"] = section_json(*c.section);
  if (c.sweep) an["sweep"] = sweep_json(*c.sweep);
  if (c.derivative) an["derivative"] = derivative_json(*c.derivative);
  if (c.controllability) an["controllability"] = {{"horizon", c.controllability->horizon}, {"k_max", c.controllability->k_max}};
  if (c.pl_map) {
    json pieces = json::array(), cones = json::array();
    for (const auto& m : c.pl_map->pieces) pieces.push_back(from_matrix(m));
    for (const auto& m : c.pl_map->cones) cones.push_back(from_matrix(m));
    an["pl_map"] = {{"pieces", pieces}, {"cones", cones}};
  }
  if (!an.empty()) root["analysis"] = an;
  return root.dump(2) + "\n";
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += fmt::format(".tmp{}", std::hash<std::string>{}(path.string() + content) % 1000000);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string trajectory_csv(const HybridTrajectory& traj, int dof, double dt) {
  std::string out = "t";
  for (int i = 0; i < dof; ++i) out += fmt::format(",q_{}", i);
  for (int i = 0; i < dof; ++i) out += fmt::format(",qd_{}", i);
  out += ",mode_bitmask,event\n";
  auto row = [&](double t, const Vector& x, const ActiveSet& mode, int event) {
    out += fmt::format("{:.17g}", t);
    for (Eigen::Index i = 0; i < x.size(); ++i) out += fmt::format(",{:.17g}", x[i]);
    out += fmt::format(",{},{}\n", mode.mask(), event);
  };
  const double t0 = traj.t_start();
  // One grid index across segments; a grid time equal to an event time gets
  // the pre-event state.
  long long k = 0;
  for (std::size_t s = 0; s < traj.segments.size(); ++s) {
    const auto& seg = traj.segments[s];
    for (;; ++k) {
      const double t = t0 + static_cast<double>(k) * dt;
      if (t > seg.t_end()) break;
      row(t, seg.state_at(t), seg.mode, 0);
    }
    if (s < traj.events.size()) {
      const auto& e = traj.events[s];
      row(e.t, e.x_pre, e.mode_before, 1);
      row(e.t, e.x_post, e.mode_after, 2);
    }
  }
  const double te = traj.t_end();
  const double k_end = (te - t0) / dt;
  if (std::abs(k_end - std::round(k_end)) > 1e-9) row(te, traj.segments.back().x_end(), traj.segments.back().mode, 0);
  return out;
}

namespace {

// ---- commands ---------------------------------------------------------------

struct Built {
  MechSystem sys;
  std::optional<ControlledSystem> csys;
};

Built build(const ScenarioConfig& c, const Params& params) {
  const auto& entry = registry_entry(c.system);
  Built b;
  if (c.u) {
    b.csys = entry.build_controlled(params);
    b.sys = b.csys->bind(*c.u);
  } else {
    b.sys = entry.build(params);
  }
  return b;
}

State initial_state(const ScenarioConfig& c) { return State{c.t0, c.q, c.qd, c.J}; }

SimConfig absolute(const ScenarioConfig& c) {
  SimConfig s = c.sim;
  s.t_final = c.t0 + c.sim.t_final;
  return s;
}

int exit_for(Termination t) {
  switch (t) {
    case Termination::time_reached:
    case Termination::stop_condition: return kExitOk;
    case Termination::zeno_guard: return kExitZeno;
    case Termination::grazing: return kExitGrazing;
    case Termination::model_error: return kExitModel;
  }
  return kExitFailure;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json event_json(const Event& e) {
  json details = json::array();
  for (const auto& d : e.details) {
    details.push_back({{"constraint", d.constraint}, {"test", d.test}, {"value", d.value}, {"passed", d.passed}});
  }
  return {{"t", e.t},
          {"kind", to_string(e.kind)},
          {"activated", from_set(e.activated)},
          {"deactivated", from_set(e.deactivated)},
          {"separated", from_set(e.separated)},
          {"impact_set", from_set(e.impact_set)},
          {"mode_before", from_set(e.mode_before)},
          {"mode_after", from_set(e.mode_after)},
          {"x_pre", from_vector(e.x_pre)},
          {"x_post", from_vector(e.x_post)},
          {"admissible", e.admissible},
          {"details", details}};
}

json trajectory_json(const ScenarioConfig& c, const HybridTrajectory& tr) {
  json events = json::array();
  for (const auto& e : tr.events) events.push_back(event_json(e));
  return {{"system", c.system},
          {"termination", to_string(tr.termination)},
          {"admissible", tr.admissible},
          {"diagnostic", tr.diagnostic},
          {"offending_constraint", tr.offending_constraint},
          {"zeno_accumulation_time", number_or_null(tr.zeno_accumulation_time)},
          {"t_end", tr.t_end()},
          {"word", word_json(tr.word())},
          {"eta", tr.eta()},
          {"events", events}};
}

void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

void write_failure(const fs::path& out, const std::string& file, const std::string& kind, const std::string& what,
                   int constraint = -1) {
  write_json(out / file, {{"error", kind}, {"diagnostic", what}, {"offending_constraint", constraint}});
}

/// Runs body and maps library errors to exit codes, writing error.json.
template <class Fn>
int guarded(const fs::path& out, Fn&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitSchema;
  } catch (const GrazingError& e) {
    spdlog::error("{}", e.what());
    write_failure(out, "error.json", "grazing", e.what(), e.constraint());
    return kExitGrazing;
  } catch (const InadmissibleError& e) {
    spdlog::error("{}", e.what());
    write_failure(out, "error.json", "inadmissible", e.what());
    return kExitGrazing;
  } catch (const NoReturnError& e) {
    spdlog::error("{}", e.what());
    write_failure(out, "error.json", "no_return", e.what());
    return kExitNoReturn;
  } catch (const ModelError& e) {
    spdlog::error("{}", e.what());
    write_failure(out, "error.json", "model", e.what());
    return kExitModel;
  } catch (const ConstraintDependenceError& e) {
    spdlog::error("{}", e.what());
    write_failure(out, "error.json", "model", e.what());
    return kExitModel;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    write_failure(out, "error.json", "error", e.what());
    return kExitFailure;
  }
}

std::vector<Vector> requested_directions(const ScenarioConfig& c, const MechSystem& sys, int total_dim,
                                         unsigned long long seed) {
  std::vector<Vector> dirs;
  const int nx = 2 * sys.dof;
  Matrix basis = Matrix::Zero(total_dim, total_dim - nx + tangent_basis(sys, initial_state(c)).cols());
  {
    const Matrix t = tangent_basis(sys, initial_state(c));
    basis.topLeftCorner(nx, t.cols()) = t;
    for (int i = 0; i < total_dim - nx; ++i) basis(nx + i, t.cols() + i) = 1.0;
  }
  const auto& spec = *c.derivative;
  if (spec.basis) {
    for (Eigen::Index k = 0; k < basis.cols(); ++k) dirs.push_back(basis.col(k));
  }
  for (const auto& d : spec.directions) {
    if (static_cast<int>(d.size()) != total_dim) {
      throw ConfigError(fmt::format("analysis.derivative.directions: expected length {}", total_dim));
    }
    dirs.push_back(Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size())));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  for (int k = 0; k < spec.random; ++k) {
    Vector w(basis.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = n01(rng);
    Vector v = basis * w;
    dirs.push_back(v / v.norm());
  }
  if (dirs.empty()) {
    for (Eigen::Index k = 0; k < basis.cols(); ++k) dirs.push_back(basis.col(k));
  }
  return dirs;
}

Vector simulate_final(const ScenarioConfig& c, const Built& b, const Vector& dz) {
  const int nx = 2 * b.sys.dof;
  const State x0 = initial_state(c);
  const Vector x = x0.x() + dz.head(nx);
  MechSystem sys = b.sys;
  if (b.csys) sys = b.csys->bind(*c.u + dz.tail(b.csys->m));
  const auto tr = flow(sys, State::from_x(c.t0, x, c.J), absolute(c));
  if (!tr.admissible) throw InadmissibleError("perturbed run not admissible: " + tr.diagnostic);
  return tr.final_state().x();
}

json selection_json(const SelectionDerivative& s) {
  json steps = json::array();
  for (const auto& o : s.selection.orderings) {
    json ev = json::array();
    for (const auto& st : o.steps) ev.push_back({{"kind", to_string(st.kind)}, {"constraint", st.constraint}});
    steps.push_back({{"steps", ev}, {"merged", o.merged}, {"continuous", o.continuous}});
  }
  const Matrix& m = s.state_jac;
  std::vector<double> flat;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) flat.push_back(m(r, k));
  }
  return {{"label", s.selection.label()},
          {"word", word_json(s.selection.word)},
          {"eta", s.selection.eta},
          {"merged", s.selection.merged},
          {"continuous", s.selection.continuous},
          {"orderings", steps},
          {"rows", m.rows()},
          {"cols", m.cols()},
          {"state_jac", flat},
          {"time_jac", from_vector(s.time_jac)}};
}

}  // namespace

int cmd_simulate(const ScenarioConfig& c, const fs::path& out, const RunOptions&) {
  return guarded(out, [&]() -> int {
    const Built b = build(c, c.params);
    const auto tr = flow(b.sys, initial_state(c), absolute(c));
    write_atomic(out / "trajectory.csv", trajectory_csv(tr, b.sys.dof, c.sample_dt));
    write_json(out / "events.json", trajectory_json(c, tr));
    spdlog::info("{}: {} events, termination {}", c.system, tr.events.size(), to_string(tr.termination));
    return exit_for(tr.termination);
  });
}

int cmd_bderiv(const ScenarioConfig& c, const fs::path& out, const RunOptions& opt) {
  return guarded(out, [&]() -> int {
    const Built b = build(c, c.params);
    const auto tr = flow(b.sys, initial_state(c), absolute(c));
    if (!tr.admissible) {
      write_json(out / "bderiv.json", {{"error", "inadmissible"}, {"trajectory", trajectory_json(c, tr)}});
      return exit_for(tr.termination) == kExitOk ? kExitGrazing : exit_for(tr.termination);
    }
    const DerivativeSpec spec = c.derivative.value_or(DerivativeSpec{});
    SensitivityOptions sopt;
    sopt.k_max = spec.k_max;
    const BDerivative bd = b.csys ? b_derivative(*b.csys, *c.u, tr, absolute(c), sopt)
                                  : b_derivative(b.sys, tr, absolute(c), sopt);
    const int total = 2 * b.sys.dof + (b.csys ? b.csys->m : 0);

    ScenarioConfig with_spec = c;
    with_spec.derivative = spec;
    const auto dirs = requested_directions(with_spec, b.sys, total, opt.seed.value_or(c.seed));

    json selections = json::array();
    for (const auto& s : bd.selections) selections.push_back(selection_json(s));
    json dir_json = json::array();
    const Vector base = opt.validate ? simulate_final(c, b, Vector::Zero(total)) : Vector();
    double worst = 0.0;
    for (const auto& v : dirs) {
      const auto m = bd.membership(v);
      const Vector dphi = bd.apply(0.0, v);
      json dj = {{"direction", from_vector(v)},
                 {"selection", m.selection},
                 {"agreeing", m.agreeing},
                 {"boundary", m.boundary},
                 {"derivative", from_vector(dphi)}};
      if (opt.validate) {
        const Vector fd = (simulate_final(c, b, spec.alpha * v) - base) / spec.alpha;
        const double res = (fd - dphi).norm() / std::max(1.0, dphi.norm());
        worst = std::max(worst, res);
        dj["finite_difference"] = from_vector(fd);
        dj["residual"] = res;
      }
      dir_json.push_back(dj);
    }
    json report = {{"system", c.system},
                   {"basepoint", from_vector(bd.x0)},
                   {"t0", bd.t0},
                   {"t_end", bd.t_end},
                   {"state_dim", bd.state_dim},
                   {"param_dim", bd.param_dim},
                   {"word", word_json(tr.word())},
                   {"eta", tr.eta()},
                   {"selections", selections},
                   {"realizable", bd.realizable()},
                   {"directions", dir_json},
                   {"orthogonality_violation", !bd.orthogonal},
                   {"warnings", bd.warnings}};
    if (opt.validate) report["max_residual"] = worst;
    write_json(out / "bderiv.json", report);
    return kExitOk;
  });
}

namespace {

json pl_map_json(const PiecewiseLinearMap& map, const ContractionOptions& copt, const Matrix& weight) {
  json pieces = json::array();
  for (std::size_t i = 0; i < map.pieces.size(); ++i) {
    pieces.push_back({{"label", map.labels[i]}, {"matrix", from_matrix(map.pieces[i])}});
  }
  const auto st = stability_contraction_test(map, weight, copt);
  const auto in = instability_eigenvector_test(map, copt.tol_margin);
  json inst = {{"verdict", to_string(in.verdict)}};
  if (in.witness) {
    inst["witness"] = {{"piece", in.witness->piece},
                       {"eigenvalue", in.witness->eigenvalue},
                       {"vector", from_vector(in.witness->vector)},
                       {"growth", iterate_growth(map, 1e-6 * in.witness->vector, 5)}};
  }
  json rejected = json::array();
  for (const auto& r : in.rejected) {
    rejected.push_back({{"piece", r.piece}, {"eigenvalue", r.eigenvalue}, {"vector", from_vector(r.vector)}});
  }
  inst["rejected"] = rejected;
  return {{"pieces", pieces},
          {"stability", {{"verdict", to_string(st.verdict)}, {"norms", st.norms}, {"weight", from_matrix(st.weight)}}},
          {"instability", inst}};
}

SweepPoint sweep_point(const ScenarioConfig& c, const SweepSpec& sw, double value) {
  SweepPoint sp;
  sp.outcome = Vector::Constant(2 * static_cast<Eigen::Index>(c.q.size()), std::numeric_limits<double>::quiet_NaN());
  ScenarioConfig run = c;
  const auto& p = sw.parameter;
  auto index_of = [&](const std::string& prefix) { return std::stoi(p.substr(prefix.size())); };
  if (p.rfind("q.", 0) == 0) {
    run.q[index_of("q.")] = value;
  } else if (p.rfind("qd.", 0) == 0) {
    run.qd[index_of("qd.")] = value;
  } else if (p.rfind("u.", 0) == 0) {
    (*run.u)[index_of("u.")] = value;
  } else {
    run.params[p] = value;
  }
  try {
    const Built b = build(run, run.params);
    if (sw.at == "final") {
      const auto tr = flow(b.sys, initial_state(run), absolute(run));
      sp.termination = tr.termination;
      sp.word = tr.word();
      sp.outcome = tr.final_state().x();
      if (!tr.admissible) sp.status = tr.diagnostic;
    } else {
      const auto& s = *run.section;
      const Section sec = coordinate_section(s.index, s.offset, s.sign, s.t_min, s.name);
      const auto r = poincare_map(b.sys, sec, initial_state(run), run.sim);
      sp.termination = r.trajectory.termination;
      sp.word = r.trajectory.word();
      sp.outcome = r.x_return.x();
    }
  } catch (const Error& e) {
    sp.status = e.what();
  }
  return sp;
}

void validate_sweep_parameter(const ScenarioConfig& c, const SweepSpec& sw) {
  const auto& p = sw.parameter;
  auto check = [&](const std::string& prefix, Eigen::Index size) {
    int i = -1;
    try {
      i = std::stoi(p.substr(prefix.size()));
    } catch (const std::exception&) {
    }
    if (i < 0 || i >= size) throw ConfigError("analysis.sweep.parameter: bad index in '" + p + "'");
  };
  if (p.rfind("q.", 0) == 0) {
    check("q.", c.q.size());
  } else if (p.rfind("qd.", 0) == 0) {
    check("qd.", c.qd.size());
  } else if (p.rfind("u.", 0) == 0) {
    if (!c.u) throw ConfigError("analysis.sweep.parameter: no input u configured");
    check("u.", c.u->size());
  } else if (!c.params.count(p)) {
    throw ConfigError("analysis.sweep.parameter: unknown parameter '" + p + "'");
  }
}

double base_value(const ScenarioConfig& c, const SweepSpec& sw) {
  const auto& p = sw.parameter;
  if (p.rfind("q.", 0) == 0) return c.q[std::stoi(p.substr(2))];
  if (p.rfind("qd.", 0) == 0) return c.qd[std::stoi(p.substr(3))];
  if (p.rfind("u.", 0) == 0) return (*c.u)[std::stoi(p.substr(2))];
  return c.params.at(p);
}

}  // namespace

int cmd_analyze(const ScenarioConfig& c, const fs::path& out, const RunOptions& opt) {
  return guarded(out, [&]() -> int {
    if (!c.section && !c.sweep && !c.controllability && !c.pl_map) {
      throw ConfigError("analyze needs analysis.section, sweep, controllability or pl_map");
    }
    if (c.sweep) validate_sweep_parameter(c, *c.sweep);
    const Built b = build(c, c.params);
    json report = {{"system", c.system}};
    int code = kExitOk;

    if (c.pl_map) {
      const auto map = PiecewiseLinearMap::from_cones(c.pl_map->pieces, c.pl_map->cones);
      report["pl_map"] = pl_map_json(map, {}, {});
      report["pl_map"]["continuity_defect"] = map.continuity_defect(256, static_cast<unsigned>(opt.seed.value_or(c.seed)));
    }

    if (c.section) {
      const auto& s = *c.section;
      const Section sec = coordinate_section(s.index, s.offset, s.sign, s.t_min, s.name);
      State x = initial_state(c);
      json fpj = json::object();
      if (s.refine) {
        const auto fp = refine_fixed_point(b.sys, sec, x, c.sim, s.tol_fp, s.max_iter, s.damping);
        fpj = {{"converged", fp.converged}, {"iterations", fp.iterations}, {"residual", fp.residual}};
        x = fp.x;
      }
      PoincareOptions popt;
      popt.k_max = c.derivative ? c.derivative->k_max : 3;
      popt.samples = s.samples;
      popt.seed = static_cast<unsigned>(opt.seed.value_or(c.seed));
      const auto pd = poincare_bderivative(b.sys, sec, x, c.sim, popt);
      Matrix weight;
      if (!s.weight_diag.empty()) {
        if (static_cast<int>(s.weight_diag.size()) != pd.section.dim()) {
          throw ConfigError(fmt::format("analysis.section.weight_diag: expected {} entries", pd.section.dim()));
        }
        weight = Eigen::Map<const Vector>(s.weight_diag.data(), pd.section.dim()).asDiagonal();
      }
      ContractionOptions copt;
      copt.search_diagonal = s.search_norm;
      json pj = pl_map_json(pd.map, copt, weight);
      pj["fixed_point"] = {{"t", pd.fixed_point.t},
                           {"q", from_vector(pd.fixed_point.q)},
                           {"qd", from_vector(pd.fixed_point.qd)},
                           {"J", from_set(pd.fixed_point.J)}};
      pj["refinement"] = fpj;
      pj["period"] = pd.period;
      pj["fixed_point_residual"] = pd.fixed_point_residual;
      pj["frame"] = from_matrix(pd.section.frame);
      pj["flow_selection"] = pd.flow_selection;
      pj["warnings"] = pd.warnings;
      report["poincare"] = pj;
    }

    if (c.controllability) {
      const auto cr = controllability_test(*b.csys, initial_state(c), *c.u, c.controllability->horizon, c.sim,
                                           c.controllability->k_max);
      json blocks = json::array();
      for (const auto& bl : cr.blocks) {
        json bj = {{"selection", bl.selection},
                   {"label", cr.bderiv.selections[static_cast<std::size_t>(bl.selection)].selection.label()},
                   {"block", from_matrix(bl.block)},
                   {"rank", bl.rank},
                   {"min_singular", bl.min_singular}};
        if (bl.determinant) bj["determinant"] = *bl.determinant;
        blocks.push_back(bj);
      }
      report["controllability"] = {
          {"verdict", to_string(cr.verdict)}, {"heuristic", cr.heuristic}, {"blocks", blocks}};
    }

    if (c.sweep) {
      const auto& sw = *c.sweep;
      const auto pts =
          parallel_sweep(sw.lo, sw.hi, sw.count, [&](double v) { return sweep_point(c, sw, v); }, sw.threads);
      std::string csv = "value,outcome";
      for (int i = 0; i < b.sys.dof; ++i) csv += fmt::format(",q_{}", i);
      for (int i = 0; i < b.sys.dof; ++i) csv += fmt::format(",qd_{}", i);
      csv += ",termination,word,status\n";
      std::vector<double> xs, ys;
      for (const auto& p : pts) {
        csv += fmt::format("{:.17g},{:.17g}", p.value, p.outcome[sw.component]);
        for (Eigen::Index i = 0; i < p.outcome.size(); ++i) csv += fmt::format(",{:.17g}", p.outcome[i]);
        std::string word;
        for (std::size_t k = 0; k < p.word.size(); ++k) word += (k ? " " : "") + p.word[k].str();
        std::string status = p.status;
        for (char& ch : status) {
          if (ch == ',' || ch == '\n') ch = ';';
        }
        csv += fmt::format(",{},\"{}\",{}\n", to_string(p.termination), word, status);
        if (std::isfinite(p.outcome[sw.component])) {
          xs.push_back(p.value);
          ys.push_back(p.outcome[sw.component]);
        }
      }
      write_atomic(out / "sweep.csv", csv);
      json sj = {{"parameter", sw.parameter}, {"points", pts.size()}, {"valid", xs.size()}};
      const double x0 = base_value(c, sw);
      if (xs.size() >= 5 && x0 > xs.front() && x0 < xs.back()) {
        const auto kr = kink_report(xs, ys, x0);
        sj["break_point"] = x0;
        sj["kink"] = {{"jump", kr.jump},           {"range", kr.range},         {"slope_left", kr.slope_left},
                      {"slope_right", kr.slope_right}, {"noise_floor", kr.noise_floor}, {"continuous", kr.continuous},
                      {"kink", kr.kink}};
      }
      report["sweep"] = sj;
    }
    write_json(out / "report.json", report);
    return code;
  });
}

std::string list_systems_json() {
  json out = json::array();
  for (const auto& e : registry()) {
    const MechSystem s = e.build(e.default_params);
    json entry = {{"name", e.name},
                  {"description", e.description},
                  {"dof", s.dof},
                  {"constraints", s.num_constraints},
                  {"params", e.default_params},
                  {"controlled", static_cast<bool>(e.build_controlled)}};
    if (e.build_controlled) entry["inputs"] = e.build_controlled(e.default_params).m;
    out.push_back(entry);
  }
  return out.dump(2) + "\n";
}

}  // namespace uflow
