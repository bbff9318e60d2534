#pragma once

// Scenario files and the commands the CLI runs on them. Configs and reports
// are JSON, time series are CSV.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "uflow/model.hpp"
#include "uflow/sim.hpp"
#include "uflow/systems.hpp"

namespace uflow {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitZeno = 2,
  kExitGrazing = 3,
  kExitModel = 4,
  kExitNoReturn = 5,
  kExitSchema = 64,
};

struct SectionSpec {
  std::string name = "section";
  int index = 0;  // s(x) = sign (x[index] - offset)
  double offset = 0.0;
  double sign = 1.0;
  double t_min = 0.0;
  bool refine = true;
  double tol_fp = 1e-9;
  int max_iter = 200;
  double damping = 1.0;
  std::vector<double> weight_diag;  // empty: identity
  bool search_norm = false;
  int samples = 256;
};

struct SweepSpec {
  std::string parameter;  // "q.<i>", "qd.<i>", "u.<i>", or a system parameter name
  double lo = 0.0;
  double hi = 0.0;
  int count = 0;
  std::string at = "final";  // "final" state or first "return" to the section
  int component = 0;         // index into x reported as the outcome
  int threads = 0;
};

struct DerivativeSpec {
  bool basis = false;                        // tangent basis directions
  int random = 0;                            // extra random unit directions
  std::vector<std::vector<double>> directions;
  double alpha = 1e-6;                       // step of the --validate finite differences
  int k_max = 3;
};

struct ControlSpec {
  double horizon = 0.0;
  int k_max = 3;
};

struct PlMapSpec {
  std::vector<Matrix> pieces;
  std::vector<Matrix> cones;
};

struct ScenarioConfig {
  std::string system;
  Params params;
  Vector q;
  Vector qd;
  ActiveSet J;
  std::optional<Vector> u;
  double t0 = 0.0;
  SimConfig sim;
  double sample_dt = 0.01;
  unsigned long long seed = 0;

  std::optional<SectionSpec> section;
  std::optional<SweepSpec> sweep;
  std::optional<DerivativeSpec> derivative;
  std::optional<ControlSpec> controllability;
  std::optional<PlMapSpec> pl_map;
};

/// Throws ConfigError with the offending key on schema or dimension errors.
ScenarioConfig parse_config(const std::string& json_text);
ScenarioConfig load_config(const std::filesystem::path& path);
/// Fully resolved config (defaults included); parse_config(dump_config(c)) == c.
std::string dump_config(const ScenarioConfig& cfg);

struct RunOptions {
  bool validate = false;
  std::optional<unsigned long long> seed;  // overrides the config seed
};

int cmd_simulate(const ScenarioConfig& cfg, const std::filesystem::path& out, const RunOptions& opt = {});
int cmd_bderiv(const ScenarioConfig& cfg, const std::filesystem::path& out, const RunOptions& opt = {});
int cmd_analyze(const ScenarioConfig& cfg, const std::filesystem::path& out, const RunOptions& opt = {});
/// JSON listing of the registry.
std::string list_systems_json();

/// Writes to a sibling temporary file and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& content);

/// Trajectory CSV: t, q_0.., qd_0.., mode_bitmask, event. Samples on the grid
/// t0 + k dt; each event adds its pre (event = 1) and post (event = 2) rows.
std::string trajectory_csv(const HybridTrajectory& traj, int dof, double dt);

}  // namespace uflow
