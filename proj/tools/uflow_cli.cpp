// uflow: simulate, differentiate and analyze mechanical systems with
// unilateral constraints from JSON scenario files.

#include <CLI11.hpp>
#include <iostream>

#include "uflow/errors.hpp"
#include "uflow/log.hpp"
#include "uflow/scenario.hpp"

namespace {

struct Args {
  std::string config;
  std::string out = ".";
  bool validate = false;
  bool dump = false;
  std::optional<unsigned long long> seed;
};

void add_common(CLI::App* cmd, Args& a) {
  cmd->add_option("--config", a.config, "scenario JSON")->required();
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_flag("--validate", a.validate, "check derivatives against finite differences");
  cmd->add_flag("--dump-config", a.dump, "print the resolved config and exit");
  cmd->add_option("--seed", a.seed, "seed for randomized directions and sampling");
}

}  // namespace

int main(int argc, char** argv) {
  uflow::init_logging();
  CLI::App app{"Event-driven simulation and nonsmooth sensitivity analysis"};
  app.require_subcommand(1);
  Args args;
  auto* sim = app.add_subcommand("simulate", "integrate a scenario, write trajectory.csv and events.json");
  auto* bd = app.add_subcommand("bderiv", "piecewise-linear flow derivative, write bderiv.json");
  auto* an = app.add_subcommand("analyze", "Poincare, stability, controllability and sweeps, write report.json");
  app.add_subcommand("list-systems", "print the built-in systems");
  for (auto* c : {sim, bd, an}) add_common(c, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : uflow::kExitSchema;
  }

  const auto* cmd = app.get_subcommands().front();
  if (cmd->get_name() == "list-systems") {
    std::cout << uflow::list_systems_json();
    return uflow::kExitOk;
  }

  uflow::ScenarioConfig cfg;
  try {
    cfg = uflow::load_config(args.config);
  } catch (const uflow::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return uflow::kExitSchema;
  }
  if (args.seed) cfg.seed = *args.seed;
  if (args.dump) {
    std::cout << uflow::dump_config(cfg);
    return uflow::kExitOk;
  }

  uflow::RunOptions opt;
  opt.validate = args.validate;
  opt.seed = args.seed;
  if (cmd->get_name() == "simulate") return uflow::cmd_simulate(cfg, args.out, opt);
  if (cmd->get_name() == "bderiv") return uflow::cmd_bderiv(cfg, args.out, opt);
  return uflow::cmd_analyze(cfg, args.out, opt);
}
