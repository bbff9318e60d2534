#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "uflow/analysis.hpp"
#include "uflow/errors.hpp"
#include "uflow/log.hpp"
#include "uflow/model.hpp"
#include "uflow/scenario.hpp"
#include "uflow/sensitivity.hpp"
#include "uflow/sim.hpp"
#include "uflow/systems.hpp"

namespace py = pybind11;
using namespace uflow;

namespace {

ActiveSet to_set(const std::vector<int>& v) { return ActiveSet(v); }

std::vector<std::vector<int>> word_list(const std::vector<ActiveSet>& w) {
  std::vector<std::vector<int>> out;
  for (const auto& s : w) out.push_back(s.indices());
  return out;
}

MechSystem system_from(const std::string& name, const Params& params) {
  const auto& e = registry_entry(name);
  return e.build(merge_params(e, params));
}

}  // namespace

PYBIND11_MODULE(_uflow, m) {
  m.doc() = "Event-driven simulation and nonsmooth sensitivity analysis of mechanical systems";
  init_logging();

  py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", m.attr("Error"));
  py::register_exception<GrazingError>(m, "GrazingError", m.attr("Error"));
  py::register_exception<NoReturnError>(m, "NoReturnError", m.attr("Error"));
  py::register_exception<ModelError>(m, "ModelError", m.attr("Error"));
  py::register_exception<InadmissibleError>(m, "InadmissibleError", m.attr("Error"));

  py::class_<SimConfig>(m, "SimConfig")
      .def(py::init<>())
      .def_readwrite("rel_tol", &SimConfig::rel_tol)
      .def_readwrite("abs_tol", &SimConfig::abs_tol)
      .def_readwrite("max_step", &SimConfig::max_step)
      .def_readwrite("event_tol", &SimConfig::event_tol)
      .def_readwrite("zeno_max_events", &SimConfig::zeno_max_events)
      .def_readwrite("simultaneity_window", &SimConfig::simultaneity_window)
      .def_readwrite("t_final", &SimConfig::t_final);

  py::class_<MechSystem>(m, "MechSystem")
      .def_readonly("name", &MechSystem::name)
      .def_readonly("dof", &MechSystem::dof)
      .def_readonly("num_constraints", &MechSystem::num_constraints);

  py::class_<State>(m, "State")
      .def(py::init([](double t, Vector q, Vector qd, std::vector<int> J) {
             return State{t, std::move(q), std::move(qd), ActiveSet(std::move(J))};
           }),
           py::arg("t"), py::arg("q"), py::arg("qd"), py::arg("J") = std::vector<int>{})
      .def_readonly("t", &State::t)
      .def_readonly("q", &State::q)
      .def_readonly("qd", &State::qd)
      .def_property_readonly("J", [](const State& s) { return s.J.indices(); })
      .def("x", &State::x);

  py::class_<Event>(m, "Event")
      .def_readonly("t", &Event::t)
      .def_property_readonly("kind", [](const Event& e) { return to_string(e.kind); })
      .def_property_readonly("activated", [](const Event& e) { return e.activated.indices(); })
      .def_property_readonly("deactivated", [](const Event& e) { return e.deactivated.indices(); })
      .def_property_readonly("mode_before", [](const Event& e) { return e.mode_before.indices(); })
      .def_property_readonly("mode_after", [](const Event& e) { return e.mode_after.indices(); })
      .def_readonly("x_pre", &Event::x_pre)
      .def_readonly("x_post", &Event::x_post);

  py::class_<HybridTrajectory>(m, "HybridTrajectory")
      .def_readonly("events", &HybridTrajectory::events)
      .def_property_readonly("termination", [](const HybridTrajectory& t) { return to_string(t.termination); })
      .def_readonly("admissible", &HybridTrajectory::admissible)
      .def_readonly("diagnostic", &HybridTrajectory::diagnostic)
      .def_readonly("offending_constraint", &HybridTrajectory::offending_constraint)
      .def_readonly("zeno_accumulation_time", &HybridTrajectory::zeno_accumulation_time)
      .def_property_readonly("word", [](const HybridTrajectory& t) { return word_list(t.word()); })
      .def("eta", &HybridTrajectory::eta)
      .def("final_state", &HybridTrajectory::final_state)
      .def("state_at", &HybridTrajectory::state_at)
      .def_property_readonly("t_end", &HybridTrajectory::t_end);

  py::class_<MembershipResult>(m, "MembershipResult")
      .def_readonly("selection", &MembershipResult::selection)
      .def_readonly("agreeing", &MembershipResult::agreeing)
      .def_readonly("boundary", &MembershipResult::boundary);

  py::class_<SelectionDerivative>(m, "SelectionDerivative")
      .def_property_readonly("label", [](const SelectionDerivative& s) { return s.selection.label(); })
      .def_property_readonly("word", [](const SelectionDerivative& s) { return word_list(s.selection.word); })
      .def_property_readonly("merged", [](const SelectionDerivative& s) { return s.selection.merged; })
      .def_readonly("state_jac", &SelectionDerivative::state_jac)
      .def_readonly("time_jac", &SelectionDerivative::time_jac);

  py::class_<BDerivative>(m, "BDerivative")
      .def_readonly("selections", &BDerivative::selections)
      .def_readonly("orthogonal", &BDerivative::orthogonal)
      .def_readonly("warnings", &BDerivative::warnings)
      .def("membership", &BDerivative::membership)
      .def("apply", &BDerivative::apply, py::arg("dt"), py::arg("dz"))
      .def("realizable", &BDerivative::realizable);

  py::class_<PiecewiseLinearMap>(m, "PiecewiseLinearMap")
      .def_readonly("pieces", &PiecewiseLinearMap::pieces)
      .def_readonly("labels", &PiecewiseLinearMap::labels)
      .def("piece", &PiecewiseLinearMap::piece)
      .def("apply", &PiecewiseLinearMap::apply)
      .def_static("from_cones", &PiecewiseLinearMap::from_cones, py::arg("pieces"), py::arg("cones"),
                  py::arg("tol") = 1e-12);

  py::class_<Section>(m, "Section")
      .def_readonly("name", &Section::name)
      .def_readonly("frame", &Section::frame)
      .def_readonly("origin", &Section::origin);

  py::class_<PoincareDerivative>(m, "PoincareDerivative")
      .def_readonly("fixed_point", &PoincareDerivative::fixed_point)
      .def_readonly("period", &PoincareDerivative::period)
      .def_readonly("fixed_point_residual", &PoincareDerivative::fixed_point_residual)
      .def_readonly("section", &PoincareDerivative::section)
      .def_readonly("map", &PoincareDerivative::map);

  py::class_<FixedPointResult>(m, "FixedPointResult")
      .def_readonly("x", &FixedPointResult::x)
      .def_readonly("period", &FixedPointResult::period)
      .def_readonly("residual", &FixedPointResult::residual)
      .def_readonly("converged", &FixedPointResult::converged);

  m.def("list_systems", [] {
    std::vector<std::string> out;
    for (const auto& e : registry()) out.push_back(e.name);
    return out;
  });
  m.def("build_system", &system_from, py::arg("name"), py::arg("params") = Params{});
  m.def(
      "impact_map",
      [](const MechSystem& sys, const Vector& q, const Vector& qd, const std::vector<int>& J) {
        const auto r = impact_map(sys, q, qd, to_set(J));
        return py::make_tuple(r.qd_plus, r.delta, r.impulse);
      },
      py::arg("system"), py::arg("q"), py::arg("qd"), py::arg("J"));
  m.def("orthogonality_check", &orthogonality_check);
  m.def(
      "simulate",
      [](const MechSystem& sys, const State& x0, const SimConfig& cfg) { return flow(sys, x0, cfg); },
      py::arg("system"), py::arg("x0"), py::arg("cfg"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "b_derivative",
      [](const MechSystem& sys, const HybridTrajectory& traj, const SimConfig& cfg, int k_max) {
        SensitivityOptions opt;
        opt.k_max = k_max;
        return b_derivative(sys, traj, cfg, opt);
      },
      py::arg("system"), py::arg("trajectory"), py::arg("cfg"), py::arg("k_max") = 3);
  m.def(
      "poincare_bderivative",
      [](const MechSystem& sys, int index, double offset, double sign, double t_min, const State& x0,
         const SimConfig& cfg, bool refine) {
        const Section sec = coordinate_section(index, offset, sign, t_min);
        State x = x0;
        if (refine) x = refine_fixed_point(sys, sec, x0, cfg).x;
        return poincare_bderivative(sys, sec, x, cfg);
      },
      py::arg("system"), py::arg("index"), py::arg("offset"), py::arg("sign"), py::arg("t_min"), py::arg("x0"),
      py::arg("cfg"), py::arg("refine") = true);
  m.def(
      "stability_contraction_test",
      [](const PiecewiseLinearMap& map, const Matrix& weight) {
        const auto r = stability_contraction_test(map, weight);
        return py::make_tuple(to_string(r.verdict), r.norms);
      },
      py::arg("map"), py::arg("weight") = Matrix());
  m.def(
      "instability_eigenvector_test",
      [](const PiecewiseLinearMap& map) {
        const auto r = instability_eigenvector_test(map);
        py::object value = py::none(), vec = py::none();
        if (r.witness) {
          value = py::float_(r.witness->eigenvalue);
          vec = py::cast(r.witness->vector);
        }
        return py::make_tuple(to_string(r.verdict), value, vec);
      },
      py::arg("map"));

  m.def(
      "run",
      [](const std::string& command, const std::string& config_json, const std::filesystem::path& out,
         bool validate) {
        const ScenarioConfig cfg = parse_config(config_json);
        RunOptions opt;
        opt.validate = validate;
        py::gil_scoped_release release;
        if (command == "simulate") return cmd_simulate(cfg, out, opt);
        if (command == "bderiv") return cmd_bderiv(cfg, out, opt);
        if (command == "analyze") return cmd_analyze(cfg, out, opt);
        throw ConfigError("unknown command '" + command + "'");
      },
      py::arg("command"), py::arg("config_json"), py::arg("out"), py::arg("validate") = false,
      "Runs a CLI command on a scenario JSON string; returns the exit code.");
  m.def("dump_config", [](const std::string& text) { return dump_config(parse_config(text)); });
}
