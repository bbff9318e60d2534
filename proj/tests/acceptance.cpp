// Acceptance checks 1-10. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <fmt/core.h>
#include <json.hpp>

#include "uflow/analysis.hpp"
#include "uflow/errors.hpp"
#include "uflow/model.hpp"
#include "uflow/scenario.hpp"
#include "uflow/sensitivity.hpp"
#include "uflow/sim.hpp"
#include "uflow/systems.hpp"

using namespace uflow;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tol {
constexpr double kRestitution = 1e-9;       // 1
constexpr int kRestitutionSamples = 1000;   // 1
constexpr double kProjection = 1e-9;        // 2
constexpr double kCommutation = 1e-9;       // 2
constexpr double kObliqueGap = 0.1;         // 2
constexpr double kOneSidedLimit = 1e-3;     // 3
constexpr double kLipschitz = 10.0;         // 3: C in |diff(eps)| <= C eps
constexpr double kSingleEventFd = 1e-6;     // 4
constexpr double kFdStep = 1e-5;            // 4
constexpr double kOrder = 0.9;              // 5
constexpr int kDirections = 16;             // 5
constexpr double kExactResidual = 1e-9;     // 5: residuals below this count as exact
constexpr double kBoundaryAgree = 1e-8;     // 5
constexpr double kImpactTime = 1e-7;        // 6
constexpr double kApexDerivative = 1e-6;    // 6
constexpr double kEnergyDrift = 1e-10;      // 6
constexpr double kZenoRelative = 0.01;      // 6
constexpr double kNormMatch = 1e-12;        // 7
constexpr double kControlFd = 1e-5;         // 8
constexpr double kControlStep = 1e-7;       // 8
}  // namespace tol

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

SimConfig until(double t) {
  SimConfig c;
  c.t_final = t;
  return c;
}

Vector final_x(const MechSystem& sys, const State& x0, const SimConfig& cfg) {
  return flow(sys, x0, cfg).final_state().x();
}

State shifted(const State& x0, const Vector& dz, double alpha) {
  const auto d = x0.q.size();
  State x = x0;
  x.q += alpha * dz.head(d);
  x.qd += alpha * dz.tail(d);
  return x;
}

State state2(double q0, double q1, double v0, double v1) {
  Vector q(2), qd(2);
  q << q0, q1;
  qd << v0, v1;
  return State{0.0, q, qd, {}};
}

// ---- 1 ----------------------------------------------------------------------

Outcome restitution_identity() {
  std::mt19937_64 rng(1);
  const auto& reg = registry();
  double worst = 0.0;
  int done = 0;
  for (int k = 0; done < tol::kRestitutionSamples; ++k) {
    const auto& entry = reg[static_cast<std::size_t>(k) % reg.size()];
    const MechSystem sys = entry.build(entry.default_params);
    const State s = entry.sample(rng);
    if (s.J.empty()) continue;
    const auto r = impact_map(sys, s.q, s.qd, s.J);
    const Matrix da = constraint_jac_rows(sys, s.q, s.J);
    worst = std::max(worst, (da * r.qd_plus + r.gamma * da * s.qd).cwiseAbs().maxCoeff());
    ++done;
  }
  return {worst < tol::kRestitution, fmt::format("{} samples, max abs err {:.3e}", done, worst)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome projection_commutation() {
  double proj = 0.0;
  std::mt19937_64 rng(2);
  for (const auto& entry : registry()) {
    if (!entry.default_params.count("gamma")) continue;
    Params p = entry.default_params;
    p["gamma"] = 0.0;
    const MechSystem sys = entry.build(p);
    for (int k = 0; k < 50; ++k) {
      const State s = entry.sample(rng);
      if (s.J.empty()) continue;
      const Matrix d = impact_map(sys, s.q, s.qd, s.J).delta;
      proj = std::max(proj, (d * d - d).cwiseAbs().maxCoeff());
    }
  }
  const Vector z = Vector::Zero(2);
  const auto ortho = build_corner(CornerMode::orthogonal, 0.0);
  const Matrix d1 = impact_map(ortho, z, z, {0}).delta;
  const Matrix d2 = impact_map(ortho, z, z, {1}).delta;
  const Matrix d12 = impact_map(ortho, z, z, {0, 1}).delta;
  const double comm = std::max({(d1 * d2 - d2 * d1).cwiseAbs().maxCoeff(), (d1 * d2 - d12).cwiseAbs().maxCoeff(),
                                (d2 * d1 - d12).cwiseAbs().maxCoeff()});
  const auto obl = build_corner(CornerMode::oblique, 0.0);
  const Matrix o1 = impact_map(obl, z, z, {0}).delta;
  const Matrix o2 = impact_map(obl, z, z, {1}).delta;
  const double gap = (o1 * o2 - o2 * o1).cwiseAbs().maxCoeff();
  return {proj < tol::kProjection && comm < tol::kCommutation && gap >= tol::kObliqueGap,
          fmt::format("|D^2-D| {:.2e}, orthogonal commutator {:.2e}, oblique commutator {:.3f}", proj, comm, gap)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome one_sided_limits() {
  // Both walls reached at t = 1 from q = (1, 1), qd = (-1, -1); shifting q1
  // by -eps or +eps decides which wall is hit first.
  const SimConfig cfg = until(1.5);
  const auto obl = build_corner(CornerMode::oblique, 0.0);
  const Vector lo = final_x(obl, state2(1.0 - 1e-6, 1.0, -1.0, -1.0), cfg).tail(2);
  const Vector hi = final_x(obl, state2(1.0 + 1e-6, 1.0, -1.0, -1.0), cfg).tail(2);
  const double jump = (lo - hi).norm();
  const bool oblique_ok = std::abs(jump - std::sqrt(0.5)) < tol::kOneSidedLimit;

  const auto ortho = build_corner(CornerMode::orthogonal, 0.5, 0.0, 0.5);
  const SimConfig ocfg = until(1.6);
  double worst_ratio = 0.0;
  for (double eps : {1e-2, 1e-3, 1e-4, 1e-5}) {
    const Vector a = final_x(ortho, state2(1.0 - eps, 1.0, -1.0, -1.0), ocfg);
    const Vector b = final_x(ortho, state2(1.0 + eps, 1.0, -1.0, -1.0), ocfg);
    worst_ratio = std::max(worst_ratio, (a - b).norm() / eps);
  }
  return {oblique_ok && worst_ratio <= tol::kLipschitz,
          fmt::format("oblique jump {:.6f} (sqrt(2)/2 = {:.6f}), orthogonal max |diff|/eps {:.3f}", jump,
                      std::sqrt(0.5), worst_ratio)};
}

// ---- 4 ----------------------------------------------------------------------

double single_event_error(const MechSystem& sys, const State& x0, double t_final, int expected_events) {
  const SimConfig cfg = until(t_final);
  const auto tr = flow(sys, x0, cfg);
  if (static_cast<int>(tr.events.size()) != expected_events) return INFINITY;
  const auto bd = b_derivative(sys, tr, cfg);
  if (bd.selections.size() != 1) return INFINITY;
  const Matrix basis = tangent_basis(sys, x0);
  const Matrix D = bd.selections[0].state_jac * basis;
  Matrix fd(D.rows(), D.cols());
  for (Eigen::Index j = 0; j < basis.cols(); ++j) {
    const Vector v = basis.col(j);
    fd.col(j) = (final_x(sys, shifted(x0, v, tol::kFdStep), cfg) - final_x(sys, shifted(x0, v, -tol::kFdStep), cfg)) /
                (2.0 * tol::kFdStep);
  }
  return (fd - D).norm() / std::max(1.0, D.norm());
}

Outcome single_event_jacobians() {
  std::vector<std::pair<std::string, double>> errs;
  errs.emplace_back("ball", single_event_error(build_ball(1.0, 1.0, 0.5),
                                               State{0.0, Vector::Constant(1, 0.5), Vector::Zero(1), {}}, 1.5, 1));
  errs.emplace_back("corner wall", single_event_error(build_corner(CornerMode::orthogonal, 0.5, 1.0, 0.5),
                                                      state2(2.0, 1.0, 0.3, -1.0), 1.4, 1));
  {
    const HopperParams p;
    Vector q(2);
    q << 1.0, 1.0 - p.rest_length - p.toe_mass * p.g / p.stiffness;
    errs.emplace_back("hopper touchdown",
                      single_event_error(build_hopper(p), State{0.0, q, Vector::Zero(2), {}}, 0.38, 1));
  }
  {
    Vector q(3), qd(3);
    q << 0.0, 5.0, 0.0;
    qd << 0.0, 0.0, 1.0;
    errs.emplace_back("slide release",
                      single_event_error(build_slide_corner(1.0, 1.0, 1.0), State{0.0, q, qd, {0}}, 1.5, 1));
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : errs) {
    ok = ok && e < tol::kSingleEventFd;
    detail += fmt::format("{}{} {:.2e}", detail.empty() ? "" : ", ", name, e);
  }
  return {ok, "rel err: " + detail};
}

// ---- 5 ----------------------------------------------------------------------

struct OrderStats {
  int directions = 0;
  int passed = 0;
  double worst_order = INFINITY;
  std::set<int> selections;
  double boundary = 0.0;
};

OrderStats directional_orders(const MechSystem& sys, const State& x0, const SimConfig& cfg, unsigned seed) {
  OrderStats st;
  const auto tr = flow(sys, x0, cfg);
  const auto bd = b_derivative(sys, tr, cfg);
  const Vector base = tr.final_state().x();
  const Matrix basis = tangent_basis(sys, x0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<Vector> dirs;
  std::vector<int> sel;
  while (static_cast<int>(dirs.size()) < tol::kDirections) {
    Vector c(basis.cols());
    for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = n01(rng);
    const Vector v = basis * c.normalized();
    const auto m = bd.membership(v);
    if (m.boundary || m.selection < 0) continue;
    dirs.push_back(v);
    sel.push_back(m.selection);
  }
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    const Vector& v = dirs[k];
    const Vector lin = bd.selections[sel[k]].state_jac * v;
    std::vector<double> res;
    for (double alpha : {1e-2, 1e-3, 1e-4}) {
      res.push_back(((final_x(sys, shifted(x0, v, alpha), cfg) - base) / alpha - lin).norm());
    }
    double order = std::log10(res[0] / res[2]) / 2.0;
    if (res[2] < tol::kExactResidual) order = INFINITY;
    st.worst_order = std::min(st.worst_order, order);
    st.passed += order >= tol::kOrder;
    st.selections.insert(sel[k]);
    ++st.directions;
  }
  // Boundary directions: bisect between directions in different regions; both
  // adjacent selections must give the same derivative there.
  for (std::size_t a = 0; a < dirs.size(); ++a) {
    for (std::size_t b = a + 1; b < dirs.size(); ++b) {
      if (sel[a] == sel[b]) continue;
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        const Vector v = (1.0 - mid) * dirs[a] + mid * dirs[b];
        (bd.membership(v).selection == sel[a] ? lo : hi) = mid;
      }
      const Vector va = (1.0 - lo) * dirs[a] + lo * dirs[b];
      const Vector vb = (1.0 - hi) * dirs[a] + hi * dirs[b];
      const int sa = bd.membership(va).selection;
      const int sb = bd.membership(vb).selection;
      const Vector v = 0.5 * (va + vb);
      st.boundary = std::max(st.boundary,
                             (bd.selections[sa].state_jac * v - bd.selections[sb].state_jac * v).norm() /
                                 std::max(1.0, v.norm()));
    }
  }
  return st;
}

Outcome directional_derivative_order() {
  const auto corner = directional_orders(build_corner(CornerMode::orthogonal, 0.5, 0.0, 0.5),
                                         state2(1.0, 1.0, -1.0, -1.0), until(1.6), 5);
  const TrotterParams p;
  State apex = trotter_apex_guess(p);
  const auto trotter = directional_orders(build_trotter_toy(p), apex, until(0.8), 6);
  auto ok = [](const OrderStats& s) {
    return s.directions >= tol::kDirections && s.passed == s.directions && s.selections.size() >= 2 &&
           s.boundary < tol::kBoundaryAgree;
  };
  return {ok(corner) && ok(trotter),
          fmt::format("corner: {}/{} dirs, min order {:.2f}, {} regions, boundary {:.1e}; "
                      "trotter: {}/{} dirs, min order {:.2f}, {} regions, boundary {:.1e}",
                      corner.passed, corner.directions, corner.worst_order, corner.selections.size(),
                      corner.boundary, trotter.passed, trotter.directions, trotter.worst_order,
                      trotter.selections.size(), trotter.boundary)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome ball_chain() {
  const double gamma = 0.5;
  const auto ball = build_ball(1.0, 1.0, gamma);
  const State drop{0.0, Vector::Constant(1, 0.5), Vector::Zero(1), {}};
  const auto tr = flow(ball, drop, until(1.5));
  const double t_impact = tr.events.empty() ? INFINITY : tr.events[0].t;
  const bool impact_ok = std::abs(t_impact - 1.0) < tol::kImpactTime;

  const auto pd = poincare_bderivative(ball, coordinate_section(1, 0.0, 1.0, 1e-3, "apex"), drop, until(10.0));
  const double dp = pd.map.pieces.size() == 1 ? pd.map.pieces[0](0, 0) : INFINITY;
  const bool dp_ok = std::abs(dp - gamma * gamma) < tol::kApexDerivative;

  const auto elastic = flow(build_ball(1.0, 1.0, 1.0), drop, until(20.5));
  double drift = elastic.events.size() >= 10 ? 0.0 : INFINITY;
  for (std::size_t k = 0; k < 10 && k < elastic.events.size(); ++k) {
    const Vector& x = elastic.events[k].x_post;
    drift = std::max(drift, std::abs(0.5 * x[1] * x[1] + x[0] - 0.5));
  }
  const bool energy_ok = drift < tol::kEnergyDrift;

  // Flight times 1, 2 gamma v1 / g, ... with v1 = 1: accumulate at 1 + 2 gamma / (1 - gamma).
  const auto zeno = flow(ball, drop, until(5.0));
  const double t_inf = 1.0 + 2.0 * gamma / (1.0 - gamma);
  const double zeno_err = std::abs(zeno.zeno_accumulation_time - t_inf) / t_inf;
  const bool zeno_ok = zeno.termination == Termination::zeno_guard && zeno_err < tol::kZenoRelative &&
                       zeno.t_end() < t_inf;
  return {impact_ok && dp_ok && energy_ok && zeno_ok,
          fmt::format("impact {:.12f}, DP {:.9f}, energy drift {:.1e}, Zeno {:.6f} vs {:.6f} (rel {:.1e})", t_impact,
                      dp, drift, zeno.zeno_accumulation_time, t_inf, zeno_err)};
}

// ---- 7 ----------------------------------------------------------------------

Matrix mat2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

Outcome stability_tests() {
  const auto ball = build_ball(1.0, 1.0, 0.5);
  const State apex{0.0, Vector::Constant(1, 0.5), Vector::Zero(1), {}};
  const auto pd = poincare_bderivative(ball, coordinate_section(1, 0.0, 1.0, 1e-3, "apex"), apex, until(10.0));
  const auto ball_verdict = stability_contraction_test(pd.map).verdict;

  PiecewiseLinearMap two;
  two.pieces = {mat2(0.9, 0, 0, 1.2), mat2(1.2, 0, 0, 0.9)};
  const auto cr = stability_contraction_test(two);
  const bool norms_ok = std::abs(cr.norms[0] - 1.2) < tol::kNormMatch && std::abs(cr.norms[1] - 1.2) < tol::kNormMatch;

  Matrix up(1, 2), down(1, 2);
  up << 0, 1;
  down << 0, -1;
  const auto pl = PiecewiseLinearMap::from_cones({mat2(0.5, 0, 0, 2), mat2(0.5, 1, 0, 0.3)}, {up, down});
  const auto ir = instability_eigenvector_test(pl);
  bool growth_ok = false;
  double min_growth = 0.0;
  double lambda = 0.0;
  if (ir.witness) {
    lambda = ir.witness->eigenvalue;
    const auto g = iterate_growth(pl, ir.witness->vector, 5);
    min_growth = *std::min_element(g.begin(), g.end());
    growth_ok = g.size() == 5 && min_growth >= std::abs(lambda) / 2.0;
  }
  return {ball_verdict == StabilityVerdict::stable && cr.verdict == StabilityVerdict::inconclusive && norms_ok &&
              ir.verdict == StabilityVerdict::unstable && growth_ok,
          fmt::format("ball apex {} (DP {:.6f}), two-piece {} (norms {:.3f}, {:.3f}), PL map {} "
                      "(lambda {:.3f}, min step growth {:.3f})",
                      to_string(ball_verdict), pd.map.pieces[0](0, 0), to_string(cr.verdict), cr.norms[0],
                      cr.norms[1], to_string(ir.verdict), lambda, min_growth)};
}

// ---- 8 ----------------------------------------------------------------------

Outcome controllability() {
  ControlledSystem inert;
  inert.name = "inert";
  inert.m = 2;
  inert.bind = [](const Vector&) { return build_ball(1.0, 1.0, 0.5); };
  const State drop{0.0, Vector::Constant(1, 0.5), Vector::Zero(1), {}};
  const auto zero = controllability_test(inert, drop, Vector::Zero(2), 1.5, SimConfig{});

  const auto forced = build_forced_ball(1.0, 1.0, 0.5);
  const Vector u0 = Vector::Zero(2);
  const auto r = controllability_test(forced, drop, u0, 1.5, SimConfig{});
  const SimConfig cfg = until(1.5);
  const Vector base = final_x(forced.bind(u0), drop, cfg);
  double worst = r.blocks.size() == 1 ? 0.0 : INFINITY;
  for (const auto& blk : r.blocks) {
    for (int j = 0; j < 2; ++j) {
      for (double side : {1.0, -1.0}) {
        Vector u = u0;
        u[j] += side * tol::kControlStep;
        const Vector fd = (final_x(forced.bind(u), drop, cfg) - base) / (side * tol::kControlStep);
        worst = std::max(worst, (fd - blk.block.col(j)).norm() / std::max(1.0, fd.norm()));
      }
    }
  }
  return {zero.verdict == ControllabilityVerdict::not_controllable && worst < tol::kControlFd,
          fmt::format("zero influence: {}; forced ball: {}, one-sided FD rel err {:.2e}", to_string(zero.verdict),
                      to_string(r.verdict), worst)};
}

// ---- 9 ----------------------------------------------------------------------

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("uflow_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

Outcome trotter_kink() {
  const auto out = scratch("sweep");
  const auto cfg = load_config(fs::path(UFLOW_SCENARIO_DIR) / "trotter_sweep.json");
  const int code = cmd_analyze(cfg, out);
  if (code != kExitOk) return {false, fmt::format("analyze exited {}", code)};
  const json k = read_json(out / "report.json")["sweep"]["kink"];
  const double jump = k["jump"], range = k["range"], sl = k["slope_left"], sr = k["slope_right"],
               noise = k["noise_floor"];
  const bool continuous = jump < 1e-3 * range;
  const bool kink = std::abs(sr - sl) > 10.0 * noise;
  return {continuous && kink && cfg.sweep->count == 41,
          fmt::format("{} points, jump {:.2e} (range {:.2e}), slopes {:.5f} / {:.5f}, noise floor {:.2e}",
                      cfg.sweep->count, jump, range, sl, sr, noise)};
}

// ---- 10 ---------------------------------------------------------------------

Outcome guards() {
  auto run = [](const std::string& file, const fs::path& out) {
    const std::string cmd = fmt::format("{} simulate --config {} --out {} > /dev/null 2>&1", UFLOW_CLI_PATH,
                                        (fs::path(UFLOW_SCENARIO_DIR) / file).string(), out.string());
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const auto g = scratch("grazing");
  const auto z = scratch("zeno");
  const int graze_code = run("grazing.json", g);
  const int zeno_code = run("ball_zeno.json", z);
  const json ge = read_json(g / "events.json");
  const json ze = read_json(z / "events.json");
  const bool names = ge["offending_constraint"] == 0 && ze["offending_constraint"] == 0 &&
                     ge["diagnostic"].get<std::string>().find("constraint 0") != std::string::npos &&
                     ze["diagnostic"].get<std::string>().find("constraint 0") != std::string::npos;
  return {graze_code == kExitGrazing && zeno_code == kExitZeno && names,
          fmt::format("grazing exit {} ({}), Zeno exit {} ({})", graze_code, ge["diagnostic"].get<std::string>(),
                      zeno_code, ze["diagnostic"].get<std::string>())};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"restitution identity", restitution_identity},
      {"projection and commutation", projection_commutation},
      {"one-sided outcome limits", one_sided_limits},
      {"single-event Jacobians", single_event_jacobians},
      {"directional derivative order", directional_derivative_order},
      {"ball oracle chain", ball_chain},
      {"stability tests", stability_tests},
      {"controllability", controllability},
      {"trotter kink", trotter_kink},
      {"guards", guards},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
