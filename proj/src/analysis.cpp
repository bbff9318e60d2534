#include "uflow/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <thread>

#include "uflow/errors.hpp"
#include <spdlog/spdlog.h>

namespace uflow {

RowVector Section::gradient(const Vector& x) const {
  if (grad) return grad(x);
  RowVector g(x.size());
  for (int i = 0; i < x.size(); ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
    Vector xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (s(xp) - s(xm)) / (2.0 * h);
  }
  return g;
}

void Section::anchor(const MechSystem& sys, const State& x) {
  origin = x.x();
  const Matrix t = tangent_basis(sys, x);
  const RowVector c = gradient(origin) * t;
  if (c.norm() == 0.0) throw GrazingError("section gradient vanishes on the admissible tangent space", -1);
  Eigen::HouseholderQR<Matrix> qr(c.transpose());
  const Matrix q = qr.householderQ() * Matrix::Identity(t.cols(), t.cols());
  frame = t * q.rightCols(t.cols() - 1);
}

Vector Section::to_local(const Vector& x) const { return frame.transpose() * (x - origin); }

Vector Section::from_local(const Vector& y) const { return origin + frame * y; }

Section coordinate_section(int index, double offset, double sign, double t_min, const std::string& name) {
  if (sign == 0.0) throw ConfigError("section sign must be nonzero");
  Section sec;
  sec.name = name;
  sec.t_min = t_min;
  sec.s = [index, offset, sign](const Vector& x) {
    if (index < 0 || index >= x.size()) throw ConfigError("section index out of range");
    return sign * (x[index] - offset);
  };
  sec.grad = [index, sign](const Vector& x) {
    RowVector g = RowVector::Zero(x.size());
    g[index] = sign;
    return g;
  };
  return sec;
}

PoincareReturn poincare_map(const MechSystem& sys, const Section& section, const State& x0,
                            const SimConfig& cfg) {
  SimConfig run = cfg;
  run.t_final = x0.t + cfg.t_final;
  StopCondition stop{section.name, section.s, x0.t + section.t_min};
  PoincareReturn out;
  out.trajectory = flow(sys, x0, run, &stop);
  const auto& tr = out.trajectory;
  switch (tr.termination) {
    case Termination::stop_condition: break;
    case Termination::time_reached:
      throw NoReturnError("no return to section '" + section.name + "' before t = " +
                          std::to_string(run.t_final));
    case Termination::grazing:
      throw GrazingError("trajectory grazed before returning: " + tr.diagnostic, tr.offending_constraint);
    case Termination::zeno_guard: throw NoReturnError("zeno guard fired before returning: " + tr.diagnostic);
    case Termination::model_error: throw ModelError(tr.diagnostic);
  }
  out.x_return = tr.final_state();
  out.period = out.x_return.t - x0.t;
  const Vector xr = out.x_return.x();
  const double gf = section.gradient(xr).dot(mode_field(sys, out.x_return.J, xr));
  if (std::abs(gf) <= sys.tol.graze) {
    throw GrazingError("return to section '" + section.name + "' is tangential", -1);
  }
  return out;
}

int PiecewiseLinearMap::piece(const Vector& y) const {
  const auto r = regions(y);
  if (r.empty()) throw Error("direction outside every region");
  return *std::min_element(r.begin(), r.end());
}

Vector PiecewiseLinearMap::apply(const Vector& y) const {
  return pieces[static_cast<std::size_t>(piece(y))] * y;
}

PiecewiseLinearMap PiecewiseLinearMap::from_cones(std::vector<Matrix> pieces, std::vector<Matrix> cones,
                                                  double tol) {
  if (pieces.size() != cones.size()) throw ConfigError("one cone per piece required");
  PiecewiseLinearMap map;
  map.pieces = std::move(pieces);
  for (std::size_t i = 0; i < map.pieces.size(); ++i) map.labels.push_back("piece " + std::to_string(i));
  map.regions = [cones = std::move(cones), tol](const Vector& y) {
    std::vector<int> out;
    const double scale = tol * std::max(1.0, y.norm());
    for (std::size_t i = 0; i < cones.size(); ++i) {
      if (((cones[i] * y).array() >= -scale).all()) out.push_back(static_cast<int>(i));
    }
    return out;
  };
  return map;
}

double PiecewiseLinearMap::continuity_defect(int samples, unsigned seed) const {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  double worst = 0.0;
  for (int k = 0; k < samples; ++k) {
    Vector y(dim());
    for (int i = 0; i < y.size(); ++i) y[i] = n01(rng);
    const auto r = regions(y);
    for (std::size_t a = 1; a < r.size(); ++a) {
      const Vector d = pieces[static_cast<std::size_t>(r[a])] * y - pieces[static_cast<std::size_t>(r[0])] * y;
      worst = std::max(worst, d.norm() / y.norm());
    }
  }
  return worst;
}

PoincareDerivative poincare_bderivative(const MechSystem& sys, Section section, const State& fixed_point,
                                        const SimConfig& cfg, const PoincareOptions& opt) {
  PoincareDerivative pd;
  pd.fixed_point = fixed_point;
  const double s0 = section.s(fixed_point.x());
  if (std::abs(s0) > 1e-8) {
    pd.warnings.push_back("fixed point is off the section by " + std::to_string(s0));
  }
  section.anchor(sys, fixed_point);
  const auto ret = poincare_map(sys, section, fixed_point, cfg);
  pd.period = ret.period;
  pd.fixed_point_residual = (ret.x_return.x() - fixed_point.x()).norm();

  SimConfig run = cfg;
  run.t_final = ret.x_return.t;
  SensitivityOptions sopt;
  sopt.k_max = opt.k_max;
  pd.flow = b_derivative(sys, ret.trajectory, run, sopt);
  pd.warnings.insert(pd.warnings.end(), pd.flow.warnings.begin(), pd.flow.warnings.end());

  const Vector xr = ret.x_return.x();
  const Vector f = mode_field(sys, ret.x_return.J, xr);
  const RowVector g = section.gradient(xr);
  const Matrix proj = Matrix::Identity(xr.size(), xr.size()) - f * g / g.dot(f);

  // Keep the flow selections that some section direction actually realizes.
  const int n = section.dim();
  std::set<int> seen;
  auto visit = [&](const Vector& y) { seen.insert(pd.flow.membership(section.frame * y).selection); };
  for (int i = 0; i < n; ++i) {
    visit(Vector::Unit(n, i));
    visit(-Vector::Unit(n, i));
  }
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> n01;
  for (int k = 0; k < opt.samples; ++k) {
    Vector y(n);
    for (int i = 0; i < n; ++i) y[i] = n01(rng);
    visit(y);
  }
  // Realized selections with the same projected matrix share one piece
  // (e.g. orderings of releases, whose saltations are the identity).
  std::vector<int> group(pd.flow.selections.size(), -1);
  for (int s : seen) {
    const auto& sel = pd.flow.selections[static_cast<std::size_t>(s)];
    const Matrix dp = section.frame.transpose() * proj * sel.state_jac * section.frame;
    for (std::size_t i = 0; i < pd.map.pieces.size(); ++i) {
      if ((pd.map.pieces[i] - dp).norm() <= 1e-9 * std::max(1.0, dp.norm())) {
        group[static_cast<std::size_t>(s)] = static_cast<int>(i);
        break;
      }
    }
    if (group[static_cast<std::size_t>(s)] >= 0) continue;
    group[static_cast<std::size_t>(s)] = static_cast<int>(pd.map.pieces.size());
    pd.flow_selection.push_back(s);
    pd.map.pieces.push_back(dp);
    pd.map.labels.push_back(sel.selection.label());
  }
  pd.map.regions = [flow = pd.flow, frame = section.frame, group, pieces = pd.map.pieces,
                    proj](const Vector& y) {
    const auto m = flow.membership(frame * y);
    std::vector<int> out;
    for (int a : m.agreeing) {
      const int g = group[static_cast<std::size_t>(a)];
      if (g >= 0 && std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
    }
    if (out.empty()) {
      // Unsampled selection: use the piece whose action matches it.
      const Vector target =
          frame.transpose() * proj * flow.selections[static_cast<std::size_t>(m.selection)].state_jac * frame * y;
      int best = 0;
      double err = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < pieces.size(); ++i) {
        const double e = (pieces[i] * y - target).norm();
        if (e < err) err = e, best = static_cast<int>(i);
      }
      out.push_back(best);
    }
    return out;
  };
  pd.section = std::move(section);
  return pd;
}

FixedPointResult refine_fixed_point(const MechSystem& sys, const Section& section, const State& guess,
                                    const SimConfig& cfg, double tol, int max_iter, double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("damping must lie in (0, 1]");
  FixedPointResult res;
  State x = guess;
  for (int it = 0; it < max_iter; ++it) {
    const auto ret = poincare_map(sys, section, x, cfg);
    res.iterations = it + 1;
    res.residual = (ret.x_return.x() - x.x()).norm();
    res.period = ret.period;
    spdlog::debug("fixed point iteration {}: residual {:.3e}", it, res.residual);
    if (res.residual < tol) {
      res.converged = true;
      break;
    }
    const Vector next = x.x() + beta * (ret.x_return.x() - x.x());
    x = State::from_x(guess.t, next, ret.x_return.J);
  }
  res.x = x;
  return res;
}

std::string to_string(StabilityVerdict v) {
  switch (v) {
    case StabilityVerdict::stable: return "STABLE";
    case StabilityVerdict::unstable: return "UNSTABLE";
    case StabilityVerdict::inconclusive: return "INCONCLUSIVE";
  }
  return "?";
}

namespace {

Matrix checked_weight(const Matrix& w, int n) {
  if (w.size() == 0) return Matrix::Identity(n, n);
  if (w.rows() != n || w.cols() != n) throw ConfigError("weight has the wrong shape");
  if ((w - w.transpose()).norm() > 1e-12 * std::max(1.0, w.norm())) throw ConfigError("weight is not symmetric");
  Eigen::LLT<Matrix> llt(w);
  if (llt.info() != Eigen::Success) throw ConfigError("weight is not positive definite");
  return w;
}

double max_norm(const PiecewiseLinearMap& map, const Matrix& w, std::vector<double>* norms) {
  double worst = 0.0;
  for (const auto& a : map.pieces) {
    const double v = weighted_norm(a, w);
    if (norms) norms->push_back(v);
    worst = std::max(worst, v);
  }
  return worst;
}

}  // namespace

double weighted_norm(const Matrix& a, const Matrix& weight) {
  Eigen::LLT<Matrix> llt(weight);
  if (llt.info() != Eigen::Success) throw ConfigError("weight is not positive definite");
  const Matrix u = llt.matrixU();
  const Matrix b = u * a * u.inverse();
  return Eigen::JacobiSVD<Matrix>(b).singularValues()(0);
}

ContractionResult stability_contraction_test(const PiecewiseLinearMap& map, const Matrix& weight,
                                             const ContractionOptions& opt) {
  ContractionResult res;
  const int n = map.dim();
  res.weight = checked_weight(weight, n);
  double worst = max_norm(map, res.weight, &res.norms);
  if (worst >= 1.0 - opt.tol_margin && opt.search_diagonal && n > 0) {
    Vector logw = Vector::Zero(n);
    double step = 1.0;
    auto eval = [&](const Vector& lw) {
      return max_norm(map, Matrix(lw.array().exp().matrix().asDiagonal()), nullptr);
    };
    double best = eval(logw);
    for (int it = 0; it < opt.search_iterations && step > 1e-6; ++it) {
      bool improved = false;
      for (int i = 1; i < n; ++i) {  // the first weight fixes the scale
        for (double sgn : {1.0, -1.0}) {
          Vector trial = logw;
          trial[i] += sgn * step;
          const double v = eval(trial);
          if (v < best) best = v, logw = trial, improved = true;
        }
      }
      if (!improved) step *= 0.5;
    }
    if (best < worst) {
      res.weight = logw.array().exp().matrix().asDiagonal();
      res.norms.clear();
      worst = max_norm(map, res.weight, &res.norms);
    }
  }
  res.verdict = worst < 1.0 - opt.tol_margin ? StabilityVerdict::stable : StabilityVerdict::inconclusive;
  return res;
}

InstabilityResult instability_eigenvector_test(const PiecewiseLinearMap& map, double tol_margin) {
  InstabilityResult res;
  auto contains = [](const std::vector<int>& v, int i) { return std::find(v.begin(), v.end(), i) != v.end(); };
  for (int p = 0; p < static_cast<int>(map.pieces.size()); ++p) {
    const Matrix& a = map.pieces[static_cast<std::size_t>(p)];
    Eigen::EigenSolver<Matrix> es(a);
    for (int k = 0; k < a.rows(); ++k) {
      const auto lam = es.eigenvalues()[k];
      if (std::abs(lam.imag()) > 1e-10 * std::max(1.0, std::abs(lam))) continue;
      if (std::abs(lam.real()) <= 1.0 + tol_margin) continue;
      Vector nu = es.eigenvectors().col(k).real();
      nu.normalize();
      for (double sgn : {1.0, -1.0}) {
        const Vector v = sgn * nu;
        if (contains(map.regions(v), p) && contains(map.regions(a * v), p)) {
          res.verdict = StabilityVerdict::unstable;
          res.witness = EigenWitness{p, lam.real(), v};
          return res;
        }
      }
      res.rejected.push_back({p, lam.real(), nu});
    }
  }
  return res;
}

std::vector<double> iterate_growth(const PiecewiseLinearMap& map, const Vector& y0, int steps) {
  std::vector<double> out;
  Vector y = y0;
  for (int k = 0; k < steps; ++k) {
    const Vector next = map.apply(y);
    out.push_back(next.norm() / y.norm());
    y = next;
  }
  return out;
}

std::string to_string(ControllabilityVerdict v) {
  switch (v) {
    case ControllabilityVerdict::locally_controllable: return "LOCALLY CONTROLLABLE";
    case ControllabilityVerdict::necessary_conditions_pass: return "NECESSARY-CONDITIONS-PASS";
    case ControllabilityVerdict::pl_homeomorphism_heuristic: return "PL-HOMEOMORPHISM-SUFFICIENT-HEURISTIC";
    case ControllabilityVerdict::not_controllable: return "NOT CONTROLLABLE";
  }
  return "?";
}

ControllabilityResult controllability_test(const ControlledSystem& csys, const State& x0, const Vector& u0,
                                           double t, const SimConfig& cfg, int k_max) {
  if (u0.size() != csys.m) throw ConfigError("input dimension mismatch");
  if (!(t > 0.0)) throw ConfigError("horizon must be positive");
  const MechSystem sys = csys.bind(u0);
  SimConfig run = cfg;
  run.t_final = x0.t + t;
  ControllabilityResult res;
  res.trajectory = flow(sys, x0, run);
  const auto& tr = res.trajectory;
  if (tr.termination == Termination::grazing) throw GrazingError(tr.diagnostic, tr.offending_constraint);
  if (tr.termination == Termination::model_error) throw ModelError(tr.diagnostic);
  if (!tr.admissible) throw InadmissibleError("trajectory not admissible on the horizon: " + tr.diagnostic);
  SensitivityOptions sopt;
  sopt.k_max = k_max;
  res.bderiv = b_derivative(csys, u0, tr, run, sopt);

  const int n = 2 * sys.dof;
  const int m = csys.m;
  bool all_full = true;
  for (int s : res.bderiv.realizable()) {
    ControlBlock b;
    b.selection = s;
    b.block = res.bderiv.selections[static_cast<std::size_t>(s)].state_jac.rightCols(m);
    const Vector sv = Eigen::JacobiSVD<Matrix>(b.block).singularValues();
    const double tol = 1e-8 * std::max(1.0, sv.size() ? sv[0] : 0.0);
    b.rank = static_cast<int>((sv.array() > tol).count());
    b.min_singular = (m >= n && sv.size() >= n) ? sv[n - 1] : 0.0;
    if (m == n) b.determinant = b.block.determinant();
    all_full = all_full && b.rank == n;
    res.blocks.push_back(std::move(b));
  }

  // Selections whose full Jacobians coincide count as one.
  bool distinct = false;
  const Matrix& ref = res.bderiv.selections[static_cast<std::size_t>(res.blocks.front().selection)].state_jac;
  for (const auto& b : res.blocks) {
    const Matrix& j = res.bderiv.selections[static_cast<std::size_t>(b.selection)].state_jac;
    if ((j - ref).norm() > 1e-9 * std::max(1.0, ref.norm())) distinct = true;
  }

  if (!all_full) {
    res.verdict = ControllabilityVerdict::not_controllable;
  } else if (!distinct) {
    res.verdict = ControllabilityVerdict::locally_controllable;
  } else {
    res.verdict = ControllabilityVerdict::necessary_conditions_pass;
    if (m == n) {
      bool pos = true, neg = true;
      for (const auto& b : res.blocks) {
        pos = pos && *b.determinant > 0.0;
        neg = neg && *b.determinant < 0.0;
      }
      if (pos || neg) {
        res.verdict = ControllabilityVerdict::pl_homeomorphism_heuristic;
        res.heuristic = true;
      }
    }
  }
  return res;
}

std::vector<SweepPoint> parallel_sweep(double lo, double hi, int count, const std::function<SweepPoint(double)>& fn,
                                       int threads) {
  if (count < 1) throw ConfigError("sweep count must be positive");
  std::vector<SweepPoint> out(static_cast<std::size_t>(count));
  const int nt = std::max(1, std::min(count, threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency())));
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nt));
  auto work = [&](int id) {
    try {
      for (int k = next++; k < count; k = next++) {
        const double v = count == 1 ? lo : lo + (hi - lo) * k / (count - 1);
        out[static_cast<std::size_t>(k)] = fn(v);
        out[static_cast<std::size_t>(k)].value = v;
      }
    } catch (...) {
      errors[static_cast<std::size_t>(id)] = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < nt; ++i) pool.emplace_back(work, i);
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

namespace {

struct QuadFit {
  Vector coef;  // c0 + c1 t + c2 t^2
  double rms = 0.0;
};

QuadFit fit_quadratic(const std::vector<double>& t, const std::vector<double>& y) {
  const int n = static_cast<int>(t.size());
  const int p = std::min(3, n);
  Matrix a(n, p);
  Vector b(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) a(i, j) = std::pow(t[static_cast<std::size_t>(i)], j);
    b[i] = y[static_cast<std::size_t>(i)];
  }
  QuadFit f;
  f.coef = Vector::Zero(3);
  f.coef.head(p) = a.colPivHouseholderQr().solve(b);
  if (n > p) f.rms = std::sqrt((a * f.coef.head(p) - b).squaredNorm() / (n - p));
  return f;
}

}  // namespace

KinkReport kink_report(const std::vector<double>& x, const std::vector<double>& y, double x0) {
  if (x.size() != y.size() || x.size() < 5) throw ConfigError("kink_report needs at least five samples");
  std::vector<double> tl, yl, tr, yr;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = x[i] - x0;
    if (t <= 1e-15) tl.push_back(t), yl.push_back(y[i]);
    if (t >= -1e-15) tr.push_back(t), yr.push_back(y[i]);
  }
  if (tl.size() < 2 || tr.size() < 2) throw ConfigError("break point must be interior");
  const auto fl = fit_quadratic(tl, yl);
  const auto fr = fit_quadratic(tr, yr);
  KinkReport r;
  const auto [mn, mx] = std::minmax_element(y.begin(), y.end());
  r.range = *mx - *mn;
  r.jump = std::abs(fl.coef[0] - fr.coef[0]);
  r.slope_left = fl.coef[1];
  r.slope_right = fr.coef[1];
  const double h = (x.back() - x.front()) / static_cast<double>(x.size() - 1);
  const double eps = std::numeric_limits<double>::epsilon() * std::max(std::abs(*mx), std::abs(*mn));
  r.noise_floor = std::max({fl.rms, fr.rms, eps}) / h;
  r.continuous = r.jump < 1e-3 * r.range;
  r.kink = std::abs(r.slope_right - r.slope_left) > 10.0 * r.noise_floor;
  return r;
}

State trotter_apex_guess(const TrotterParams& p, double apex_height) {
  const double toe = apex_height - (p.rest_length + p.toe_mass * p.g / p.stiffness);
  Vector x = Vector::Zero(8);
  x << apex_height, 0.0, toe, toe, 0.0, 0.0, 0.0, 0.0;
  return State::from_x(0.0, x, {});
}

Section trotter_apex_section() { return coordinate_section(4, 0.0, 1.0, 0.05, "apex"); }

}  // namespace uflow
