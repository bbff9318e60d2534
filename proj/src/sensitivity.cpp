#include "uflow/sensitivity.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "integrator.hpp"
#include "uflow/errors.hpp"

namespace uflow {

std::string to_string(TransitionKind kind) {
  return kind == TransitionKind::activation ? "activation" : "deactivation";
}

std::string Selection::label() const {
  std::string s;
  for (std::size_t k = 0; k < word.size(); ++k) {
    if (k) s += " -> ";
    s += word[k].str();
  }
  return s;
}

Matrix TransitionBlock::dphi() const {
  const auto n = f.size();
  Matrix out = Matrix::Zero(n + 1, n + 1);
  out(0, 0) = 1.0;
  out.block(0, 1, 1, n) = g / gf;
  out.block(1, 1, n, n) = Matrix::Identity(n, n) - f * g / gf;
  return out;
}

Matrix TransitionBlock::dgamma() const {
  const auto n = f.size();
  Matrix out = Matrix::Zero(n + 1, n + 1);
  out(0, 0) = 1.0;
  out.block(1, 1, n, n) = reset_jac;
  return out;
}

Matrix SelectionDerivative::chain_product() const {
  Matrix acc = segments.front().Phi;
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    for (const auto& b : transitions[k]) acc = b.saltation_full * acc;
    acc = segments[k + 1].Phi * acc;
  }
  return acc.topRows(time_jac.size());
}

namespace {

// Flow description shared by plain and input-parameterized systems. The
// working point is z = (q, qd) or z = (q, qd, u).
struct Context {
  MechSystem base;
  const ControlledSystem* csys = nullptr;
  int d = 0;
  int m = 0;
  int N = 0;

  MechSystem at(const Vector& z) const { return csys ? csys->bind(z.tail(m)) : base; }

  Vector field(const ActiveSet& J, const Vector& z) const {
    Vector out = Vector::Zero(N);
    out.head(2 * d) = mode_field(m ? at(z) : base, J, z.head(2 * d));
    return out;
  }

  Matrix field_jac(const ActiveSet& J, const Vector& z) const {
    return central_jacobian([&](const Vector& zz) { return field(J, zz); }, z);
  }

  double force(const ActiveSet& J, int i, const Vector& z) const {
    const MechSystem s = m ? at(z) : base;
    return contact_force(s, z.head(d), z.segment(d, d), J)[J.position(i)];
  }

  Vector reset(const ActiveSet& K, const Vector& z) const {
    Vector out = z;
    out.segment(d, d) = impact_map(m ? at(z) : base, z.head(d), z.segment(d, d), K).qd_plus;
    return out;
  }
};

Context make_context(const MechSystem& sys) {
  Context c;
  c.base = sys;
  c.d = sys.dof;
  c.N = 2 * sys.dof;
  return c;
}

Context make_context(const ControlledSystem& csys, const Vector& u) {
  Context c;
  c.base = csys.bind(u);
  c.csys = &csys;
  c.d = c.base.dof;
  c.m = csys.m;
  c.N = 2 * c.d + c.m;
  return c;
}

Vector augment(const Context& ctx, const Vector& x, const Vector& u) {
  Vector z(ctx.N);
  z.head(2 * ctx.d) = x;
  if (ctx.m) z.tail(ctx.m) = u;
  return z;
}

VariationalSegment variational(const Context& ctx, const Segment& seg, const Vector& u,
                               const SimConfig& cfg) {
  const int N = ctx.N;
  const ActiveSet mode = seg.mode;
  VariationalSegment out;
  out.mode = mode;
  out.t_start = seg.t_start();
  out.t_end = seg.t_end();
  const Vector z0 = augment(ctx, seg.x_start(), u);
  if (out.t_end == out.t_start) {
    out.Phi = Matrix::Identity(N, N);
    out.x_start = seg.x_start();
    out.x_end = seg.x_end();
    out.Phi_t = ctx.field(mode, z0).head(2 * ctx.d);
    return out;
  }
  Vector y(N + N * N);
  y.head(N) = z0;
  Eigen::Map<Matrix>(y.data() + N, N, N).setIdentity();
  auto rhs = [&](double, const Vector& s) {
    Vector ds(s.size());
    const Vector z = s.head(N);
    ds.head(N) = ctx.field(mode, z);
    const Matrix A = ctx.field_jac(mode, z);
    Eigen::Map<Matrix>(ds.data() + N, N, N) = A * Eigen::Map<const Matrix>(s.data() + N, N, N);
    return ds;
  };
  detail::IntegratorOptions opt{cfg.abs_tol, cfg.rel_tol, cfg.max_step};
  const Vector y1 = detail::integrate(rhs, y, out.t_start, out.t_end, opt);
  out.Phi = Eigen::Map<const Matrix>(y1.data() + N, N, N);
  out.x_start = seg.x_start();
  out.x_end = seg.x_end();
  out.Phi_t = ctx.field(mode, augment(ctx, seg.x_end(), u)).head(2 * ctx.d);
  const double mismatch = (y1.head(2 * ctx.d) - seg.x_end()).norm();
  if (mismatch > 1e-6 * std::max(1.0, seg.x_end().norm())) {
    spdlog::warn("variational flow endpoint differs from the trajectory by {:.3g}", mismatch);
  }
  return out;
}

struct StepOutcome {
  TransitionBlock block;
  bool coherent = true;
  std::string reason;
  Vector z_post;
};

void assemble(TransitionBlock& b) {
  const auto n = b.f.size();
  b.gf = b.g.dot(b.f);
  b.tau_grad = -b.g / b.gf;
  b.saltation = b.reset_jac * (Matrix::Identity(n, n) - b.f * b.g / b.gf);
  b.saltation_full = b.reset_jac + (b.f_post - b.reset_jac * b.f) * b.g / b.gf;
}

// Applies the steps of one transition (a single elementary step, or the
// merged simultaneous resolution when steps.size() > 1) at z in `mode`.
StepOutcome apply_step(const Context& ctx, const ActiveSet& mode, const Vector& z,
                       const std::vector<ElementaryTransition>& steps) {
  const int d = ctx.d;
  const MechSystem sys = ctx.m ? ctx.at(z) : ctx.base;
  const Vector q = z.head(d);
  const Vector qd = z.segment(d, d);
  StepOutcome out;
  TransitionBlock& b = out.block;
  b.mode_before = mode;
  b.x_pre = z;
  b.f = ctx.field(mode, z);

  ActiveSet acts, deacts;
  for (const auto& s : steps) {
    if (s.kind == TransitionKind::activation) acts = acts.with(s.constraint);
    else deacts = deacts.with(s.constraint);
  }
  const ElementaryTransition lead = acts.empty() ? steps.front()
                                                 : ElementaryTransition{TransitionKind::activation,
                                                                        acts.indices().front()};
  b.kind = lead.kind;
  b.constraint = lead.constraint;

  const Matrix da = eval_constraint_jac(sys, q);
  for (int i : acts) {
    if (mode.contains(i)) {
      out.coherent = false;
      out.reason = fmt::format("constraint {} already active", i);
    } else if (!(da.row(i).dot(qd) < -sys.tol.graze)) {
      out.coherent = false;
      out.reason = fmt::format("constraint {} does not approach (velocity {:.3g})", i, da.row(i).dot(qd));
    }
  }
  for (int i : deacts) {
    if (!mode.contains(i)) {
      out.coherent = false;
      out.reason = fmt::format("constraint {} not active", i);
      continue;
    }
    const Vector lam = contact_force(sys, q, qd, mode);
    const double li = lam[mode.position(i)];
    if (std::abs(li) > 1e-6 * std::max(1.0, lam.cwiseAbs().maxCoeff())) {
      out.coherent = false;
      out.reason = fmt::format("force on constraint {} is {:.3g}, not zero", i, li);
    }
  }

  if (lead.kind == TransitionKind::activation) {
    b.g = RowVector::Zero(ctx.N);
    b.g.head(d) = da.row(lead.constraint);
  } else if (mode.contains(lead.constraint)) {
    b.g = central_jacobian(
              [&](const Vector& zz) { return Vector::Constant(1, ctx.force(mode, lead.constraint, zz)); },
              z)
              .row(0);
  } else {
    b.g = RowVector::Zero(ctx.N);
  }

  ActiveSetUpdate upd;
  try {
    upd = update_active_set(sys, q, qd, mode.minus(deacts), acts);
  } catch (const Error& e) {
    out.coherent = false;
    out.reason = e.what();
    upd.J = mode.minus(deacts).unite(acts);
    upd.qd = qd;
  }
  b.impact_set = upd.impact_set;
  b.mode_after = upd.J;
  out.z_post = z;
  out.z_post.segment(d, d) = upd.qd;
  b.x_post = out.z_post;
  const ActiveSet K = upd.impact_set;
  b.reset_jac = K.empty() ? Matrix(Matrix::Identity(ctx.N, ctx.N))
                          : central_jacobian([&](const Vector& zz) { return ctx.reset(K, zz); }, z);
  b.f_post = ctx.field(b.mode_after, out.z_post);
  assemble(b);
  if (!(b.gf < -sys.tol.graze)) {
    out.coherent = false;
    if (out.reason.empty()) out.reason = fmt::format("non-transversal transition (g.f = {:.3g})", b.gf);
  }
  return out;
}

struct EventOption {
  EventOrdering ordering;
  std::vector<TransitionBlock> blocks;
};

std::vector<EventOption> event_options(const Context& ctx, const Event& ev, const Vector& u,
                                       int k_max) {
  std::vector<ElementaryTransition> parts;
  for (int i : ev.activated) parts.push_back({TransitionKind::activation, i});
  for (int i : ev.deactivated) parts.push_back({TransitionKind::deactivation, i});
  if (static_cast<int>(parts.size()) > k_max) {
    throw CombinatorialLimitError(fmt::format(
        "event at t = {} involves {} constraints, above k_max = {}", ev.t, parts.size(), k_max));
  }
  const Vector z0 = augment(ctx, ev.x_pre, u);
  const Vector z_real = augment(ctx, ev.x_post, u);
  const double scale = std::max(1.0, z_real.norm());
  std::vector<EventOption> out;

  auto finish_option = [&](EventOption& opt, const Vector& z_end, const ActiveSet& mode_end) {
    opt.ordering.continuous =
        mode_end == ev.mode_after && (z_end - z_real).norm() <= 1e-8 * scale;
  };

  if (parts.size() == 1) {
    EventOption opt;
    opt.ordering.steps = parts;
    auto r = apply_step(ctx, ev.mode_before, z0, parts);
    opt.ordering.modes.push_back(r.block.mode_after);
    finish_option(opt, r.z_post, r.block.mode_after);
    opt.blocks.push_back(std::move(r.block));
    out.push_back(std::move(opt));
    return out;
  }

  std::vector<int> perm(parts.size());
  std::iota(perm.begin(), perm.end(), 0);
  do {
    EventOption opt;
    ActiveSet mode = ev.mode_before;
    Vector z = z0;
    bool coherent = true;
    for (int p : perm) {
      auto r = apply_step(ctx, mode, z, {parts[static_cast<std::size_t>(p)]});
      if (!r.coherent) {
        spdlog::debug("ordering rejected at t = {}: {}", ev.t, r.reason);
        coherent = false;
        break;
      }
      opt.ordering.steps.push_back(parts[static_cast<std::size_t>(p)]);
      opt.ordering.modes.push_back(r.block.mode_after);
      mode = r.block.mode_after;
      z = r.z_post;
      opt.blocks.push_back(std::move(r.block));
    }
    if (!coherent) continue;
    finish_option(opt, z, mode);
    out.push_back(std::move(opt));
  } while (std::next_permutation(perm.begin(), perm.end()));

  if (ev.activated.size() >= 2) {
    EventOption opt;
    opt.ordering.steps = parts;
    opt.ordering.merged = true;
    auto r = apply_step(ctx, ev.mode_before, z0, parts);
    opt.ordering.modes.push_back(r.block.mode_after);
    finish_option(opt, r.z_post, r.block.mode_after);
    opt.blocks.push_back(std::move(r.block));
    out.push_back(std::move(opt));
  }
  if (out.empty()) {
    throw InadmissibleError(fmt::format("no coherent ordering for the event at t = {}", ev.t));
  }
  return out;
}

void require_admissible(const HybridTrajectory& traj) {
  if (!traj.admissible) {
    throw InadmissibleError("trajectory is not admissible (" + to_string(traj.termination) +
                            (traj.diagnostic.empty() ? "" : ": " + traj.diagnostic) + ")");
  }
}

struct Enumerated {
  std::vector<std::vector<EventOption>> per_event;
  std::vector<std::vector<int>> combos;  // option index per event
};

Enumerated enumerate(const Context& ctx, const HybridTrajectory& traj, const Vector& u, int k_max) {
  require_admissible(traj);
  Enumerated e;
  for (const auto& ev : traj.events) e.per_event.push_back(event_options(ctx, ev, u, k_max));
  e.combos.push_back({});
  for (const auto& opts : e.per_event) {
    std::vector<std::vector<int>> next;
    for (const auto& c : e.combos) {
      for (int k = 0; k < static_cast<int>(opts.size()); ++k) {
        auto cc = c;
        cc.push_back(k);
        next.push_back(std::move(cc));
      }
    }
    e.combos = std::move(next);
  }
  return e;
}

Selection make_selection(const HybridTrajectory& traj, const Enumerated& e, const std::vector<int>& combo) {
  Selection s;
  s.word.push_back(traj.segments.front().mode);
  for (std::size_t k = 0; k < combo.size(); ++k) {
    const auto& ord = e.per_event[k][static_cast<std::size_t>(combo[k])].ordering;
    s.orderings.push_back(ord);
    for (const auto& m : ord.modes) s.word.push_back(m);
    if (ord.merged) {
      s.eta.push_back(-1);
      s.merged = true;
    } else {
      for (const auto& st : ord.steps) s.eta.push_back(st.constraint);
    }
    s.continuous = s.continuous && ord.continuous;
  }
  return s;
}

std::vector<Selection> selections_of(const HybridTrajectory& traj, const Enumerated& e) {
  std::vector<Selection> out;
  for (const auto& c : e.combos) out.push_back(make_selection(traj, e, c));
  return out;
}

BDerivative build_bderivative(const Context& ctx, const Vector& u, const HybridTrajectory& traj,
                              const SimConfig& cfg, const SensitivityOptions& opt) {
  const Enumerated e = enumerate(ctx, traj, u, opt.k_max);
  const int d = ctx.d;
  BDerivative bd;
  bd.t0 = traj.t_start();
  bd.t_end = traj.t_end();
  bd.x0 = augment(ctx, traj.segments.front().x_start(), u);
  bd.state_dim = 2 * d;
  bd.param_dim = ctx.m;

  for (const auto& ev : traj.events) {
    if (ev.size() < 2) continue;
    const ActiveSet involved = ev.constraints().unite(ev.mode_before);
    const Vector q = ev.x_pre.head(d);
    for (int i : involved) {
      for (int j : involved) {
        if (j <= i) continue;
        const double o = orthogonality_check(ctx.base, q, i, j);
        if (std::abs(o) > ctx.base.tol.orth) {
          bd.orthogonal = false;
          bd.warnings.push_back(fmt::format(
              "constraints {} and {} are not orthogonal at the simultaneous event t = {:.17g} "
              "(<Da_i, Da_j>_M^-1 = {:.6g}); the flow may be discontinuous there",
              i, j, ev.t, o));
        }
      }
    }
  }
  for (const auto& w : bd.warnings) spdlog::warn("{}", w);

  std::vector<VariationalSegment> segs;
  for (const auto& s : traj.segments) segs.push_back(variational(ctx, s, u, cfg));
  const Vector time_jac = segs.back().Phi_t;

  for (const auto& combo : e.combos) {
    SelectionDerivative sd;
    sd.selection = make_selection(traj, e, combo);
    sd.segments = segs;
    sd.time_jac = time_jac;
    Matrix acc = segs.front().Phi;
    for (std::size_t k = 0; k < combo.size(); ++k) {
      const auto& blocks = e.per_event[k][static_cast<std::size_t>(combo[k])].blocks;
      for (const auto& b : blocks) acc = b.saltation_full * acc;
      acc = segs[k + 1].Phi * acc;
      sd.transitions.push_back(blocks);
    }
    sd.state_jac = acc.topRows(2 * d);
    bd.selections.push_back(std::move(sd));
  }
  return bd;
}

}  // namespace

VariationalSegment variational_flow(const MechSystem& sys, const Segment& seg, const SimConfig& cfg) {
  return variational(make_context(sys), seg, Vector(0), cfg);
}

TransitionBlock transition_block(const MechSystem& sys, const State& pre,
                                 const ElementaryTransition& step) {
  const Context ctx = make_context(sys);
  auto r = apply_step(ctx, pre.J, pre.x(), {step});
  if (std::abs(r.block.gf) < sys.tol.graze) {
    throw GrazingError(fmt::format("non-transversal transition of constraint {} (g.f = {:.3g})",
                                   step.constraint, r.block.gf),
                       step.constraint);
  }
  return r.block;
}

std::vector<Selection> enumerate_selections(const MechSystem& sys, const HybridTrajectory& traj,
                                            int k_max) {
  const Context ctx = make_context(sys);
  return selections_of(traj, enumerate(ctx, traj, Vector(0), k_max));
}

SelectionDerivative selection_jacobian(const MechSystem& sys, const HybridTrajectory& traj,
                                       const Selection& selection, const SimConfig& cfg) {
  const BDerivative bd = b_derivative(sys, traj, cfg, {});
  for (const auto& s : bd.selections) {
    if (s.selection.word == selection.word && s.selection.eta == selection.eta &&
        s.selection.merged == selection.merged) {
      return s;
    }
  }
  throw Error("selection_jacobian: selection " + selection.label() + " is not enumerated for this trajectory");
}

BDerivative b_derivative(const MechSystem& sys, const HybridTrajectory& traj, const SimConfig& cfg,
                         const SensitivityOptions& opt) {
  return build_bderivative(make_context(sys), Vector(0), traj, cfg, opt);
}

BDerivative b_derivative(const ControlledSystem& csys, const Vector& u, const HybridTrajectory& traj,
                         const SimConfig& cfg, const SensitivityOptions& opt) {
  if (u.size() != csys.m) throw ConfigError("input dimension mismatch");
  return build_bderivative(make_context(csys, u), u, traj, cfg, opt);
}

std::vector<int> BDerivative::realizable() const {
  std::vector<int> out;
  for (int k = 0; k < static_cast<int>(selections.size()); ++k) {
    if (!selections[static_cast<std::size_t>(k)].selection.merged) out.push_back(k);
  }
  return out;
}

MembershipResult BDerivative::membership(const Vector& dz) const {
  MembershipResult res;
  std::vector<int> cand = realizable();
  if (cand.empty()) {
    cand.resize(selections.size());
    std::iota(cand.begin(), cand.end(), 0);
  }
  const double tol = 1e-9 * std::max(dz.norm(), std::numeric_limits<double>::min());
  std::vector<Vector> cur(selections.size());
  for (int s : cand) cur[static_cast<std::size_t>(s)] = selections[static_cast<std::size_t>(s)].segments.front().Phi * dz;

  const std::size_t events = selections.front().transitions.size();
  for (std::size_t k = 0; k < events; ++k) {
    std::vector<double> min_dur(selections.size(), std::numeric_limits<double>::infinity());
    for (int s : cand) {
      const auto& blocks = selections[static_cast<std::size_t>(s)].transitions[k];
      if (blocks.size() < 2) continue;
      Vector w = cur[static_cast<std::size_t>(s)];
      for (std::size_t j = 0; j < blocks.size(); ++j) {
        if (j > 0) {
          const double dur = blocks[j].tau_grad.dot(w);
          min_dur[static_cast<std::size_t>(s)] = std::min(min_dur[static_cast<std::size_t>(s)], dur);
        }
        w = blocks[j].saltation * w;
      }
    }
    std::vector<int> keep;
    for (int s : cand) {
      if (min_dur[static_cast<std::size_t>(s)] >= -tol) keep.push_back(s);
    }
    if (keep.empty()) {
      double best = -std::numeric_limits<double>::infinity();
      for (int s : cand) best = std::max(best, min_dur[static_cast<std::size_t>(s)]);
      for (int s : cand) {
        if (min_dur[static_cast<std::size_t>(s)] == best) keep.push_back(s);
      }
    }
    for (int s : keep) {
      const double m = min_dur[static_cast<std::size_t>(s)];
      if (std::isfinite(m)) res.durations.push_back(m);
    }
    // Distinct orderings surviving at this event mean a first-order tie.
    for (int s : keep) {
      const auto& a = selections[static_cast<std::size_t>(s)].selection.orderings[k].steps;
      const auto& b = selections[static_cast<std::size_t>(keep.front())].selection.orderings[k].steps;
      if (!(a == b)) res.boundary = true;
    }
    cand = keep;
    for (int s : cand) {
      const auto& sel = selections[static_cast<std::size_t>(s)];
      Vector w = cur[static_cast<std::size_t>(s)];
      for (const auto& b : sel.transitions[k]) w = b.saltation_full * w;
      cur[static_cast<std::size_t>(s)] = sel.segments[k + 1].Phi * w;
    }
  }
  res.agreeing = cand;
  res.selection = cand.front();
  return res;
}

Vector BDerivative::apply(double dt, const Vector& dz) const {
  const auto& s = selections[static_cast<std::size_t>(membership(dz).selection)];
  return s.time_jac * dt + s.state_jac * dz;
}

std::vector<ActiveSet> perturbed_word(const MechSystem& sys, const State& x0, const Vector& dz,
                                      double alpha, const SimConfig& cfg) {
  const Vector x = x0.x() + alpha * dz.head(2 * sys.dof);
  const auto traj = flow(sys, State::from_x(x0.t, x, x0.J), cfg);
  return traj.word();
}

Matrix tangent_basis(const MechSystem& sys, const State& x0) {
  const int d = sys.dof;
  if (x0.J.empty()) return Matrix::Identity(2 * d, 2 * d);
  const Matrix da = constraint_jac_rows(sys, x0.q, x0.J);
  const auto hess = eval_constraint_hess(sys, x0.q);
  const int k = x0.J.size();
  Matrix c = Matrix::Zero(2 * k, 2 * d);
  c.block(0, 0, k, d) = da;
  int r = 0;
  for (int i : x0.J) {
    c.block(k + r, 0, 1, d) = (hess[static_cast<std::size_t>(i)] * x0.qd).transpose();
    ++r;
  }
  c.block(k, d, k, d) = da;
  Eigen::JacobiSVD<Matrix> svd(c, Eigen::ComputeFullV);
  const int rank = static_cast<int>((svd.singularValues().array() > 1e-12).count());
  return svd.matrixV().rightCols(2 * d - rank);
}

}  // namespace uflow
