#include "uflow/sim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fmt/format.h>

#include "integrator.hpp"
#include "uflow/errors.hpp"

namespace uflow {

void SimConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(fmt::format("sim.{} must be positive", name));
  };
  positive(rel_tol, "rel_tol");
  positive(abs_tol, "abs_tol");
  positive(max_step, "max_step");
  positive(event_tol, "event_tol");
  positive(zeno_min_dt, "zeno_min_dt");
  positive(simultaneity_window, "simultaneity_window");
  positive(t_final, "t_final");
  if (zeno_max_events <= 0) throw ConfigError("sim.zeno_max_events must be positive");
  if (zeno_min_dt_count <= 0) throw ConfigError("sim.zeno_min_dt_count must be positive");
  if (zeno_geometric_window < 0) throw ConfigError("sim.zeno_geometric_window must be >= 0");
  if (!(zeno_ratio > 0.0 && zeno_ratio < 1.0)) throw ConfigError("sim.zeno_ratio must be in (0, 1)");
  if (simultaneity_window < event_tol) {
    throw ConfigError("sim.simultaneity_window must be >= sim.event_tol");
  }
}

std::string to_string(EventKind kind) {
  switch (kind) {
    case EventKind::activation: return "activation";
    case EventKind::deactivation: return "deactivation";
    case EventKind::mixed: return "mixed";
  }
  return "?";
}

std::string to_string(Termination term) {
  switch (term) {
    case Termination::time_reached: return "time_reached";
    case Termination::stop_condition: return "stop_condition";
    case Termination::zeno_guard: return "zeno_guard";
    case Termination::grazing: return "grazing";
    case Termination::model_error: return "model_error";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// trajectory containers

Vector Segment::state_at(double t) const {
  if (knots.size() == 1 || t <= knots.front().t) return knots.front().x;
  if (t >= knots.back().t) return knots.back().x;
  auto it = std::upper_bound(knots.begin(), knots.end(), t,
                             [](double v, const Knot& k) { return v < k.t; });
  const Knot& k1 = *it;
  const Knot& k0 = *(it - 1);
  const double h = k1.t - k0.t;
  const double s = (t - k0.t) / h;
  const double s2 = s * s, s3 = s2 * s;
  const double h00 = 2 * s3 - 3 * s2 + 1, h10 = s3 - 2 * s2 + s;
  const double h01 = -2 * s3 + 3 * s2, h11 = s3 - s2;
  return h00 * k0.x + h10 * h * k0.xdot + h01 * k1.x + h11 * h * k1.xdot;
}

std::vector<ActiveSet> HybridTrajectory::word() const {
  std::vector<ActiveSet> out;
  out.reserve(segments.size());
  for (const auto& s : segments) out.push_back(s.mode);
  return out;
}

std::vector<int> HybridTrajectory::eta() const {
  std::vector<int> out;
  for (const auto& e : events) {
    const ActiveSet c = e.constraints();
    out.push_back(c.size() == 1 ? c.indices().front() : -1);
  }
  return out;
}

State HybridTrajectory::initial_state() const {
  const auto& s = segments.front();
  return State::from_x(s.t_start(), s.x_start(), s.mode);
}

State HybridTrajectory::final_state() const {
  const auto& s = segments.back();
  return State::from_x(s.t_end(), s.x_end(), s.mode);
}

Vector HybridTrajectory::state_at(double t) const {
  for (const auto& s : segments) {
    if (t <= s.t_end()) return s.state_at(t);
  }
  return segments.back().x_end();
}

// ---------------------------------------------------------------------------
// event localization

double locate_event(const std::function<double(double)>& g, double ta, double tb, double tol) {
  double ga = g(ta);
  const double gb = g(tb);
  if (!(ga > 0.0 && gb <= 0.0)) {
    throw Error(fmt::format("locate_event: no downward sign change on [{}, {}] (g = {}, {})", ta,
                            tb, ga, gb));
  }
  while (tb - ta > tol) {
    const double tm = 0.5 * (ta + tb);
    if (tm <= ta || tm >= tb) break;
    const double gm = g(tm);
    if (gm > 0.0) {
      ta = tm;
      ga = gm;
    } else {
      tb = tm;
    }
  }
  return tb;
}

double locate_event(const Segment& segment, const std::function<double(const Vector&)>& event_fn,
                    double ta, double tb, double tol) {
  return locate_event([&](double t) { return event_fn(segment.state_at(t)); }, ta, tb, tol);
}

// ---------------------------------------------------------------------------
// admissibility

double force_rate(const MechSystem& sys, const ActiveSet& J, const Vector& x, int i) {
  const int pos = J.position(i);
  if (pos < 0) throw Error(fmt::format("force_rate: constraint {} not in mode {}", i, J.str()));
  const int d = sys.dof;
  const Vector f = mode_field(sys, J, x);
  const double fn = f.norm();
  if (fn == 0.0) return 0.0;
  const double eps = 1e-6 * std::max(1.0, x.norm()) / fn;
  const Vector xp = x + eps * f;
  const Vector xm = x - eps * f;
  const double lp = contact_force(sys, xp.head(d), xp.tail(d), J)[pos];
  const double lm = contact_force(sys, xm.head(d), xm.tail(d), J)[pos];
  return (lp - lm) / (2.0 * eps);
}

AdmissibilityVerdict classify_activation(const MechSystem& sys, const State& pre,
                                         const ActiveSet& I) {
  AdmissibilityVerdict v;
  const Matrix da = eval_constraint_jac(sys, pre.q);
  v.margin = std::numeric_limits<double>::infinity();
  for (int i : I) {
    const double vel = da.row(i).dot(pre.qd);
    const bool ok = vel < -sys.tol.graze;
    v.tests.push_back({i, "velocity", vel, ok});
    v.admissible = v.admissible && ok;
    v.margin = std::min(v.margin, -vel);
  }
  return v;
}

AdmissibilityVerdict classify_deactivation(const MechSystem& sys, const State& state,
                                           const ActiveSet& I) {
  AdmissibilityVerdict v;
  v.margin = std::numeric_limits<double>::infinity();
  if (!state.J.contains(I)) {
    throw Error(fmt::format("classify_deactivation: {} not contained in mode {}", I.str(),
                            state.J.str()));
  }
  const Matrix da = eval_constraint_jac(sys, state.q);
  const ActiveSet released = state.J.minus(I);
  const Vector x = state.x();
  for (int i : I) {
    const double vel = da.row(i).dot(state.qd);
    if (vel > sys.tol.graze) {
      v.tests.push_back({i, "velocity", vel, true});
      v.margin = std::min(v.margin, vel);
      continue;
    }
    const double acc = constraint_accel(sys, state.q, state.qd, released, i);
    if (std::abs(vel) <= sys.tol.graze && acc > sys.tol.graze) {
      v.tests.push_back({i, "acceleration", acc, true});
      v.margin = std::min(v.margin, acc);
      continue;
    }
    const double rate = force_rate(sys, state.J, x, i);
    const bool ok = rate < -sys.tol.graze;
    v.tests.push_back({i, "force_rate", rate, ok});
    v.admissible = v.admissible && ok;
    v.margin = std::min(v.margin, -rate);
  }
  return v;
}

ActiveSetUpdate update_active_set(const MechSystem& sys, const Vector& q, const Vector& qd_pre,
                                  const ActiveSet& J_old, const ActiveSet& I_activated) {
  ActiveSetUpdate out;
  const int limit = sys.num_constraints + 1;
  const Matrix da = eval_constraint_jac(sys, q);
  const ActiveSet tentative = J_old.unite(I_activated);

  // Impulse resolution: unilateral contacts can push but not pull.
  ActiveSet K = I_activated.empty() ? ActiveSet{} : tentative;
  ImpactResult imp = impact_map(sys, q, qd_pre, K);
  while (!K.empty()) {
    if (++out.iterations > limit) {
      throw InadmissibleError("active-set resolution: impulse signs did not settle");
    }
    const double scale = std::max(1.0, imp.impulse.cwiseAbs().maxCoeff());
    Eigen::Index worst = 0;
    const double pmin = imp.impulse.minCoeff(&worst);
    if (pmin >= -sys.tol.force * scale) break;
    const int dropped = K.indices()[static_cast<std::size_t>(worst)];
    out.tests.push_back({dropped, "impulse", pmin, false});
    K = K.without(dropped);
    imp = impact_map(sys, q, qd_pre, K);
  }
  out.impact_set = K;
  out.impulse = imp.impulse;
  out.qd = imp.qd_plus;

  // Separation at the impact instant: positive normal velocity leaves contact.
  ActiveSet J;
  for (int i : tentative) {
    const double vel = da.row(i).dot(out.qd);
    if (vel > sys.tol.graze) {
      out.tests.push_back({i, "velocity", vel, true});
    } else if (K.contains(i) || J_old.contains(i)) {
      J = J.with(i);
    } else {
      out.tests.push_back({i, "velocity", vel, false});
      J = J.with(i);
    }
  }

  // Persistence: remove constraints whose contact force would have to pull.
  for (;;) {
    if (++out.iterations > 2 * limit) {
      throw InadmissibleError("active-set resolution: contact forces did not settle");
    }
    if (J.empty()) break;
    const Vector lam = contact_force(sys, q, out.qd, J);
    Eigen::Index worst = 0;
    const double lmin = lam.minCoeff(&worst);
    if (lmin >= -sys.tol.force) break;
    const int dropped = J.indices()[static_cast<std::size_t>(worst)];
    out.tests.push_back({dropped, "force", lmin, false});
    J = J.without(dropped);
  }
  out.J = J;
  out.separated = tentative.minus(J);
  return out;
}

// ---------------------------------------------------------------------------
// flow

namespace {

enum class CandidateKind { activation, deactivation, stop };

struct Candidate {
  CandidateKind kind;
  int constraint;  // -1 for the stop condition
};

class Monitor {
 public:
  Monitor(const MechSystem& sys, const ActiveSet& J, const StopCondition* stop)
      : sys_(sys), J_(J), stop_(stop) {
    for (int i = 0; i < sys.num_constraints; ++i) {
      candidates_.push_back({J.contains(i) ? CandidateKind::deactivation : CandidateKind::activation, i});
    }
    if (stop) candidates_.push_back({CandidateKind::stop, -1});
  }

  const std::vector<Candidate>& candidates() const { return candidates_; }

  /// Guard values at (t, x); NaN marks a guard that is not armed.
  Vector values(double t, const Vector& x) const {
    const int d = sys_.dof;
    Vector out(static_cast<Eigen::Index>(candidates_.size()));
    const Vector a = eval_constraints(sys_, x.head(d));
    const Vector lam = J_.empty() ? Vector(0) : contact_force(sys_, x.head(d), x.tail(d), J_);
    for (std::size_t c = 0; c < candidates_.size(); ++c) {
      const auto& cand = candidates_[c];
      double v = 0.0;
      switch (cand.kind) {
        case CandidateKind::activation: v = a[cand.constraint]; break;
        case CandidateKind::deactivation: v = lam[J_.position(cand.constraint)]; break;
        case CandidateKind::stop:
          v = t >= stop_->t_min ? stop_->fn(x) : std::numeric_limits<double>::quiet_NaN();
          break;
      }
      out[static_cast<Eigen::Index>(c)] = v;
    }
    return out;
  }

  double value(std::size_t c, double t, const Vector& x) const {
    return values(t, x)[static_cast<Eigen::Index>(c)];
  }

 private:
  const MechSystem& sys_;
  ActiveSet J_;
  const StopCondition* stop_;
  std::vector<Candidate> candidates_;
};

double max_drift(const MechSystem& sys, const ActiveSet& J, const Vector& x) {
  if (J.empty()) return 0.0;
  const Vector a = eval_constraints(sys, x.head(sys.dof));
  double m = 0.0;
  for (int i : J) m = std::max(m, std::abs(a[i]));
  return m;
}

class ZenoGuard {
 public:
  explicit ZenoGuard(const SimConfig& cfg) : cfg_(cfg) {}

  /// Registers an event time; returns a diagnostic when the guard fires.
  std::optional<std::string> record(double t, int count, double* accumulation) {
    if (count > cfg_.zeno_max_events) {
      return fmt::format("more than {} events", cfg_.zeno_max_events);
    }
    if (last_) {
      const double gap = t - *last_;
      small_gaps_ = gap < cfg_.zeno_min_dt ? small_gaps_ + 1 : 0;
      if (small_gaps_ >= cfg_.zeno_min_dt_count) {
        *accumulation = t;
        return fmt::format("{} consecutive inter-event gaps below {}", small_gaps_, cfg_.zeno_min_dt);
      }
      if (!gaps_.empty() && gap <= cfg_.zeno_ratio * gaps_.back()) {
        ++shrinking_;
      } else {
        shrinking_ = 0;
      }
      gaps_.push_back(gap);
      if (gaps_.size() > 2) gaps_.pop_front();
      if (cfg_.zeno_geometric_window > 0 && shrinking_ >= cfg_.zeno_geometric_window) {
        const double r = gaps_.back() / gaps_.front();
        *accumulation = t + gaps_.back() * r / (1.0 - r);
        return fmt::format("{} consecutive inter-event gaps shrinking geometrically (ratio {:.6g})",
                           shrinking_, r);
      }
    }
    last_ = t;
    return std::nullopt;
  }

 private:
  const SimConfig& cfg_;
  std::optional<double> last_;
  std::deque<double> gaps_;
  int small_gaps_ = 0;
  int shrinking_ = 0;
};

EventKind kind_of(const ActiveSet& act, const ActiveSet& deact) {
  if (deact.empty()) return EventKind::activation;
  if (act.empty()) return EventKind::deactivation;
  return EventKind::mixed;
}

void check_initial_state(const MechSystem& sys, const State& x0) {
  const int d = sys.dof;
  if (x0.q.size() != d || x0.qd.size() != d) {
    throw ModelError(fmt::format("{}: initial state has wrong dimension (expected d = {})", sys.name, d));
  }
  for (int i : x0.J) {
    if (i < 0 || i >= sys.num_constraints) throw ModelError("initial active set index out of range");
  }
  check_model_invariants(sys, x0.q, x0.qd);
  const Vector a = eval_constraints(sys, x0.q);
  const Matrix da = eval_constraint_jac(sys, x0.q);
  for (int i = 0; i < sys.num_constraints; ++i) {
    if (x0.J.contains(i)) {
      if (std::abs(a[i]) > sys.tol.cons) {
        throw InadmissibleError(fmt::format("initial state: a_{} = {} but constraint is active", i, a[i]));
      }
      if (std::abs(da.row(i).dot(x0.qd)) > sys.tol.cons) {
        throw InadmissibleError(
            fmt::format("initial state: active constraint {} has nonzero normal velocity", i));
      }
    } else if (a[i] < -sys.tol.cons) {
      throw InadmissibleError(fmt::format("initial state: constraint {} violated (a = {})", i, a[i]));
    }
  }
}

}  // namespace

HybridTrajectory flow(const MechSystem& sys, const State& x0, const SimConfig& cfg,
                      const StopCondition* stop) {
  cfg.validate();
  check_initial_state(sys, x0);
  const int d = sys.dof;

  HybridTrajectory traj;
  ActiveSet J = x0.J;
  Vector x = x0.x();
  double t = x0.t;
  if (!J.empty()) {
    const auto settled = update_active_set(sys, x0.q, x0.qd, J, {});
    if (settled.J != J) {
      spdlog::debug("{}: initial mode {} settled to {}", sys.name, J.str(), settled.J.str());
      J = settled.J;
    }
  }

  detail::IntegratorOptions iopt{cfg.abs_tol, cfg.rel_tol, cfg.max_step};
  detail::DenseIntegrator integrator(iopt);
  ZenoGuard zeno(cfg);
  double dt = std::min(cfg.max_step, 1e-3);

  auto finish = [&](Termination term, std::string diagnostic, int constraint) {
    traj.termination = term;
    traj.diagnostic = std::move(diagnostic);
    traj.offending_constraint = constraint;
    traj.admissible = term == Termination::time_reached || term == Termination::stop_condition;
    return traj;
  };

  for (;;) {
    const ActiveSet mode = J;
    auto rhs = [&sys, mode](double, const Vector& s) { return mode_field(sys, mode, s); };
    Monitor monitor(sys, mode, stop);
    Segment seg;
    seg.mode = mode;
    seg.knots.push_back({t, x, rhs(t, x)});
    integrator.initialize(rhs, x, t, dt);
    Vector prev_vals = monitor.values(t, x);
    // A guard is armed once positive; constraints leaving contact at the
    // segment start (a_i <= 0 with positive normal velocity) are armed at once.
    std::vector<char> armed(monitor.candidates().size(), 0);
    {
      const Matrix da = eval_constraint_jac(sys, x.head(d));
      for (std::size_t c = 0; c < armed.size(); ++c) {
        const auto& cand = monitor.candidates()[c];
        armed[c] = prev_vals[static_cast<Eigen::Index>(c)] > 0.0 ||
                   (cand.kind == CandidateKind::activation &&
                    da.row(cand.constraint).dot(x.tail(d)) > 0.0);
      }
    }

    bool event_found = false;
    double t_event = 0.0;
    Vector x_event;
    std::vector<std::size_t> group;

    while (!event_found) {
      std::pair<double, double> span;
      try {
        span = integrator.step();
      } catch (const ModelError& e) {
        traj.segments.push_back(std::move(seg));
        return finish(Termination::model_error, e.what(), -1);
      }
      const double ta = span.first;
      const double tb = std::min(span.second, cfg.t_final);
      const Vector xa = integrator.previous_state();

      // Scan the step on a few interior points for downward guard crossings.
      constexpr int kSub = 4;
      double tl = ta;
      Vector vl = prev_vals;
      std::vector<std::size_t> crossing;
      double tr = tb;
      Vector vr;
      std::vector<double> times;
    rescan:
      tl = ta;
      vl = prev_vals;
      crossing.clear();
      times.clear();
      for (int k = 1; k <= kSub; ++k) {
        tr = k == kSub ? tb : ta + (tb - ta) * k / kSub;
        vr = monitor.values(tr, integrator.state_at(tr));
        for (std::size_t c = 0; c < monitor.candidates().size(); ++c) {
          const auto idx = static_cast<Eigen::Index>(c);
          if (armed[c] && vr[idx] <= 0.0) crossing.push_back(c);
        }
        if (!crossing.empty()) break;
        for (std::size_t c = 0; c < armed.size(); ++c) {
          if (vr[static_cast<Eigen::Index>(c)] > 0.0) armed[c] = 1;
        }
        tl = tr;
        vl = vr;
      }

      if (crossing.empty()) {
        const Vector xb = tb < span.second ? integrator.state_at(tb) : integrator.current_state();
        const double drift = max_drift(sys, mode, xb);
        if (drift > 100.0 * sys.tol.cons) {
          seg.knots.push_back({tb, xb, rhs(tb, xb)});
          traj.segments.push_back(std::move(seg));
          return finish(Termination::model_error,
                        fmt::format("constraint drift {} exceeds 100*tol_cons in mode {}", drift,
                                    mode.str()),
                        -1);
        }
        seg.knots.push_back({tb, xb, rhs(tb, xb)});
        prev_vals = vr;
        dt = integrator.current_dt();
        if (tb >= cfg.t_final) {
          traj.segments.push_back(std::move(seg));
          return finish(Termination::time_reached, "", -1);
        }
        continue;
      }

      // Localize each crossing on the dense output. A guard armed but not yet
      // positive at tl made its whole excursion inside [tl, tr]: find a
      // positive interior point first.
      std::vector<std::size_t> located;
      for (std::size_t c : crossing) {
        auto g = [&](double tt) { return monitor.value(c, tt, integrator.state_at(tt)); };
        double left = tl;
        if (!(vl[static_cast<Eigen::Index>(c)] > 0.0)) {
          constexpr int kProbe = 64;
          left = std::numeric_limits<double>::quiet_NaN();
          for (int k = 1; k < kProbe && std::isnan(left); ++k) {
            const double tp = tl + (tr - tl) * k / kProbe;
            if (g(tp) > 0.0) left = tp;
          }
          // Excursions right after a release start at tl; probe geometrically toward it.
          for (int k = 1; k < 60 && std::isnan(left); ++k) {
            const double tp = tl + (tr - tl) * std::ldexp(1.0, -k);
            if (tp <= tl) break;
            if (g(tp) > 0.0) left = tp;
          }
          if (std::isnan(left)) {
            spdlog::debug("{}: guard excursion of constraint {} below resolution at t = {}",
                          sys.name, monitor.candidates()[c].constraint, tl);
            armed[c] = 0;
            continue;
          }
        }
        times.push_back(locate_event(g, left, tr, cfg.event_tol));
        located.push_back(c);
      }
      crossing = located;
      if (crossing.empty()) goto rescan;
      const auto first = std::min_element(times.begin(), times.end()) - times.begin();
      const std::size_t lead = crossing[static_cast<std::size_t>(first)];
      double te = times[static_cast<std::size_t>(first)];
      for (std::size_t k = 0; k < crossing.size(); ++k) {
        if (times[k] - te <= cfg.simultaneity_window) group.push_back(crossing[k]);
      }

      // Newton polish of the leading guard on an accurate re-integration.
      Vector xe = detail::integrate(rhs, xa, ta, te, iopt);
      for (int it = 0; it < 4; ++it) {
        const double h = monitor.value(lead, te, xe);
        const Vector f = rhs(te, xe);
        const double eps = 1e-7 * std::max(1.0, xe.norm()) / std::max(f.norm(), 1e-300);
        const double hdot =
            (monitor.value(lead, te, xe + eps * f) - monitor.value(lead, te, xe - eps * f)) /
            (2.0 * eps);
        if (!(std::abs(hdot) > 0.0) || !std::isfinite(h)) break;
        double tn = te - h / hdot;
        tn = std::clamp(tn, tl, tr);
        if (std::abs(tn - te) <= 1e-15 * std::max(1.0, std::abs(te))) break;
        xe = detail::integrate(rhs, xa, ta, tn, iopt);
        te = tn;
      }
      if (te >= cfg.t_final) {
        const Vector xf = detail::integrate(rhs, xa, ta, cfg.t_final, iopt);
        seg.knots.push_back({cfg.t_final, xf, rhs(cfg.t_final, xf)});
        traj.segments.push_back(std::move(seg));
        return finish(Termination::time_reached, "", -1);
      }
      event_found = true;
      t_event = te;
      x_event = xe;
    }

    seg.knots.push_back({t_event, x_event, rhs(t_event, x_event)});
    traj.segments.push_back(std::move(seg));

    ActiveSet act, deact;
    bool stop_hit = false;
    for (std::size_t c : group) {
      const auto& cand = monitor.candidates()[c];
      if (cand.kind == CandidateKind::activation) act = act.with(cand.constraint);
      if (cand.kind == CandidateKind::deactivation) deact = deact.with(cand.constraint);
      if (cand.kind == CandidateKind::stop) stop_hit = true;
    }
    if (stop_hit) return finish(Termination::stop_condition, stop->name, -1);

    Event ev;
    ev.t = t_event;
    ev.kind = kind_of(act, deact);
    ev.activated = act;
    ev.deactivated = deact;
    ev.mode_before = mode;
    ev.x_pre = x_event;
    const State pre = State::from_x(t_event, x_event, mode);

    if (!act.empty()) {
      const auto v = classify_activation(sys, pre, act);
      ev.details.insert(ev.details.end(), v.tests.begin(), v.tests.end());
      if (!v.admissible) {
        int offender = -1;
        for (const auto& tst : v.tests) {
          if (!tst.passed) offender = tst.constraint;
        }
        ev.admissible = false;
        ev.mode_after = mode;
        ev.x_post = x_event;
        traj.events.push_back(std::move(ev));
        return finish(Termination::grazing,
                      fmt::format("grazing activation of constraint {} at t = {:.17g}", offender,
                                  t_event),
                      offender);
      }
    }
    if (!deact.empty()) {
      const auto v = classify_deactivation(sys, pre, deact);
      ev.details.insert(ev.details.end(), v.tests.begin(), v.tests.end());
      if (!v.admissible) {
        int offender = -1;
        for (const auto& tst : v.tests) {
          if (!tst.passed) offender = tst.constraint;
        }
        ev.admissible = false;
        ev.mode_after = mode;
        ev.x_post = x_event;
        traj.events.push_back(std::move(ev));
        return finish(Termination::grazing,
                      fmt::format("non-transversal release of constraint {} at t = {:.17g}",
                                  offender, t_event),
                      offender);
      }
    }

    ActiveSetUpdate upd;
    try {
      upd = update_active_set(sys, pre.q, pre.qd, mode.minus(deact), act);
    } catch (const Error& e) {
      ev.admissible = false;
      traj.events.push_back(std::move(ev));
      return finish(Termination::model_error, e.what(), -1);
    }
    ev.details.insert(ev.details.end(), upd.tests.begin(), upd.tests.end());
    ev.impact_set = upd.impact_set;
    ev.separated = upd.separated.minus(deact);
    ev.mode_after = upd.J;
    ev.x_post.resize(2 * d);
    ev.x_post << pre.q, upd.qd;
    spdlog::debug("{}: t={:.12g} {} act={} deact={} mode {} -> {}", sys.name, t_event,
                  to_string(ev.kind), act.str(), deact.str(), mode.str(), upd.J.str());

    const int lead_constraint = ev.constraints().indices().front();
    traj.events.push_back(ev);
    double accumulation = std::numeric_limits<double>::quiet_NaN();
    if (auto msg = zeno.record(t_event, static_cast<int>(traj.events.size()), &accumulation)) {
      traj.zeno_accumulation_time = accumulation;
      return finish(Termination::zeno_guard,
                    fmt::format("Zeno: {} (constraint {}, estimated accumulation time {:.17g})",
                                *msg, lead_constraint, accumulation),
                    lead_constraint);
    }

    t = t_event;
    x = ev.x_post;
    J = upd.J;
  }
}

}  // namespace uflow
