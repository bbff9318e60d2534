#pragma once

// Event-driven integration: flow within a contact mode, localize constraint
// activations (a_i falls to 0) and deactivations (lambda_i falls to 0), apply
// the restitution law, and record the contact-mode sequence.

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "uflow/model.hpp"

namespace uflow {

struct SimConfig {
  double rel_tol = 1e-12;
  double abs_tol = 1e-12;
  double max_step = 0.01;
  double event_tol = 1e-13;
  int zeno_max_events = 10000;
  double zeno_min_dt = 1e-12;
  int zeno_min_dt_count = 50;
  // Geometric-accumulation detector: this many consecutive inter-event gaps
  // each shrinking by at least zeno_ratio flags Zeno. 0 disables it.
  int zeno_geometric_window = 20;
  double zeno_ratio = 0.9;
  double simultaneity_window = 1e-9;
  double t_final = 1.0;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

enum class EventKind { activation, deactivation, mixed };
enum class Termination { time_reached, stop_condition, zeno_guard, grazing, model_error };

std::string to_string(EventKind kind);
std::string to_string(Termination term);

/// One sign test from the admissibility definitions.
struct SignTest {
  int constraint = -1;
  std::string test;  // "velocity", "acceleration", "force_rate", "impulse", "force"
  double value = 0.0;
  bool passed = false;
};

struct Event {
  double t = 0.0;
  EventKind kind = EventKind::activation;
  ActiveSet activated;    // constraints whose a_i reached zero from above
  ActiveSet deactivated;  // constraints whose force lambda_i reached zero from above
  ActiveSet separated;    // leave contact at the impact instant (velocity/acceleration test)
  ActiveSet impact_set;   // K in Delta_K applied at this instant
  ActiveSet mode_before;
  ActiveSet mode_after;
  Vector x_pre;   // left limit (the state *at* the event time)
  Vector x_post;  // right limit
  bool admissible = true;
  std::vector<SignTest> details;

  ActiveSet constraints() const { return activated.unite(deactivated); }
  int size() const { return activated.size() + deactivated.size(); }
};

struct Knot {
  double t;
  Vector x;
  Vector xdot;
};

/// Within-mode piece of a trajectory with a cubic Hermite interpolant over
/// the integrator's accepted steps.
struct Segment {
  ActiveSet mode;
  std::vector<Knot> knots;

  double t_start() const { return knots.front().t; }
  double t_end() const { return knots.back().t; }
  const Vector& x_start() const { return knots.front().x; }
  const Vector& x_end() const { return knots.back().x; }
  Vector state_at(double t) const;
};

struct HybridTrajectory {
  std::vector<Segment> segments;
  std::vector<Event> events;
  Termination termination = Termination::time_reached;
  bool admissible = true;
  std::string diagnostic;
  int offending_constraint = -1;
  // Filled by the Zeno guard: extrapolated accumulation time of the event sequence.
  double zeno_accumulation_time = std::numeric_limits<double>::quiet_NaN();

  /// Mode of every realized segment, in order.
  std::vector<ActiveSet> word() const;
  /// Per event: the single constraint involved, or -1 for multi-constraint events.
  std::vector<int> eta() const;
  State initial_state() const;
  State final_state() const;
  /// Left-continuous state lookup.
  Vector state_at(double t) const;
  double t_start() const { return segments.front().t_start(); }
  double t_end() const { return segments.back().t_end(); }
};

/// Optional terminating condition monitored like a constraint: the flow stops
/// at the first downward crossing (value > 0 then <= 0) after t_min.
struct StopCondition {
  std::string name = "stop";
  std::function<double(const Vector& x)> fn;
  double t_min = 0.0;
};

HybridTrajectory flow(const MechSystem& sys, const State& x0, const SimConfig& cfg,
                      const StopCondition* stop = nullptr);

/// Bisection for the earliest downward crossing of g on [ta, tb]; requires
/// g(ta) > 0 >= g(tb). Returns the right end of a bracket no wider than tol.
double locate_event(const std::function<double(double)>& g, double ta, double tb, double tol);

/// Same, with g = event_fn(segment.state_at(t)).
double locate_event(const Segment& segment, const std::function<double(const Vector&)>& event_fn,
                    double ta, double tb, double tol);

struct AdmissibilityVerdict {
  bool admissible = true;
  double margin = 0.0;  // smallest passing margin (or most negative failing one)
  std::vector<SignTest> tests;
};

/// Activation of I at a pre-impact state is admissible iff Da_i qd- < -tol_graze for all i.
AdmissibilityVerdict classify_activation(const MechSystem& sys, const State& pre, const ActiveSet& I);

/// Deactivation of I (subset of pre.J). For each i: type (i) separation
/// velocity or acceleration above tol_graze, tested first; otherwise type (ii)
/// d/dt lambda_i < -tol_graze along the mode-J field.
AdmissibilityVerdict classify_deactivation(const MechSystem& sys, const State& state,
                                           const ActiveSet& I);

struct ActiveSetUpdate {
  ActiveSet J;
  Vector qd;
  ActiveSet impact_set;
  ActiveSet separated;
  Vector impulse;
  int iterations = 0;
  std::vector<SignTest> tests;
};

/// Impact resolution at q: Delta over J_old u I, dropping constraints that
/// would pull (negative impulse), then removing constraints that separate
/// (positive velocity) or carry negative force, until a fixed point.
ActiveSetUpdate update_active_set(const MechSystem& sys, const Vector& q, const Vector& qd_pre,
                                  const ActiveSet& J_old, const ActiveSet& I_activated);

/// d/dt lambda_i along the mode-J field at x.
double force_rate(const MechSystem& sys, const ActiveSet& J, const Vector& x, int i);

}  // namespace uflow
