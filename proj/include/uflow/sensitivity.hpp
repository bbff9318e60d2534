#pragma once

// First-order sensitivity of hybrid flows: within-mode state-transition
// matrices, per-transition saltation blocks, selection Jacobians for each
// admissible ordering of simultaneous (de)activations, and the resulting
// piecewise-linear directional derivative (B-derivative).

#include <optional>
#include <string>
#include <vector>

#include "uflow/model.hpp"
#include "uflow/sim.hpp"
#include "uflow/systems.hpp"

namespace uflow {

enum class TransitionKind { activation, deactivation };

std::string to_string(TransitionKind kind);

struct ElementaryTransition {
  TransitionKind kind = TransitionKind::activation;
  int constraint = -1;
  friend bool operator==(const ElementaryTransition&, const ElementaryTransition&) = default;
};

struct VariationalSegment {
  ActiveSet mode;
  double t_start = 0.0;
  double t_end = 0.0;
  Vector x_start;
  Vector x_end;
  Matrix Phi;    // N x N (N = 2d, or 2d + m with constant parameters appended)
  Vector Phi_t;  // vector field at the segment end
};

/// One elementary transition at a point. The full (1 + N)-square matrices of
/// the time-budget formulation are available through dphi() and dgamma().
struct TransitionBlock {
  TransitionKind kind = TransitionKind::activation;
  int constraint = -1;
  ActiveSet mode_before;
  ActiveSet mode_after;
  ActiveSet impact_set;  // constraints in Delta at this transition (empty for releases)
  Vector x_pre;
  Vector x_post;
  RowVector g;         // guard gradient (a_i for activations, lambda_i for releases)
  Vector f;            // field of mode_before at x_pre
  Vector f_post;       // field of mode_after at x_post
  double gf = 0.0;     // g . f, negative for admissible transitions
  RowVector tau_grad;  // -g / (g f)
  Matrix reset_jac;    // Jacobian of the reset at x_pre
  Matrix saltation;    // reset_jac (I - f g / (g f)): frozen-time form
  Matrix saltation_full;  // reset_jac + (f_post - reset_jac f) g / (g f): maps perturbations at the nominal time

  Matrix dphi() const;
  Matrix dgamma() const;
};

/// Ordering of the constituents of one multi-constraint event, or the merged
/// simultaneous resolution (merged = true).
struct EventOrdering {
  std::vector<ElementaryTransition> steps;
  bool merged = false;
  std::vector<ActiveSet> modes;  // modes after each step (zero-duration intermediate modes)
  bool continuous = true;        // post state equals the realized post state
};

struct Selection {
  std::vector<ActiveSet> word;
  std::vector<int> eta;  // per elementary transition; -1 for merged transitions
  std::vector<EventOrdering> orderings;  // one per event of the trajectory
  bool merged = false;
  bool continuous = true;
  std::string label() const;
};

struct SelectionDerivative {
  Selection selection;
  Vector time_jac;   // 2d, vector field at the endpoint
  Matrix state_jac;  // 2d x N
  std::vector<VariationalSegment> segments;
  std::vector<std::vector<TransitionBlock>> transitions;  // per event

  /// Ordered product of the stored blocks (audit of state_jac).
  Matrix chain_product() const;
};

struct MembershipResult {
  int selection = -1;             // index into BDerivative::selections
  std::vector<int> agreeing;      // all selections consistent with the direction
  bool boundary = false;          // first-order tie between orderings
  std::vector<double> durations;  // intermediate zero-length mode durations, all events
};

struct SensitivityOptions {
  int k_max = 3;
  double membership_tol = 1e-9;  // relative to |dz|
};

struct BDerivative {
  double t0 = 0.0;
  double t_end = 0.0;
  Vector x0;  // basepoint (x, and u when parameters are appended)
  int state_dim = 0;
  int param_dim = 0;
  std::vector<SelectionDerivative> selections;
  bool orthogonal = true;  // orthogonality held at every simultaneous event
  std::vector<std::string> warnings;

  /// Selection active for a perturbation dz of the initial point.
  MembershipResult membership(const Vector& dz) const;
  /// Directional derivative D phi(t, x0; dt, dz) = time_jac dt + state_jac dz.
  Vector apply(double dt, const Vector& dz) const;
  /// Indices of non-merged selections.
  std::vector<int> realizable() const;
};

/// State-transition matrix of a realized segment (mode fixed).
VariationalSegment variational_flow(const MechSystem& sys, const Segment& seg, const SimConfig& cfg);

/// Block for one elementary transition at pre (pre.J is the mode before).
TransitionBlock transition_block(const MechSystem& sys, const State& pre,
                                 const ElementaryTransition& step);

std::vector<Selection> enumerate_selections(const MechSystem& sys, const HybridTrajectory& traj,
                                            int k_max = 3);

SelectionDerivative selection_jacobian(const MechSystem& sys, const HybridTrajectory& traj,
                                       const Selection& selection, const SimConfig& cfg);

BDerivative b_derivative(const MechSystem& sys, const HybridTrajectory& traj, const SimConfig& cfg,
                         const SensitivityOptions& opt = {});

/// B-derivative of the flow with the constant input appended to the state:
/// columns 2d..2d+m-1 of every state_jac are derivatives with respect to u.
BDerivative b_derivative(const ControlledSystem& csys, const Vector& u,
                         const HybridTrajectory& traj, const SimConfig& cfg,
                         const SensitivityOptions& opt = {});

/// Simulates from x0 + alpha dz and returns the word of the perturbed flow.
std::vector<ActiveSet> perturbed_word(const MechSystem& sys, const State& x0, const Vector& dz,
                                      double alpha, const SimConfig& cfg);

/// Orthonormal basis of admissible initial perturbations (dq, dqd) that keep
/// the active constraints of x0 persistent (columns).
Matrix tangent_basis(const MechSystem& sys, const State& x0);

}  // namespace uflow
