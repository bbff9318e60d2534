#pragma once

// Mechanical systems subject to unilateral constraints a(q) >= 0:
//
//   M(q) qdd = f(q, qd) + c(q, qd) qd + Da_J(q)^T lambda_J(q, qd)
//   qd+      = Delta_J(q, qd-) qd-
//
// and the contact-algebra kernels built from them.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace uflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// Set of active constraint indices (0-based), kept sorted and unique.
class ActiveSet {
 public:
  ActiveSet() = default;
  ActiveSet(std::initializer_list<int> indices);
  explicit ActiveSet(std::vector<int> indices);

  static ActiveSet from_mask(std::uint64_t mask);
  static ActiveSet all(int n);

  std::uint64_t mask() const;
  const std::vector<int>& indices() const { return indices_; }
  int size() const { return static_cast<int>(indices_.size()); }
  bool empty() const { return indices_.empty(); }
  bool contains(int i) const;
  bool contains(const ActiveSet& other) const;

  ActiveSet with(int i) const;
  ActiveSet without(int i) const;
  ActiveSet unite(const ActiveSet& other) const;
  ActiveSet minus(const ActiveSet& other) const;

  /// Position of constraint i inside indices(), or -1.
  int position(int i) const;

  std::string str() const;

  auto begin() const { return indices_.begin(); }
  auto end() const { return indices_.end(); }

  friend bool operator==(const ActiveSet&, const ActiveSet&) = default;
  friend auto operator<=>(const ActiveSet&, const ActiveSet&) = default;

 private:
  std::vector<int> indices_;
};

struct Tolerances {
  double cons = 1e-9;    // constraint-surface membership
  double orth = 1e-8;    // orthogonality of constraint normals
  double graze = 1e-8;   // sign tests on constraint velocity / force rate
  double force = 1e-9;   // sign tests on contact forces and impulses
};

/// Callable bundle describing the system. Optional members (mass_jac,
/// effort_jac) fall back to central differences when left empty.
struct MechSystem {
  std::string name;
  int dof = 0;              // d
  int num_constraints = 0;  // n

  std::function<Matrix(const Vector& q)> mass;
  std::function<std::vector<Matrix>(const Vector& q)> mass_jac;  // [k] = dM/dq_k
  std::function<Vector(const Vector& q, const Vector& qd)> effort;
  std::function<Matrix(const Vector& q, const Vector& qd)> effort_jac;  // d x 2d
  std::function<Vector(const Vector& q)> constraints;
  std::function<Matrix(const Vector& q)> constraint_jac;                // n x d
  std::function<std::vector<Matrix>(const Vector& q)> constraint_hess;  // [i] is d x d
  std::function<double(const Vector& q, const Vector& qd)> restitution;

  Tolerances tol;

  int state_dim() const { return 2 * dof; }
};

/// State (t, q, qd) in contact mode J.
struct State {
  double t = 0.0;
  Vector q;
  Vector qd;
  ActiveSet J;

  Vector x() const;
  static State from_x(double t, const Vector& x, ActiveSet J);
};

// --- evaluation helpers (validate shapes, throw ModelError) -----------------

Matrix eval_mass(const MechSystem& sys, const Vector& q);
std::vector<Matrix> eval_mass_jac(const MechSystem& sys, const Vector& q);
Vector eval_effort(const MechSystem& sys, const Vector& q, const Vector& qd);
Matrix eval_effort_jac(const MechSystem& sys, const Vector& q, const Vector& qd);
Vector eval_constraints(const MechSystem& sys, const Vector& q);
Matrix eval_constraint_jac(const MechSystem& sys, const Vector& q);
std::vector<Matrix> eval_constraint_hess(const MechSystem& sys, const Vector& q);
double eval_restitution(const MechSystem& sys, const Vector& q, const Vector& qd);

/// Rows of Da(q) indexed by J.
Matrix constraint_jac_rows(const MechSystem& sys, const Vector& q, const ActiveSet& J);

// --- contact algebra ---------------------------------------------------------

/// Coriolis matrix c(q, qd) with entries
/// c_lm = -1/2 sum_k (D_k M_lm + D_m M_lk - D_l M_km) qd_k.
Matrix coriolis(const MechSystem& sys, const Vector& q, const Vector& qd);

/// Lambda_J(q) = (Da_J M^-1 Da_J^T)^-1. Throws ConstraintDependenceError
/// when the Gram matrix is singular.
Matrix lambda_gram(const MechSystem& sys, const Vector& q, const ActiveSet& J);

struct ImpactResult {
  Vector qd_plus;
  Matrix delta;    // Delta_J(q, qd-)
  Vector impulse;  // p with M (qd+ - qd-) = Da_J^T p
  double gamma = 0.0;
};

/// Restitution law qd+ = Delta_J qd-, with
/// Delta_J = I - (1 + gamma(q, qd-)) M^-1 Da_J^T Lambda_J Da_J and Delta_{} = I.
ImpactResult impact_map(const MechSystem& sys, const Vector& q, const Vector& qd_minus,
                        const ActiveSet& J);

/// Constraint force that keeps a_J'' = 0 along the mode-J dynamics:
/// lambda_J = -Lambda_J [Da_J M^-1 (f + c qd) + qd^T D^2 a_J qd].
Vector contact_force(const MechSystem& sys, const Vector& q, const Vector& qd,
                     const ActiveSet& J);

/// qdd = M^-1 (f + c qd + Da_J^T lambda_J).
Vector mode_accel(const MechSystem& sys, const Vector& q, const Vector& qd, const ActiveSet& J);

/// Mode vector field F_J(x) = (qd, qdd) on x = (q, qd).
Vector mode_field(const MechSystem& sys, const ActiveSet& J, const Vector& x);

/// <Da_i, Da_j>_{M^-1} = Da_i M^-1 Da_j^T.
double orthogonality_check(const MechSystem& sys, const Vector& q, int i, int j);

/// Second time derivative of a_i along the mode-J field: Da_i qdd + qd^T D^2 a_i qd.
double constraint_accel(const MechSystem& sys, const Vector& q, const Vector& qd,
                        const ActiveSet& J, int i);

/// Checks symmetry/positive-definiteness of M, gamma >= 0 and independence of
/// Da_J over the constraints that are zero at q. Throws on violation.
void check_model_invariants(const MechSystem& sys, const Vector& q, const Vector& qd);

/// Central-difference Jacobian with per-coordinate step 1e-6 * max(1, |x_i|).
Matrix central_jacobian(const std::function<Vector(const Vector&)>& fn, const Vector& x,
                        double rel_step = 1e-6);

}  // namespace uflow
