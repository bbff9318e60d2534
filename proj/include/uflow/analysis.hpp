#pragma once

// Poincare maps over user sections, their piecewise-linear derivatives, and
// first-order stability and controllability tests built on them.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "uflow/model.hpp"
#include "uflow/sensitivity.hpp"
#include "uflow/sim.hpp"
#include "uflow/systems.hpp"

namespace uflow {

/// Zero level set of a scalar function of x = (q, qd). Returns are the
/// downward crossings (s > 0 then s <= 0) after t_min.
struct Section {
  std::string name = "section";
  std::function<double(const Vector& x)> s;
  std::function<RowVector(const Vector& x)> grad;  // optional, central differences otherwise
  double t_min = 0.0;

  /// Section-local frame, set by anchor(): orthonormal columns spanning the
  /// admissible perturbations of the anchor state that keep s = 0 to first order.
  Vector origin;
  Matrix frame;

  RowVector gradient(const Vector& x) const;
  void anchor(const MechSystem& sys, const State& x);
  int dim() const { return static_cast<int>(frame.cols()); }
  Vector to_local(const Vector& x) const;
  Vector from_local(const Vector& y) const;
};

/// s(x) = sign * (x[index] - offset).
Section coordinate_section(int index, double offset, double sign, double t_min,
                           const std::string& name = "section");

struct PoincareReturn {
  State x_return;
  double period = 0.0;
  HybridTrajectory trajectory;
};

/// First return to the section. Throws NoReturnError when the flow ends
/// before returning and GrazingError for a tangential return.
PoincareReturn poincare_map(const MechSystem& sys, const Section& section, const State& x0,
                            const SimConfig& cfg);

/// Piecewise-linear map on R^n given by linear pieces and a rule naming the
/// pieces whose region contains a direction.
struct PiecewiseLinearMap {
  std::vector<Matrix> pieces;
  std::vector<std::string> labels;
  std::function<std::vector<int>(const Vector& y)> regions;

  int dim() const { return pieces.empty() ? 0 : static_cast<int>(pieces.front().rows()); }
  /// Lowest-numbered piece containing y.
  int piece(const Vector& y) const;
  Vector apply(const Vector& y) const;

  /// Regions are the polyhedral cones {y : C_i y >= 0}.
  static PiecewiseLinearMap from_cones(std::vector<Matrix> pieces, std::vector<Matrix> cones,
                                       double tol = 1e-12);
  /// Largest continuity defect max |A_i y - A_j y| / |y| over sampled y on
  /// which both i and j are valid.
  double continuity_defect(int samples, unsigned seed) const;
};

struct PoincareDerivative {
  State fixed_point;
  double period = 0.0;
  double fixed_point_residual = 0.0;
  Section section;
  BDerivative flow;                 // B-derivative of the flow over one period
  std::vector<int> flow_selection;  // first flow selection behind each piece of map
  PiecewiseLinearMap map;           // section-local coordinates
  std::vector<std::string> warnings;
};

struct PoincareOptions {
  int k_max = 3;
  int samples = 256;  // random section directions used to find realized selections
  unsigned seed = 7;
};

/// Section projection I - f g / (g f) applied to each realized flow
/// selection, in the anchored frame. Realized selections with equal
/// matrices form one piece. The section is re-anchored at the fixed point.
PoincareDerivative poincare_bderivative(const MechSystem& sys, Section section,
                                        const State& fixed_point, const SimConfig& cfg,
                                        const PoincareOptions& opt = {});

struct FixedPointResult {
  State x;
  double period = 0.0;
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Damped iteration x <- x + beta (P(x) - x) until |P(x) - x| < tol.
FixedPointResult refine_fixed_point(const MechSystem& sys, const Section& section,
                                    const State& guess, const SimConfig& cfg, double tol = 1e-9,
                                    int max_iter = 200, double beta = 1.0);

enum class StabilityVerdict { stable, unstable, inconclusive };
std::string to_string(StabilityVerdict v);

struct ContractionResult {
  StabilityVerdict verdict = StabilityVerdict::inconclusive;
  std::vector<double> norms;  // per piece, in the W-induced norm
  Matrix weight;
};

struct ContractionOptions {
  double tol_margin = 1e-9;
  /// Coordinate descent over diagonal weights when the given W does not
  /// certify contraction. One W is shared by every piece.
  bool search_diagonal = false;
  int search_iterations = 50;
};

/// Throws ConfigError when W is not symmetric positive definite. An empty W
/// means the identity.
ContractionResult stability_contraction_test(const PiecewiseLinearMap& map, const Matrix& weight = {},
                                             const ContractionOptions& opt = {});

double weighted_norm(const Matrix& a, const Matrix& weight);

struct EigenWitness {
  int piece = -1;
  double eigenvalue = 0.0;
  Vector vector;
};

struct InstabilityResult {
  StabilityVerdict verdict = StabilityVerdict::inconclusive;
  std::optional<EigenWitness> witness;
  std::vector<EigenWitness> rejected;  // expanding eigenvectors that left their region
};

InstabilityResult instability_eigenvector_test(const PiecewiseLinearMap& map, double tol_margin = 1e-9);

/// Norm growth factors |y_{k+1}| / |y_k| under repeated application of map.
std::vector<double> iterate_growth(const PiecewiseLinearMap& map, const Vector& y0, int steps);

enum class ControllabilityVerdict {
  locally_controllable,
  necessary_conditions_pass,
  pl_homeomorphism_heuristic,
  not_controllable
};
std::string to_string(ControllabilityVerdict v);

struct ControlBlock {
  int selection = -1;  // index into bderiv.selections
  Matrix block;        // 2d x m, derivative of the final state with respect to u
  int rank = 0;
  double min_singular = 0.0;
  std::optional<double> determinant;  // when m = 2d
};

struct ControllabilityResult {
  ControllabilityVerdict verdict = ControllabilityVerdict::not_controllable;
  bool heuristic = false;
  std::vector<ControlBlock> blocks;
  BDerivative bderiv;
  HybridTrajectory trajectory;
};

ControllabilityResult controllability_test(const ControlledSystem& csys, const State& x0,
                                           const Vector& u0, double t, const SimConfig& cfg,
                                           int k_max = 3);

struct SweepPoint {
  double value = 0.0;
  Vector outcome;
  Termination termination = Termination::time_reached;
  std::string status = "ok";  // error description when the run failed
  std::vector<ActiveSet> word;
};

/// Runs fn for every value in linspace(lo, hi, count) on a pool of threads;
/// results keep the input order.
std::vector<SweepPoint> parallel_sweep(double lo, double hi, int count,
                                       const std::function<SweepPoint(double)>& fn,
                                       int threads = 0);

struct KinkReport {
  double jump = 0.0;         // mismatch of one-sided quadratic fits at the break point
  double range = 0.0;        // max - min of the outcome
  double slope_left = 0.0;
  double slope_right = 0.0;
  double noise_floor = 0.0;  // fit residual scale divided by the grid step
  bool continuous = false;   // jump < 1e-3 range
  bool kink = false;         // |slope_right - slope_left| > 10 noise_floor
};

/// Fits quadratics to both sides of x0 in a sampled curve (x ascending).
KinkReport kink_report(const std::vector<double>& x, const std::vector<double>& y, double x0 = 0.0);

/// Initial state of the trotter's symmetric apex: z = apex_height, toes
/// hanging at the static spring length, everything at rest.
State trotter_apex_guess(const TrotterParams& p, double apex_height = 0.8);

/// Apex section of the trotter: s = zdot, crossed downward.
Section trotter_apex_section();

}  // namespace uflow
