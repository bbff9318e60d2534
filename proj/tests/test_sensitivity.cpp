#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "uflow/errors.hpp"
#include "uflow/sensitivity.hpp"
#include "uflow/sim.hpp"
#include "uflow/systems.hpp"

using namespace uflow;

namespace {

SimConfig until(double t) {
  SimConfig c;
  c.t_final = t;
  return c;
}

State corner_state() {
  Vector q(2), qd(2);
  q << 1.0, 1.0;
  qd << -1.0, -1.0;
  return State{0.0, q, qd, {}};
}

// Forward difference of the final state along dz.
Vector fd_direction(const MechSystem& sys, const State& x0, const Vector& dz, double alpha,
                    const SimConfig& cfg) {
  const int d = sys.dof;
  State xp = x0;
  xp.q += alpha * dz.head(d);
  xp.qd += alpha * dz.tail(d);
  const Vector a = flow(sys, x0, cfg).final_state().x();
  const Vector b = flow(sys, xp, cfg).final_state().x();
  return (b - a) / alpha;
}

Vector unit2(double angle) {
  Vector v = Vector::Zero(4);
  v[0] = std::cos(angle);
  v[1] = std::sin(angle);
  return v;
}

}  // namespace

TEST(Variational, FreeFallTransitionMatrix) {
  const auto sys = build_ball(1.0, 1.0, 0.5);
  const auto tr = flow(sys, State{0.0, Vector::Constant(1, 2.0), Vector::Zero(1), {}}, until(0.7));
  ASSERT_TRUE(tr.events.empty());
  const auto seg = variational_flow(sys, tr.segments[0], until(0.7));
  Matrix expected(2, 2);
  expected << 1.0, 0.7, 0.0, 1.0;
  EXPECT_LT((seg.Phi - expected).norm(), 1e-10);
}

TEST(Transition, BallSaltationClosedForm) {
  // At impact with qd- = -v: reset (q, qd) -> (q, -gamma qd); g = (1, 0), f- = (-v, -g).
  const double g = 1.0, gamma = 0.5, v = 1.0;
  const auto sys = build_ball(1.0, g, gamma);
  const State pre{1.0, Vector::Zero(1), Vector::Constant(1, -v), {}};
  const auto b = transition_block(sys, pre, {TransitionKind::activation, 0});
  Matrix frozen(2, 2);
  frozen << 0.0, 0.0, gamma * g / v, -gamma;
  // The reset Jacobian is a central difference.
  EXPECT_LT((b.saltation - frozen).norm(), 1e-9);
  Matrix classical(2, 2);  // f+ = (gamma v, -g)
  classical << -gamma, 0.0, (1.0 + gamma) * g / v, -gamma;
  EXPECT_LT((b.saltation_full - classical).norm(), 1e-9);
  EXPECT_LT(b.gf, 0.0);
}

TEST(SelectionJacobian, BallMatchesFiniteDifference) {
  const auto sys = build_ball(1.0, 1.0, 0.5);
  const State x0{0.0, Vector::Constant(1, 0.5), Vector::Zero(1), {}};
  const auto cfg = until(1.5);
  const auto tr = flow(sys, x0, cfg);
  const auto bd = b_derivative(sys, tr, cfg);
  ASSERT_EQ(bd.selections.size(), 1u);
  const Matrix& D = bd.selections[0].state_jac;
  for (int j = 0; j < 2; ++j) {
    Vector dz = Vector::Zero(2);
    dz[j] = 1.0;
    const double h = 1e-6;
    State xp = x0, xm = x0;
    xp.q += h * dz.head(1);
    xp.qd += h * dz.tail(1);
    xm.q -= h * dz.head(1);
    xm.qd -= h * dz.tail(1);
    const Vector fd = (flow(sys, xp, cfg).final_state().x() - flow(sys, xm, cfg).final_state().x()) / (2 * h);
    EXPECT_LT((fd - D.col(j)).norm(), 1e-6) << "column " << j;
  }
  EXPECT_LT((bd.selections[0].chain_product() - D).norm(), 1e-10);
}

TEST(BDerivative, CornerHasTwoRealizableOrderings) {
  const auto sys = build_corner(CornerMode::orthogonal, 0.5, 0.0, 0.5);
  const auto cfg = until(1.6);
  const auto tr = flow(sys, corner_state(), cfg);
  const auto bd = b_derivative(sys, tr, cfg);
  EXPECT_EQ(bd.selections.size(), 3u);
  const auto real = bd.realizable();
  ASSERT_EQ(real.size(), 2u);
  const Matrix& a = bd.selections[real[0]].state_jac;
  const Matrix& b = bd.selections[real[1]].state_jac;
  EXPECT_GT((a - b).norm(), 1e-3);
  EXPECT_TRUE(bd.orthogonal);
  for (int i : real) {
    EXPECT_LT((bd.selections[i].chain_product() - bd.selections[i].state_jac).norm(), 1e-10);
  }
}

TEST(BDerivative, UncoupledCornerOrderingsAgree) {
  const auto sys = build_corner(CornerMode::orthogonal, 0.5);
  const auto cfg = until(1.6);
  const auto bd = b_derivative(sys, flow(sys, corner_state(), cfg), cfg);
  const auto real = bd.realizable();
  ASSERT_EQ(real.size(), 2u);
  EXPECT_LT((bd.selections[real[0]].state_jac - bd.selections[real[1]].state_jac).norm(), 1e-9);
}

// Property: the selection chosen by membership reproduces the finite-difference
// response and the perturbed word, for directions away from the switching surface.
TEST(BDerivative, MembershipAgreesWithPerturbedFlow) {
  const auto sys = build_corner(CornerMode::orthogonal, 0.5, 0.0, 0.5);
  const auto cfg = until(1.6);
  const State x0 = corner_state();
  const auto bd = b_derivative(sys, flow(sys, x0, cfg), cfg);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  int checked = 0;
  for (int k = 0; k < 24; ++k) {
    Vector dz(4);
    for (int i = 0; i < 4; ++i) dz[i] = n01(rng);
    const auto m = bd.membership(dz);
    if (m.boundary) continue;
    ASSERT_GE(m.selection, 0);
    const auto& sel = bd.selections[m.selection];
    EXPECT_FALSE(sel.selection.merged);
    const double alpha = 1e-7;
    // The perturbed impacts must be further apart than the simultaneity window,
    // otherwise the simulator resolves them together.
    double gap = 1.0;
    for (double d : m.durations) gap = std::min(gap, std::abs(d));
    if (gap * alpha < 10.0 * cfg.simultaneity_window) continue;
    const Vector fd = fd_direction(sys, x0, dz, alpha, cfg);
    const Vector lin = sel.state_jac * dz;
    EXPECT_LT((fd - lin).norm() / std::max(1.0, lin.norm()), 1e-5) << "direction " << k;
    EXPECT_EQ(perturbed_word(sys, x0, dz, 1e-6, cfg), sel.selection.word) << "direction " << k;
    ++checked;
  }
  EXPECT_GE(checked, 16);
}

TEST(BDerivative, PositivelyHomogeneous) {
  const auto sys = build_corner(CornerMode::orthogonal, 0.5, 0.0, 0.5);
  const auto cfg = until(1.6);
  const auto bd = b_derivative(sys, flow(sys, corner_state(), cfg), cfg);
  for (double angle : {0.3, 1.2, 2.5, 4.0, 5.5}) {
    const Vector dz = unit2(angle);
    const Vector a = bd.apply(0.0, dz);
    EXPECT_LT((bd.apply(0.0, 3.0 * dz) - 3.0 * a).norm(), 1e-12);
    // Continuity of the piecewise-linear map across the ordering boundary.
    EXPECT_LT((bd.apply(0.0, unit2(angle + 1e-9)) - a).norm(), 1e-6);
  }
}

TEST(BDerivative, DiagonalDirectionIsBoundary) {
  const auto sys = build_corner(CornerMode::orthogonal, 0.5, 0.0, 0.5);
  const auto cfg = until(1.6);
  const auto bd = b_derivative(sys, flow(sys, corner_state(), cfg), cfg);
  // Equal position shifts keep both impacts simultaneous.
  const auto m = bd.membership(unit2(M_PI / 4));
  EXPECT_TRUE(m.boundary);
  EXPECT_GE(m.agreeing.size(), 2u);
  // Shifting q1 up delays impact on wall 0: wall 1 is hit first.
  const auto first = bd.membership(unit2(0.0));
  ASSERT_GE(first.selection, 0);
  const auto& steps = bd.selections[first.selection].selection.orderings[0].steps;
  ASSERT_EQ(steps.size(), 2u);
  EXPECT_EQ(steps[0].constraint, 1);
}

TEST(BDerivative, ObliqueCornerWarns) {
  const auto sys = build_corner(CornerMode::oblique, 0.5);
  Vector q(2), qd(2);
  q << 1.0, 0.0;
  qd << -1.0, 0.0;
  const auto cfg = until(1.5);
  const auto tr = flow(sys, State{0.0, q, qd, {}}, cfg);
  ASSERT_EQ(tr.events.size(), 1u);
  EXPECT_EQ(tr.events[0].activated, (ActiveSet{0, 1}));
  const auto bd = b_derivative(sys, tr, cfg);
  EXPECT_FALSE(bd.orthogonal);
  EXPECT_FALSE(bd.warnings.empty());
}

TEST(BDerivative, MixedEventSelections) {
  const auto sys = build_slide_corner(1.0, 1.0, 1.0);
  Vector q(3), qd(3);
  q << 0.0, 0.5, 0.0;
  qd << 0.0, 0.0, 1.0;
  const State x0{0.0, q, qd, {0}};
  const auto cfg = until(1.5);
  const auto bd = b_derivative(sys, flow(sys, x0, cfg), cfg);
  ASSERT_EQ(bd.realizable().size(), 2u);
  const Matrix basis = tangent_basis(sys, x0);
  ASSERT_EQ(basis.cols(), 4);  // x and xd pinned by the active wall
  for (int j = 0; j < basis.cols(); ++j) {
    for (double s : {1.0, -1.0}) {
      const Vector dz = s * basis.col(j);
      const auto m = bd.membership(dz);
      if (m.boundary) continue;
      const Vector lin = bd.selections[m.selection].state_jac * dz;
      const Vector fd = fd_direction(sys, x0, dz, 1e-7, cfg);
      EXPECT_LT((fd - lin).norm() / std::max(1.0, lin.norm()), 1e-5);
    }
  }
}

TEST(BDerivative, CombinatorialLimit) {
  const auto sys = build_corner(CornerMode::orthogonal, 0.5);
  const auto cfg = until(1.6);
  const auto tr = flow(sys, corner_state(), cfg);
  SensitivityOptions opt;
  opt.k_max = 1;
  EXPECT_THROW(b_derivative(sys, tr, cfg, opt), CombinatorialLimitError);
}

TEST(BDerivative, InputColumnsMatchFiniteDifference) {
  const auto csys = build_forced_ball(1.0, 1.0, 0.5);
  const Vector u = Vector::Zero(2);
  const State x0{0.0, Vector::Constant(1, 0.5), Vector::Zero(1), {}};
  const auto cfg = until(1.5);
  const MechSystem sys = csys.bind(u);
  const auto bd = b_derivative(csys, u, flow(sys, x0, cfg), cfg);
  ASSERT_EQ(bd.param_dim, 2);
  const Matrix& D = bd.selections[0].state_jac;
  ASSERT_EQ(D.cols(), 4);
  for (int j = 0; j < 2; ++j) {
    const double h = 1e-6;
    Vector up = u, um = u;
    up[j] += h;
    um[j] -= h;
    const Vector fd =
        (flow(csys.bind(up), x0, cfg).final_state().x() - flow(csys.bind(um), x0, cfg).final_state().x()) /
        (2 * h);
    EXPECT_LT((fd - D.col(2 + j)).norm() / std::max(1.0, fd.norm()), 1e-5) << "input " << j;
  }
}

TEST(TangentBasis, RestingContactRemovesNormalDirections) {
  const auto sys = build_ball(1.0, 1.0, 0.5);
  EXPECT_EQ(tangent_basis(sys, State{0.0, Vector::Zero(1), Vector::Zero(1), {0}}).cols(), 0);
  const Matrix free = tangent_basis(sys, State{0.0, Vector::Ones(1), Vector::Zero(1), {}});
  EXPECT_EQ(free.cols(), 2);
  EXPECT_LT((free.transpose() * free - Matrix::Identity(2, 2)).norm(), 1e-12);
}
