#pragma once

// Small models with closed-form dynamics used as oracles across the suites.

#include <cmath>

#include "uflow/model.hpp"

namespace uflow::oracle {

/// Cart (mass mc, position x) carrying a pendulum (mass mp, length l, angle
/// th from the downward vertical). No constraints are ever active; one dummy
/// constraint x + 10 >= 0 keeps the shapes non-empty.
inline MechSystem pendulum_cart(double mc, double mp, double l, double g) {
  MechSystem s;
  s.name = "pendulum_cart";
  s.dof = 2;
  s.num_constraints = 1;
  s.mass = [=](const Vector& q) {
    Matrix m(2, 2);
    m << mc + mp, mp * l * std::cos(q[1]), mp * l * std::cos(q[1]), mp * l * l;
    return m;
  };
  s.effort = [=](const Vector& q, const Vector&) {
    Vector f(2);
    f << 0.0, -mp * g * l * std::sin(q[1]);
    return f;
  };
  s.constraints = [](const Vector& q) { return Vector::Constant(1, q[0] + 10.0); };
  s.constraint_jac = [](const Vector&) {
    Matrix j = Matrix::Zero(1, 2);
    j(0, 0) = 1.0;
    return j;
  };
  s.restitution = [](const Vector&, const Vector&) { return 0.0; };
  return s;
}

/// Unit point mass in the plane above the parabola y = x^2 under gravity:
/// a(q) = q1 - q0^2 >= 0, M = I, f = (0, -g).
inline MechSystem parabola_bead(double g, double gamma) {
  MechSystem s;
  s.name = "parabola";
  s.dof = 2;
  s.num_constraints = 1;
  s.mass = [](const Vector&) { return Matrix::Identity(2, 2); };
  s.effort = [g](const Vector&, const Vector&) {
    Vector f(2);
    f << 0.0, -g;
    return f;
  };
  s.constraints = [](const Vector& q) { return Vector::Constant(1, q[1] - q[0] * q[0]); };
  s.constraint_jac = [](const Vector& q) {
    Matrix j(1, 2);
    j << -2.0 * q[0], 1.0;
    return j;
  };
  s.restitution = [gamma](const Vector&, const Vector&) { return gamma; };
  return s;
}

}  // namespace uflow::oracle
