#pragma once

// Thin wrapper over Boost.Odeint's Dormand-Prince 5(4) stepper: a dense-output
// driver for event-driven simulation and a one-shot adaptive integrator
// (forward or backward in time) for variational flows.

#include <functional>
#include <memory>
#include <utility>

#include "uflow/model.hpp"

namespace uflow::detail {

using Rhs = std::function<Vector(double t, const Vector& x)>;

struct IntegratorOptions {
  double abs_tol = 1e-12;
  double rel_tol = 1e-12;
  double max_step = 0.01;
};

class DenseIntegrator {
 public:
  explicit DenseIntegrator(IntegratorOptions opt);
  ~DenseIntegrator();
  DenseIntegrator(DenseIntegrator&&) noexcept;
  DenseIntegrator& operator=(DenseIntegrator&&) noexcept;

  void initialize(Rhs rhs, const Vector& x, double t, double dt);
  /// Advances one accepted step; returns [t_old, t_new].
  std::pair<double, double> step();
  /// Interpolated state inside the last accepted step.
  Vector state_at(double t) const;
  Vector current_state() const;
  double current_time() const;
  double current_dt() const;
  Vector previous_state() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Integrates x' = rhs(t, x) from t0 to t1 (t1 < t0 allowed).
Vector integrate(const Rhs& rhs, const Vector& x0, double t0, double t1,
                 const IntegratorOptions& opt);

}  // namespace uflow::detail
