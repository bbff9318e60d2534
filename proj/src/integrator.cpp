#include "integrator.hpp"

#include <boost/numeric/odeint.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "uflow/errors.hpp"

namespace uflow::detail {

namespace odeint = boost::numeric::odeint;
using OdeState = std::vector<double>;
using Stepper = odeint::runge_kutta_dopri5<OdeState>;
using Dense = odeint::result_of::make_dense_output<Stepper>::type;

namespace {

OdeState to_ode(const Vector& x) { return OdeState(x.data(), x.data() + x.size()); }

Vector from_ode(const OdeState& x) {
  return Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
}

struct RhsAdapter {
  const Rhs* rhs;
  void operator()(const OdeState& x, OdeState& dxdt, double t) const {
    const Vector v = (*rhs)(t, from_ode(x));
    if (!v.allFinite()) throw ModelError("vector field returned a non-finite value");
    dxdt.assign(v.data(), v.data() + v.size());
  }
};

}  // namespace

struct DenseIntegrator::Impl {
  IntegratorOptions opt;
  Rhs rhs;
  Dense dense;
  explicit Impl(IntegratorOptions o)
      : opt(o), dense(odeint::make_dense_output(o.abs_tol, o.rel_tol, o.max_step, Stepper())) {}
};

DenseIntegrator::DenseIntegrator(IntegratorOptions opt) : impl_(std::make_unique<Impl>(opt)) {}
DenseIntegrator::~DenseIntegrator() = default;
DenseIntegrator::DenseIntegrator(DenseIntegrator&&) noexcept = default;
DenseIntegrator& DenseIntegrator::operator=(DenseIntegrator&&) noexcept = default;

void DenseIntegrator::initialize(Rhs rhs, const Vector& x, double t, double dt) {
  impl_->rhs = std::move(rhs);
  impl_->dense = odeint::make_dense_output(impl_->opt.abs_tol, impl_->opt.rel_tol,
                                           impl_->opt.max_step, Stepper());
  impl_->dense.initialize(to_ode(x), t, std::min(dt, impl_->opt.max_step));
}

std::pair<double, double> DenseIntegrator::step() {
  RhsAdapter sys{&impl_->rhs};
  return impl_->dense.do_step(sys);
}

Vector DenseIntegrator::state_at(double t) const {
  OdeState x(impl_->dense.current_state().size());
  impl_->dense.calc_state(t, x);
  return from_ode(x);
}

Vector DenseIntegrator::current_state() const { return from_ode(impl_->dense.current_state()); }
double DenseIntegrator::current_time() const { return impl_->dense.current_time(); }
double DenseIntegrator::current_dt() const { return impl_->dense.current_time_step(); }
Vector DenseIntegrator::previous_state() const { return from_ode(impl_->dense.previous_state()); }

Vector integrate(const Rhs& rhs, const Vector& x0, double t0, double t1,
                 const IntegratorOptions& opt) {
  if (t1 == t0) return x0;
  OdeState x = to_ode(x0);
  RhsAdapter sys{&rhs};
  const double span = std::abs(t1 - t0);
  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double dt0 = dir * std::min({opt.max_step, span, 1e-3});
  auto stepper = odeint::make_controlled(opt.abs_tol, opt.rel_tol, opt.max_step, Stepper());
  odeint::integrate_adaptive(stepper, sys, x, t0, t1, dt0);
  return from_ode(x);
}

}  // namespace uflow::detail
