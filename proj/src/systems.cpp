#include "uflow/systems.hpp"

#include <fmt/format.h>

#include <cmath>

#include "uflow/errors.hpp"

namespace uflow {

namespace {

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(fmt::format("parameter {} must be positive", name));
}

void require_nonnegative(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(fmt::format("parameter {} must be >= 0", name));
}

std::function<std::vector<Matrix>(const Vector&)> zero_mass_jac(int d) {
  return [d](const Vector&) { return std::vector<Matrix>(d, Matrix::Zero(d, d)); };
}

std::function<std::vector<Matrix>(const Vector&)> zero_hess(int n, int d) {
  return [n, d](const Vector&) { return std::vector<Matrix>(n, Matrix::Zero(d, d)); };
}

std::function<double(const Vector&, const Vector&)> constant_gamma(double gamma) {
  return [gamma](const Vector&, const Vector&) { return gamma; };
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vector normal_vector(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> n01;
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = n01(rng);
  return v;
}

ActiveSet random_subset(std::mt19937_64& rng, int n) {
  std::uniform_int_distribution<std::uint64_t> pick(0, (std::uint64_t{1} << n) - 1);
  return ActiveSet::from_mask(pick(rng));
}

}  // namespace

MechSystem build_ball(double m, double g, double gamma) {
  require_positive(m, "m");
  require_positive(g, "g");
  require_nonnegative(gamma, "gamma");
  MechSystem s;
  s.name = "ball";
  s.dof = 1;
  s.num_constraints = 1;
  s.mass = [m](const Vector&) { return Matrix::Constant(1, 1, m); };
  s.mass_jac = zero_mass_jac(1);
  s.effort = [m, g](const Vector&, const Vector&) { return Vector::Constant(1, -m * g); };
  s.effort_jac = [](const Vector&, const Vector&) { return Matrix::Zero(1, 2); };
  s.constraints = [](const Vector& q) { return Vector::Constant(1, q[0]); };
  s.constraint_jac = [](const Vector&) { return Matrix::Ones(1, 1); };
  s.constraint_hess = zero_hess(1, 1);
  s.restitution = constant_gamma(gamma);
  return s;
}

ControlledSystem build_forced_ball(double m, double g, double gamma) {
  const MechSystem base = build_ball(m, g, gamma);
  ControlledSystem c;
  c.name = "forced_ball";
  c.m = 2;
  c.bind = [base, m, g](const Vector& u) {
    if (u.size() != 2) throw ConfigError("forced_ball expects an input of dimension 2");
    MechSystem s = base;
    s.name = "forced_ball";
    const double u0 = u[0], u1 = u[1];
    s.effort = [m, g, u0, u1](const Vector&, const Vector& qd) {
      return Vector::Constant(1, -m * g + u0 + u1 * qd[0]);
    };
    s.effort_jac = [u1](const Vector&, const Vector&) {
      Matrix j(1, 2);
      j << 0.0, u1;
      return j;
    };
    return s;
  };
  return c;
}

MechSystem build_corner(CornerMode mode, double gamma, double gravity, double coupling) {
  require_nonnegative(gamma, "gamma");
  require_nonnegative(gravity, "gravity");
  require_nonnegative(coupling, "coupling");
  MechSystem s;
  s.name = mode == CornerMode::orthogonal ? "corner" : "oblique_corner";
  s.dof = 2;
  s.num_constraints = 2;
  s.mass = [](const Vector&) { return Matrix::Identity(2, 2); };
  s.mass_jac = zero_mass_jac(2);
  s.effort = [gravity, coupling](const Vector&, const Vector& qd) {
    const double damp = -coupling * (qd[0] - qd[1]);
    Vector f(2);
    f << damp, -gravity - damp;
    return f;
  };
  s.effort_jac = [coupling](const Vector&, const Vector&) {
    Matrix j = Matrix::Zero(2, 4);
    j(0, 2) = -coupling;
    j(0, 3) = coupling;
    j(1, 2) = coupling;
    j(1, 3) = -coupling;
    return j;
  };
  Matrix da(2, 2);
  if (mode == CornerMode::orthogonal) {
    da << 1.0, 0.0, 0.0, 1.0;
  } else {
    const double r = 1.0 / std::sqrt(2.0);
    da << 1.0, 0.0, r, r;
  }
  s.constraints = [da](const Vector& q) { return Vector(da * q); };
  s.constraint_jac = [da](const Vector&) { return da; };
  s.constraint_hess = zero_hess(2, 2);
  s.restitution = constant_gamma(gamma);
  return s;
}

MechSystem build_slide_corner(double kappa, double s_release, double g) {
  require_positive(kappa, "kappa");
  require_positive(g, "g");
  MechSystem s;
  s.name = "slide_corner";
  s.dof = 3;
  s.num_constraints = 2;
  s.mass = [](const Vector&) { return Matrix::Identity(3, 3); };
  s.mass_jac = zero_mass_jac(3);
  s.effort = [kappa, s_release, g](const Vector& q, const Vector&) {
    Vector f(3);
    f << kappa * (q[2] - s_release), -g, 0.0;
    return f;
  };
  s.effort_jac = [kappa](const Vector&, const Vector&) {
    Matrix j = Matrix::Zero(3, 6);
    j(0, 2) = kappa;
    return j;
  };
  s.constraints = [](const Vector& q) { return Vector(q.head(2)); };
  s.constraint_jac = [](const Vector&) {
    Matrix j = Matrix::Zero(2, 3);
    j(0, 0) = 1.0;
    j(1, 1) = 1.0;
    return j;
  };
  s.constraint_hess = zero_hess(2, 3);
  s.restitution = constant_gamma(0.0);
  return s;
}

MechSystem build_hopper(const HopperParams& p) {
  require_positive(p.body_mass, "body_mass");
  require_positive(p.toe_mass, "toe_mass");
  require_positive(p.stiffness, "stiffness");
  require_nonnegative(p.damping, "damping");
  require_positive(p.rest_length, "rest_length");
  require_positive(p.g, "g");
  MechSystem s;
  s.name = "hopper";
  s.dof = 2;
  s.num_constraints = 1;
  s.mass = [p](const Vector&) {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = p.body_mass;
    m(1, 1) = p.toe_mass;
    return m;
  };
  s.mass_jac = zero_mass_jac(2);
  s.effort = [p](const Vector& q, const Vector& qd) {
    const double len = q[0] - q[1];
    const double rate = qd[0] - qd[1];
    const double force = p.stiffness * (p.rest_length - len) - p.damping * rate;
    Vector f(2);
    f << force - p.body_mass * p.g, -force - p.toe_mass * p.g;
    return f;
  };
  s.constraints = [](const Vector& q) { return Vector::Constant(1, q[1]); };
  s.constraint_jac = [](const Vector&) {
    Matrix j(1, 2);
    j << 0.0, 1.0;
    return j;
  };
  s.constraint_hess = zero_hess(1, 2);
  s.restitution = constant_gamma(0.0);
  return s;
}

MechSystem build_trotter_toy(const TrotterParams& p) {
  require_positive(p.body_mass, "body_mass");
  require_positive(p.inertia, "inertia");
  require_positive(p.toe_mass, "toe_mass");
  require_positive(p.half_width, "half_width");
  require_positive(p.stiffness, "stiffness");
  require_nonnegative(p.damping, "damping");
  require_nonnegative(p.cubic_damping, "cubic_damping");
  require_positive(p.rest_length, "rest_length");
  require_positive(p.g, "g");
  require_nonnegative(p.energy_gain, "energy_gain");
  MechSystem s;
  s.name = "trotter";
  s.dof = 4;
  s.num_constraints = 2;
  const Vector diag = (Vector(4) << p.body_mass, p.inertia, p.toe_mass, p.toe_mass).finished();
  s.mass = [diag](const Vector&) { return Matrix(diag.asDiagonal()); };
  s.mass_jac = zero_mass_jac(4);
  s.effort = [p](const Vector& q, const Vector& qd) {
    const double w = p.half_width;
    const double sn = std::sin(q[1]), cs = std::cos(q[1]);
    const double len_l = q[0] - w * sn - q[2];
    const double len_r = q[0] + w * sn - q[3];
    const double rate_l = qd[0] - w * cs * qd[1] - qd[2];
    const double rate_r = qd[0] + w * cs * qd[1] - qd[3];
    auto leg = [&p](double len, double rate) {
      return p.stiffness * (p.rest_length - len) - p.damping * rate;
    };
    const double fl = leg(len_l, rate_l);
    const double fr = leg(len_r, rate_r);
    const double mean_rate = 0.5 * (rate_l + rate_r);
    const double fc = -p.cubic_damping * mean_rate * mean_rate * mean_rate;
    const double energy = 0.5 * p.body_mass * qd[0] * qd[0] + 0.5 * p.inertia * qd[1] * qd[1] +
                          p.body_mass * p.g * q[0];
    const double regulator = -p.energy_gain * (energy - p.energy_target) * qd[0];
    Vector f(4);
    f << fl + fr + fc - p.body_mass * p.g + regulator, (fr - fl) * w * cs,
        -fl - 0.5 * fc - p.toe_mass * p.g, -fr - 0.5 * fc - p.toe_mass * p.g;
    return f;
  };
  s.constraints = [](const Vector& q) { return Vector(q.tail(2)); };
  s.constraint_jac = [](const Vector&) {
    Matrix j = Matrix::Zero(2, 4);
    j(0, 2) = 1.0;
    j(1, 3) = 1.0;
    return j;
  };
  s.constraint_hess = zero_hess(2, 4);
  s.restitution = constant_gamma(0.0);
  return s;
}

// ---------------------------------------------------------------------------
// registry

namespace {

double get(const Params& p, const std::string& key) { return p.at(key); }

HopperParams hopper_params(const Params& p) {
  HopperParams h;
  h.body_mass = get(p, "body_mass");
  h.toe_mass = get(p, "toe_mass");
  h.stiffness = get(p, "stiffness");
  h.damping = get(p, "damping");
  h.rest_length = get(p, "rest_length");
  h.g = get(p, "g");
  return h;
}

TrotterParams trotter_params(const Params& p) {
  TrotterParams t;
  t.body_mass = get(p, "body_mass");
  t.inertia = get(p, "inertia");
  t.toe_mass = get(p, "toe_mass");
  t.half_width = get(p, "half_width");
  t.stiffness = get(p, "stiffness");
  t.damping = get(p, "damping");
  t.cubic_damping = get(p, "cubic_damping");
  t.rest_length = get(p, "rest_length");
  t.g = get(p, "g");
  t.energy_gain = get(p, "energy_gain");
  t.energy_target = get(p, "energy_target");
  return t;
}

Params to_params(const HopperParams& h) {
  return {{"body_mass", h.body_mass}, {"toe_mass", h.toe_mass}, {"stiffness", h.stiffness},
          {"damping", h.damping},     {"rest_length", h.rest_length}, {"g", h.g}};
}

Params to_params(const TrotterParams& t) {
  return {{"body_mass", t.body_mass},     {"inertia", t.inertia},
          {"toe_mass", t.toe_mass},       {"half_width", t.half_width},
          {"stiffness", t.stiffness},     {"damping", t.damping},
          {"cubic_damping", t.cubic_damping}, {"rest_length", t.rest_length},
          {"g", t.g},                     {"energy_gain", t.energy_gain},
          {"energy_target", t.energy_target}};
}

std::vector<ModelRegistryEntry> make_registry() {
  std::vector<ModelRegistryEntry> r;

  r.push_back({"ball", "1-dof bouncing ball above a floor", {{"m", 1.0}, {"g", 1.0}, {"gamma", 0.5}},
               [](const Params& p) { return build_ball(get(p, "m"), get(p, "g"), get(p, "gamma")); },
               {},
               [](std::mt19937_64& rng) {
                 const ActiveSet J = random_subset(rng, 1);
                 Vector q = Vector::Constant(1, J.empty() ? uniform(rng, 0.0, 2.0) : 0.0);
                 return State{0.0, q, normal_vector(rng, 1), J};
               }});

  r.push_back({"forced_ball", "bouncing ball with input u = (constant force, velocity gain)",
               {{"m", 1.0}, {"g", 1.0}, {"gamma", 0.5}},
               [](const Params& p) { return build_ball(get(p, "m"), get(p, "g"), get(p, "gamma")); },
               [](const Params& p) {
                 return build_forced_ball(get(p, "m"), get(p, "g"), get(p, "gamma"));
               },
               [](std::mt19937_64& rng) {
                 const ActiveSet J = random_subset(rng, 1);
                 Vector q = Vector::Constant(1, J.empty() ? uniform(rng, 0.0, 2.0) : 0.0);
                 return State{0.0, q, normal_vector(rng, 1), J};
               }});

  auto corner_sampler = [](CornerMode mode) {
    return [mode](std::mt19937_64& rng) {
      const ActiveSet J = random_subset(rng, 2);
      // Parametrize the admissible wedge by the constraint values themselves.
      Vector a(2);
      for (int i = 0; i < 2; ++i) a[i] = J.contains(i) ? 0.0 : uniform(rng, 0.0, 1.0);
      Vector q = a;
      if (mode == CornerMode::oblique) q << a[0], std::sqrt(2.0) * a[1] - a[0];
      return State{0.0, q, normal_vector(rng, 2), J};
    };
  };
  const Params corner_defaults{{"gamma", 0.0}, {"gravity", 0.0}, {"coupling", 0.0}};
  r.push_back({"corner", "point mass in a right-angle corner (orthogonal constraints)", corner_defaults,
               [](const Params& p) {
                 return build_corner(CornerMode::orthogonal, get(p, "gamma"), get(p, "gravity"),
                                     get(p, "coupling"));
               },
               {}, corner_sampler(CornerMode::orthogonal)});
  r.push_back({"oblique_corner", "point mass in a 45 degree wedge (non-orthogonal constraints)",
               corner_defaults,
               [](const Params& p) {
                 return build_corner(CornerMode::oblique, get(p, "gamma"), get(p, "gravity"),
                                     get(p, "coupling"));
               },
               {}, corner_sampler(CornerMode::oblique)});

  r.push_back({"slide_corner", "mass pressed on one wall, released by a clocked force while landing on the other",
               {{"kappa", 1.0}, {"s_release", 1.0}, {"g", 1.0}},
               [](const Params& p) {
                 return build_slide_corner(get(p, "kappa"), get(p, "s_release"), get(p, "g"));
               },
               {},
               [](std::mt19937_64& rng) {
                 const ActiveSet J = random_subset(rng, 2);
                 Vector q(3);
                 for (int i = 0; i < 2; ++i) q[i] = J.contains(i) ? 0.0 : uniform(rng, 0.0, 1.0);
                 q[2] = uniform(rng, -1.0, 2.0);
                 return State{0.0, q, normal_vector(rng, 3), J};
               }});

  r.push_back({"hopper", "vertical body on a spring-damper leg with a toe mass", to_params(HopperParams{}),
               [](const Params& p) { return build_hopper(hopper_params(p)); },
               {},
               [](std::mt19937_64& rng) {
                 const ActiveSet J = random_subset(rng, 1);
                 Vector q(2);
                 q[1] = J.empty() ? uniform(rng, 0.0, 0.5) : 0.0;
                 q[0] = q[1] + uniform(rng, 0.1, 1.0);
                 return State{0.0, q, normal_vector(rng, 2), J};
               }});

  r.push_back({"trotter", "planar body with two compliant legs (soft-leg trotting toy)",
               to_params(TrotterParams{}),
               [](const Params& p) { return build_trotter_toy(trotter_params(p)); },
               {},
               [](std::mt19937_64& rng) {
                 const ActiveSet J = random_subset(rng, 2);
                 Vector q(4);
                 q[0] = uniform(rng, 0.3, 1.0);
                 q[1] = uniform(rng, -0.3, 0.3);
                 for (int i = 0; i < 2; ++i) q[2 + i] = J.contains(i) ? 0.0 : uniform(rng, 0.0, 0.3);
                 return State{0.0, q, normal_vector(rng, 4), J};
               }});
  return r;
}

}  // namespace

const std::vector<ModelRegistryEntry>& registry() {
  static const std::vector<ModelRegistryEntry> r = make_registry();
  return r;
}

const ModelRegistryEntry& registry_entry(const std::string& name) {
  for (const auto& e : registry()) {
    if (e.name == name) return e;
  }
  throw ConfigError(fmt::format("unknown system '{}'", name));
}

Params merge_params(const ModelRegistryEntry& entry, const Params& overrides) {
  Params out = entry.default_params;
  for (const auto& [k, v] : overrides) {
    auto it = out.find(k);
    if (it == out.end()) throw ConfigError(fmt::format("system '{}' has no parameter '{}'", entry.name, k));
    it->second = v;
  }
  return out;
}

}  // namespace uflow
