#pragma once

// Built-in example systems and the registry the CLI resolves `system.name` against.

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "uflow/model.hpp"

namespace uflow {

using Params = std::map<std::string, double>;

/// System with a constant input parameter u in R^m (held fixed along a trajectory).
struct ControlledSystem {
  std::string name;
  int m = 0;
  std::function<MechSystem(const Vector& u)> bind;
};

/// d = 1, n = 1, M = [m], f = -m g, a(q) = q.
MechSystem build_ball(double m, double g, double gamma);

/// Ball with input u = (u0, u1): f = -m g + u0 + u1 * qd.
ControlledSystem build_forced_ball(double m, double g, double gamma);

enum class CornerMode { orthogonal, oblique };

/// Point mass in a corner, M = I2. Orthogonal: a = (q1, q2); oblique (45 deg):
/// a = (q1, (q1 + q2)/sqrt 2). Optional gravity along -q2 and a damper
/// -coupling * (qd1 - qd2) * (1, -1) acting on the relative velocity.
MechSystem build_corner(CornerMode mode, double gamma, double gravity = 0.0, double coupling = 0.0);

/// Point mass on two orthogonal walls with a clock coordinate: q = (x, y, s),
/// a = (x, y), f = (kappa (s - s_release), -g, 0). Contact with wall 0 is
/// lost through a force zero crossing when s reaches s_release.
MechSystem build_slide_corner(double kappa, double s_release, double g);

struct HopperParams {
  double body_mass = 1.0;
  double toe_mass = 0.1;
  double stiffness = 200.0;
  double damping = 2.0;
  double rest_length = 0.5;
  double g = 9.81;
};

/// Vertical body z on a spring-damper leg ending in a toe y >= 0; q = (z, y).
MechSystem build_hopper(const HopperParams& p);

struct TrotterParams {
  double body_mass = 1.0;
  double inertia = 0.1;
  double toe_mass = 0.1;
  double half_width = 0.3;
  double stiffness = 82.7206;
  double damping = 1.0;        // linear leg damper
  double cubic_damping = 0.5;  // cubic body-limb damper on the mean leg rate
  double rest_length = 0.5;
  double g = 9.81;
  double energy_gain = 2.0;    // regulator gain on the body's vertical energy
  double energy_target = 8.65966;
};

/// Planar body (height z, pitch theta) on two spring-damper legs at hips
/// z -/+ w sin(theta), each ending in a toe (y_l, y_r) with y >= 0;
/// q = (z, theta, y_l, y_r), M diagonal so the two contact normals are
/// orthogonal in the kinetic metric. A cubic damper between the body and the
/// mean toe height couples the limbs: the body's response to one toe's impact
/// depends on whether the other toe is already down.
MechSystem build_trotter_toy(const TrotterParams& p);

struct ModelRegistryEntry {
  std::string name;
  std::string description;
  Params default_params;
  std::function<MechSystem(const Params&)> build;
  std::function<ControlledSystem(const Params&)> build_controlled;  // empty if none
  /// Random state: q inside the admissible set with a random subset J of
  /// constraints held at zero, arbitrary velocity.
  std::function<State(std::mt19937_64&)> sample;
};

const std::vector<ModelRegistryEntry>& registry();

/// Throws ConfigError for unknown names.
const ModelRegistryEntry& registry_entry(const std::string& name);

/// Defaults overlaid with overrides; unknown keys raise ConfigError.
Params merge_params(const ModelRegistryEntry& entry, const Params& overrides);

}  // namespace uflow
