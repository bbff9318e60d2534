#include "uflow/model.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "uflow/errors.hpp"

namespace uflow {

// ---------------------------------------------------------------------------
// ActiveSet

ActiveSet::ActiveSet(std::initializer_list<int> indices) : ActiveSet(std::vector<int>(indices)) {}

ActiveSet::ActiveSet(std::vector<int> indices) : indices_(std::move(indices)) {
  std::sort(indices_.begin(), indices_.end());
  indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
  if (!indices_.empty() && indices_.front() < 0) {
    throw Error("ActiveSet: negative constraint index");
  }
}

ActiveSet ActiveSet::from_mask(std::uint64_t mask) {
  std::vector<int> idx;
  for (int i = 0; i < 64; ++i) {
    if (mask & (std::uint64_t{1} << i)) idx.push_back(i);
  }
  return ActiveSet(std::move(idx));
}

ActiveSet ActiveSet::all(int n) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  return ActiveSet(std::move(idx));
}

std::uint64_t ActiveSet::mask() const {
  std::uint64_t m = 0;
  for (int i : indices_) {
    if (i >= 64) throw Error("ActiveSet: index too large for a bitmask");
    m |= std::uint64_t{1} << i;
  }
  return m;
}

bool ActiveSet::contains(int i) const {
  return std::binary_search(indices_.begin(), indices_.end(), i);
}

bool ActiveSet::contains(const ActiveSet& other) const {
  return std::includes(indices_.begin(), indices_.end(), other.indices_.begin(),
                       other.indices_.end());
}

ActiveSet ActiveSet::with(int i) const {
  auto idx = indices_;
  idx.push_back(i);
  return ActiveSet(std::move(idx));
}

ActiveSet ActiveSet::without(int i) const {
  auto idx = indices_;
  idx.erase(std::remove(idx.begin(), idx.end(), i), idx.end());
  return ActiveSet(std::move(idx));
}

ActiveSet ActiveSet::unite(const ActiveSet& other) const {
  auto idx = indices_;
  idx.insert(idx.end(), other.indices_.begin(), other.indices_.end());
  return ActiveSet(std::move(idx));
}

ActiveSet ActiveSet::minus(const ActiveSet& other) const {
  std::vector<int> idx;
  std::set_difference(indices_.begin(), indices_.end(), other.indices_.begin(),
                      other.indices_.end(), std::back_inserter(idx));
  return ActiveSet(std::move(idx));
}

int ActiveSet::position(int i) const {
  auto it = std::lower_bound(indices_.begin(), indices_.end(), i);
  if (it == indices_.end() || *it != i) return -1;
  return static_cast<int>(it - indices_.begin());
}

std::string ActiveSet::str() const {
  std::ostringstream os;
  os << '{';
  for (std::size_t k = 0; k < indices_.size(); ++k) {
    if (k) os << ',';
    os << indices_[k];
  }
  os << '}';
  return os.str();
}

// ---------------------------------------------------------------------------
// State

Vector State::x() const {
  Vector out(q.size() + qd.size());
  out << q, qd;
  return out;
}

State State::from_x(double t, const Vector& x, ActiveSet J) {
  const auto d = x.size() / 2;
  return State{t, x.head(d), x.tail(d), std::move(J)};
}

// ---------------------------------------------------------------------------
// evaluation helpers

namespace {

void require(bool ok, const MechSystem& sys, const char* what) {
  if (!ok) {
    throw ModelError(sys.name.empty() ? std::string(what) : sys.name + ": " + what);
  }
}

bool finite(const Matrix& m) { return m.allFinite(); }

}  // namespace

Matrix central_jacobian(const std::function<Vector(const Vector&)>& fn, const Vector& x,
                        double rel_step) {
  Vector xp = x;
  Matrix jac;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = rel_step * std::max(1.0, std::abs(x[k]));
    xp[k] = x[k] + h;
    const Vector fp = fn(xp);
    xp[k] = x[k] - h;
    const Vector fm = fn(xp);
    xp[k] = x[k];
    if (k == 0) jac.resize(fp.size(), x.size());
    jac.col(k) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

Matrix eval_mass(const MechSystem& sys, const Vector& q) {
  require(static_cast<bool>(sys.mass), sys, "mass matrix callable missing");
  Matrix m = sys.mass(q);
  require(m.rows() == sys.dof && m.cols() == sys.dof, sys, "mass matrix has wrong shape");
  require(finite(m), sys, "mass matrix is not finite");
  return m;
}

std::vector<Matrix> eval_mass_jac(const MechSystem& sys, const Vector& q) {
  std::vector<Matrix> dm;
  if (sys.mass_jac) {
    dm = sys.mass_jac(q);
    require(static_cast<int>(dm.size()) == sys.dof, sys, "mass_jac must return d matrices");
    for (const auto& m : dm) {
      require(m.rows() == sys.dof && m.cols() == sys.dof, sys, "mass_jac entry has wrong shape");
    }
    return dm;
  }
  dm.resize(sys.dof);
  Vector qp = q;
  for (int k = 0; k < sys.dof; ++k) {
    const double h = 1e-6 * std::max(1.0, std::abs(q[k]));
    qp[k] = q[k] + h;
    const Matrix mp = eval_mass(sys, qp);
    qp[k] = q[k] - h;
    const Matrix mm = eval_mass(sys, qp);
    qp[k] = q[k];
    dm[k] = (mp - mm) / (2.0 * h);
  }
  return dm;
}

Vector eval_effort(const MechSystem& sys, const Vector& q, const Vector& qd) {
  require(static_cast<bool>(sys.effort), sys, "effort callable missing");
  Vector f = sys.effort(q, qd);
  require(f.size() == sys.dof, sys, "effort has wrong size");
  require(f.allFinite(), sys, "effort is not finite");
  return f;
}

Matrix eval_effort_jac(const MechSystem& sys, const Vector& q, const Vector& qd) {
  if (sys.effort_jac) {
    Matrix j = sys.effort_jac(q, qd);
    require(j.rows() == sys.dof && j.cols() == 2 * sys.dof, sys, "effort_jac has wrong shape");
    return j;
  }
  const int d = sys.dof;
  Vector x(2 * d);
  x << q, qd;
  return central_jacobian(
      [&](const Vector& y) { return eval_effort(sys, y.head(d), y.tail(d)); }, x);
}

Vector eval_constraints(const MechSystem& sys, const Vector& q) {
  require(static_cast<bool>(sys.constraints), sys, "constraint callable missing");
  Vector a = sys.constraints(q);
  require(a.size() == sys.num_constraints, sys, "constraints have wrong size");
  require(a.allFinite(), sys, "constraints are not finite");
  return a;
}

Matrix eval_constraint_jac(const MechSystem& sys, const Vector& q) {
  require(static_cast<bool>(sys.constraint_jac), sys, "constraint_jac callable missing");
  Matrix da = sys.constraint_jac(q);
  require(da.rows() == sys.num_constraints && da.cols() == sys.dof, sys,
          "constraint_jac has wrong shape");
  require(finite(da), sys, "constraint_jac is not finite");
  return da;
}

std::vector<Matrix> eval_constraint_hess(const MechSystem& sys, const Vector& q) {
  std::vector<Matrix> h;
  if (sys.constraint_hess) {
    h = sys.constraint_hess(q);
    require(static_cast<int>(h.size()) == sys.num_constraints, sys,
            "constraint_hess must return n matrices");
    for (const auto& m : h) {
      require(m.rows() == sys.dof && m.cols() == sys.dof, sys,
              "constraint_hess entry has wrong shape");
    }
    return h;
  }
  // Differentiate the Jacobian rows.
  h.assign(sys.num_constraints, Matrix::Zero(sys.dof, sys.dof));
  Vector qp = q;
  for (int k = 0; k < sys.dof; ++k) {
    const double step = 1e-6 * std::max(1.0, std::abs(q[k]));
    qp[k] = q[k] + step;
    const Matrix jp = eval_constraint_jac(sys, qp);
    qp[k] = q[k] - step;
    const Matrix jm = eval_constraint_jac(sys, qp);
    qp[k] = q[k];
    for (int i = 0; i < sys.num_constraints; ++i) {
      h[i].col(k) = ((jp.row(i) - jm.row(i)) / (2.0 * step)).transpose();
    }
  }
  for (auto& m : h) m = 0.5 * (m + m.transpose()).eval();
  return h;
}

double eval_restitution(const MechSystem& sys, const Vector& q, const Vector& qd) {
  require(static_cast<bool>(sys.restitution), sys, "restitution callable missing");
  const double g = sys.restitution(q, qd);
  require(std::isfinite(g) && g >= 0.0, sys, "restitution coefficient must be finite and >= 0");
  return g;
}

Matrix constraint_jac_rows(const MechSystem& sys, const Vector& q, const ActiveSet& J) {
  const Matrix da = eval_constraint_jac(sys, q);
  Matrix rows(J.size(), sys.dof);
  int r = 0;
  for (int i : J) {
    require(i < sys.num_constraints, sys, "active-set index out of range");
    rows.row(r++) = da.row(i);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// contact algebra

namespace {

Eigen::LLT<Matrix> factor_mass(const MechSystem& sys, const Matrix& m) {
  require((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, m.cwiseAbs().maxCoeff()),
          sys, "mass matrix is not symmetric");
  Eigen::LLT<Matrix> llt(m);
  require(llt.info() == Eigen::Success, sys, "mass matrix is not positive definite");
  return llt;
}

Matrix gram_inverse(const MechSystem& sys, const Matrix& da_j, const Eigen::LLT<Matrix>& mass_llt) {
  if (da_j.rows() == 0) return Matrix(0, 0);
  const Matrix minv_dat = mass_llt.solve(da_j.transpose());
  Matrix gram = da_j * minv_dat;
  gram = 0.5 * (gram + gram.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const double lmax = eig.eigenvalues().cwiseAbs().maxCoeff();
  const double lmin = eig.eigenvalues().minCoeff();
  if (!(lmin > 1e-12 * std::max(1.0, lmax))) {
    throw ConstraintDependenceError(sys.name + ": constraint normals are linearly dependent");
  }
  return gram.inverse();
}

// Quadratic term qd^T D^2 a_J qd for the rows in J.
Vector hessian_term(const MechSystem& sys, const Vector& q, const Vector& qd, const ActiveSet& J) {
  Vector out(J.size());
  if (J.empty()) return out;
  const auto hess = eval_constraint_hess(sys, q);
  int r = 0;
  for (int i : J) out[r++] = qd.dot(hess[i] * qd);
  return out;
}

}  // namespace

Matrix coriolis(const MechSystem& sys, const Vector& q, const Vector& qd) {
  const int d = sys.dof;
  const auto dm = eval_mass_jac(sys, q);
  Matrix c = Matrix::Zero(d, d);
  for (int l = 0; l < d; ++l) {
    for (int m = 0; m < d; ++m) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) {
        s += (dm[k](l, m) + dm[m](l, k) - dm[l](k, m)) * qd[k];
      }
      c(l, m) = -0.5 * s;
    }
  }
  return c;
}

Matrix lambda_gram(const MechSystem& sys, const Vector& q, const ActiveSet& J) {
  if (J.empty()) return Matrix(0, 0);
  const auto llt = factor_mass(sys, eval_mass(sys, q));
  return gram_inverse(sys, constraint_jac_rows(sys, q, J), llt);
}

ImpactResult impact_map(const MechSystem& sys, const Vector& q, const Vector& qd_minus,
                        const ActiveSet& J) {
  const int d = sys.dof;
  ImpactResult out;
  out.gamma = eval_restitution(sys, q, qd_minus);
  if (J.empty()) {
    out.delta = Matrix::Identity(d, d);
    out.qd_plus = qd_minus;
    out.impulse = Vector(0);
    return out;
  }
  const auto llt = factor_mass(sys, eval_mass(sys, q));
  const Matrix da_j = constraint_jac_rows(sys, q, J);
  const Matrix lam = gram_inverse(sys, da_j, llt);
  const Matrix minv_dat = llt.solve(da_j.transpose());
  out.delta = Matrix::Identity(d, d) - (1.0 + out.gamma) * minv_dat * lam * da_j;
  out.qd_plus = out.delta * qd_minus;
  out.impulse = -(1.0 + out.gamma) * lam * (da_j * qd_minus);
  if (J.size() == d) {
    spdlog::debug("{}: impact on {} constraints leaves no tangent directions", sys.name, J.size());
  }
  return out;
}

Vector contact_force(const MechSystem& sys, const Vector& q, const Vector& qd,
                     const ActiveSet& J) {
  if (J.empty()) return Vector(0);
  const auto llt = factor_mass(sys, eval_mass(sys, q));
  const Matrix da_j = constraint_jac_rows(sys, q, J);
  const Matrix lam = gram_inverse(sys, da_j, llt);
  const Vector rhs = eval_effort(sys, q, qd) + coriolis(sys, q, qd) * qd;
  return -lam * (da_j * llt.solve(rhs) + hessian_term(sys, q, qd, J));
}

Vector mode_accel(const MechSystem& sys, const Vector& q, const Vector& qd, const ActiveSet& J) {
  const auto llt = factor_mass(sys, eval_mass(sys, q));
  Vector rhs = eval_effort(sys, q, qd) + coriolis(sys, q, qd) * qd;
  if (!J.empty()) {
    const Matrix da_j = constraint_jac_rows(sys, q, J);
    const Matrix lam = gram_inverse(sys, da_j, llt);
    const Vector lambda = -lam * (da_j * llt.solve(rhs) + hessian_term(sys, q, qd, J));
    rhs += da_j.transpose() * lambda;
  }
  return llt.solve(rhs);
}

Vector mode_field(const MechSystem& sys, const ActiveSet& J, const Vector& x) {
  const int d = sys.dof;
  Vector out(2 * d);
  out << x.tail(d), mode_accel(sys, x.head(d), x.tail(d), J);
  return out;
}

double orthogonality_check(const MechSystem& sys, const Vector& q, int i, int j) {
  const auto llt = factor_mass(sys, eval_mass(sys, q));
  const Matrix da = eval_constraint_jac(sys, q);
  require(i >= 0 && j >= 0 && i < sys.num_constraints && j < sys.num_constraints, sys,
          "constraint index out of range");
  return da.row(i).dot(llt.solve(da.row(j).transpose()).col(0));
}

double constraint_accel(const MechSystem& sys, const Vector& q, const Vector& qd,
                        const ActiveSet& J, int i) {
  const Vector qdd = mode_accel(sys, q, qd, J);
  const Matrix da = eval_constraint_jac(sys, q);
  const auto hess = eval_constraint_hess(sys, q);
  return da.row(i).dot(qdd) + qd.dot(hess[i] * qd);
}

void check_model_invariants(const MechSystem& sys, const Vector& q, const Vector& qd) {
  factor_mass(sys, eval_mass(sys, q));
  eval_restitution(sys, q, qd);
  const Vector a = eval_constraints(sys, q);
  std::vector<int> on_surface;
  for (int i = 0; i < sys.num_constraints; ++i) {
    if (std::abs(a[i]) <= sys.tol.cons) on_surface.push_back(i);
  }
  if (!on_surface.empty()) lambda_gram(sys, q, ActiveSet(on_surface));
}

}  // namespace uflow
