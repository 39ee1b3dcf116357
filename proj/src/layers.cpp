#include "huproso3/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace huproso3 {

namespace {

void check_fixed_column(int c) {
  if (c != 0 && c != 1) throw std::invalid_argument("fixed_column must be 0 or 1");
}

Rotation assemble(const Eigen::Vector3d& fixed, const Eigen::Vector3d& moved, int fixed_column) {
  Eigen::Matrix3d m;
  if (fixed_column == 0) {
    m.col(0) = fixed;
    m.col(1) = moved;
    m.col(2) = fixed.cross(moved);
  } else {
    m.col(0) = moved;
    m.col(1) = fixed;
    m.col(2) = moved.cross(fixed);
  }
  return Rotation::from_orthonormal(m);
}

MobiusParams negated(MobiusParams p) {
  p.omega = -p.omega;
  return p;
}

}  // namespace

MobiusParams build_omega(const Eigen::Vector3d& g_out, const Eigen::Vector3d& x_fixed, int fixed_column) {
  check_fixed_column(fixed_column);
  const Eigen::Vector3d xi = g_out - x_fixed * x_fixed.dot(g_out);
  const PlaneBasis basis = plane_basis(x_fixed);
  const Eigen::Vector2d chart(xi.dot(basis.e1), xi.dot(basis.e2));
  const double s = chart.norm();
  MobiusParams p;
  p.fixed_column = fixed_column;
  p.omega = s > 0.0 ? Eigen::Vector2d(kOmegaRadius * std::tanh(s) / s * chart) : Eigen::Vector2d::Zero();
  return p;
}

Eigen::Vector3d omega_vector(const MobiusParams& p, const Eigen::Vector3d& x_fixed) {
  const PlaneBasis basis = plane_basis(x_fixed);
  return p.omega[0] * basis.e1 + p.omega[1] * basis.e2;
}

CircleMapResult mobius_circle(const Eigen::Vector3d& x_move, const Eigen::Vector3d& x_fixed, const MobiusParams& p) {
  const double w2 = p.omega.squaredNorm();
  if (!(w2 < 1.0)) throw std::invalid_argument("mobius_circle: |omega| must be < 1");
  if (std::abs(x_move.dot(x_fixed)) > 1e-9) {
    throw std::invalid_argument("mobius_circle: moving point not perpendicular to the fixed column");
  }
  const PlaneBasis basis = plane_basis(x_fixed);
  const Eigen::Vector2d y(x_move.dot(basis.e1), x_move.dot(basis.e2));
  const Eigen::Vector2d d = y - p.omega;
  // |y - omega|^2 with |y| = 1 taken exactly, so omega = 0 gives rho = 1.
  const double rho = (1.0 - w2) / (1.0 - 2.0 * y.dot(p.omega) + w2);
  const Eigen::Vector2d h = rho * d - p.omega;
  return {h[0] * basis.e1 + h[1] * basis.e2, std::log(rho)};
}

LayerResult coupling_forward(const Rotation& r, const Eigen::Vector3d& cond_net_output, int fixed_column) {
  check_fixed_column(fixed_column);
  const Eigen::Vector3d fixed = r.column(fixed_column);
  const MobiusParams p = build_omega(cond_net_output, fixed, fixed_column);
  const CircleMapResult moved = mobius_circle(r.column(1 - fixed_column), fixed, p);
  return {assemble(fixed, moved.point, fixed_column), moved.logdet};
}

LayerResult coupling_inverse(const Rotation& r, const Eigen::Vector3d& cond_net_output, int fixed_column) {
  check_fixed_column(fixed_column);
  const Eigen::Vector3d fixed = r.column(fixed_column);
  const MobiusParams p = build_omega(cond_net_output, fixed, fixed_column);
  const CircleMapResult moved = mobius_circle(r.column(1 - fixed_column), fixed, negated(p));
  return {assemble(fixed, moved.point, fixed_column), moved.logdet};
}

// ---------------------------------------------------------------------------

Eigen::Matrix4d left_mult_matrix(const Eigen::Vector4d& a) {
  Eigen::Matrix4d m;
  m << a[0], -a[1], -a[2], -a[3],
       a[1], a[0], -a[3], a[2],
       a[2], a[3], a[0], -a[1],
       a[3], -a[2], a[1], a[0];
  return m;
}

Eigen::Matrix4d right_mult_matrix(const Eigen::Vector4d& b) {
  Eigen::Matrix4d m;
  m << b[0], -b[1], -b[2], -b[3],
       b[1], b[0], b[3], -b[2],
       b[2], -b[3], b[0], b[1],
       b[3], b[2], -b[1], b[0];
  return m;
}

QuatAffineParams QuatAffineParams::from_raw(const Eigen::Matrix<double, 16, 1>& raw) {
  auto unit = [&](int off) {
    Eigen::Vector4d v(1.0, raw[off], raw[off + 1], raw[off + 2]);
    return UnitQuaternion::from_vector(v / v.norm());
  };
  QuatAffineParams p;
  p.u_left = unit(0);
  p.u_right = unit(3);
  p.v_left = unit(6);
  p.v_right = unit(9);
  for (int i = 0; i < 4; ++i) p.log_sigma[i] = kLogSigmaBound * std::tanh(raw[12 + i] / kLogSigmaBound);
  return p;
}

Eigen::Matrix4d QuatAffineParams::matrix() const {
  const Eigen::Matrix4d u = left_mult_matrix(u_left.coeffs()) * right_mult_matrix(u_right.coeffs());
  const Eigen::Matrix4d v = left_mult_matrix(v_left.coeffs()) * right_mult_matrix(v_right.coeffs());
  return u * log_sigma.array().exp().matrix().asDiagonal() * v.transpose();
}

Eigen::Matrix4d QuatAffineParams::inverse_matrix() const {
  const Eigen::Matrix4d u = left_mult_matrix(u_left.coeffs()) * right_mult_matrix(u_right.coeffs());
  const Eigen::Matrix4d v = left_mult_matrix(v_left.coeffs()) * right_mult_matrix(v_right.coeffs());
  return v * (-log_sigma.array()).exp().matrix().asDiagonal() * u.transpose();
}

namespace {

LayerResult apply_sphere_map(const Rotation& r, const Eigen::Matrix4d& w, double log_abs_det) {
  if (!w.allFinite()) throw std::invalid_argument("quat_affine: non-finite parameters");
  const Eigen::Vector4d q = matrix_to_quat(r).coeffs();
  const Eigen::Vector4d wq = w * q;
  const double n2 = wq.squaredNorm();
  if (!(std::sqrt(n2) >= 1e-12)) throw std::invalid_argument("quat_affine: degenerate parameters (|Wq| ~ 0)");
  const Eigen::Vector4d out = canonicalize_sign(wq / std::sqrt(n2));
  const double logdet = log_abs_det - 2.0 * std::log(n2 / q.squaredNorm());
  return {Rotation::from_orthonormal(quat_coeffs_to_matrix(out)), logdet};
}

void check_log_sigma(const QuatAffineParams& p) {
  if ((p.log_sigma.array().abs() > kLogSigmaBound).any()) {
    throw std::invalid_argument("quat_affine: |log_sigma| exceeds the conditioning bound");
  }
}

}  // namespace

LayerResult quat_affine_forward(const Rotation& r, const QuatAffineParams& p) {
  check_log_sigma(p);
  return apply_sphere_map(r, p.matrix(), p.log_sigma.sum());
}

LayerResult quat_affine_inverse(const Rotation& r, const QuatAffineParams& p) {
  check_log_sigma(p);
  return apply_sphere_map(r, p.inverse_matrix(), -p.log_sigma.sum());
}

// ---------------------------------------------------------------------------

Permutation::Permutation(std::vector<int> perm) : perm_(std::move(perm)) {
  std::vector<char> seen(perm_.size(), 0);
  for (int v : perm_) {
    if (v < 0 || static_cast<std::size_t>(v) >= perm_.size() || seen[static_cast<std::size_t>(v)]) {
      throw std::invalid_argument("Permutation: not a bijection");
    }
    seen[static_cast<std::size_t>(v)] = 1;
  }
}

Permutation Permutation::identity(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  return Permutation(std::move(p));
}

Permutation Permutation::random(int n, Rng& rng) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(pick(rng))]);
  }
  return Permutation(std::move(p));
}

Permutation Permutation::inverse() const {
  std::vector<int> inv(perm_.size());
  for (std::size_t i = 0; i < perm_.size(); ++i) inv[static_cast<std::size_t>(perm_[i])] = static_cast<int>(i);
  return Permutation(std::move(inv));
}

Permutation Permutation::then(const Permutation& other) const {
  if (other.size() != size()) throw std::invalid_argument("Permutation::then: length mismatch");
  std::vector<int> out(perm_.size());
  for (std::size_t i = 0; i < perm_.size(); ++i) out[i] = perm_[static_cast<std::size_t>(other.perm_[i])];
  return Permutation(std::move(out));
}

ProductPose permute(const ProductPose& pose, const Permutation& p) {
  if (static_cast<int>(pose.size()) != p.size()) throw std::invalid_argument("permute: length mismatch");
  ProductPose out;
  out.reserve(pose.size());
  for (int i = 0; i < p.size(); ++i) out.push_back(pose[static_cast<std::size_t>(p[i])]);
  return out;
}

}  // namespace huproso3
