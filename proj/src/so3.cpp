#include "huproso3/so3.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace huproso3 {

bool is_rotation(const Eigen::Matrix3d& m, double tol) {
  if (!m.allFinite()) return false;
  const double ortho = (m.transpose() * m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(m.determinant() - 1.0) <= tol;
}

Rotation Rotation::project(const Eigen::Matrix3d& m) {
  if (!m.allFinite()) throw std::invalid_argument("Rotation::project: non-finite matrix");
  if (m.determinant() <= 0.0) {
    throw std::invalid_argument("Rotation::project: matrix is singular or a reflection");
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return Rotation(svd.matrixU() * svd.matrixV().transpose());
}

Rotation Rotation::from_orthonormal(const Eigen::Matrix3d& m, double tol) {
  if (!is_rotation(m, tol)) {
    throw std::invalid_argument("Rotation::from_orthonormal: matrix is not in SO(3)");
  }
  return Rotation(m);
}

Rotation Rotation::about_axis(const Eigen::Vector3d& axis, double angle) {
  const double n = axis.norm();
  if (!(n > 0.0)) throw std::invalid_argument("Rotation::about_axis: zero axis");
  return Rotation(Eigen::AngleAxisd(angle, axis / n).toRotationMatrix());
}

Rotation Rotation::transpose() const { return Rotation(m_.transpose()); }

namespace {

// Same value as acos(clamp((tr - 1) / 2)) but accurate near 0 and pi, where
// acos loses about half the significant digits.
double rotation_angle(const Eigen::Matrix3d& m) {
  const double c = std::clamp((m.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double s = 0.5 * Eigen::Vector3d(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)).norm();
  return std::atan2(s, c);
}

}  // namespace

double Rotation::angle() const { return rotation_angle(m_); }

Rotation operator*(const Rotation& a, const Rotation& b) { return Rotation(a.m_ * b.m_); }

Eigen::Vector4d canonicalize_sign(const Eigen::Vector4d& q) {
  for (int i = 0; i < 4; ++i) {
    if (q[i] > 0.0) return q;
    if (q[i] < 0.0) return -q;
  }
  return q;
}

UnitQuaternion UnitQuaternion::from_vector(const Eigen::Vector4d& q, double tol) {
  const double n = q.norm();
  if (!std::isfinite(n) || n == 0.0 || std::abs(n - 1.0) > tol) {
    throw std::invalid_argument("UnitQuaternion: input is not a unit quaternion");
  }
  return UnitQuaternion(canonicalize_sign(q / n));
}

Eigen::Vector4d quat_multiply(const Eigen::Vector4d& a, const Eigen::Vector4d& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

Eigen::Vector4d matrix_to_quat_coeffs(const Eigen::Matrix3d& m) {
  // Shepperd's method: pivot on the largest of (trace, m00, m11, m22).
  const double tr = m.trace();
  Eigen::Vector4d q;
  if (tr >= m(0, 0) && tr >= m(1, 1) && tr >= m(2, 2)) {
    const double s = std::sqrt(1.0 + tr) * 2.0;
    q << 0.25 * s, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s, (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2)) {
    const double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    q << (m(2, 1) - m(1, 2)) / s, 0.25 * s, (m(0, 1) + m(1, 0)) / s, (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) >= m(2, 2)) {
    const double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    q << (m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, 0.25 * s, (m(1, 2) + m(2, 1)) / s;
  } else {
    const double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    q << (m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s, (m(1, 2) + m(2, 1)) / s, 0.25 * s;
  }
  return canonicalize_sign(q);
}

Eigen::Matrix3d quat_coeffs_to_matrix(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix3d m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return m;
}

UnitQuaternion matrix_to_quat(const Rotation& r) {
  return UnitQuaternion::from_vector(matrix_to_quat_coeffs(r.matrix()), 1e-6);
}

Rotation quat_to_matrix(const UnitQuaternion& q) {
  return Rotation::from_orthonormal(quat_coeffs_to_matrix(q.coeffs()));
}

Rotation sixd_to_matrix(const SixD& s) {
  const double na = s.a.norm();
  if (!(na > 1e-12)) throw std::invalid_argument("degenerate 6D input");
  const Eigen::Vector3d x1 = s.a / na;
  const Eigen::Vector3d b_perp = s.b - x1 * x1.dot(s.b);
  const double nb = b_perp.norm();
  if (!(nb > 1e-12 * std::max(1.0, s.b.norm()))) throw std::invalid_argument("degenerate 6D input");
  const Eigen::Vector3d x2 = b_perp / nb;
  Eigen::Matrix3d m;
  m.col(0) = x1;
  m.col(1) = x2;
  m.col(2) = x1.cross(x2);
  return Rotation::from_orthonormal(m);
}

SixD matrix_to_sixd(const Rotation& r) { return {r.column(0), r.column(1)}; }

UnitQuaternion haar_quaternion(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Vector4d g;
  double n = 0.0;
  do {
    for (int i = 0; i < 4; ++i) g[i] = normal(rng);
    n = g.norm();
  } while (n < 1e-12);
  return UnitQuaternion::from_vector(g / n);
}

Rotation haar_sample(Rng& rng) { return quat_to_matrix(haar_quaternion(rng)); }

double geodesic_distance(const Rotation& r1, const Rotation& r2) {
  return rotation_angle(r1.matrix().transpose() * r2.matrix());
}

Rotation average_rotations(std::span<const Rotation> rs) {
  if (rs.empty()) throw std::invalid_argument("average_rotations: empty list");
  Eigen::Matrix4d acc = Eigen::Matrix4d::Zero();
  for (const auto& r : rs) {
    const Eigen::Vector4d q = matrix_to_quat(r).coeffs();
    acc += q * q.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(acc);
  // Eigenvalues are sorted ascending.
  return quat_to_matrix(UnitQuaternion::from_vector(eig.eigenvectors().col(3), 1e-6));
}

PlaneBasis plane_basis(const Eigen::Vector3d& n) {
  if (!n.allFinite() || std::abs(n.norm() - 1.0) > 1e-9) {
    throw std::invalid_argument("plane_basis: normal must be a unit vector");
  }
  int k = 0;
  for (int i = 1; i < 3; ++i) {
    if (std::abs(n[i]) > std::abs(n[k])) k = i;
  }
  Eigen::Vector3d a = Eigen::Vector3d::Zero();
  a[(k + 1) % 3] = 1.0;
  const Eigen::Vector3d e1 = (a - n * n.dot(a)).normalized();
  return {e1, n.cross(e1)};
}

}  // namespace huproso3
