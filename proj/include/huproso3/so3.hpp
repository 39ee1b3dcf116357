#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace huproso3 {

/// Seeded generator used across the library. 64-bit Mersenne twister so that
/// a (seed, call sequence) pair fully determines every random draw.
using Rng = std::mt19937_64;

/// Element of SO(3), stored as a 3x3 matrix whose columns are the rotated
/// basis vectors x1 | x2 | x3.
class Rotation {
 public:
  Rotation() : m_(Eigen::Matrix3d::Identity()) {}

  /// Projects an arbitrary near-rotation onto SO(3) (polar decomposition).
  /// Throws std::invalid_argument if the input is singular or reflecting.
  static Rotation project(const Eigen::Matrix3d& m);

  /// Wraps a matrix that is already orthonormal with det 1; bits are kept
  /// unchanged. Throws if the invariants are violated beyond `tol`.
  static Rotation from_orthonormal(const Eigen::Matrix3d& m, double tol = 1e-9);

  /// Rotation by `angle` radians about `axis` (normalized internally).
  static Rotation about_axis(const Eigen::Vector3d& axis, double angle);

  const Eigen::Matrix3d& matrix() const { return m_; }
  Eigen::Vector3d column(int c) const { return m_.col(c); }
  Rotation transpose() const;
  double angle() const;

  friend Rotation operator*(const Rotation& a, const Rotation& b);

 private:
  explicit Rotation(const Eigen::Matrix3d& m) : m_(m) {}
  Eigen::Matrix3d m_;
};

/// Ordered tuple of joint rotations, one per SO(3) factor of the product space.
using ProductPose = std::vector<Rotation>;

/// Unit quaternion (w, x, y, z) in canonical form: w >= 0, and when w == 0
/// the first nonzero component is positive.
class UnitQuaternion {
 public:
  UnitQuaternion() : q_(1.0, 0.0, 0.0, 0.0) {}

  /// Normalizes `q` and canonicalizes the sign. Rejects inputs whose norm
  /// deviates from one by more than `tol` (pass a large tol to normalize
  /// arbitrary nonzero vectors).
  static UnitQuaternion from_vector(const Eigen::Vector4d& q, double tol = 1e-6);

  const Eigen::Vector4d& coeffs() const { return q_; }
  double w() const { return q_[0]; }
  double x() const { return q_[1]; }
  double y() const { return q_[2]; }
  double z() const { return q_[3]; }

 private:
  explicit UnitQuaternion(const Eigen::Vector4d& q) : q_(q) {}
  Eigen::Vector4d q_;
};

/// Continuous 6D representation: the first two columns of a rotation.
struct SixD {
  Eigen::Vector3d a;
  Eigen::Vector3d b;
};

/// Orthonormal basis (e1, e2) of the plane perpendicular to a unit normal n,
/// with (e1, e2, n) right-handed.
struct PlaneBasis {
  Eigen::Vector3d e1;
  Eigen::Vector3d e2;
};

/// Flips the sign of `q` into canonical form (no normalization).
Eigen::Vector4d canonicalize_sign(const Eigen::Vector4d& q);

/// Hamilton product a * b with (w, x, y, z) ordering.
Eigen::Vector4d quat_multiply(const Eigen::Vector4d& a, const Eigen::Vector4d& b);

UnitQuaternion matrix_to_quat(const Rotation& r);
Rotation quat_to_matrix(const UnitQuaternion& q);

/// Raw (non-canonicalized) conversion used by the flow layers; returns a
/// quaternion with w >= 0 up to the tie rule.
Eigen::Vector4d matrix_to_quat_coeffs(const Eigen::Matrix3d& m);
Eigen::Matrix3d quat_coeffs_to_matrix(const Eigen::Vector4d& q);

/// Gram-Schmidt map. Throws std::invalid_argument("degenerate 6D input").
Rotation sixd_to_matrix(const SixD& s);
SixD matrix_to_sixd(const Rotation& r);

/// Haar-uniform rotation from a normalized 4D Gaussian.
Rotation haar_sample(Rng& rng);
UnitQuaternion haar_quaternion(Rng& rng);

/// Rotation angle of r1^T r2, in [0, pi].
double geodesic_distance(const Rotation& r1, const Rotation& r2);

/// Chordal L2 mean: principal eigenvector of sum_i q_i q_i^T.
/// Throws std::invalid_argument on an empty list.
Rotation average_rotations(std::span<const Rotation> rs);

/// Deterministic basis of the plane perpendicular to unit `n`.
/// Throws std::invalid_argument if |n| deviates from 1 by more than 1e-9.
PlaneBasis plane_basis(const Eigen::Vector3d& n);

/// True if m^T m = I and det m = 1 within `tol`.
bool is_rotation(const Eigen::Matrix3d& m, double tol = 1e-9);

}  // namespace huproso3
