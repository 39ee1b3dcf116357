#pragma once

#include "huproso3/so3.hpp"

#include <Eigen/Dense>

#include <vector>

// Single-rotation reference implementations of the three SO(3) flow layers.
// All log-determinants are taken with respect to the normalized Haar measure.

namespace huproso3 {

/// Radius bound of the Moebius parameter: omega = 0.99 * tanh(|xi|) xi / |xi|.
inline constexpr double kOmegaRadius = 0.99;
/// Bound on each log singular value of the quaternion affine matrix.
inline constexpr double kLogSigmaBound = 5.0;

/// Moebius parameter expressed in the plane_basis chart of the fixed column.
/// `fixed_column` is the 0-based index of the column held fixed (0 or 1); the
/// other of the first two columns moves along the circle.
struct MobiusParams {
  Eigen::Vector2d omega = Eigen::Vector2d::Zero();
  int fixed_column = 0;
};

/// Projects `g_out` onto the plane perpendicular to `x_fixed` and squashes
/// it radially into the disk of radius kOmegaRadius.
MobiusParams build_omega(const Eigen::Vector3d& g_out, const Eigen::Vector3d& x_fixed, int fixed_column = 0);

/// omega embedded back into R^3 (perpendicular to `x_fixed`).
Eigen::Vector3d omega_vector(const MobiusParams& p, const Eigen::Vector3d& x_fixed);

struct CircleMapResult {
  Eigen::Vector3d point;
  double logdet;
};

/// Moebius map h_omega(y) = (1 - |w|^2)/|y - w|^2 (y - w) - w on the unit
/// circle perpendicular to `x_fixed`. Throws std::invalid_argument when
/// |omega| >= 1 or when `x_move` is not perpendicular to `x_fixed`.
CircleMapResult mobius_circle(const Eigen::Vector3d& x_move, const Eigen::Vector3d& x_fixed, const MobiusParams& p);

struct LayerResult {
  Rotation rotation;
  double logdet;
};

/// Moebius coupling: keeps column `fixed_column`, moves the other of the
/// first two columns along its circle, rebuilds the third by cross product.
LayerResult coupling_forward(const Rotation& r, const Eigen::Vector3d& cond_net_output, int fixed_column = 0);
LayerResult coupling_inverse(const Rotation& r, const Eigen::Vector3d& cond_net_output, int fixed_column = 0);

/// W = U diag(exp(log_sigma)) V^T with U = L(u_left) R(u_right) and
/// V = L(v_left) R(v_right), where L/R are left/right quaternion
/// multiplication matrices, so det U = det V = 1.
struct QuatAffineParams {
  UnitQuaternion u_left, u_right, v_left, v_right;
  Eigen::Vector4d log_sigma = Eigen::Vector4d::Zero();

  static QuatAffineParams identity() { return {}; }

  /// Maps 16 unconstrained reals to parameters: each unit quaternion is
  /// normalize(1, v) for a 3-vector v, and log_sigma = 5 tanh(raw / 5).
  /// The zero vector maps to the identity.
  static QuatAffineParams from_raw(const Eigen::Matrix<double, 16, 1>& raw);

  Eigen::Matrix4d matrix() const;
  Eigen::Matrix4d inverse_matrix() const;
};

/// Left (a * q) and right (q * b) quaternion multiplication matrices.
Eigen::Matrix4d left_mult_matrix(const Eigen::Vector4d& a);
Eigen::Matrix4d right_mult_matrix(const Eigen::Vector4d& b);

/// q' = canon(W q / |W q|), logdet = sum(log_sigma) - 4 log(|W q| / |q|).
LayerResult quat_affine_forward(const Rotation& r, const QuatAffineParams& p);
LayerResult quat_affine_inverse(const Rotation& r, const QuatAffineParams& p);

/// Bijection on {0, ..., n-1}; applying it to a sequence s gives
/// out[i] = s[perm[i]].
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<int> perm);

  static Permutation identity(int n);
  static Permutation random(int n, Rng& rng);

  int size() const { return static_cast<int>(perm_.size()); }
  int operator[](int i) const { return perm_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& indices() const { return perm_; }

  Permutation inverse() const;
  /// Applying then(other) equals applying *this and then `other`.
  Permutation then(const Permutation& other) const;

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<int> perm_;
};

/// Reorders a pose; volume preserving (logdet 0). Throws on length mismatch.
ProductPose permute(const ProductPose& pose, const Permutation& p);

}  // namespace huproso3
