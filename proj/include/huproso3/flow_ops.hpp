#pragma once

#include "huproso3/autodiff.hpp"
#include "huproso3/so3.hpp"

#include <span>

// Batched, differentiable versions of the SO(3) flow layers.
//
// A batch of rotations is a B x 9 array with the matrix columns stacked:
// cols [0,3) = x1, [3,6) = x2, [6,9) = x3. Quaternions are B x 4 (w, x, y, z).

namespace huproso3::taped {

/// Result of a layer on a batch: rotated batch (B x 9) and per-row logdet (B x 1).
struct LayerOut {
  ad::Var rot;
  ad::Var logdet;
};

/// Affine parameters per row, each B x 4.
struct AffineVars {
  ad::Var u_left, u_right, v_left, v_right, log_sigma;
};

ad::Array rotations_to_array(std::span<const Rotation> rs);
Rotation array_row_to_rotation(const ad::Array& a, Eigen::Index row);

ad::Var column(ad::Var rot, int c);
/// 6D features (first two columns), B x 6.
ad::Var sixd(ad::Var rot);

/// Canonical quaternions of a batch of rotations (Shepperd pivoting).
ad::Var mat_to_quat(ad::Var rot);
/// Rotation matrices of unit quaternions.
ad::Var quat_to_mat(ad::Var q);
/// Row-wise sign flip into canonical form; the sign is treated as constant.
ad::Var canonicalize(ad::Var q);
/// omega = 0.99 tanh(|xi|) xi / |xi|, smooth at xi = 0.
ad::Var radial_squash(ad::Var xi);

/// Moebius parameter from a conditioner output g (B x 3) and the fixed
/// column n (B x 3): squash(g - n (n . g)).
ad::Var omega_from_conditioner(ad::Var g, ad::Var n);

/// Moebius coupling on a batch. With `inverse` the map h_{-omega} is used.
LayerOut coupling(ad::Var rot, ad::Var g, int fixed_column, bool inverse);

/// Maps a raw B x 16 conditioner output onto affine parameters.
AffineVars affine_from_raw(ad::Var raw);

/// Quaternion affine sphere map on a batch of rotations.
LayerOut quat_affine(ad::Var rot, const AffineVars& p, bool inverse);

}  // namespace huproso3::taped
