#pragma once

#include "huproso3/so3.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace huproso3 {

/// J x 3 joint positions.
using JointPositions = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Kinematic tree. Joint 0 is the root and sits at the origin. A joint either
/// carries a rotation from the pose (its manifold index) or is rigidly
/// attached to its parent.
struct Skeleton {
  std::vector<std::string> names;
  std::vector<int> parent;                // -1 for the root
  std::vector<Eigen::Vector3d> offset;    // rest-pose offset in the parent frame
  std::vector<int> manifold;              // pose index, or -1 for a non-rotating joint
  std::vector<int> leaf_set;              // joints visible in the five-point protocol

  int num_joints() const { return static_cast<int>(parent.size()); }
  int num_rotations() const;
  /// Sum of all bone lengths.
  double total_length() const;
  int index_of(const std::string& name) const;
  /// Joints whose subtree contains j (j included), root first.
  std::vector<int> ancestors(int j) const;
  std::vector<int> descendants(int j) const;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

/// "chain-N" or "humanoid-19".
Skeleton default_skeleton(const std::string& variant);
Skeleton chain_skeleton(int bones);
Skeleton humanoid_skeleton();

nlohmann::json skeleton_to_json(const Skeleton& s);
Skeleton skeleton_from_json(const nlohmann::json& j);

JointPositions forward_kinematics(const ProductPose& pose, const Skeleton& skel);
/// Orthographic projection onto the first two coordinates.
Eigen::Matrix<double, Eigen::Dynamic, 2> project_2d(const JointPositions& jp);

/// Named joint groups for occlusion experiments ("left_arm", "right_leg", ...).
std::vector<int> joint_group(const Skeleton& skel, const std::string& group);

}  // namespace huproso3
