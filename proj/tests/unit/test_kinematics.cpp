#include "huproso3/kinematics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

using namespace huproso3;

namespace {

ProductPose identity_pose(int n) { return ProductPose(static_cast<std::size_t>(n)); }

ProductPose random_pose(Rng& rng, int n) {
  ProductPose p;
  for (int i = 0; i < n; ++i) p.push_back(haar_sample(rng));
  return p;
}

/// Rest positions by summing offsets along each joint's ancestor chain.
Eigen::Vector3d rest_position(const Skeleton& s, int j) {
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  for (int k : s.ancestors(j)) p += s.offset[static_cast<std::size_t>(k)];
  return p;
}

}  // namespace

TEST(Skeleton, DefaultVariants) {
  const Skeleton h = default_skeleton("humanoid-19");
  EXPECT_NO_THROW(h.validate());
  EXPECT_EQ(h.num_rotations(), 19);
  EXPECT_EQ(h.leaf_set.size(), 5u);
  std::set<std::string> leaves;
  for (int l : h.leaf_set) leaves.insert(h.names[static_cast<std::size_t>(l)]);
  EXPECT_EQ(leaves, (std::set<std::string>{"head", "l_wrist", "r_wrist", "l_ankle", "r_ankle"}));
  EXPECT_GT(h.total_length(), 0.0);

  const Skeleton c = default_skeleton("chain-3");
  EXPECT_EQ(c.num_rotations(), 3);
  EXPECT_DOUBLE_EQ(c.total_length(), 3.0);
  EXPECT_THROW(default_skeleton("chain-0"), std::invalid_argument);
  EXPECT_THROW(default_skeleton("spider"), std::invalid_argument);
}

TEST(Skeleton, ValidationRejectsBadTrees) {
  Skeleton s = chain_skeleton(2);
  s.parent[1] = 2;  // child before parent, forms a cycle with 2 -> 1
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = chain_skeleton(2);
  s.parent[0] = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = chain_skeleton(2);
  s.offset[1].x() = std::nan("");
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = chain_skeleton(2);
  for (auto& o : s.offset) o.setZero();
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Skeleton, JsonRoundtrip) {
  const Skeleton h = humanoid_skeleton();
  const Skeleton back = skeleton_from_json(nlohmann::json::parse(skeleton_to_json(h).dump()));
  EXPECT_EQ(back.names, h.names);
  EXPECT_EQ(back.parent, h.parent);
  EXPECT_EQ(back.manifold, h.manifold);
  EXPECT_EQ(back.leaf_set, h.leaf_set);
  for (std::size_t j = 0; j < h.offset.size(); ++j) EXPECT_EQ(back.offset[j], h.offset[j]);
  EXPECT_THROW(skeleton_from_json(nlohmann::json{{"names", {"a"}}}), std::invalid_argument);
}

TEST(ForwardKinematics, RestPoseIsCumulativeOffsets) {
  for (const Skeleton& s : {chain_skeleton(4), humanoid_skeleton()}) {
    const JointPositions p = forward_kinematics(identity_pose(s.num_rotations()), s);
    EXPECT_EQ(p.row(0), Eigen::RowVector3d::Zero());
    for (int j = 0; j < s.num_joints(); ++j) {
      EXPECT_LT((p.row(j).transpose() - rest_position(s, j)).norm(), 1e-15) << s.names[static_cast<std::size_t>(j)];
    }
  }
  const JointPositions c3 = forward_kinematics(identity_pose(3), chain_skeleton(3));
  EXPECT_EQ(c3.row(3), Eigen::RowVector3d(3, 0, 0));
}

TEST(ForwardKinematics, HandComputedChain) {
  ProductPose pose = identity_pose(2);
  pose[1] = Rotation::about_axis(Eigen::Vector3d::UnitZ(), std::numbers::pi / 2);
  const JointPositions p = forward_kinematics(pose, chain_skeleton(2));
  EXPECT_LT((p.row(2) - Eigen::RowVector3d(1, 1, 0)).norm(), 1e-15);
  EXPECT_THROW(forward_kinematics(identity_pose(3), chain_skeleton(2)), std::invalid_argument);
}

TEST(ForwardKinematics, RootPreRotationIsRigid) {
  Rng rng(3);
  const Skeleton s = chain_skeleton(6);
  for (int t = 0; t < 100; ++t) {
    ProductPose pose = random_pose(rng, 6);
    const Rotation q = haar_sample(rng);
    const JointPositions base = forward_kinematics(pose, s);
    pose[0] = Rotation::project(q.matrix() * pose[0].matrix());
    const JointPositions moved = forward_kinematics(pose, s);
    EXPECT_LT((moved - base * q.matrix().transpose()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(ForwardKinematics, RotationAffectsOnlyStrictDescendants) {
  Rng rng(4);
  const Skeleton s = humanoid_skeleton();
  const ProductPose pose = random_pose(rng, s.num_rotations());
  const JointPositions base = forward_kinematics(pose, s);
  for (int j = 0; j < s.num_joints(); ++j) {
    const int m = s.manifold[static_cast<std::size_t>(j)];
    if (m < 0) continue;
    ProductPose bumped = pose;
    bumped[static_cast<std::size_t>(m)] = Rotation::project(haar_sample(rng).matrix() * pose[static_cast<std::size_t>(m)].matrix());
    const JointPositions moved = forward_kinematics(bumped, s);
    const std::vector<int> desc = s.descendants(j);
    for (int k = 0; k < s.num_joints(); ++k) {
      const bool strict = k != j && std::find(desc.begin(), desc.end(), k) != desc.end();
      const double shift = (moved.row(k) - base.row(k)).norm();
      if (strict) {
        EXPECT_GT(shift, 1e-6) << s.names[static_cast<std::size_t>(k)];
      } else {
        EXPECT_EQ(shift, 0.0) << s.names[static_cast<std::size_t>(k)];
      }
    }
  }
}

TEST(ForwardKinematics, BoneLengthsPreserved) {
  Rng rng(5);
  const Skeleton s = humanoid_skeleton();
  for (int t = 0; t < 200; ++t) {
    const JointPositions p = forward_kinematics(random_pose(rng, 19), s);
    for (int j = 1; j < s.num_joints(); ++j) {
      const int par = s.parent[static_cast<std::size_t>(j)];
      EXPECT_NEAR((p.row(j) - p.row(par)).norm(), s.offset[static_cast<std::size_t>(j)].norm(), 1e-9);
    }
  }
}

TEST(Projection, DropsDepth) {
  JointPositions p(2, 3);
  p << 1, 2, 3, -4, 5, 6;
  const auto q = project_2d(p);
  EXPECT_EQ(q.row(0), Eigen::RowVector2d(1, 2));
  JointPositions shifted = p;
  shifted.col(2).array() += 7.5;
  EXPECT_EQ(project_2d(shifted), q);

  const Skeleton h = humanoid_skeleton();
  const auto rest = project_2d(forward_kinematics(identity_pose(19), h));
  for (int j = 0; j < h.num_joints(); ++j) {
    EXPECT_LT((rest.row(j).transpose() - rest_position(h, j).head<2>()).norm(), 1e-15);
  }
}

TEST(JointGroups, NamedGroups) {
  const Skeleton h = humanoid_skeleton();
  const std::vector<int> arm = joint_group(h, "left_arm");
  EXPECT_EQ(arm.size(), 4u);
  for (int j : arm) EXPECT_EQ(h.names[static_cast<std::size_t>(j)].rfind("l_", 0), 0u);
  EXPECT_FALSE(joint_group(h, "right_leg").empty());
  EXPECT_THROW(joint_group(h, "tail"), std::invalid_argument);
}
