#pragma once

#include "huproso3/kinematics.hpp"
#include "huproso3/so3.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace huproso3 {

/// Mixture of uniform geodesic balls on SO(3)^N. The component index of
/// joint i is drawn from a Markov chain over joints: joint 0 from `initial`,
/// joint i from row c_{i-1} of `transition`.
struct SyntheticPriorSpec {
  int num_joints = 0;
  int num_components = 0;
  std::vector<std::vector<Rotation>> modes;  // [joint][component]
  std::vector<std::vector<double>> radii;    // [joint][component], in (0, pi]
  Eigen::MatrixXd transition;                // K x K, rows sum to 1
  Eigen::VectorXd initial;                   // K, sums to 1

  void validate() const;
  /// FNV-1a digest of the canonical JSON form.
  std::uint64_t digest() const;
};

nlohmann::json prior_spec_to_json(const SyntheticPriorSpec& s);
SyntheticPriorSpec prior_spec_from_json(const nlohmann::json& j);

struct RandomSpecOptions {
  double radius_min = 0.4;
  double radius_max = 0.8;
  /// Modes are drawn with rotation angles up to this bound.
  double mode_angle = 1.2;
  /// Probability of keeping the previous joint's component.
  double stickiness = 0.85;
};

/// Random spec with Markov-coupled components, reproducible from `seed`.
SyntheticPriorSpec random_prior_spec(int num_joints, int num_components, std::uint64_t seed,
                                     const RandomSpecOptions& opts = {});

/// Haar mass of a geodesic ball of radius r: (r - sin r) / pi.
double ball_volume(double r);

/// Rotation angle in [0, r] with density proportional to 1 - cos(theta).
double sample_ball_angle(Rng& rng, double r);

struct PoseDataset {
  std::vector<ProductPose> poses;
  std::vector<double> log_density;         // empty or one per pose
  std::vector<Eigen::MatrixXd> keypoints;  // empty or one J x k matrix per pose
  std::vector<std::vector<std::uint8_t>> masks;  // empty or one length-J mask per pose
  std::uint64_t seed = 0;
  std::uint64_t spec_digest = 0;

  std::size_t size() const { return poses.size(); }
  int num_manifolds() const { return poses.empty() ? 0 : static_cast<int>(poses.front().size()); }
  void validate() const;
};

PoseDataset generate(const SyntheticPriorSpec& spec, int n, std::uint64_t seed);

/// Exact log-density with respect to normalized Haar^N; -inf outside the support.
double oracle_log_prob(const SyntheticPriorSpec& spec, const ProductPose& pose);

/// Fills `keypoints` with FK joint positions (k = 3) or their projection (k = 2).
void attach_keypoints(PoseDataset& ds, const Skeleton& skel, int keypoint_dim);

// Dataset file layout (little-endian):
//   "HPSO3DS\0" | u32 version | u32 N | u32 J | u32 k | u64 count | u32 flags |
//   u64 seed | u64 spec digest | records | u64 FNV-1a of all preceding bytes.
// Each record holds N rotation matrices as 9 column-major float64, then the
// log-density (flag 1), J*k keypoint coordinates row-major (flag 2) and J
// mask bytes (flag 4) when present.
inline constexpr std::uint32_t kDatasetVersion = 1;

std::string serialize_dataset(const PoseDataset& ds);
PoseDataset deserialize_dataset(std::string_view bytes, std::optional<std::uint64_t> expected_digest = std::nullopt);
void write_dataset(const PoseDataset& ds, const std::string& path);
PoseDataset read_dataset(const std::string& path, std::optional<std::uint64_t> expected_digest = std::nullopt);

}  // namespace huproso3
