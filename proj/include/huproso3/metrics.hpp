#pragma once

#include "huproso3/flow.hpp"
#include "huproso3/kinematics.hpp"
#include "huproso3/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace huproso3 {

struct EvalReport {
  std::string name;
  double mean = 0.0;
  double median = 0.0;
  std::vector<double> values;
  std::uint64_t config_digest = 0;

  static EvalReport from_values(std::string name, std::vector<double> values, std::uint64_t digest = 0);
};

double mgeo(const ProductPose& a, const ProductPose& b);
double sum_geo(const ProductPose& a, const ProductPose& b);
/// Mean joint-position error over all non-root joints.
double mpjpe(const ProductPose& a, const ProductPose& b, const Skeleton& skel);
double mpjpe(const JointPositions& a, const JointPositions& b);

enum class PoseDistance { sum_geo, mpjpe };

struct PrecisionRecall {
  EvalReport precision;  // model sample -> nearest data sample
  EvalReport recall;     // data sample -> nearest model sample
};

/// Exact nearest-neighbour precision and recall.
PrecisionRecall precision_recall(const std::vector<ProductPose>& model_samples, const std::vector<ProductPose>& data_samples,
                                 PoseDistance distance, const Skeleton* skel = nullptr);

/// Fraction of values <= each threshold.
std::vector<std::pair<double, double>> threshold_curve(const std::vector<double>& values, const std::vector<double>& thresholds);

/// Mean over the joint subset of the mean distance of each sample's FK
/// position to the sample-mean position.
double diversity(const std::vector<ProductPose>& samples, const Skeleton& skel, const std::vector<int>& subset);
double diversity(const std::vector<JointPositions>& positions, const std::vector<int>& subset);

/// det(Sxy) / sqrt(det(Sxx) det(Syy)) with S the 4x4 sample second moments.
/// The raw-vector form keeps whatever signs the caller chose; the
/// UnitQuaternion form uses canonical signs.
double spherical_correlation(const std::vector<Eigen::Vector4d>& x, const std::vector<Eigen::Vector4d>& y);
double spherical_correlation(const std::vector<UnitQuaternion>& x, const std::vector<UnitQuaternion>& y);

/// sum_i m_i |gt_i - pred_i|.
double ik_loss(const JointPositions& gt, const JointPositions& pred, const Mask& mask);

struct McEstimate {
  double estimate;
  double stderr_;
};

/// Mean and standard error of exp(log_prob) under Haar^N samples.
McEstimate mc_normalization(const FlowModel& model, const std::optional<Context>& ctx, int n_samples, std::uint64_t seed);

/// Draws poses given keypoints and a mask. Implemented by the flow and by
/// test doubles.
class ConditionalSampler {
 public:
  virtual ~ConditionalSampler() = default;
  virtual int keypoint_dim() const = 0;
  virtual std::vector<ProductPose> sample(Rng& rng, const Eigen::MatrixXd& keypoints, const Mask& mask, int count) const = 0;
};

class FlowSampler : public ConditionalSampler {
 public:
  explicit FlowSampler(const FlowModel& model) : model_(model) {}
  int keypoint_dim() const override { return model_.config().keypoint_dim; }
  std::vector<ProductPose> sample(Rng& rng, const Eigen::MatrixXd& keypoints, const Mask& mask, int count) const override;

 private:
  const FlowModel& model_;
};

enum class Protocol { ik, masked_ik, five_point, uplift };
std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct ConditionalEvalOptions {
  Protocol protocol = Protocol::ik;
  int n_samples = 1;
  /// Samples drawn per pose for the diversity statistics (0 disables them).
  int diversity_samples = 10;
  /// masked-ik: occlude this named joint group; if empty, mask randomly with p_m.
  std::string occlusion_group;
  double mask_probability = 0.3;
  std::uint64_t seed = 0;
  /// Evaluate at most this many poses (0 = all).
  int max_poses = 0;
};

struct ConditionalReport {
  EvalReport mgeo;
  EvalReport mpjpe;
  EvalReport ik_loss;
  /// Per-pose diversity over visible and occluded joints; empty when no
  /// joints fall in the group.
  EvalReport diversity_visible;
  EvalReport diversity_occluded;
  /// Joints hidden from the sampler (fixed-mask protocols only).
  std::vector<int> occluded_joints;
};

ConditionalReport eval_conditional(const ConditionalSampler& sampler, const PoseDataset& data, const Skeleton& skel,
                                   const ConditionalEvalOptions& opts);

nlohmann::json report_summary(const EvalReport& r);
/// One row per sample index, one column per report.
void write_reports_csv(const std::vector<EvalReport>& reports, const std::string& path);
void write_curve_csv(const std::vector<std::pair<double, double>>& curve, const std::string& path);

}  // namespace huproso3
