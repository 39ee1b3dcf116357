#pragma once

#include "huproso3/flow.hpp"
#include "huproso3/kinematics.hpp"
#include "huproso3/optimizer.hpp"
#include "huproso3/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace huproso3 {

enum class Modality { none, keypoints_3d, keypoints_2d };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);
/// Keypoint dimension for a modality (0 for none).
int keypoint_dim(Modality m);

struct TrainConfig {
  int batch_size = 1000;
  double learning_rate = 5e-3;
  double decay_factor = 0.5;
  int decay_every = 2000;
  int max_steps = 10000;
  double mask_probability = 0.0;
  std::uint64_t seed = 0;
  Modality modality = Modality::none;
  /// Write a checkpoint every this many steps (0 disables) to checkpoint_path.
  int checkpoint_every = 0;
  std::string checkpoint_path;
  /// Extra metadata stored in every checkpoint.
  nlohmann::json checkpoint_meta = nlohmann::json::object();

  void validate() const;
  double lr_at(std::int64_t step) const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
/// Starts from `base` and overrides the keys present in `j`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct TraceRow {
  std::int64_t step;
  double lr;
  double loss;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  AdamState optimizer;
};

/// Raised when the loss or a gradient stops being finite. The model holds
/// the parameters from before the failing step.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::int64_t step) : std::runtime_error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

/// Each entry independently 0 (occluded) with probability p_m.
Mask sample_mask(Rng& rng, int n, double p_m);

/// Batch indices for a step; a pure function of (seed, step) so resumed runs
/// see the same data order.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, std::size_t dataset_size, int batch_size);

/// Runs steps [state.step, cfg.max_steps). Pass a resumed optimizer state to
/// continue a run; the step counter and lr schedule carry over.
TrainResult train(FlowModel& model, const PoseDataset& data, const Skeleton* skel, const TrainConfig& cfg,
                  std::optional<AdamState> resume = std::nullopt,
                  const std::function<void(const TraceRow&)>& on_step = nullptr);

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path);

}  // namespace huproso3
