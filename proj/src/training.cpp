#include "huproso3/training.hpp"

#include "huproso3/checkpoint.hpp"
#include "huproso3/flow_ops.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

namespace huproso3 {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::none:
      return "none";
    case Modality::keypoints_3d:
      return "keypoints-3d";
    case Modality::keypoints_2d:
      return "keypoints-2d";
  }
  return "none";
}

Modality modality_from_string(const std::string& s) {
  if (s == "none") return Modality::none;
  if (s == "keypoints-3d") return Modality::keypoints_3d;
  if (s == "keypoints-2d") return Modality::keypoints_2d;
  throw std::invalid_argument("unknown modality '" + s + "' (expected none, keypoints-3d or keypoints-2d)");
}

int keypoint_dim(Modality m) { return m == Modality::keypoints_3d ? 3 : m == Modality::keypoints_2d ? 2 : 0; }

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be > 0");
  if (!(decay_factor > 0.0)) throw std::invalid_argument("train config: decay_factor must be > 0");
  if (decay_every < 1) throw std::invalid_argument("train config: decay_every must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("train config: max_steps must be >= 0");
  if (!(mask_probability >= 0.0 && mask_probability <= 1.0)) {
    throw std::invalid_argument("train config: mask_probability must lie in [0, 1]");
  }
  if (checkpoint_every < 0) throw std::invalid_argument("train config: checkpoint_every must be >= 0");
  if (checkpoint_every > 0 && checkpoint_path.empty()) throw std::invalid_argument("train config: checkpoint_path required");
}

double TrainConfig::lr_at(std::int64_t step) const {
  return learning_rate * std::pow(decay_factor, static_cast<double>(step / decay_every));
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"decay_factor", c.decay_factor},
          {"decay_every", c.decay_every},
          {"max_steps", c.max_steps},
          {"mask_probability", c.mask_probability},
          {"seed", c.seed},
          {"modality", to_string(c.modality)},
          {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.decay_every = j.value("decay_every", c.decay_every);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.mask_probability = j.value("mask_probability", c.mask_probability);
    c.seed = j.value("seed", c.seed);
    if (j.contains("modality")) c.modality = modality_from_string(j.at("modality").get<std::string>());
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  return c;
}

Mask sample_mask(Rng& rng, int n, double p_m) {
  if (!(p_m >= 0.0 && p_m <= 1.0)) throw std::invalid_argument("sample_mask: p_m must lie in [0, 1]");
  std::bernoulli_distribution occluded(p_m);
  Mask m;
  m.m.resize(static_cast<std::size_t>(n));
  for (auto& v : m.m) v = occluded(rng) ? 0 : 1;
  return m;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng step_rng(std::uint64_t seed, std::int64_t step) {
  return Rng(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(step)));
}

}  // namespace

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, std::size_t dataset_size, int batch_size) {
  if (dataset_size == 0) throw std::invalid_argument("batch_indices: empty dataset");
  Rng rng = step_rng(seed, step);
  std::vector<std::size_t> idx(dataset_size);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t b = std::min(dataset_size, static_cast<std::size_t>(batch_size));
  for (std::size_t i = 0; i < b; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, dataset_size - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(b);
  return idx;
}

TrainResult train(FlowModel& model, const PoseDataset& data, const Skeleton* skel, const TrainConfig& cfg,
                  std::optional<AdamState> resume, const std::function<void(const TraceRow&)>& on_step) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const FlowConfig& mc = model.config();
  if (data.num_manifolds() != mc.num_manifolds) throw std::invalid_argument("train: dataset and model disagree on N");
  const int k = keypoint_dim(cfg.modality);
  if (mc.conditional() != (k > 0)) throw std::invalid_argument("train: modality does not match the model's conditioning");

  // Keypoints come from FK on the target poses; the dataset's own keypoint
  // section is not used for training.
  Eigen::ArrayXXd keypoints;
  if (k > 0) {
    if (!skel) throw std::invalid_argument("train: conditional modality needs a skeleton");
    if (mc.keypoint_dim != k || mc.num_keypoints != skel->num_joints()) {
      throw std::invalid_argument("train: model keypoint shape does not match skeleton/modality");
    }
    keypoints.resize(static_cast<Eigen::Index>(data.size()), skel->num_joints() * k);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const JointPositions jp = forward_kinematics(data.poses[i], *skel);
      for (int j = 0; j < skel->num_joints(); ++j) {
        for (int d = 0; d < k; ++d) keypoints(static_cast<Eigen::Index>(i), j * k + d) = jp(j, d);
      }
    }
  }

  TrainResult result;
  result.optimizer = resume ? std::move(*resume) : AdamState::zeros_like(model.params());
  if (!result.optimizer.matches(model.params())) throw std::invalid_argument("train: resume state does not match model");

  const int n = mc.num_manifolds;
  for (std::int64_t step = result.optimizer.step; step < cfg.max_steps; ++step) {
    const std::vector<std::size_t> idx = batch_indices(cfg.seed, step, data.size(), cfg.batch_size);
    const auto b = static_cast<Eigen::Index>(idx.size());
    ad::Array batch(b, 9 * n);
    for (Eigen::Index r = 0; r < b; ++r) {
      const ProductPose& pose = data.poses[idx[static_cast<std::size_t>(r)]];
      for (int j = 0; j < n; ++j) {
        const Eigen::Matrix3d& m = pose[static_cast<std::size_t>(j)].matrix();
        batch.block(r, 9 * j, 1, 9) = Eigen::Map<const Eigen::Array<double, 1, 9>>(m.data());
      }
    }
    const double lr = cfg.lr_at(step);
    double loss = 0.0;
    ad::Gradients grads;
    try {
      ad::Tape tape(&model.params());
      ad::Var ctx;
      if (k > 0) {
        Rng mask_rng = step_rng(cfg.seed ^ 0x6d61736bULL, step);
        ad::Array kp(b, keypoints.cols());
        ad::Array masks(b, mc.num_keypoints);
        for (Eigen::Index r = 0; r < b; ++r) {
          kp.row(r) = keypoints.row(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(r)]));
          const Mask m = sample_mask(mask_rng, mc.num_keypoints, cfg.mask_probability);
          for (int j = 0; j < mc.num_keypoints; ++j) masks(r, j) = m.visible(j) ? 1.0 : 0.0;
        }
        ctx = model.encode_context(tape, kp, masks);
      }
      const ad::Var l = model.nll_loss(tape, tape.constant(batch), ctx);
      loss = l.scalar();
      if (!std::isfinite(loss)) throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), step);
      grads = ad::backward(tape, l);
      adam_step(model.params(), grads, result.optimizer, lr);
    } catch (const DivergenceError&) {
      throw;
    } catch (const std::domain_error& e) {
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(step) + ": " + e.what(), step);
    } catch (const std::runtime_error& e) {
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(step) + ": " + e.what(), step);
    }
    const TraceRow row{step, lr, loss};
    result.trace.push_back(row);
    if (on_step) on_step(row);
    const bool last = step + 1 == cfg.max_steps;
    if (cfg.checkpoint_every > 0 && ((step + 1) % cfg.checkpoint_every == 0 || last)) {
      save_checkpoint(cfg.checkpoint_path, model, cfg.checkpoint_meta, &result.optimizer);
    }
  }
  return result;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "step,lr,loss\n" << std::setprecision(17);
  for (const TraceRow& r : trace) out << r.step << ',' << r.lr << ',' << r.loss << '\n';
}

}  // namespace huproso3
