// huproso3 command-line tool: gen-data, train, sample, logprob, eval, check.

#include "huproso3/binary_io.hpp"
#include "huproso3/checkpoint.hpp"
#include "huproso3/flow.hpp"
#include "huproso3/kinematics.hpp"
#include "huproso3/metrics.hpp"
#include "huproso3/synthetic.hpp"
#include "huproso3/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace huproso3;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2, kDiagnostic = 3 };

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

/// Options of one subcommand. Values come from flags first, then the
/// --config document, then the built-in defaults.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON document with settings (flags win)");
    app_->add_option("--out-dir", out_dir_, "Output directory (default: $HUPROSO3_OUT_DIR or .)");
  }

  template <class T>
  void add(const std::string& key, T& var, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + dashed(key), var, help)->capture_default_str();
    entries_.push_back({key, opt, [&var, key](const json& j) {
                          try {
                            var = j.get<T>();
                          } catch (const json::exception&) {
                            throw ConfigError("config key '" + key + "' has the wrong type");
                          }
                        },
                        [&var]() { return json(var); }});
  }

  /// Merges the config document and fixes the output directory.
  void resolve() {
    if (!config_path_.empty()) {
      json doc;
      try {
        doc = json::parse(io::read_file(config_path_));
      } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse config '" + config_path_ + "': " + e.what());
      } catch (const std::runtime_error& e) {
        throw ConfigError(e.what());
      }
      if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
      for (const auto& [key, value] : doc.items()) {
        if (key == "out_dir") {
          if (out_dir_.empty()) out_dir_ = value.get<std::string>();
          continue;
        }
        auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.key == key; });
        if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
        if (it->opt->count() == 0) it->set(value);
      }
    }
    if (out_dir_.empty()) {
      const char* env = std::getenv("HUPROSO3_OUT_DIR");
      out_dir_ = env && *env ? env : ".";
    }
    fs::create_directories(out_dir_);
  }

  /// Resolved settings, without the output directory so runs in different
  /// directories produce identical files.
  json resolved() const {
    json j = json::object();
    for (const Entry& e : entries_) j[e.key] = e.get();
    return j;
  }

  fs::path out(const std::string& name) const {
    const fs::path p(name);
    return p.is_absolute() ? p : fs::path(out_dir_) / p;
  }

  void echo(const std::string& command) const {
    json j = resolved();
    j["command"] = command;
    io::write_file_atomic(out(command + "_config.json").string(), j.dump(2) + "\n");
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<void(const json&)> set;
    std::function<json()> get;
  };
  CLI::App* app_;
  std::string config_path_;
  std::string out_dir_;
  std::vector<Entry> entries_;
};

json read_json(const std::string& path) {
  try {
    return json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse '" + path + "': " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
}

/// Variant name ("humanoid-19", "chain-N") or a JSON skeleton document.
Skeleton load_skeleton(const std::string& spec) {
  if (spec == "humanoid-19" || spec.rfind("chain-", 0) == 0) return default_skeleton(spec);
  return skeleton_from_json(read_json(spec));
}

Modality modality_from_cli(const std::string& s) {
  if (s == "prior") return Modality::none;
  if (s == "ik") return Modality::keypoints_3d;
  if (s == "uplift") return Modality::keypoints_2d;
  throw ConfigError("unknown modality '" + s + "' (expected prior, ik or uplift)");
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Skeleton stored with a checkpoint, else the given fallback.
Skeleton checkpoint_skeleton(const LoadedCheckpoint& ck, const std::string& fallback) {
  if (!fallback.empty()) return load_skeleton(fallback);
  if (ck.meta.contains("skeleton")) return skeleton_from_json(ck.meta.at("skeleton"));
  return humanoid_skeleton();
}

/// Keypoints and mask from a context document {"keypoints": [[..]..], "mask": [..]}.
std::pair<Eigen::MatrixXd, Mask> read_context(const std::string& path, const FlowConfig& cfg) {
  const json doc = read_json(path);
  if (!doc.contains("keypoints")) throw ConfigError("context document needs a 'keypoints' array");
  const auto rows = doc.at("keypoints").get<std::vector<std::vector<double>>>();
  if (static_cast<int>(rows.size()) != cfg.num_keypoints) {
    throw ConfigError("context has " + std::to_string(rows.size()) + " keypoints, model expects " +
                      std::to_string(cfg.num_keypoints));
  }
  Eigen::MatrixXd kp(cfg.num_keypoints, cfg.keypoint_dim);
  for (int j = 0; j < cfg.num_keypoints; ++j) {
    if (static_cast<int>(rows[static_cast<std::size_t>(j)].size()) != cfg.keypoint_dim) {
      throw ConfigError("context keypoints must have dimension " + std::to_string(cfg.keypoint_dim));
    }
    for (int d = 0; d < cfg.keypoint_dim; ++d) kp(j, d) = rows[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
  }
  Mask mask = Mask::all(cfg.num_keypoints, true);
  if (doc.contains("mask")) {
    const auto m = doc.at("mask").get<std::vector<int>>();
    if (static_cast<int>(m.size()) != cfg.num_keypoints) throw ConfigError("context mask length mismatch");
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (m[j] != 0 && m[j] != 1) throw ConfigError("context mask entries must be 0 or 1");
      mask.m[j] = static_cast<std::uint8_t>(m[j]);
    }
  }
  return {kp, mask};
}

// gen-data ------------------------------------------------------------------

struct GenData {
  std::string spec;
  int joints = 3;
  int components = 2;
  std::uint64_t spec_seed = 0;
  double radius_min = RandomSpecOptions{}.radius_min;
  double radius_max = RandomSpecOptions{}.radius_max;
  int n = 10000;
  std::uint64_t seed = 0;
  std::string skeleton;
  int keypoint_dim = 0;
  std::string out = "data.bin";

  void bind(Settings& s) {
    s.add("spec", spec, "Prior spec document (JSON); a random spec is drawn when empty");
    s.add("joints", joints, "Joints of the random spec");
    s.add("components", components, "Components of the random spec");
    s.add("spec_seed", spec_seed, "Seed of the random spec");
    s.add("radius_min", radius_min, "Smallest ball radius of the random spec");
    s.add("radius_max", radius_max, "Largest ball radius of the random spec");
    s.add("n", n, "Number of poses");
    s.add("seed", seed, "Sampling seed");
    s.add("skeleton", skeleton, "Skeleton for the keypoint section (variant or JSON file)");
    s.add("keypoint_dim", keypoint_dim, "Attach FK keypoints of this dimension (0, 2 or 3)");
    s.add("out", out, "Dataset file name");
  }

  int run(const Settings& s) const {
    if (n < 1) throw ConfigError("gen-data: n must be >= 1");
    SyntheticPriorSpec prior;
    if (spec.empty()) {
      prior = random_prior_spec(joints, components, spec_seed, {.radius_min = radius_min, .radius_max = radius_max});
    } else {
      prior = prior_spec_from_json(read_json(spec));
    }
    PoseDataset ds = generate(prior, n, seed);
    if (keypoint_dim != 0) {
      if (skeleton.empty()) throw ConfigError("gen-data: keypoints need --skeleton");
      attach_keypoints(ds, load_skeleton(skeleton), keypoint_dim);
    }
    s.echo("gen-data");
    io::write_file_atomic(s.out("spec.json").string(), prior_spec_to_json(prior).dump(2) + "\n");
    write_dataset(ds, s.out(out).string());
    double mean = 0.0;
    for (double v : ds.log_density) mean += v;
    mean /= static_cast<double>(ds.size());
    std::cout << json{{"n", ds.size()}, {"N", ds.num_manifolds()}, {"mean_oracle_log_density", mean},
                      {"spec_digest", hex(ds.spec_digest)}, {"file", s.out(out).string()}}
                     .dump()
              << "\n";
    return kOk;
  }
};

// train ---------------------------------------------------------------------

struct Train {
  std::string data;
  std::string modality = "prior";
  std::string skeleton = "humanoid-19";
  int steps = 10000;
  int batch_size = 1000;
  double learning_rate = 5e-3;
  double decay_factor = 0.5;
  int decay_every = 2000;
  double mask_probability = 0.0;
  std::uint64_t seed = 0;
  int blocks = 12;
  int hidden_width = 16;
  int hidden_layers = 3;
  int context_dim = 64;
  int encoder_width = 64;
  std::uint64_t model_seed = 0;
  std::string resume;
  int checkpoint_every = 0;
  std::string checkpoint = "model.ckpt";
  std::string trace = "trace.csv";

  void bind(Settings& s) {
    s.add("data", data, "Training dataset");
    s.add("modality", modality, "prior, ik (3D keypoints) or uplift (2D keypoints)");
    s.add("skeleton", skeleton, "Skeleton for keypoint modalities (variant or JSON file)");
    s.add("steps", steps, "Total optimizer steps");
    s.add("batch_size", batch_size, "Poses per step");
    s.add("learning_rate", learning_rate, "Initial learning rate");
    s.add("decay_factor", decay_factor, "Learning-rate decay factor");
    s.add("decay_every", decay_every, "Steps between decays");
    s.add("mask_probability", mask_probability, "Per-joint occlusion probability for conditional training");
    s.add("seed", seed, "Seed for batches and masks");
    s.add("blocks", blocks, "Flow blocks");
    s.add("hidden_width", hidden_width, "Conditioner hidden width");
    s.add("hidden_layers", hidden_layers, "Conditioner hidden layers");
    s.add("context_dim", context_dim, "Encoded context length");
    s.add("encoder_width", encoder_width, "Context encoder hidden width");
    s.add("model_seed", model_seed, "Initialization seed");
    s.add("resume", resume, "Checkpoint to resume from");
    s.add("checkpoint_every", checkpoint_every, "Save every this many steps (0: only at the end)");
    s.add("checkpoint", checkpoint, "Checkpoint file name");
    s.add("trace", trace, "Loss trace file name");
  }

  int run(const Settings& s) const {
    if (data.empty()) throw ConfigError("train: --data is required");
    const Modality mod = modality_from_cli(modality);
    const PoseDataset ds = read_dataset(data);
    std::optional<Skeleton> skel;
    if (mod != Modality::none) skel = load_skeleton(skeleton);

    TrainConfig tc;
    tc.batch_size = batch_size;
    tc.learning_rate = learning_rate;
    tc.decay_factor = decay_factor;
    tc.decay_every = decay_every;
    tc.max_steps = steps;
    tc.mask_probability = mask_probability;
    tc.seed = seed;
    tc.modality = mod;
    tc.checkpoint_every = checkpoint_every > 0 ? checkpoint_every : steps;
    tc.checkpoint_path = s.out(checkpoint).string();
    tc.checkpoint_meta = {{"modality", modality}, {"train", train_config_to_json(tc)}, {"data_spec_digest", hex(ds.spec_digest)}};
    if (skel) tc.checkpoint_meta["skeleton"] = skeleton_to_json(*skel);
    tc.validate();

    std::optional<FlowModel> model;
    std::optional<AdamState> state;
    if (!resume.empty()) {
      LoadedCheckpoint ck = load_checkpoint(resume);
      if (ck.meta.value("modality", std::string("prior")) != modality) {
        throw ConfigError("train: checkpoint was trained with modality '" + ck.meta.value("modality", std::string("prior")) + "'");
      }
      model.emplace(std::move(ck.model));
      state = std::move(ck.optimizer);
      if (!state) throw ConfigError("train: checkpoint has no optimizer state to resume from");
    } else {
      FlowConfig fc;
      fc.num_manifolds = ds.num_manifolds();
      fc.num_blocks = blocks;
      fc.hidden_width = hidden_width;
      fc.hidden_layers = hidden_layers;
      fc.seed = model_seed;
      if (skel) {
        fc.context_dim = context_dim;
        fc.num_keypoints = skel->num_joints();
        fc.keypoint_dim = keypoint_dim(mod);
        fc.encoder_width = encoder_width;
      }
      model.emplace(fc);
    }
    s.echo("train");
    if (mod == Modality::none && !ds.keypoints.empty()) std::cerr << "train: prior modality ignores the keypoint section\n";

    std::vector<TraceRow> rows;
    const int every = std::max(1, steps / 20);
    auto report = [&](const TraceRow& r) {
      rows.push_back(r);
      if ((r.step + 1) % every == 0) std::cerr << "step " << r.step + 1 << "/" << steps << " loss " << r.loss << "\n";
    };
    try {
      train(*model, ds, skel ? &*skel : nullptr, tc, std::move(state), report);
    } catch (const DivergenceError&) {
      write_trace_csv(rows, s.out(trace).string());
      throw;
    }
    write_trace_csv(rows, s.out(trace).string());
    if (rows.empty()) save_checkpoint(tc.checkpoint_path, *model, tc.checkpoint_meta);
    std::cout << json{{"steps", rows.size()}, {"final_loss", rows.empty() ? json(nullptr) : json(rows.back().loss)},
                      {"checkpoint", tc.checkpoint_path}}
                     .dump()
              << "\n";
    return kOk;
  }
};

// sample / logprob ----------------------------------------------------------

struct Sample {
  std::string checkpoint;
  int n = 1000;
  std::uint64_t seed = 0;
  std::string ctx;
  std::string out = "samples.bin";

  void bind(Settings& s) {
    s.add("checkpoint", checkpoint, "Model checkpoint");
    s.add("n", n, "Number of samples");
    s.add("seed", seed, "Sampling seed");
    s.add("ctx", ctx, "Context document for conditional models");
    s.add("out", out, "Output dataset file name");
  }

  int run(const Settings& s) const {
    if (checkpoint.empty()) throw ConfigError("sample: --checkpoint is required");
    if (n < 1) throw ConfigError("sample: n must be >= 1");
    const LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const FlowModel& m = ck.model;
    if (m.config().conditional() && ctx.empty()) throw ConfigError("sample: conditional model needs --ctx");
    if (!m.config().conditional() && !ctx.empty()) throw ConfigError("sample: unconditional model takes no --ctx");
    std::optional<Context> c;
    if (!ctx.empty()) {
      const auto [kp, mask] = read_context(ctx, m.config());
      c = m.encode_context(kp, mask);
    }
    s.echo("sample");
    Rng rng(seed);
    PoseDataset ds;
    ds.seed = seed;
    for (auto& smp : m.sample(rng, n, c)) {
      ds.poses.push_back(std::move(smp.pose));
      ds.log_density.push_back(smp.log_prob);
    }
    write_dataset(ds, s.out(out).string());
    std::cout << json{{"n", ds.size()}, {"file", s.out(out).string()}}.dump() << "\n";
    return kOk;
  }
};

struct LogProb {
  std::string checkpoint;
  std::string data;
  std::string ctx;
  std::string out = "logprob.csv";

  void bind(Settings& s) {
    s.add("checkpoint", checkpoint, "Model checkpoint");
    s.add("data", data, "Dataset with the poses to score");
    s.add("ctx", ctx, "Context document shared by all poses (conditional models)");
    s.add("out", out, "Output CSV file name");
  }

  int run(const Settings& s) const {
    if (checkpoint.empty() || data.empty()) throw ConfigError("logprob: --checkpoint and --data are required");
    const LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const FlowModel& m = ck.model;
    const FlowConfig& cfg = m.config();
    const PoseDataset ds = read_dataset(data);
    if (ds.num_manifolds() != cfg.num_manifolds) throw ConfigError("logprob: dataset and model disagree on N");
    std::vector<double> lp;
    if (!cfg.conditional()) {
      if (!ctx.empty()) throw ConfigError("logprob: unconditional model takes no --ctx");
      lp = m.log_prob(ds.poses);
    } else if (!ctx.empty()) {
      const auto [kp, mask] = read_context(ctx, cfg);
      const Eigen::MatrixXd row = m.encode_context(kp, mask).c.transpose();
      lp = m.log_prob(ds.poses, &row);
    } else {
      if (ds.keypoints.empty()) throw ConfigError("logprob: conditional model needs --ctx or a dataset with keypoints");
      if (ds.keypoints[0].rows() != cfg.num_keypoints || ds.keypoints[0].cols() != cfg.keypoint_dim) {
        throw ConfigError("logprob: dataset keypoints do not match the model");
      }
      Eigen::MatrixXd rows(static_cast<Eigen::Index>(ds.size()), cfg.context_dim);
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const Mask mask = ds.masks.empty() ? Mask::all(cfg.num_keypoints, true) : Mask{ds.masks[i]};
        rows.row(static_cast<Eigen::Index>(i)) = m.encode_context(ds.keypoints[i], mask).c.transpose();
      }
      lp = m.log_prob(ds.poses, &rows);
    }
    s.echo("logprob");
    std::string csv = "index,log_prob\n";
    char buf[64];
    for (std::size_t i = 0; i < lp.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, lp[i]);
      csv += buf;
    }
    io::write_file_atomic(s.out(out).string(), csv);
    double mean = 0.0;
    for (double v : lp) mean += v;
    std::cout << json{{"n", lp.size()}, {"mean_log_prob", mean / static_cast<double>(lp.size())}}.dump() << "\n";
    return kOk;
  }
};

// eval ----------------------------------------------------------------------

struct Eval {
  std::string checkpoint;
  std::string data;
  std::string protocol = "prior";
  int n_samples = 1;
  int model_samples = 1000;
  std::string distance = "sum-geo";
  std::string skeleton;
  std::string occlusion_group;
  double mask_probability = 0.3;
  int max_poses = 0;
  int diversity_samples = 10;
  std::uint64_t seed = 0;

  void bind(Settings& s) {
    s.add("checkpoint", checkpoint, "Model checkpoint");
    s.add("data", data, "Evaluation dataset");
    s.add("protocol", protocol, "prior, ik, masked-ik, five-point or uplift");
    s.add("n_samples", n_samples, "Samples averaged into the pose estimate (conditional protocols)");
    s.add("model_samples", model_samples, "Model samples for precision/recall (prior protocol)");
    s.add("distance", distance, "Pose distance for precision/recall: sum-geo or mpjpe");
    s.add("skeleton", skeleton, "Skeleton override (default: the one stored with the checkpoint)");
    s.add("occlusion_group", occlusion_group, "masked-ik: joint group to hide (random masking when empty)");
    s.add("mask_probability", mask_probability, "masked-ik: per-joint occlusion probability for random masking");
    s.add("max_poses", max_poses, "Evaluate at most this many poses (0: all)");
    s.add("diversity_samples", diversity_samples, "Samples per pose for the diversity statistics");
    s.add("seed", seed, "Sampling seed");
  }

  static std::vector<double> thresholds(const std::vector<double>& a, const std::vector<double>& b) {
    double hi = 0.0;
    for (double v : a) hi = std::max(hi, v);
    for (double v : b) hi = std::max(hi, v);
    std::vector<double> t;
    for (int i = 0; i <= 50; ++i) t.push_back(hi * i / 50.0);
    return t;
  }

  int run(const Settings& s) const {
    if (checkpoint.empty() || data.empty()) throw ConfigError("eval: --checkpoint and --data are required");
    const LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const FlowModel& m = ck.model;
    const PoseDataset ds = read_dataset(data);
    if (ds.num_manifolds() != m.num_manifolds()) throw ConfigError("eval: dataset and model disagree on N");
    json summary = {{"protocol", protocol}};
    std::vector<EvalReport> reports;
    if (protocol == "prior") {
      if (m.config().conditional()) throw ConfigError("eval: prior protocol needs an unconditional model");
      if (model_samples < 1) throw ConfigError("eval: model_samples must be >= 1");
      PoseDistance dist;
      if (distance == "sum-geo") {
        dist = PoseDistance::sum_geo;
      } else if (distance == "mpjpe") {
        dist = PoseDistance::mpjpe;
      } else {
        throw ConfigError("eval: distance must be sum-geo or mpjpe");
      }
      std::optional<Skeleton> skel;
      if (dist == PoseDistance::mpjpe) {
        skel = checkpoint_skeleton(ck, skeleton);
        if (skel->num_rotations() != m.num_manifolds()) throw ConfigError("eval: skeleton does not match the model");
      }
      s.echo("eval");
      Rng rng(seed);
      std::vector<ProductPose> samples;
      for (auto& smp : m.sample(rng, model_samples)) samples.push_back(std::move(smp.pose));
      std::vector<ProductPose> reference = ds.poses;
      if (max_poses > 0 && reference.size() > static_cast<std::size_t>(max_poses)) reference.resize(static_cast<std::size_t>(max_poses));
      PrecisionRecall pr = precision_recall(samples, reference, dist, skel ? &*skel : nullptr);
      const std::uint64_t digest = io::fnv1a(s.resolved().dump());
      pr.precision.config_digest = pr.recall.config_digest = digest;
      const auto t = thresholds(pr.precision.values, pr.recall.values);
      write_curve_csv(threshold_curve(pr.precision.values, t), s.out("precision_curve.csv").string());
      write_curve_csv(threshold_curve(pr.recall.values, t), s.out("recall_curve.csv").string());
      reports = {pr.precision, pr.recall};
    } else {
      const Protocol p = protocol_from_string(protocol);
      if (!m.config().conditional()) throw ConfigError("eval: protocol " + protocol + " needs a conditional model");
      const Skeleton skel = checkpoint_skeleton(ck, skeleton);
      if (skel.num_joints() != m.config().num_keypoints || skel.num_rotations() != m.num_manifolds()) {
        throw ConfigError("eval: skeleton does not match the model");
      }
      ConditionalEvalOptions o;
      o.protocol = p;
      o.n_samples = n_samples;
      o.diversity_samples = diversity_samples;
      o.occlusion_group = occlusion_group;
      o.mask_probability = mask_probability;
      o.seed = seed;
      o.max_poses = max_poses;
      const FlowSampler sampler(m);
      if (sampler.keypoint_dim() != (p == Protocol::uplift ? 2 : 3)) {
        throw ConfigError("eval: protocol " + protocol + " does not match the model's keypoint modality");
      }
      s.echo("eval");
      const ConditionalReport r = eval_conditional(sampler, ds, skel, o);
      reports = {r.mgeo, r.mpjpe, r.ik_loss, r.diversity_visible, r.diversity_occluded};
      json occluded = json::array();
      for (int j : r.occluded_joints) occluded.push_back(skel.names[static_cast<std::size_t>(j)]);
      summary["occluded_joints"] = occluded;
      const auto t = thresholds(r.mpjpe.values, {});
      write_curve_csv(threshold_curve(r.mpjpe.values, t), s.out("mpjpe_curve.csv").string());
    }
    summary["reports"] = json::array();
    for (const auto& r : reports) summary["reports"].push_back(report_summary(r));
    write_reports_csv(reports, s.out("reports.csv").string());
    io::write_file_atomic(s.out("summary.json").string(), summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
    return kOk;
  }
};

// check ---------------------------------------------------------------------

struct Check {
  std::string checkpoint;
  int manifolds = 3;
  int blocks = 3;
  std::uint64_t seed = 0;
  double perturb = 0.0;
  int grad_entries = 200;
  int grad_batch = 4;
  int roundtrip_poses = 100;
  int mc_samples = 100000;

  void bind(Settings& s) {
    s.add("checkpoint", checkpoint, "Checkpoint to diagnose (a fresh model when empty)");
    s.add("manifolds", manifolds, "Fresh model: number of manifolds");
    s.add("blocks", blocks, "Fresh model: number of blocks");
    s.add("seed", seed, "Fresh-model and diagnostic seed");
    s.add("perturb", perturb, "Add N(0, perturb^2) noise to every parameter before checking");
    s.add("grad_entries", grad_entries, "Parameter entries checked against central differences");
    s.add("grad_batch", grad_batch, "Poses in the gradient-check batch");
    s.add("roundtrip_poses", roundtrip_poses, "Poses in the sample/inverse roundtrip sweep");
    s.add("mc_samples", mc_samples, "Haar samples for the normalization estimate");
  }

  int run(const Settings& s) const {
    if (grad_entries < 1 || grad_batch < 1 || roundtrip_poses < 1) throw ConfigError("check: sizes must be >= 1");
    std::optional<FlowModel> model;
    if (checkpoint.empty()) {
      FlowConfig fc;
      fc.num_manifolds = manifolds;
      fc.num_blocks = blocks;
      fc.seed = seed;
      model.emplace(fc);
    } else {
      model.emplace(load_checkpoint(checkpoint).model);
    }
    FlowModel& m = *model;
    const FlowConfig& cfg = m.config();
    Rng rng(seed);
    if (perturb > 0.0) m.perturb(rng, perturb);
    s.echo("check");

    const int n = cfg.num_manifolds;
    std::normal_distribution<double> normal(0.0, 1.0);
    auto random_context = [&]() {
      Eigen::MatrixXd kp(cfg.num_keypoints, cfg.keypoint_dim);
      for (Eigen::Index i = 0; i < kp.size(); ++i) kp.data()[i] = normal(rng);
      return m.encode_context(kp, sample_mask(rng, cfg.num_keypoints, 0.3));
    };
    json results = json::array();
    bool all_pass = true;
    auto record = [&](const std::string& name, double value, double tol, bool pass, json extra = json::object()) {
      extra["check"] = name;
      extra["value"] = value;
      extra["tolerance"] = tol;
      extra["pass"] = pass;
      results.push_back(extra);
      all_pass = all_pass && pass;
      std::printf("%s %-14s value=%.3e tol=%.1e\n", pass ? "PASS" : "FAIL", name.c_str(), value, tol);
    };

    // Gradient of the batch NLL against central differences on sampled entries.
    {
      ad::Array batch(grad_batch, 9 * n);
      for (int r = 0; r < grad_batch; ++r) {
        for (int j = 0; j < n; ++j) {
          const Eigen::Matrix3d mat = haar_sample(rng).matrix();
          batch.block(r, 9 * j, 1, 9) = Eigen::Map<const Eigen::Array<double, 1, 9>>(mat.data());
        }
      }
      Eigen::ArrayXXd kp, masks;
      if (cfg.conditional()) {
        kp.resize(grad_batch, cfg.num_keypoints * cfg.keypoint_dim);
        masks.resize(grad_batch, cfg.num_keypoints);
        for (Eigen::Index i = 0; i < kp.size(); ++i) kp.data()[i] = normal(rng);
        for (int r = 0; r < grad_batch; ++r) {
          const Mask mk = sample_mask(rng, cfg.num_keypoints, 0.3);
          for (int j = 0; j < cfg.num_keypoints; ++j) masks(r, j) = mk.visible(j) ? 1.0 : 0.0;
        }
      }
      std::vector<ad::ParamEntry> all;
      for (std::size_t p = 0; p < m.params().size(); ++p) {
        for (Eigen::Index k = 0; k < m.params().value(p).size(); ++k) all.push_back({p, k});
      }
      std::vector<ad::ParamEntry> picked;
      std::sample(all.begin(), all.end(), std::back_inserter(picked), grad_entries, rng);
      auto f = [&](ad::Tape& t) {
        const ad::Var ctx = cfg.conditional() ? m.encode_context(t, kp, masks) : ad::Var();
        return m.nll_loss(t, t.constant(batch), ctx);
      };
      const double err = ad::grad_check(f, m.params(), 1e-5, picked);
      record("grad_check", err, 1e-4, err < 1e-4, {{"entries", picked.size()}});
    }

    // Sample -> inverse roundtrip.
    {
      std::vector<ProductPose> base;
      for (int i = 0; i < roundtrip_poses; ++i) {
        ProductPose p;
        for (int j = 0; j < n; ++j) p.push_back(haar_sample(rng));
        base.push_back(std::move(p));
      }
      Eigen::MatrixXd ctx_row;
      if (cfg.conditional()) ctx_row = random_context().c.transpose();
      const Eigen::MatrixXd* ctx = cfg.conditional() ? &ctx_row : nullptr;
      const auto fwd = m.push_forward(base, ctx);
      std::vector<ProductPose> poses;
      for (const auto& x : fwd) poses.push_back(x.pose);
      const auto back = m.pull_back(poses, ctx);
      double geo = 0.0, logdet = 0.0;
      for (std::size_t i = 0; i < base.size(); ++i) {
        for (int j = 0; j < n; ++j) {
          geo = std::max(geo, geodesic_distance(back[i].pose[static_cast<std::size_t>(j)], base[i][static_cast<std::size_t>(j)]));
        }
        logdet = std::max(logdet, std::abs(back[i].log_prob - fwd[i].log_prob));
      }
      record("roundtrip", geo, 1e-8, geo < 1e-8);
      record("logdet_sum", logdet, 1e-9, logdet < 1e-9);
    }

    // Monte Carlo normalization.
    {
      std::optional<Context> c;
      if (cfg.conditional()) c = random_context();
      const McEstimate e = mc_normalization(m, c, mc_samples, seed + 1);
      const double dev = std::abs(e.estimate - 1.0);
      const bool pass = e.stderr_ > 0.0 ? dev <= 3.0 * e.stderr_ : dev <= 1e-12;
      record("normalization", e.estimate, 3.0 * e.stderr_, pass, {{"stderr", e.stderr_}, {"samples", mc_samples}});
    }

    io::write_file_atomic(s.out("check_report.json").string(), json{{"checks", results}, {"pass", all_pass}}.dump(2) + "\n");
    return all_pass ? kOk : kDiagnostic;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"huproso3: normalizing-flow pose priors on products of SO(3)"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "huproso3 1.0.0");

  GenData gen;
  Train tr;
  Sample smp;
  LogProb lp;
  Eval ev;
  Check ck;
  struct Command {
    CLI::App* app;
    std::unique_ptr<Settings> settings;
    std::function<int(const Settings&)> run;
  };
  std::vector<Command> commands;
  auto add = [&](const char* name, const char* help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    auto settings = std::make_unique<Settings>(sub);
    cmd.bind(*settings);
    commands.push_back({sub, std::move(settings), [&cmd](const Settings& s) { return cmd.run(s); }});
  };
  add("gen-data", "Sample a synthetic pose dataset with exact log-densities", gen);
  add("train", "Fit a flow by maximum likelihood", tr);
  add("sample", "Draw poses and their log-densities from a checkpoint", smp);
  add("logprob", "Score the poses of a dataset", lp);
  add("eval", "Run an evaluation protocol", ev);
  add("check", "Gradient, invertibility and normalization diagnostics", ck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  for (Command& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      c.settings->resolve();
      return c.run(*c.settings);
    } catch (const DivergenceError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kRuntime;
    } catch (const io::FormatError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kRuntime;
    } catch (const std::invalid_argument& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kUsage;
    } catch (const json::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kUsage;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kRuntime;
    }
  }
  return kUsage;
}
