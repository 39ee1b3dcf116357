#include "huproso3/synthetic.hpp"

#include "huproso3/binary_io.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace huproso3 {

namespace {

constexpr double kPi = std::numbers::pi;
// Slack for ball membership so samples drawn at the boundary stay inside.
constexpr double kBallSlack = 1e-12;

// theta - sin(theta) without cancellation for small theta.
double theta_minus_sin(double t) {
  if (t < 1e-2) {
    const double t2 = t * t;
    return t * t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0));
  }
  return t - std::sin(t);
}

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

double ball_volume(double r) { return theta_minus_sin(r) / kPi; }

double sample_ball_angle(Rng& rng, double r) {
  const double target = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * theta_minus_sin(r);
  double lo = 0.0, hi = r;
  for (int i = 0; i < 80; ++i) {
    const double mid = 0.5 * (lo + hi);
    (theta_minus_sin(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

void SyntheticPriorSpec::validate() const {
  if (num_joints < 1 || num_components < 1) throw std::invalid_argument("prior spec: need at least one joint and component");
  const auto n = static_cast<std::size_t>(num_joints), k = static_cast<std::size_t>(num_components);
  if (modes.size() != n || radii.size() != n) throw std::invalid_argument("prior spec: modes/radii must have one row per joint");
  for (std::size_t j = 0; j < n; ++j) {
    if (modes[j].size() != k || radii[j].size() != k) {
      throw std::invalid_argument("prior spec: joint " + std::to_string(j) + " needs one mode and radius per component");
    }
    for (double r : radii[j]) {
      if (!(r > 0.0 && r <= kPi)) throw std::invalid_argument("prior spec: radii must lie in (0, pi]");
    }
  }
  if (transition.rows() != num_components || transition.cols() != num_components || initial.size() != num_components) {
    throw std::invalid_argument("prior spec: transition must be K x K and initial length K");
  }
  if ((transition.array() < 0.0).any() || (initial.array() < 0.0).any()) {
    throw std::invalid_argument("prior spec: probabilities must be non-negative");
  }
  for (int i = 0; i < num_components; ++i) {
    if (std::abs(transition.row(i).sum() - 1.0) > 1e-12) throw std::invalid_argument("prior spec: transition rows must sum to 1");
  }
  if (std::abs(initial.sum() - 1.0) > 1e-12) throw std::invalid_argument("prior spec: initial weights must sum to 1");
}

nlohmann::json prior_spec_to_json(const SyntheticPriorSpec& s) {
  nlohmann::json j;
  j["num_joints"] = s.num_joints;
  j["num_components"] = s.num_components;
  j["modes"] = nlohmann::json::array();
  for (const auto& row : s.modes) {
    nlohmann::json r = nlohmann::json::array();
    for (const Rotation& m : row) {
      const Eigen::Vector4d q = matrix_to_quat(m).coeffs();
      r.push_back({q[0], q[1], q[2], q[3]});
    }
    j["modes"].push_back(r);
  }
  j["radii"] = s.radii;
  j["transition"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < s.transition.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < s.transition.cols(); ++c) row.push_back(s.transition(i, c));
    j["transition"].push_back(row);
  }
  j["initial"] = std::vector<double>(s.initial.data(), s.initial.data() + s.initial.size());
  return j;
}

SyntheticPriorSpec prior_spec_from_json(const nlohmann::json& j) {
  SyntheticPriorSpec s;
  try {
    s.num_joints = j.at("num_joints").get<int>();
    s.num_components = j.at("num_components").get<int>();
    for (const auto& row : j.at("modes")) {
      std::vector<Rotation> r;
      for (const auto& q : row) {
        const Eigen::Vector4d v(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(), q.at(3).get<double>());
        r.push_back(quat_to_matrix(UnitQuaternion::from_vector(v)));
      }
      s.modes.push_back(std::move(r));
    }
    s.radii = j.at("radii").get<std::vector<std::vector<double>>>();
    const auto t = j.at("transition").get<std::vector<std::vector<double>>>();
    s.transition.resize(static_cast<Eigen::Index>(t.size()), t.empty() ? 0 : static_cast<Eigen::Index>(t[0].size()));
    for (std::size_t r = 0; r < t.size(); ++r) {
      if (static_cast<Eigen::Index>(t[r].size()) != s.transition.cols()) throw std::invalid_argument("prior spec: ragged transition matrix");
      for (std::size_t c = 0; c < t[r].size(); ++c) s.transition(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t[r][c];
    }
    const auto init = j.at("initial").get<std::vector<double>>();
    s.initial = Eigen::Map<const Eigen::VectorXd>(init.data(), static_cast<Eigen::Index>(init.size()));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("prior spec document: ") + e.what());
  }
  s.validate();
  return s;
}

std::uint64_t SyntheticPriorSpec::digest() const {
  // Mode quaternions are rounded so that a spec re-read from its own document
  // (matrix -> quaternion -> matrix) keeps its digest.
  nlohmann::json j = prior_spec_to_json(*this);
  for (auto& joint : j.at("modes")) {
    for (auto& q : joint) {
      for (auto& v : q) v = std::round(v.get<double>() * 1e9) / 1e9;
    }
  }
  return io::fnv1a(j.dump());
}

SyntheticPriorSpec random_prior_spec(int num_joints, int num_components, std::uint64_t seed, const RandomSpecOptions& opts) {
  if (num_joints < 1 || num_components < 1) throw std::invalid_argument("random_prior_spec: sizes must be >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  SyntheticPriorSpec s;
  s.num_joints = num_joints;
  s.num_components = num_components;
  for (int j = 0; j < num_joints; ++j) {
    std::vector<Rotation> modes;
    std::vector<double> radii;
    for (int k = 0; k < num_components; ++k) {
      const Eigen::Vector3d axis = Eigen::Vector3d(normal(rng), normal(rng), normal(rng)).normalized();
      modes.push_back(Rotation::about_axis(axis, opts.mode_angle * unit(rng)));
      radii.push_back(opts.radius_min + (opts.radius_max - opts.radius_min) * unit(rng));
    }
    s.modes.push_back(std::move(modes));
    s.radii.push_back(std::move(radii));
  }
  const int k = num_components;
  s.transition = Eigen::MatrixXd::Constant(k, k, k > 1 ? (1.0 - opts.stickiness) / (k - 1) : 1.0);
  if (k > 1) s.transition.diagonal().setConstant(opts.stickiness);
  s.initial = Eigen::VectorXd::Constant(k, 1.0 / k);
  s.validate();
  return s;
}

PoseDataset generate(const SyntheticPriorSpec& spec, int n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int k = spec.num_components;
  std::discrete_distribution<int> first(spec.initial.data(), spec.initial.data() + k);
  std::vector<std::discrete_distribution<int>> next;
  for (int c = 0; c < k; ++c) {
    const Eigen::VectorXd row = spec.transition.row(c).transpose();
    next.emplace_back(row.data(), row.data() + k);
  }
  PoseDataset ds;
  ds.seed = seed;
  ds.spec_digest = spec.digest();
  ds.poses.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    ProductPose pose;
    int c = first(rng);
    for (int j = 0; j < spec.num_joints; ++j) {
      if (j > 0) c = next[static_cast<std::size_t>(c)](rng);
      const double r = spec.radii[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
      const double theta = sample_ball_angle(rng, r);
      const Eigen::Vector3d axis = Eigen::Vector3d(normal(rng), normal(rng), normal(rng)).normalized();
      pose.push_back(spec.modes[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)] * Rotation::about_axis(axis, theta));
    }
    ds.log_density.push_back(oracle_log_prob(spec, pose));
    ds.poses.push_back(std::move(pose));
  }
  return ds;
}

double oracle_log_prob(const SyntheticPriorSpec& spec, const ProductPose& pose) {
  if (static_cast<int>(pose.size()) != spec.num_joints) throw std::invalid_argument("oracle_log_prob: pose size mismatch");
  const int k = spec.num_components;
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  auto emission = [&](int j, int c) {
    const auto uj = static_cast<std::size_t>(j), uc = static_cast<std::size_t>(c);
    const double r = spec.radii[uj][uc];
    return geodesic_distance(pose[uj], spec.modes[uj][uc]) <= r + kBallSlack ? -std::log(ball_volume(r)) : kNegInf;
  };
  const Eigen::MatrixXd log_t = spec.transition.array().log().matrix();
  Eigen::VectorXd alpha(k);
  for (int c = 0; c < k; ++c) alpha[c] = std::log(spec.initial[c]) + emission(0, c);
  for (int j = 1; j < spec.num_joints; ++j) {
    Eigen::VectorXd next(k);
    for (int c = 0; c < k; ++c) next[c] = log_sum_exp(alpha + log_t.col(c)) + emission(j, c);
    alpha = next;
  }
  return log_sum_exp(alpha);
}

void attach_keypoints(PoseDataset& ds, const Skeleton& skel, int keypoint_dim) {
  if (keypoint_dim != 2 && keypoint_dim != 3) throw std::invalid_argument("attach_keypoints: keypoint_dim must be 2 or 3");
  ds.keypoints.clear();
  for (const ProductPose& p : ds.poses) {
    const JointPositions jp = forward_kinematics(p, skel);
    ds.keypoints.emplace_back(keypoint_dim == 3 ? Eigen::MatrixXd(jp) : Eigen::MatrixXd(project_2d(jp)));
  }
}

void PoseDataset::validate() const {
  const int n = num_manifolds();
  for (const ProductPose& p : poses) {
    if (static_cast<int>(p.size()) != n) throw std::invalid_argument("dataset: poses have differing joint counts");
  }
  if (!log_density.empty() && log_density.size() != poses.size()) throw std::invalid_argument("dataset: log-density count mismatch");
  if (!keypoints.empty()) {
    if (keypoints.size() != poses.size()) throw std::invalid_argument("dataset: keypoint count mismatch");
    for (const auto& k : keypoints) {
      if (k.rows() != keypoints[0].rows() || k.cols() != keypoints[0].cols()) {
        throw std::invalid_argument("dataset: keypoint shapes differ");
      }
    }
  }
  if (!masks.empty()) {
    if (masks.size() != poses.size()) throw std::invalid_argument("dataset: mask count mismatch");
    const std::size_t j = keypoints.empty() ? masks[0].size() : static_cast<std::size_t>(keypoints[0].rows());
    for (const auto& m : masks) {
      if (m.size() != j) throw std::invalid_argument("dataset: mask length mismatch");
    }
  }
}

namespace {

constexpr char kMagic[8] = {'H', 'P', 'S', 'O', '3', 'D', 'S', '\0'};
enum : std::uint32_t { kHasDensity = 1, kHasKeypoints = 2, kHasMasks = 4 };

}  // namespace

std::string serialize_dataset(const PoseDataset& ds) {
  ds.validate();
  const std::uint32_t n = static_cast<std::uint32_t>(ds.num_manifolds());
  std::uint32_t j = 0, k = 0;
  if (!ds.keypoints.empty()) {
    j = static_cast<std::uint32_t>(ds.keypoints[0].rows());
    k = static_cast<std::uint32_t>(ds.keypoints[0].cols());
  } else if (!ds.masks.empty()) {
    j = static_cast<std::uint32_t>(ds.masks[0].size());
  }
  const std::uint32_t flags = (ds.log_density.empty() ? 0u : kHasDensity) | (ds.keypoints.empty() ? 0u : kHasKeypoints) |
                              (ds.masks.empty() ? 0u : kHasMasks);
  io::Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(n);
  w.put<std::uint32_t>(j);
  w.put<std::uint32_t>(k);
  w.put<std::uint64_t>(ds.size());
  w.put<std::uint32_t>(flags);
  w.put<std::uint64_t>(ds.seed);
  w.put<std::uint64_t>(ds.spec_digest);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (const Rotation& r : ds.poses[i]) w.put_bytes(r.matrix().data(), 9 * sizeof(double));
    if (flags & kHasDensity) w.put<double>(ds.log_density[i]);
    if (flags & kHasKeypoints) {
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = ds.keypoints[i];
      w.put_bytes(rm.data(), static_cast<std::size_t>(rm.size()) * sizeof(double));
    }
    if (flags & kHasMasks) w.put_bytes(ds.masks[i].data(), ds.masks[i].size());
  }
  w.put<std::uint64_t>(io::fnv1a(w.bytes()));
  return w.bytes();
}

PoseDataset deserialize_dataset(std::string_view bytes, std::optional<std::uint64_t> expected_digest) {
  io::Reader r(bytes, "dataset");
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("bad magic (not a dataset file)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) {
    r.fail("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kDatasetVersion) + ")");
  }
  const auto n = r.get<std::uint32_t>(), j = r.get<std::uint32_t>(), k = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  const auto flags = r.get<std::uint32_t>();
  PoseDataset ds;
  ds.seed = r.get<std::uint64_t>();
  ds.spec_digest = r.get<std::uint64_t>();
  if (flags & ~std::uint32_t{kHasDensity | kHasKeypoints | kHasMasks}) r.fail("unknown section flags");
  if ((flags & kHasKeypoints) && (k != 2 && k != 3)) r.fail("keypoint dimension must be 2 or 3");
  if (n == 0 && count > 0) r.fail("zero joints");
  const std::uint64_t record = 72ULL * n + ((flags & kHasDensity) ? 8 : 0) + ((flags & kHasKeypoints) ? 8ULL * j * k : 0) +
                               ((flags & kHasMasks) ? j : 0);
  if (record == 0 || r.remaining() != count * record + sizeof(std::uint64_t)) {
    r.fail("length mismatch: header declares " + std::to_string(count) + " records, file holds " +
           std::to_string(record ? (r.remaining() - std::min<std::size_t>(r.remaining(), 8)) / record : 0));
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
  if (stored != io::fnv1a(bytes.substr(0, bytes.size() - sizeof(stored)))) r.fail("checksum mismatch");
  if (expected_digest && *expected_digest != ds.spec_digest) r.fail("spec digest mismatch");

  ds.poses.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    ProductPose pose;
    for (std::uint32_t m = 0; m < n; ++m) {
      Eigen::Matrix3d mat;
      r.get_bytes(mat.data(), 9 * sizeof(double));
      try {
        pose.push_back(Rotation::from_orthonormal(mat));
      } catch (const std::invalid_argument&) {
        r.fail("record " + std::to_string(i) + " holds an invalid rotation");
      }
    }
    ds.poses.push_back(std::move(pose));
    if (flags & kHasDensity) ds.log_density.push_back(r.get<double>());
    if (flags & kHasKeypoints) {
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(j, k);
      r.get_bytes(rm.data(), static_cast<std::size_t>(rm.size()) * sizeof(double));
      ds.keypoints.emplace_back(rm);
    }
    if (flags & kHasMasks) {
      std::vector<std::uint8_t> m(j);
      r.get_bytes(m.data(), j);
      for (auto v : m) {
        if (v > 1) r.fail("mask entries must be 0 or 1");
      }
      ds.masks.push_back(std::move(m));
    }
  }
  return ds;
}

void write_dataset(const PoseDataset& ds, const std::string& path) { io::write_file_atomic(path, serialize_dataset(ds)); }

PoseDataset read_dataset(const std::string& path, std::optional<std::uint64_t> expected_digest) {
  return deserialize_dataset(io::read_file(path), expected_digest);
}

}  // namespace huproso3
