#include "huproso3/binary_io.hpp"
#include "huproso3/synthetic.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace huproso3;

namespace {

constexpr double kPi = std::numbers::pi;

SyntheticPriorSpec single_ball(int n, double r) {
  SyntheticPriorSpec s;
  s.num_joints = n;
  s.num_components = 1;
  Rng rng(11);
  for (int j = 0; j < n; ++j) {
    s.modes.push_back({haar_sample(rng)});
    s.radii.push_back({r});
  }
  s.transition = Eigen::MatrixXd::Ones(1, 1);
  s.initial = Eigen::VectorXd::Ones(1);
  return s;
}

/// Two disjoint balls per joint so the component of a sample is identifiable.
SyntheticPriorSpec separated_two_component(int n) {
  SyntheticPriorSpec s;
  s.num_joints = n;
  s.num_components = 2;
  for (int j = 0; j < n; ++j) {
    s.modes.push_back({Rotation(), Rotation::about_axis(Eigen::Vector3d::UnitX(), kPi)});
    s.radii.push_back({0.5, 0.7});
  }
  s.transition.resize(2, 2);
  s.transition << 0.8, 0.2, 0.35, 0.65;
  s.initial = Eigen::Vector2d(0.3, 0.7);
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("huproso3_" + name)).string();
}

}  // namespace

TEST(PriorSpec, Validation) {
  SyntheticPriorSpec s = separated_two_component(2);
  EXPECT_NO_THROW(s.validate());
  s.transition(0, 0) = 0.7;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = separated_two_component(2);
  s.radii[1][0] = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = separated_two_component(2);
  s.radii[1][0] = kPi + 1e-9;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = separated_two_component(2);
  s.initial[0] = 0.4;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(PriorSpec, JsonRoundtripAndDigest) {
  const SyntheticPriorSpec s = random_prior_spec(3, 2, 42);
  const SyntheticPriorSpec back = prior_spec_from_json(nlohmann::json::parse(prior_spec_to_json(s).dump()));
  EXPECT_EQ(back.digest(), s.digest());
  for (int j = 0; j < 3; ++j) {
    for (int c = 0; c < 2; ++c) {
      EXPECT_LT(geodesic_distance(back.modes[j][c], s.modes[j][c]), 1e-12);
      EXPECT_EQ(back.radii[j][c], s.radii[j][c]);
    }
  }
  EXPECT_NE(random_prior_spec(3, 2, 43).digest(), s.digest());
  EXPECT_EQ(random_prior_spec(3, 2, 42).digest(), s.digest());
}

TEST(BallAngle, MatchesTruncatedLaw) {
  // CDF of theta on [0, r] under density proportional to 1 - cos is (t - sin t) / (r - sin r).
  Rng rng(1);
  const double r = 0.9;
  const int n = 200000;
  std::vector<double> t(n);
  for (double& v : t) v = sample_ball_angle(rng, r);
  std::sort(t.begin(), t.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double cdf = (t[i] - std::sin(t[i])) / (r - std::sin(r));
    ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
  }
  EXPECT_LT(ks, 1.63 / std::sqrt(n));  // 1% critical value
  EXPECT_GE(t.front(), 0.0);
  EXPECT_LE(t.back(), r);
}

TEST(BallVolume, ClosedForm) {
  EXPECT_NEAR(ball_volume(kPi), 1.0, 1e-15);
  EXPECT_NEAR(ball_volume(0.5), (0.5 - std::sin(0.5)) / kPi, 1e-17);
  EXPECT_GT(ball_volume(1e-4), 0.0);
}

TEST(Generate, FullBallIsHaarWithZeroDensity) {
  const SyntheticPriorSpec s = single_ball(2, kPi);
  const PoseDataset ds = generate(s, 20000, 5);
  for (double lp : ds.log_density) EXPECT_NEAR(lp, 0.0, 1e-15);
  // Haar: E[trace] = 0 and Var[trace] = 1.
  double m = 0.0, m2 = 0.0;
  for (const auto& p : ds.poses) {
    const double tr = p[0].matrix().trace();
    m += tr;
    m2 += tr * tr;
  }
  m /= ds.size();
  m2 /= ds.size();
  EXPECT_LT(std::abs(m), 4.0 / std::sqrt(20000.0));
  EXPECT_NEAR(m2, 1.0, 0.05);
}

TEST(Generate, SamplesLieInsideTheirBalls) {
  const SyntheticPriorSpec s = random_prior_spec(4, 3, 8);
  const PoseDataset ds = generate(s, 2000, 9);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_TRUE(std::isfinite(ds.log_density[i]));
    EXPECT_EQ(ds.log_density[i], oracle_log_prob(s, ds.poses[i]));
    for (int j = 0; j < 4; ++j) {
      double best = 1e9;
      for (int c = 0; c < 3; ++c) best = std::min(best, geodesic_distance(ds.poses[i][j], s.modes[j][c]) - s.radii[j][c]);
      EXPECT_LE(best, 1e-9);
    }
  }
}

TEST(Generate, ComponentMarginalsFollowTheChain) {
  const SyntheticPriorSpec s = separated_two_component(4);
  const int n = 100000;
  const PoseDataset ds = generate(s, n, 21);
  Eigen::RowVector2d marginal = s.initial.transpose();
  for (int j = 0; j < 4; ++j) {
    if (j > 0) marginal = marginal * s.transition;
    int count1 = 0;
    for (const auto& p : ds.poses) count1 += geodesic_distance(p[j], s.modes[j][1]) <= 0.7 + 1e-9 ? 1 : 0;
    const double p1 = marginal[1];
    const double sigma = std::sqrt(p1 * (1 - p1) / n);
    EXPECT_NEAR(static_cast<double>(count1) / n, p1, 3 * sigma) << "joint " << j;
  }
}

TEST(Generate, Deterministic) {
  const SyntheticPriorSpec s = random_prior_spec(3, 2, 1);
  EXPECT_EQ(serialize_dataset(generate(s, 500, 7)), serialize_dataset(generate(s, 500, 7)));
  EXPECT_NE(serialize_dataset(generate(s, 500, 7)), serialize_dataset(generate(s, 500, 8)));
  EXPECT_THROW(generate(s, 0, 1), std::invalid_argument);
}

TEST(OracleLogProb, SingleBallAtMode) {
  const SyntheticPriorSpec s = single_ball(3, 0.6);
  ProductPose at_mode;
  for (int j = 0; j < 3; ++j) at_mode.push_back(s.modes[j][0]);
  EXPECT_NEAR(oracle_log_prob(s, at_mode), 3.0 * std::log(kPi / (0.6 - std::sin(0.6))), 1e-12);
  ProductPose outside = at_mode;
  outside[1] = s.modes[1][0] * Rotation::about_axis(Eigen::Vector3d::UnitY(), 1.0);
  EXPECT_EQ(oracle_log_prob(s, outside), -std::numeric_limits<double>::infinity());
  EXPECT_THROW(oracle_log_prob(s, ProductPose(2)), std::invalid_argument);
}

TEST(OracleLogProb, ForwardRecursionMatchesChainEnumeration) {
  const SyntheticPriorSpec s = random_prior_spec(3, 2, 77, {.radius_min = 1.5, .radius_max = 2.5});
  const PoseDataset ds = generate(s, 200, 3);
  for (const auto& pose : ds.poses) {
    double total = 0.0;
    for (int code = 0; code < 8; ++code) {
      const int c[3] = {code & 1, (code >> 1) & 1, (code >> 2) & 1};
      double p = s.initial[c[0]];
      for (int j = 1; j < 3; ++j) p *= s.transition(c[j - 1], c[j]);
      for (int j = 0; j < 3; ++j) {
        const double r = s.radii[j][c[j]];
        p *= geodesic_distance(pose[j], s.modes[j][c[j]]) <= r ? kPi / (r - std::sin(r)) : 0.0;
      }
      total += p;
    }
    EXPECT_NEAR(oracle_log_prob(s, pose), std::log(total), 1e-10);
  }
}

TEST(OracleLogProb, NormalizedUnderHaar) {
  SyntheticPriorSpec s = random_prior_spec(2, 2, 5, {.radius_min = 2.0, .radius_max = 2.5});
  Rng rng(6);
  const int n = 1000000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    ProductPose p{haar_sample(rng), haar_sample(rng)};
    sum += std::exp(oracle_log_prob(s, p));
  }
  EXPECT_NEAR(sum / n, 1.0, 0.05);
}

TEST(DatasetFile, BitIdenticalRoundtrip) {
  PoseDataset ds = generate(random_prior_spec(3, 2, 4), 300, 12);
  attach_keypoints(ds, chain_skeleton(3), 2);
  for (std::size_t i = 0; i < ds.size(); ++i) ds.masks.push_back({1, static_cast<std::uint8_t>(i % 2), 1, 0});
  const std::string path = temp_path("ds_roundtrip.bin");
  write_dataset(ds, path);
  const PoseDataset back = read_dataset(path, ds.spec_digest);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(back.poses[i][j].matrix(), ds.poses[i][j].matrix());
    EXPECT_EQ(back.log_density[i], ds.log_density[i]);
    EXPECT_EQ(back.keypoints[i], ds.keypoints[i]);
    EXPECT_EQ(back.masks[i], ds.masks[i]);
  }
  EXPECT_EQ(back.seed, ds.seed);
  EXPECT_EQ(serialize_dataset(back), serialize_dataset(ds));
  EXPECT_THROW(read_dataset(path, ds.spec_digest + 1), io::FormatError);
  std::filesystem::remove(path);
}

TEST(DatasetFile, CorruptionIsRejected) {
  const std::string bytes = serialize_dataset(generate(random_prior_spec(2, 1, 4), 50, 1));
  for (std::size_t cut : {std::size_t{0}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_dataset(std::string_view(bytes).substr(0, cut)), io::FormatError) << cut;
  }
  std::string flipped = bytes;
  flipped[100] ^= 0x01;
  EXPECT_THROW(deserialize_dataset(flipped), io::FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_dataset(magic), io::FormatError);

  std::string versioned = bytes;
  versioned[8] = 2;
  try {
    deserialize_dataset(versioned);
    FAIL() << "version mismatch accepted";
  } catch (const io::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported version"), std::string::npos);
  }
}
