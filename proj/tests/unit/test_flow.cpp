#include "huproso3/flow.hpp"
#include "huproso3/flow_ops.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace huproso3;
using ad::Array;
using ad::Tape;
using ad::Var;

namespace {

ProductPose haar_pose(Rng& rng, int n) {
  ProductPose p;
  for (int i = 0; i < n; ++i) p.push_back(haar_sample(rng));
  return p;
}

FlowConfig small_config(int n, int blocks, std::uint64_t seed) {
  FlowConfig c;
  c.num_manifolds = n;
  c.num_blocks = blocks;
  c.seed = seed;
  return c;
}

FlowConfig conditional_config(int n, int blocks, std::uint64_t seed) {
  FlowConfig c = small_config(n, blocks, seed);
  c.context_dim = 8;
  c.num_keypoints = 4;
  c.keypoint_dim = 3;
  c.encoder_width = 12;
  return c;
}

Array pose_row(const ProductPose& pose) {
  Array a(1, 9 * static_cast<Eigen::Index>(pose.size()));
  for (std::size_t j = 0; j < pose.size(); ++j) {
    a.block(0, 9 * static_cast<Eigen::Index>(j), 1, 9) = taped::rotations_to_array(std::span(&pose[j], 1));
  }
  return a;
}

// Runs the inverse stack and returns the base-side rotations.
ProductPose invert_to_base(const FlowModel& m, const ProductPose& pose, const Eigen::VectorXd* ctx) {
  Tape tape(&m.params(), false);
  std::vector<Var> ys;
  for (std::size_t j = 0; j < pose.size(); ++j) ys.push_back(tape.constant(taped::rotations_to_array(std::span(&pose[j], 1))));
  Var c = ctx ? tape.constant(ctx->transpose().array()) : Var();
  for (int b = m.config().num_blocks - 1; b >= 0; --b) ys = m.inverse_block(tape, b, ys, c).rotations;
  ProductPose out;
  for (const Var& y : ys) out.push_back(taped::array_row_to_rotation(y.value(), 0));
  return out;
}

}  // namespace

TEST(FlowConfig, Validation) {
  FlowConfig c;
  EXPECT_NO_THROW(c.validate());
  c.num_manifolds = 0;
  EXPECT_THROW(FlowModel{c}, std::invalid_argument);
  FlowConfig d = conditional_config(2, 2, 0);
  d.keypoint_dim = 4;
  EXPECT_THROW(FlowModel{d}, std::invalid_argument);
}

TEST(FlowModel, DefaultArchitecture) {
  const FlowModel m(FlowConfig{});
  EXPECT_EQ(m.num_manifolds(), 19);
  int couplings = 0, affines = 0;
  for (int b = 0; b < m.config().num_blocks; ++b) {
    ++couplings;
    affines += m.has_affine(b) ? 1 : 0;
    EXPECT_EQ(m.fixed_column(b), b % 2);
  }
  EXPECT_EQ(couplings, 12);
  EXPECT_EQ(affines, 11);
  // Moebius conditioner input: own column + 6D features of preceding manifolds.
  EXPECT_EQ(m.params().value("block00/mobius00/w0").rows(), 3);
  EXPECT_EQ(m.params().value("block00/mobius05/w0").rows(), 3 + 30);
  EXPECT_EQ(m.params().value("block00/mobius05/w0").cols(), 16);
  EXPECT_EQ(m.params().value("block00/mobius05/w3").cols(), 3);
  EXPECT_EQ(m.params().value("block00/affine00/b0").cols(), 16);
  EXPECT_FALSE(m.params().contains("block11/affine00/b0"));
}

TEST(FlowModel, IdentityInitLogProbIsZero) {
  Rng rng(1);
  const FlowModel m(small_config(4, 12, 7));
  for (int i = 0; i < 20; ++i) EXPECT_EQ(m.log_prob(haar_pose(rng, 4)), 0.0);

  const FlowModel c(conditional_config(3, 4, 7));
  Eigen::MatrixXd kp = Eigen::MatrixXd::Random(4, 3);
  const Context ctx = c.encode_context(kp, Mask::all(4, true));
  EXPECT_EQ(c.log_prob(haar_pose(rng, 3), ctx), 0.0);
}

TEST(FlowModel, IdentityInitSamplesAreHaar) {
  const FlowModel m(small_config(3, 12, 7));
  Rng a(5), b(5);
  const std::vector<PoseSample> s = m.sample(a, 20);
  for (const PoseSample& ps : s) {
    EXPECT_EQ(ps.log_prob, 0.0);
    for (int j = 0; j < 3; ++j) EXPECT_LT((ps.pose[static_cast<std::size_t>(j)].matrix() - haar_sample(b).matrix()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FlowModel, SameSeedSameModel) {
  const FlowModel a(small_config(5, 4, 11)), b(small_config(5, 4, 11)), c(small_config(5, 4, 12));
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t p = 0; p < a.params().size(); ++p) EXPECT_TRUE((a.params().value(p) == b.params().value(p)).all());
  for (int k = 0; k < 4; ++k) EXPECT_EQ(a.order(k), b.order(k));
  bool differs = false;
  for (int k = 0; k < 4; ++k) differs |= !(a.order(k) == c.order(k));
  EXPECT_TRUE(differs);
}

TEST(FlowModel, SampleLogProbConsistency) {
  FlowModel m(small_config(4, 6, 3));
  Rng rng(9);
  m.perturb(rng, 0.1);
  const std::vector<PoseSample> s = m.sample(rng, 50);
  std::vector<ProductPose> poses;
  for (const PoseSample& p : s) poses.push_back(p.pose);
  const std::vector<double> lp = m.log_prob(poses);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(lp[i], s[i].log_prob, 1e-8);
}

TEST(FlowModel, StackRoundtrip) {
  FlowModel m(conditional_config(3, 5, 4));
  Rng rng(10);
  m.perturb(rng, 0.1);
  const Context ctx = m.encode_context(Eigen::MatrixXd::Random(4, 3), Mask::all(4, true));
  for (int i = 0; i < 10; ++i) {
    const ProductPose base = haar_pose(rng, 3);
    const Eigen::MatrixXd row = ctx.c.transpose();
    const PoseSample out = m.push_forward(std::span(&base, 1), &row)[0];
    const ProductPose back = invert_to_base(m, out.pose, &ctx.c);
    for (int j = 0; j < 3; ++j) EXPECT_LT(geodesic_distance(back[static_cast<std::size_t>(j)], base[static_cast<std::size_t>(j)]), 1e-9);
    EXPECT_NEAR(m.log_prob(out.pose, ctx), out.log_prob, 1e-8);
  }
}

TEST(FlowModel, PullBackInvertsPushForward) {
  FlowModel m(small_config(4, 4, 6));
  Rng rng(12);
  m.perturb(rng, 0.1);
  std::vector<ProductPose> base;
  for (int i = 0; i < 20; ++i) base.push_back(haar_pose(rng, 4));
  const std::vector<PoseSample> fwd = m.push_forward(base);
  std::vector<ProductPose> poses;
  for (const auto& s : fwd) poses.push_back(s.pose);
  const std::vector<PoseSample> back = m.pull_back(poses);
  const std::vector<double> lp = m.log_prob(poses);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const ProductPose ref = invert_to_base(m, poses[i], nullptr);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_LT((back[i].pose[j].matrix() - ref[j].matrix()).cwiseAbs().maxCoeff(), 1e-13);
      EXPECT_LT(geodesic_distance(back[i].pose[j], base[i][j]), 1e-9);
    }
    EXPECT_EQ(back[i].log_prob, lp[i]);
    EXPECT_NEAR(back[i].log_prob, fwd[i].log_prob, 1e-9);
  }
}

TEST(FlowModel, ConditioningCausality) {
  FlowModel m(small_config(5, 2, 21));
  Rng rng(11);
  m.perturb(rng, 0.5);
  for (int block = 0; block < 2; ++block) {
    const Permutation& ord = m.order(block);
    const ProductPose pose = haar_pose(rng, 5);
    auto invert = [&](const ProductPose& p) {
      Tape tape(&m.params(), false);
      std::vector<Var> ys;
      for (const Rotation& r : p) ys.push_back(tape.constant(taped::rotations_to_array(std::span(&r, 1))));
      std::vector<Array> out;
      for (const Var& v : m.inverse_block(tape, block, ys, Var()).rotations) out.push_back(v.value());
      return out;
    };
    const std::vector<Array> ref = invert(pose);
    for (int changed = 0; changed < 5; ++changed) {
      ProductPose other = pose;
      other[static_cast<std::size_t>(ord[changed])] = haar_sample(rng);
      const std::vector<Array> alt = invert(other);
      for (int i = 0; i < 5; ++i) {
        const auto j = static_cast<std::size_t>(ord[i]);
        if (i < changed) {
          EXPECT_TRUE((alt[j] == ref[j]).all()) << "block " << block << " position " << i;
        } else if (i > changed) {
          EXPECT_FALSE((alt[j] == ref[j]).all()) << "block " << block << " position " << i;
        }
      }
    }
  }
}

TEST(FlowModel, EncodeContextMasking) {
  FlowModel m(conditional_config(2, 2, 5));
  Rng rng(12);
  m.perturb(rng, 0.1);
  const Eigen::MatrixXd k1 = Eigen::MatrixXd::Random(4, 3), k2 = Eigen::MatrixXd::Random(4, 3);
  const Mask none = Mask::all(4, false);
  EXPECT_EQ(m.encode_context(k1, none).c, m.encode_context(k2, none).c);
  const Mask all = Mask::all(4, true);
  EXPECT_NE(m.encode_context(k1, all).c, m.encode_context(k2, all).c);
  Mask partial = all;
  partial.m[2] = 0;
  Eigen::MatrixXd flipped = k1;
  flipped.row(2) *= -1.0;
  EXPECT_EQ(m.encode_context(k1, partial).c, m.encode_context(flipped, partial).c);
  EXPECT_NE(m.encode_context(k1, partial).c, m.encode_context(k1, all).c);
  EXPECT_EQ(m.encode_context(k1, all).c.size(), 8);
  EXPECT_THROW(m.encode_context(Eigen::MatrixXd::Random(4, 2), all), std::invalid_argument);
  EXPECT_THROW(m.encode_context(k1, Mask::all(3, true)), std::invalid_argument);
}

TEST(FlowModel, DimensionErrors) {
  const FlowModel m(small_config(3, 2, 1));
  Rng rng(13);
  EXPECT_THROW(m.log_prob(haar_pose(rng, 2)), std::invalid_argument);
  EXPECT_THROW(m.log_prob(haar_pose(rng, 3), Context{Eigen::VectorXd::Zero(8)}), std::invalid_argument);
  const FlowModel c(conditional_config(3, 2, 1));
  EXPECT_THROW(c.log_prob(haar_pose(rng, 3)), std::invalid_argument);
  EXPECT_THROW(c.log_prob(haar_pose(rng, 3), Context{Eigen::VectorXd::Zero(5)}), std::invalid_argument);
  EXPECT_THROW(m.sample(rng, 0), std::invalid_argument);
}

TEST(FlowModel, NllLossIdentityAndGradient) {
  FlowModel m(small_config(2, 2, 8));
  Rng rng(14);
  Array batch(4, 18);
  for (int i = 0; i < 4; ++i) batch.row(i) = pose_row(haar_pose(rng, 2));
  {
    Tape tape(&m.params());
    EXPECT_EQ(m.nll_loss(tape, tape.constant(batch), Var()).scalar(), 0.0);
  }
  m.perturb(rng, 0.3);
  auto f = [&](Tape& t) { return m.nll_loss(t, t.constant(batch), Var()); };
  EXPECT_LT(ad::grad_check(f, m.params(), 1e-5), 1e-4);
}

TEST(FlowModel, ConditionalGradientIncludesEncoder) {
  FlowModel m(conditional_config(2, 2, 8));
  Rng rng(15);
  m.perturb(rng, 0.3);
  Array batch(3, 18);
  for (int i = 0; i < 3; ++i) batch.row(i) = pose_row(haar_pose(rng, 2));
  const Array kp = Array::Random(3, 12);
  Array masks = Array::Ones(3, 4);
  masks(1, 2) = 0.0;
  auto f = [&](Tape& t) { return m.nll_loss(t, t.constant(batch), m.encode_context(t, kp, masks)); };
  EXPECT_LT(ad::grad_check(f, m.params(), 1e-5), 1e-4);
}

TEST(FlowModel, MonteCarloNormalizationSmall) {
  FlowModel m(small_config(1, 12, 2));
  Rng rng(16);
  m.perturb(rng, 0.1);
  constexpr int n = 100000;
  std::vector<ProductPose> poses;
  for (int i = 0; i < n; ++i) poses.push_back(haar_pose(rng, 1));
  const std::vector<double> lp = m.log_prob(poses);
  double s = 0.0, s2 = 0.0;
  for (double v : lp) {
    s += std::exp(v);
    s2 += std::exp(2 * v);
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_NEAR(mean, 1.0, 4.0 * se);
  EXPECT_GT(se, 0.0);
}
