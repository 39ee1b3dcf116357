#pragma once

#include "huproso3/autodiff.hpp"
#include "huproso3/layers.hpp"
#include "huproso3/so3.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace huproso3 {

/// Encoded conditioning vector (length L).
struct Context {
  Eigen::VectorXd c;
};

/// Per-keypoint visibility flags: 1 = visible, 0 = occluded.
struct Mask {
  std::vector<std::uint8_t> m;

  static Mask all(int n, bool visible) { return {std::vector<std::uint8_t>(static_cast<std::size_t>(n), visible ? 1 : 0)}; }
  int size() const { return static_cast<int>(m.size()); }
  bool visible(int i) const { return m[static_cast<std::size_t>(i)] != 0; }
};

struct FlowConfig {
  int num_manifolds = 19;
  /// Moebius coupling layers; every block but the last also carries a
  /// quaternion affine layer.
  int num_blocks = 12;
  int hidden_width = 16;
  int hidden_layers = 3;
  /// Length L of the encoded context; 0 for an unconditional model.
  int context_dim = 0;
  /// Keypoints J and their dimension k (2 or 3) fed to the context encoder.
  int num_keypoints = 0;
  int keypoint_dim = 0;
  int encoder_width = 64;
  std::uint64_t seed = 0;

  bool conditional() const { return context_dim > 0; }
  void validate() const;
  friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

struct PoseSample {
  ProductPose pose;
  double log_prob;
};

/// Autoregressive normalizing flow on a product of SO(3) manifolds.
///
/// Block b applies, manifold by manifold in the order given by
/// `order(b)`, a Moebius coupling followed (except in the last block) by a
/// quaternion affine map. The parameters for the manifold at position i are
/// produced by small MLPs fed with the 6D features of the block outputs at
/// positions 0..i-1 and the context. All densities are relative to the
/// normalized Haar measure, so the uniform base has log-density 0.
///
/// Batched pose arrays are B x 9N with manifold j at columns [9j, 9j + 9) in
/// the column-stacked layout of flow_ops.hpp.
class FlowModel {
 public:
  explicit FlowModel(FlowConfig config);

  const FlowConfig& config() const { return config_; }
  int num_manifolds() const { return config_.num_manifolds; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  const Permutation& order(int block) const { return orders_.at(static_cast<std::size_t>(block)); }
  int fixed_column(int block) const { return block % 2; }
  bool has_affine(int block) const { return block + 1 < config_.num_blocks; }

  /// Adds independent N(0, scale^2) noise to every parameter.
  void perturb(Rng& rng, double scale);

  // Inference -------------------------------------------------------------

  double log_prob(const ProductPose& pose, const std::optional<Context>& ctx = std::nullopt) const;
  /// `contexts` holds one row per pose, a single broadcast row, or is null
  /// for an unconditional model.
  std::vector<double> log_prob(std::span<const ProductPose> poses, const Eigen::MatrixXd* contexts = nullptr) const;

  std::vector<PoseSample> sample(Rng& rng, int count, const std::optional<Context>& ctx = std::nullopt) const;
  /// One sample per context row.
  std::vector<PoseSample> sample(Rng& rng, const Eigen::MatrixXd& contexts) const;
  /// Pushes given base rotations through the flow (no randomness).
  std::vector<PoseSample> push_forward(std::span<const ProductPose> base, const Eigen::MatrixXd* contexts = nullptr) const;
  /// Inverse of push_forward: base-side rotations of each pose and the pose's log-density.
  std::vector<PoseSample> pull_back(std::span<const ProductPose> poses, const Eigen::MatrixXd* contexts = nullptr) const;

  /// keypoints: J x k. Masked rows are zeroed and the mask is appended
  /// before the encoder MLP.
  Context encode_context(const Eigen::MatrixXd& keypoints, const Mask& mask) const;

  // Taped -----------------------------------------------------------------

  struct TapedSample {
    ad::Var poses;
    ad::Var log_prob;
  };
  struct TapedBlock {
    std::vector<ad::Var> rotations;  // per manifold, B x 9
    ad::Var logdet;                  // B x 1, summed over manifolds
  };

  /// Log-density of a B x 9N batch; ctx is B x L or invalid.
  ad::Var log_prob(ad::Tape& tape, ad::Var poses, ad::Var ctx) const;
  TapedSample push_forward(ad::Tape& tape, ad::Var base, ad::Var ctx) const;
  /// Base-side poses and the log-density of a B x 9N batch.
  TapedSample pull_back(ad::Tape& tape, ad::Var poses, ad::Var ctx) const;
  /// Mean negative log-likelihood of a batch.
  ad::Var nll_loss(ad::Tape& tape, ad::Var poses, ad::Var ctx) const;
  /// keypoints B x (J k), masks B x J.
  ad::Var encode_context(ad::Tape& tape, const ad::Array& keypoints, const ad::Array& masks) const;

  /// One block in the sampling direction (base side -> data side).
  TapedBlock forward_block(ad::Tape& tape, int block, const std::vector<ad::Var>& inputs, ad::Var ctx) const;
  /// One block in the density direction (data side -> base side).
  TapedBlock inverse_block(ad::Tape& tape, int block, const std::vector<ad::Var>& outputs, ad::Var ctx) const;

 private:
  struct Mlp {
    std::vector<std::size_t> weights;
    std::vector<std::size_t> biases;
    int input_dim = 0;
  };
  struct Block {
    std::vector<Mlp> mobius;  // per position
    std::vector<Mlp> affine;  // per position, empty for the last block
  };

  Mlp make_mlp(const std::string& prefix, int input_dim, int output_dim, int hidden_layers, int hidden_width,
               bool zero_output, Rng& rng);
  ad::Var apply_mlp(ad::Tape& tape, const Mlp& mlp, ad::Var input, Eigen::Index rows) const;
  ad::Var conditioner_input(ad::Tape& tape, std::initializer_list<ad::Var> parts) const;
  ad::Var context_rows(ad::Tape& tape, const Eigen::MatrixXd* contexts, Eigen::Index begin, Eigen::Index rows) const;

  FlowConfig config_;
  ad::ParamStore params_;
  std::vector<Permutation> orders_;
  std::vector<Block> blocks_;
  Mlp encoder_;
};

}  // namespace huproso3
