#include "huproso3/flow.hpp"

#include "huproso3/flow_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace huproso3 {

using ad::Array;
using ad::Var;

void FlowConfig::validate() const {
  if (num_manifolds < 1) throw std::invalid_argument("FlowConfig: num_manifolds must be >= 1");
  if (num_blocks < 1) throw std::invalid_argument("FlowConfig: num_blocks must be >= 1");
  if (hidden_width < 1 || hidden_layers < 0) throw std::invalid_argument("FlowConfig: bad hidden layer shape");
  if (context_dim < 0) throw std::invalid_argument("FlowConfig: context_dim must be >= 0");
  if (context_dim > 0) {
    if (num_keypoints < 1) throw std::invalid_argument("FlowConfig: conditional model needs num_keypoints >= 1");
    if (keypoint_dim != 2 && keypoint_dim != 3) throw std::invalid_argument("FlowConfig: keypoint_dim must be 2 or 3");
    if (encoder_width < 1) throw std::invalid_argument("FlowConfig: encoder_width must be >= 1");
  }
}

namespace {

std::string block_name(int b) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "block%02d", b);
  return buf;
}

std::string position_name(const char* kind, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%02d", kind, i);
  return buf;
}

}  // namespace

FlowModel::Mlp FlowModel::make_mlp(const std::string& prefix, int input_dim, int output_dim, int hidden_layers,
                                   int hidden_width, bool zero_output, Rng& rng) {
  Mlp mlp;
  mlp.input_dim = input_dim;
  if (input_dim == 0) {
    // No inputs: the output is a learned constant.
    mlp.biases.push_back(params_.add(prefix + "/b0", Array::Zero(1, output_dim)));
    return mlp;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  int fan_in = input_dim;
  for (int l = 0; l <= hidden_layers; ++l) {
    const bool last = l == hidden_layers;
    const int fan_out = last ? output_dim : hidden_width;
    Array w(fan_in, fan_out);
    if (last && zero_output) {
      w.setZero();
    } else {
      const double stddev = std::sqrt((last ? 1.0 : 2.0) / fan_in);
      for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = stddev * normal(rng);
    }
    mlp.weights.push_back(params_.add(prefix + "/w" + std::to_string(l), std::move(w)));
    mlp.biases.push_back(params_.add(prefix + "/b" + std::to_string(l), Array::Zero(1, fan_out)));
    fan_in = fan_out;
  }
  return mlp;
}

FlowModel::FlowModel(FlowConfig config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const int n = config_.num_manifolds;
  const int ctx = config_.context_dim;
  for (int b = 0; b < config_.num_blocks; ++b) orders_.push_back(Permutation::random(n, rng));

  for (int b = 0; b < config_.num_blocks; ++b) {
    Block block;
    for (int i = 0; i < n; ++i) {
      const std::string base = block_name(b) + "/";
      block.mobius.push_back(make_mlp(base + position_name("mobius", i), 3 + 6 * i + ctx, 3, config_.hidden_layers,
                                      config_.hidden_width, true, rng));
      if (has_affine(b)) {
        block.affine.push_back(make_mlp(base + position_name("affine", i), 6 * i + ctx, 16, config_.hidden_layers,
                                        config_.hidden_width, true, rng));
      }
    }
    blocks_.push_back(std::move(block));
  }
  if (config_.conditional()) {
    const int in = config_.num_keypoints * (config_.keypoint_dim + 1);
    encoder_ = make_mlp("encoder", in, ctx, 1, config_.encoder_width, false, rng);
  }
}

void FlowModel::perturb(Rng& rng, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Array& v = params_.mutable_value(p);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += normal(rng);
  }
}

Var FlowModel::apply_mlp(ad::Tape& tape, const Mlp& mlp, Var input, Eigen::Index rows) const {
  if (mlp.weights.empty()) return tape.constant(Array::Zero(rows, 1)) + tape.param(mlp.biases[0]);
  Var h = input;
  for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
    h = ad::matmul(h, tape.param(mlp.weights[l])) + tape.param(mlp.biases[l]);
    if (l + 1 < mlp.weights.size()) h = ad::relu(h);
  }
  return h;
}

Var FlowModel::conditioner_input(ad::Tape&, std::initializer_list<Var> parts) const {
  std::vector<Var> valid;
  for (const Var& v : parts)
    if (v.valid()) valid.push_back(v);
  if (valid.empty()) return {};
  if (valid.size() == 1) return valid[0];
  return ad::concat_cols(valid);
}

FlowModel::TapedBlock FlowModel::forward_block(ad::Tape& tape, int block, const std::vector<Var>& inputs,
                                               Var ctx) const {
  const int n = config_.num_manifolds;
  if (static_cast<int>(inputs.size()) != n) throw std::invalid_argument("forward_block: manifold count mismatch");
  const Block& blk = blocks_.at(static_cast<std::size_t>(block));
  const Permutation& ord = order(block);
  const int fc = fixed_column(block);
  const Eigen::Index rows = inputs[0].rows();

  TapedBlock out;
  out.rotations.resize(static_cast<std::size_t>(n));
  Var prefix;
  Var total;
  for (int i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(ord[i]);
    const Var x = inputs[j];
    Var g = apply_mlp(tape, blk.mobius[static_cast<std::size_t>(i)],
                      conditioner_input(tape, {taped::column(x, fc), prefix, ctx}), rows);
    taped::LayerOut m = taped::coupling(x, g, fc, false);
    Var y = m.rot;
    Var ld = m.logdet;
    if (has_affine(block)) {
      Var raw = apply_mlp(tape, blk.affine[static_cast<std::size_t>(i)], conditioner_input(tape, {prefix, ctx}), rows);
      taped::LayerOut a = taped::quat_affine(y, taped::affine_from_raw(raw), false);
      y = a.rot;
      ld = ld + a.logdet;
    }
    out.rotations[j] = y;
    total = total.valid() ? total + ld : ld;
    prefix = prefix.valid() ? ad::concat_cols({prefix, taped::sixd(y)}) : taped::sixd(y);
  }
  out.logdet = total;
  return out;
}

FlowModel::TapedBlock FlowModel::inverse_block(ad::Tape& tape, int block, const std::vector<Var>& outputs,
                                               Var ctx) const {
  const int n = config_.num_manifolds;
  if (static_cast<int>(outputs.size()) != n) throw std::invalid_argument("inverse_block: manifold count mismatch");
  const Block& blk = blocks_.at(static_cast<std::size_t>(block));
  const Permutation& ord = order(block);
  const int fc = fixed_column(block);
  const Eigen::Index rows = outputs[0].rows();

  TapedBlock out;
  out.rotations.resize(static_cast<std::size_t>(n));
  Var prefix;
  Var total;
  for (int i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(ord[i]);
    Var z = outputs[j];
    Var ld;
    if (has_affine(block)) {
      Var raw = apply_mlp(tape, blk.affine[static_cast<std::size_t>(i)], conditioner_input(tape, {prefix, ctx}), rows);
      taped::LayerOut a = taped::quat_affine(z, taped::affine_from_raw(raw), true);
      z = a.rot;
      ld = a.logdet;
    }
    Var g = apply_mlp(tape, blk.mobius[static_cast<std::size_t>(i)],
                      conditioner_input(tape, {taped::column(z, fc), prefix, ctx}), rows);
    taped::LayerOut m = taped::coupling(z, g, fc, true);
    out.rotations[j] = m.rot;
    ld = ld.valid() ? ld + m.logdet : m.logdet;
    total = total.valid() ? total + ld : ld;
    const Var y = outputs[j];
    prefix = prefix.valid() ? ad::concat_cols({prefix, taped::sixd(y)}) : taped::sixd(y);
  }
  out.logdet = total;
  return out;
}

namespace {

std::vector<Var> split_manifolds(Var poses, int n) {
  if (poses.cols() != 9 * n) throw std::invalid_argument("pose batch must be B x 9N");
  std::vector<Var> parts;
  parts.reserve(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) parts.push_back(ad::cols(poses, 9 * j, 9));
  return parts;
}

}  // namespace

FlowModel::TapedSample FlowModel::pull_back(ad::Tape& tape, Var poses, Var ctx) const {
  if (config_.conditional() != ctx.valid()) throw std::invalid_argument("log_prob: context presence does not match model");
  if (ctx.valid() && (ctx.cols() != config_.context_dim || ctx.rows() != poses.rows())) {
    throw std::invalid_argument("log_prob: context must be B x L");
  }
  std::vector<Var> ys = split_manifolds(poses, config_.num_manifolds);
  Var total = tape.constant(Array::Zero(poses.rows(), 1));
  for (int b = config_.num_blocks - 1; b >= 0; --b) {
    TapedBlock inv = inverse_block(tape, b, ys, ctx);
    total = total + inv.logdet;
    ys = std::move(inv.rotations);
  }
  return {ad::concat_cols(ys), total};
}

Var FlowModel::log_prob(ad::Tape& tape, Var poses, Var ctx) const { return pull_back(tape, poses, ctx).log_prob; }

FlowModel::TapedSample FlowModel::push_forward(ad::Tape& tape, Var base, Var ctx) const {
  if (config_.conditional() != ctx.valid()) throw std::invalid_argument("push_forward: context presence does not match model");
  if (ctx.valid() && (ctx.cols() != config_.context_dim || ctx.rows() != base.rows())) {
    throw std::invalid_argument("push_forward: context must be B x L");
  }
  std::vector<Var> xs = split_manifolds(base, config_.num_manifolds);
  Var total = tape.constant(Array::Zero(base.rows(), 1));
  for (int b = 0; b < config_.num_blocks; ++b) {
    TapedBlock fwd = forward_block(tape, b, xs, ctx);
    total = total + fwd.logdet;
    xs = std::move(fwd.rotations);
  }
  return {ad::concat_cols(xs), -total};
}

Var FlowModel::nll_loss(ad::Tape& tape, Var poses, Var ctx) const {
  if (poses.rows() < 1) throw std::invalid_argument("nll_loss: empty batch");
  return -ad::mean(log_prob(tape, poses, ctx));
}

Var FlowModel::encode_context(ad::Tape& tape, const Array& keypoints, const Array& masks) const {
  if (!config_.conditional()) throw std::logic_error("encode_context: model is unconditional");
  const int nk = config_.num_keypoints, k = config_.keypoint_dim;
  if (keypoints.cols() != nk * k || masks.cols() != nk || keypoints.rows() != masks.rows()) {
    throw std::invalid_argument("encode_context: keypoint/mask shape mismatch");
  }
  Array feat(keypoints.rows(), nk * (k + 1));
  for (int j = 0; j < nk; ++j) {
    for (int d = 0; d < k; ++d) feat.col(j * k + d) = keypoints.col(j * k + d) * masks.col(j);
  }
  feat.rightCols(nk) = masks;
  return apply_mlp(tape, encoder_, tape.constant(std::move(feat)), keypoints.rows());
}

// ---------------------------------------------------------------------------
// Untaped inference, evaluated on non-recording tapes in chunks.

namespace {

Eigen::Index chunk_rows(const FlowConfig& c) {
  const long per = static_cast<long>(c.num_manifolds) * c.num_blocks;
  return std::clamp<Eigen::Index>(50000 / std::max(1L, per), 16, 4096);
}

Array poses_to_array(std::span<const ProductPose> poses, int n) {
  Array a(static_cast<Eigen::Index>(poses.size()), 9 * n);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (static_cast<int>(poses[i].size()) != n) throw std::invalid_argument("pose has wrong number of manifolds");
    a.row(static_cast<Eigen::Index>(i)) = taped::rotations_to_array(poses[i]).reshaped<Eigen::RowMajor>().transpose();
  }
  return a;
}

ProductPose array_to_pose(const Array& a, Eigen::Index row, int n) {
  ProductPose pose;
  pose.reserve(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    Array one = a.block(row, 9 * j, 1, 9);
    pose.push_back(taped::array_row_to_rotation(one, 0));
  }
  return pose;
}

}  // namespace

Var FlowModel::context_rows(ad::Tape& tape, const Eigen::MatrixXd* contexts, Eigen::Index begin,
                            Eigen::Index rows) const {
  if (!config_.conditional()) {
    if (contexts) throw std::invalid_argument("context given to an unconditional model");
    return {};
  }
  if (!contexts) throw std::invalid_argument("conditional model requires a context");
  if (contexts->cols() != config_.context_dim) throw std::invalid_argument("context has wrong dimension");
  if (contexts->rows() == 1) return tape.constant(contexts->row(0).array().replicate(rows, 1));
  return tape.constant(contexts->middleRows(begin, rows).array());
}

std::vector<double> FlowModel::log_prob(std::span<const ProductPose> poses, const Eigen::MatrixXd* contexts) const {
  const int n = config_.num_manifolds;
  if (contexts && contexts->rows() != 1 && contexts->rows() != static_cast<Eigen::Index>(poses.size())) {
    throw std::invalid_argument("log_prob: need one context row per pose or a single row");
  }
  std::vector<double> out;
  out.reserve(poses.size());
  const Eigen::Index chunk = chunk_rows(config_);
  for (std::size_t begin = 0; begin < poses.size(); begin += static_cast<std::size_t>(chunk)) {
    const std::size_t count = std::min(poses.size() - begin, static_cast<std::size_t>(chunk));
    ad::Tape tape(&params_, false);
    Var batch = tape.constant(poses_to_array(poses.subspan(begin, count), n));
    Var ctx = context_rows(tape, contexts, static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    const Array lp = log_prob(tape, batch, ctx).value();
    for (Eigen::Index i = 0; i < lp.rows(); ++i) out.push_back(lp(i, 0));
  }
  return out;
}

double FlowModel::log_prob(const ProductPose& pose, const std::optional<Context>& ctx) const {
  if (ctx) {
    const Eigen::MatrixXd row = ctx->c.transpose();
    return log_prob(std::span<const ProductPose>(&pose, 1), &row)[0];
  }
  return log_prob(std::span<const ProductPose>(&pose, 1), nullptr)[0];
}

std::vector<PoseSample> FlowModel::pull_back(std::span<const ProductPose> poses, const Eigen::MatrixXd* contexts) const {
  const int n = config_.num_manifolds;
  if (contexts && contexts->rows() != 1 && contexts->rows() != static_cast<Eigen::Index>(poses.size())) {
    throw std::invalid_argument("pull_back: need one context row per pose or a single row");
  }
  std::vector<PoseSample> out;
  out.reserve(poses.size());
  const Eigen::Index chunk = chunk_rows(config_);
  for (std::size_t begin = 0; begin < poses.size(); begin += static_cast<std::size_t>(chunk)) {
    const std::size_t count = std::min(poses.size() - begin, static_cast<std::size_t>(chunk));
    ad::Tape tape(&params_, false);
    Var batch = tape.constant(poses_to_array(poses.subspan(begin, count), n));
    Var ctx = context_rows(tape, contexts, static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    TapedSample s = pull_back(tape, batch, ctx);
    const Array& base = s.poses.value();
    const Array& lp = s.log_prob.value();
    for (Eigen::Index i = 0; i < base.rows(); ++i) out.push_back({array_to_pose(base, i, n), lp(i, 0)});
  }
  return out;
}

std::vector<PoseSample> FlowModel::push_forward(std::span<const ProductPose> base,
                                                const Eigen::MatrixXd* contexts) const {
  const int n = config_.num_manifolds;
  if (contexts && contexts->rows() != 1 && contexts->rows() != static_cast<Eigen::Index>(base.size())) {
    throw std::invalid_argument("push_forward: need one context row per pose or a single row");
  }
  std::vector<PoseSample> out;
  out.reserve(base.size());
  const Eigen::Index chunk = chunk_rows(config_);
  for (std::size_t begin = 0; begin < base.size(); begin += static_cast<std::size_t>(chunk)) {
    const std::size_t count = std::min(base.size() - begin, static_cast<std::size_t>(chunk));
    ad::Tape tape(&params_, false);
    Var batch = tape.constant(poses_to_array(base.subspan(begin, count), n));
    Var ctx = context_rows(tape, contexts, static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    TapedSample s = push_forward(tape, batch, ctx);
    const Array& poses = s.poses.value();
    const Array& lp = s.log_prob.value();
    for (Eigen::Index i = 0; i < poses.rows(); ++i) out.push_back({array_to_pose(poses, i, n), lp(i, 0)});
  }
  return out;
}

std::vector<PoseSample> FlowModel::sample(Rng& rng, int count, const std::optional<Context>& ctx) const {
  if (count < 1) throw std::invalid_argument("sample: count must be >= 1");
  std::vector<ProductPose> base(static_cast<std::size_t>(count));
  for (auto& pose : base) {
    pose.reserve(static_cast<std::size_t>(config_.num_manifolds));
    for (int j = 0; j < config_.num_manifolds; ++j) pose.push_back(haar_sample(rng));
  }
  if (ctx) {
    const Eigen::MatrixXd row = ctx->c.transpose();
    return push_forward(base, &row);
  }
  return push_forward(base, nullptr);
}

std::vector<PoseSample> FlowModel::sample(Rng& rng, const Eigen::MatrixXd& contexts) const {
  if (contexts.rows() < 1) throw std::invalid_argument("sample: no contexts");
  std::vector<ProductPose> base(static_cast<std::size_t>(contexts.rows()));
  for (auto& pose : base) {
    pose.reserve(static_cast<std::size_t>(config_.num_manifolds));
    for (int j = 0; j < config_.num_manifolds; ++j) pose.push_back(haar_sample(rng));
  }
  return push_forward(base, &contexts);
}

Context FlowModel::encode_context(const Eigen::MatrixXd& keypoints, const Mask& mask) const {
  if (!config_.conditional()) throw std::logic_error("encode_context: model is unconditional");
  if (keypoints.rows() != config_.num_keypoints || keypoints.cols() != config_.keypoint_dim ||
      mask.size() != config_.num_keypoints) {
    throw std::invalid_argument("encode_context: expected J x k keypoints and a length-J mask");
  }
  Array kp(1, keypoints.size());
  for (Eigen::Index j = 0; j < keypoints.rows(); ++j)
    for (Eigen::Index d = 0; d < keypoints.cols(); ++d) kp(0, j * keypoints.cols() + d) = keypoints(j, d);
  Array m(1, mask.size());
  for (int j = 0; j < mask.size(); ++j) m(0, j) = mask.visible(j) ? 1.0 : 0.0;
  ad::Tape tape(&params_, false);
  const Array c = encode_context(tape, kp, m).value();
  return {c.row(0).transpose().matrix()};
}

}  // namespace huproso3
