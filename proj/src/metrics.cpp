#include "huproso3/metrics.hpp"

#include "huproso3/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <stdexcept>

namespace huproso3 {

namespace {

void check_same_size(const ProductPose& a, const ProductPose& b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("pose sizes differ or are empty");
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

}  // namespace

EvalReport EvalReport::from_values(std::string name, std::vector<double> values, std::uint64_t digest) {
  EvalReport r;
  r.name = std::move(name);
  r.config_digest = digest;
  if (!values.empty()) {
    double s = 0.0;
    for (double v : values) s += v;
    r.mean = s / static_cast<double>(values.size());
  } else {
    r.mean = std::numeric_limits<double>::quiet_NaN();
  }
  r.median = median_of(values);
  r.values = std::move(values);
  return r;
}

double sum_geo(const ProductPose& a, const ProductPose& b) {
  check_same_size(a, b);
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += geodesic_distance(a[j], b[j]);
  return s;
}

double mgeo(const ProductPose& a, const ProductPose& b) { return sum_geo(a, b) / static_cast<double>(a.size()); }

double mpjpe(const JointPositions& a, const JointPositions& b) {
  if (a.rows() != b.rows() || a.rows() < 2) throw std::invalid_argument("mpjpe: position sets differ or have no non-root joints");
  return (a.bottomRows(a.rows() - 1) - b.bottomRows(b.rows() - 1)).rowwise().norm().mean();
}

double mpjpe(const ProductPose& a, const ProductPose& b, const Skeleton& skel) {
  check_same_size(a, b);
  return mpjpe(forward_kinematics(a, skel), forward_kinematics(b, skel));
}

PrecisionRecall precision_recall(const std::vector<ProductPose>& model_samples, const std::vector<ProductPose>& data_samples,
                                 PoseDistance distance, const Skeleton* skel) {
  if (model_samples.empty() || data_samples.empty()) throw std::invalid_argument("precision_recall: empty sample set");
  if (distance == PoseDistance::mpjpe && !skel) throw std::invalid_argument("precision_recall: mpjpe needs a skeleton");
  const std::size_t nm = model_samples.size(), nd = data_samples.size();
  std::vector<JointPositions> fm, fd;
  if (distance == PoseDistance::mpjpe) {
    for (const auto& p : model_samples) fm.push_back(forward_kinematics(p, *skel));
    for (const auto& p : data_samples) fd.push_back(forward_kinematics(p, *skel));
  }
  std::vector<double> prec(nm, std::numeric_limits<double>::infinity());
  std::vector<double> rec(nd, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < nm; ++i) {
    for (std::size_t j = 0; j < nd; ++j) {
      const double d = distance == PoseDistance::sum_geo ? sum_geo(model_samples[i], data_samples[j]) : mpjpe(fm[i], fd[j]);
      prec[i] = std::min(prec[i], d);
      rec[j] = std::min(rec[j], d);
    }
  }
  const std::string suffix = distance == PoseDistance::sum_geo ? "sum_geo" : "mpjpe";
  return {EvalReport::from_values("precision_" + suffix, std::move(prec)),
          EvalReport::from_values("recall_" + suffix, std::move(rec))};
}

std::vector<std::pair<double, double>> threshold_curve(const std::vector<double>& values, const std::vector<double>& thresholds) {
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<double, double>> out;
  for (double t : thresholds) {
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    out.emplace_back(t, sorted.empty() ? 0.0 : static_cast<double>(count) / static_cast<double>(sorted.size()));
  }
  return out;
}

double diversity(const std::vector<JointPositions>& positions, const std::vector<int>& subset) {
  if (positions.size() < 2) throw std::invalid_argument("diversity: need at least two samples");
  if (subset.empty()) throw std::invalid_argument("diversity: empty joint subset");
  const Eigen::Index nj = positions[0].rows();
  double total = 0.0;
  for (int j : subset) {
    if (j < 0 || j >= nj) throw std::invalid_argument("diversity: joint index out of range");
    Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
    for (const auto& p : positions) mean += p.row(j);
    mean /= static_cast<double>(positions.size());
    double dev = 0.0;
    for (const auto& p : positions) dev += (p.row(j) - mean).norm();
    total += dev / static_cast<double>(positions.size());
  }
  return total / static_cast<double>(subset.size());
}

double diversity(const std::vector<ProductPose>& samples, const Skeleton& skel, const std::vector<int>& subset) {
  std::vector<JointPositions> pos;
  for (const auto& p : samples) pos.push_back(forward_kinematics(p, skel));
  return diversity(pos, subset);
}

double spherical_correlation(const std::vector<Eigen::Vector4d>& x, const std::vector<Eigen::Vector4d>& y) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("spherical_correlation: need equal, non-zero lengths");
  Eigen::Matrix4d sxy = Eigen::Matrix4d::Zero(), sxx = Eigen::Matrix4d::Zero(), syy = Eigen::Matrix4d::Zero();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Eigen::Vector4d& a = x[i];
    const Eigen::Vector4d& b = y[i];
    sxy += a * b.transpose();
    sxx += a * a.transpose();
    syy += b * b.transpose();
  }
  const double n = static_cast<double>(x.size());
  const double dxx = (sxx / n).determinant(), dyy = (syy / n).determinant();
  // Relative singularity test: the determinant of a unit-trace PSD 4x4 is at most 1/256.
  if (!(dxx > 1e-300 && dyy > 1e-300)) throw std::invalid_argument("spherical_correlation: singular moment matrix");
  return (sxy / n).determinant() / std::sqrt(dxx * dyy);
}

double spherical_correlation(const std::vector<UnitQuaternion>& x, const std::vector<UnitQuaternion>& y) {
  std::vector<Eigen::Vector4d> cx, cy;
  for (const auto& q : x) cx.push_back(q.coeffs());
  for (const auto& q : y) cy.push_back(q.coeffs());
  return spherical_correlation(cx, cy);
}

double ik_loss(const JointPositions& gt, const JointPositions& pred, const Mask& mask) {
  if (gt.rows() != pred.rows() || mask.size() != gt.rows()) throw std::invalid_argument("ik_loss: shape mismatch");
  double s = 0.0;
  for (Eigen::Index j = 0; j < gt.rows(); ++j) {
    if (mask.visible(static_cast<int>(j))) s += (gt.row(j) - pred.row(j)).norm();
  }
  return s;
}

McEstimate mc_normalization(const FlowModel& model, const std::optional<Context>& ctx, int n_samples, std::uint64_t seed) {
  if (n_samples < 10000) throw std::invalid_argument("mc_normalization: need at least 1e4 samples");
  Rng rng(seed);
  const int n = model.num_manifolds();
  const Eigen::MatrixXd row = ctx ? Eigen::MatrixXd(ctx->c.transpose()) : Eigen::MatrixXd();
  double sum = 0.0, sum_sq = 0.0;
  constexpr int kChunk = 4096;
  std::vector<ProductPose> poses;
  for (int done = 0; done < n_samples; done += kChunk) {
    const int count = std::min(kChunk, n_samples - done);
    poses.assign(static_cast<std::size_t>(count), ProductPose{});
    for (auto& p : poses) {
      for (int j = 0; j < n; ++j) p.push_back(haar_sample(rng));
    }
    for (double lp : model.log_prob(poses, ctx ? &row : nullptr)) {
      const double w = std::exp(lp);
      sum += w;
      sum_sq += w * w;
    }
  }
  const double mean = sum / n_samples;
  const double var = std::max(0.0, sum_sq / n_samples - mean * mean);
  return {mean, std::sqrt(var / n_samples)};
}

std::vector<ProductPose> FlowSampler::sample(Rng& rng, const Eigen::MatrixXd& keypoints, const Mask& mask, int count) const {
  const Context ctx = model_.encode_context(keypoints, mask);
  std::vector<ProductPose> out;
  for (auto& s : model_.sample(rng, count, ctx)) out.push_back(std::move(s.pose));
  return out;
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::ik:
      return "ik";
    case Protocol::masked_ik:
      return "masked-ik";
    case Protocol::five_point:
      return "five-point";
    case Protocol::uplift:
      return "uplift";
  }
  return "ik";
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "ik") return Protocol::ik;
  if (s == "masked-ik") return Protocol::masked_ik;
  if (s == "five-point") return Protocol::five_point;
  if (s == "uplift") return Protocol::uplift;
  throw std::invalid_argument("unknown protocol '" + s + "' (expected ik, masked-ik, five-point or uplift)");
}

ConditionalReport eval_conditional(const ConditionalSampler& sampler, const PoseDataset& data, const Skeleton& skel,
                                   const ConditionalEvalOptions& opts) {
  const int want_k = opts.protocol == Protocol::uplift ? 2 : 3;
  if (sampler.keypoint_dim() != want_k) {
    throw std::invalid_argument("eval_conditional: protocol " + to_string(opts.protocol) + " needs a " +
                                std::to_string(want_k) + "D-keypoint model");
  }
  if (opts.n_samples < 1) throw std::invalid_argument("eval_conditional: n_samples must be >= 1");
  if (data.size() == 0) throw std::invalid_argument("eval_conditional: empty dataset");
  const int nj = skel.num_joints();

  ConditionalReport report;
  Mask fixed = Mask::all(nj, true);
  bool random_mask = false;
  if (opts.protocol == Protocol::five_point) {
    fixed = Mask::all(nj, false);
    for (int l : skel.leaf_set) fixed.m[static_cast<std::size_t>(l)] = 1;
  } else if (opts.protocol == Protocol::masked_ik) {
    if (opts.occlusion_group.empty()) {
      random_mask = true;
    } else {
      for (int j : joint_group(skel, opts.occlusion_group)) fixed.m[static_cast<std::size_t>(j)] = 0;
    }
  }
  if (!random_mask) {
    for (int j = 0; j < nj; ++j) {
      if (!fixed.visible(j)) report.occluded_joints.push_back(j);
    }
  }

  nlohmann::json cfg = {{"protocol", to_string(opts.protocol)},     {"n_samples", opts.n_samples},
                        {"diversity_samples", opts.diversity_samples}, {"occlusion_group", opts.occlusion_group},
                        {"mask_probability", opts.mask_probability}, {"seed", opts.seed},
                        {"max_poses", opts.max_poses}};
  const std::uint64_t digest = io::fnv1a(cfg.dump());

  Rng rng(opts.seed);
  std::vector<double> geo, pos, ik, div_vis, div_occ;
  const std::size_t count =
      opts.max_poses > 0 ? std::min(data.size(), static_cast<std::size_t>(opts.max_poses)) : data.size();
  const int draws = std::max(opts.n_samples, opts.diversity_samples >= 2 ? opts.diversity_samples : 0);
  for (std::size_t i = 0; i < count; ++i) {
    const ProductPose& gt = data.poses[i];
    const JointPositions gt_pos = forward_kinematics(gt, skel);
    const Eigen::MatrixXd kp = want_k == 3 ? Eigen::MatrixXd(gt_pos) : Eigen::MatrixXd(project_2d(gt_pos));
    Mask mask = fixed;
    if (random_mask) {
      std::bernoulli_distribution occluded(opts.mask_probability);
      for (auto& v : mask.m) v = occluded(rng) ? 0 : 1;
    }
    const std::vector<ProductPose> samples = sampler.sample(rng, kp, mask, draws);

    ProductPose estimate = samples[0];
    if (opts.n_samples > 1) {
      for (std::size_t j = 0; j < gt.size(); ++j) {
        std::vector<Rotation> rs;
        for (int s = 0; s < opts.n_samples; ++s) rs.push_back(samples[static_cast<std::size_t>(s)][j]);
        estimate[j] = average_rotations(rs);
      }
    }
    const JointPositions est_pos = forward_kinematics(estimate, skel);
    geo.push_back(mgeo(estimate, gt));
    pos.push_back(mpjpe(est_pos, gt_pos));
    ik.push_back(ik_loss(gt_pos, est_pos, mask));

    if (opts.diversity_samples >= 2) {
      std::vector<JointPositions> fk;
      for (int s = 0; s < opts.diversity_samples; ++s) fk.push_back(forward_kinematics(samples[static_cast<std::size_t>(s)], skel));
      std::vector<int> vis, occ;
      for (int j = 1; j < nj; ++j) (mask.visible(j) ? vis : occ).push_back(j);
      if (!vis.empty()) div_vis.push_back(diversity(fk, vis));
      if (!occ.empty()) div_occ.push_back(diversity(fk, occ));
    }
  }
  report.mgeo = EvalReport::from_values("mgeo", std::move(geo), digest);
  report.mpjpe = EvalReport::from_values("mpjpe", std::move(pos), digest);
  report.ik_loss = EvalReport::from_values("ik_loss", std::move(ik), digest);
  report.diversity_visible = EvalReport::from_values("diversity_visible", std::move(div_vis), digest);
  report.diversity_occluded = EvalReport::from_values("diversity_occluded", std::move(div_occ), digest);
  return report;
}

nlohmann::json report_summary(const EvalReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx", static_cast<unsigned long long>(r.config_digest));
  return {{"name", r.name}, {"mean", num(r.mean)}, {"median", num(r.median)}, {"count", r.values.size()}, {"config_digest", digest}};
}

void write_reports_csv(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << std::setprecision(17) << "index";
  std::size_t rows = 0;
  for (const auto& r : reports) {
    out << ',' << r.name;
    rows = std::max(rows, r.values.size());
  }
  out << '\n';
  for (std::size_t i = 0; i < rows; ++i) {
    out << i;
    for (const auto& r : reports) {
      out << ',';
      if (i < r.values.size()) out << r.values[i];
    }
    out << '\n';
  }
}

void write_curve_csv(const std::vector<std::pair<double, double>>& curve, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << std::setprecision(17) << "threshold,fraction\n";
  for (const auto& [t, f] : curve) out << t << ',' << f << '\n';
}

}  // namespace huproso3
