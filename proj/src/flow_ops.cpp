#include "huproso3/flow_ops.hpp"

#include "huproso3/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace huproso3::taped {

using ad::Array;
using ad::Var;

Array rotations_to_array(std::span<const Rotation> rs) {
  Array a(static_cast<Eigen::Index>(rs.size()), 9);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const Eigen::Matrix3d& m = rs[i].matrix();
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 3; ++r) a(static_cast<Eigen::Index>(i), 3 * c + r) = m(r, c);
  }
  return a;
}

Rotation array_row_to_rotation(const Array& a, Eigen::Index row) {
  Eigen::Matrix3d m;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) m(r, c) = a(row, 3 * c + r);
  return Rotation::from_orthonormal(m, 1e-8);
}

Var column(Var rot, int c) { return ad::cols(rot, 3 * c, 3); }

Var sixd(Var rot) { return ad::cols(rot, 0, 6); }

namespace {

inline double entry(const Array& a, Eigen::Index row, int r, int c) { return a(row, 3 * c + r); }

double canonical_sign(const double* q, Eigen::Index stride) {
  for (int i = 0; i < 4; ++i) {
    const double v = q[i * stride];
    if (v > 0.0) return 1.0;
    if (v < 0.0) return -1.0;
  }
  return 1.0;
}

struct OffTerm {
  int comp;
  int r1, c1, r2, c2;
  double s2;
};

struct Pivot {
  int primary;
  double diag_sign[3];
  OffTerm others[3];
};

// Shepperd pivots: q[primary] = s / 4 with s = 2 sqrt(1 + sum diag_sign_k m_kk);
// q[comp] = (m(r1,c1) + s2 m(r2,c2)) / s.
constexpr Pivot kPivots[4] = {
    {0, {1, 1, 1}, {{1, 2, 1, 1, 2, -1}, {2, 0, 2, 2, 0, -1}, {3, 1, 0, 0, 1, -1}}},
    {1, {1, -1, -1}, {{0, 2, 1, 1, 2, -1}, {2, 0, 1, 1, 0, 1}, {3, 0, 2, 2, 0, 1}}},
    {2, {-1, 1, -1}, {{0, 0, 2, 2, 0, -1}, {1, 0, 1, 1, 0, 1}, {3, 1, 2, 2, 1, 1}}},
    {3, {-1, -1, 1}, {{0, 1, 0, 0, 1, -1}, {1, 0, 2, 2, 0, 1}, {2, 1, 2, 2, 1, 1}}},
};

int pivot_index(const Eigen::Matrix3d& m) {
  const double tr = m.trace();
  if (tr >= m(0, 0) && tr >= m(1, 1) && tr >= m(2, 2)) return 0;
  if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2)) return 1;
  if (m(1, 1) >= m(2, 2)) return 2;
  return 3;
}

Eigen::Matrix3d row_matrix(const Array& a, Eigen::Index row) {
  Eigen::Matrix3d m;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) m(r, c) = a(row, 3 * c + r);
  return m;
}

}  // namespace

Var mat_to_quat(Var rot) {
  if (rot.cols() != 9) throw std::invalid_argument("mat_to_quat: need B x 9");
  const Array& a = rot.value();
  const Eigen::Index n = a.rows();
  Array q(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) q.row(i) = matrix_to_quat_coeffs(row_matrix(a, i)).transpose();
  return rot.tape()->push("mat_to_quat", std::move(q), {rot}, [rot](ad::Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    const Array& m = rot.value();
    const Array& q = tp.value(id);
    Array gm = Array::Zero(m.rows(), 9);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const Eigen::Matrix3d mm = row_matrix(m, i);
      const Pivot& pv = kPivots[pivot_index(mm)];
      const double u = 1.0 + pv.diag_sign[0] * mm(0, 0) + pv.diag_sign[1] * mm(1, 1) + pv.diag_sign[2] * mm(2, 2);
      const double s = 2.0 * std::sqrt(u);
      // q already carries the canonical sign; fold it into every partial.
      const double sign = (q(i, pv.primary) >= 0.0) ? 1.0 : -1.0;
      double g_u = g(i, pv.primary) * sign / (4.0 * std::sqrt(u));  // d(s/4)/du = 1/(4 sqrt u)
      for (const OffTerm& t : pv.others) {
        const double gc = g(i, t.comp) * sign;
        gm(i, 3 * t.c1 + t.r1) += gc / s;
        gm(i, 3 * t.c2 + t.r2) += gc * t.s2 / s;
        // d(num/s)/du = -num/s^2 * ds/du, ds/du = 2/s, and num/s = sign * q.
        g_u += gc * (-(sign * q(i, t.comp)) / s) * (2.0 / s);
      }
      for (int k = 0; k < 3; ++k) gm(i, 4 * k) += g_u * pv.diag_sign[k];
    }
    tp.accumulate(rot, gm);
  });
}

Var quat_to_mat(Var q) {
  if (q.cols() != 4) throw std::invalid_argument("quat_to_mat: need B x 4");
  const Array& a = q.value();
  const Eigen::Index n = a.rows();
  Array m(n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Matrix3d r = quat_coeffs_to_matrix(a.row(i).transpose().matrix());
    for (int c = 0; c < 3; ++c)
      for (int rr = 0; rr < 3; ++rr) m(i, 3 * c + rr) = r(rr, c);
  }
  return q.tape()->push("quat_to_mat", std::move(m), {q}, [q](ad::Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    const Array& v = q.value();
    const auto w = v.col(0), x = v.col(1), y = v.col(2), z = v.col(3);
    // Column-stacked entries: 0=R00 1=R10 2=R20 3=R01 4=R11 5=R21 6=R02 7=R12 8=R22.
    Array gq(v.rows(), 4);
    gq.col(0) = 2.0 * (g.col(1) * z - g.col(2) * y - g.col(3) * z + g.col(5) * x + g.col(6) * y - g.col(7) * x);
    gq.col(1) = 2.0 * (-2.0 * g.col(4) * x - 2.0 * g.col(8) * x + g.col(1) * y + g.col(2) * z + g.col(3) * y +
                       g.col(5) * w + g.col(6) * z - g.col(7) * w);
    gq.col(2) = 2.0 * (-2.0 * g.col(0) * y - 2.0 * g.col(8) * y + g.col(1) * x - g.col(2) * w + g.col(3) * x +
                       g.col(5) * z + g.col(6) * w + g.col(7) * z);
    gq.col(3) = 2.0 * (-2.0 * g.col(0) * z - 2.0 * g.col(4) * z + g.col(1) * w + g.col(2) * x - g.col(3) * w +
                       g.col(5) * y + g.col(6) * x + g.col(7) * y);
    tp.accumulate(q, gq);
  });
}

Var canonicalize(Var q) {
  const Array& a = q.value();
  Array sign(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) sign(i, 0) = canonical_sign(&a(i, 0), a.rows());
  Array v = a * sign.replicate(1, 4);
  return q.tape()->push("canonicalize", std::move(v), {q}, [q, sign](ad::Tape& tp, int id) {
    tp.accumulate(q, tp.grad_of(id) * sign.replicate(1, 4));
  });
}

namespace {

// f(s) = tanh(s)/s and f'(s)/s, with series near zero.
inline double squash_f(double s) { return s < 1e-8 ? 1.0 - s * s / 3.0 : std::tanh(s) / s; }

inline double squash_df_over_s(double s) {
  if (s < 1e-2) {
    const double s2 = s * s;
    return -2.0 / 3.0 + 8.0 * s2 / 15.0 - 34.0 * s2 * s2 / 105.0;
  }
  const double t = std::tanh(s);
  return (s * (1.0 - t * t) - t) / (s * s * s);
}

}  // namespace

Var radial_squash(Var xi) {
  const Array& x = xi.value();
  const Array s = x.square().rowwise().sum().sqrt();
  Array f(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) f(i, 0) = squash_f(s(i, 0));
  Array v = kOmegaRadius * x * f.replicate(1, x.cols());
  return xi.tape()->push("radial_squash", std::move(v), {xi}, [xi, s, f](ad::Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    const Array& x = xi.value();
    Array h(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) h(i, 0) = squash_df_over_s(s(i, 0));
    const Array xg = (x * g).rowwise().sum();
    tp.accumulate(xi, kOmegaRadius * (g * f.replicate(1, x.cols()) + x * (h * xg).replicate(1, x.cols())));
  });
}

Var omega_from_conditioner(Var g, Var n) {
  Var xi = g - n * ad::dot_rows(n, g);
  return radial_squash(xi);
}

LayerOut coupling(Var rot, Var g, int fixed_column, bool inverse) {
  if (fixed_column != 0 && fixed_column != 1) throw std::invalid_argument("coupling: fixed_column must be 0 or 1");
  Var n = column(rot, fixed_column);
  Var m = column(rot, 1 - fixed_column);
  Var w = omega_from_conditioner(g, n);
  if (inverse) w = -w;
  Var ww = ad::dot_rows(w, w);
  Var mw = ad::dot_rows(m, w);
  // |m - w|^2 written with |m| = 1 so that omega = 0 gives rho = 1 exactly.
  Var rho = (1.0 - ww) / (1.0 - 2.0 * mw + ww);
  Var moved = rho * (m - w) - w;
  Var out = fixed_column == 0 ? ad::concat_cols({n, moved, ad::cross_rows(n, moved)})
                              : ad::concat_cols({moved, n, ad::cross_rows(moved, n)});
  return {out, ad::log(rho)};
}

AffineVars affine_from_raw(Var raw) {
  if (raw.cols() != 16) throw std::invalid_argument("affine_from_raw: need B x 16");
  ad::Tape& t = *raw.tape();
  Var ones = t.constant(Array::Ones(raw.rows(), 1));
  auto unit = [&](Eigen::Index off) {
    Var v = ad::concat_cols({ones, ad::cols(raw, off, 3)});
    return v / ad::norm_rows(v);
  };
  AffineVars p;
  p.u_left = unit(0);
  p.u_right = unit(3);
  p.v_left = unit(6);
  p.v_right = unit(9);
  p.log_sigma = kLogSigmaBound * ad::tanh(ad::cols(raw, 12, 4) * (1.0 / kLogSigmaBound));
  return p;
}

LayerOut quat_affine(Var rot, const AffineVars& p, bool inverse) {
  Var q = mat_to_quat(rot);
  Var s;
  Var log_det_w;
  if (!inverse) {
    // W q = U diag(sigma) V^T q, V^T x = conj(v_l) x conj(v_r).
    Var t = ad::quat_mul_rows(ad::quat_mul_rows(ad::quat_conj_rows(p.v_left), q), ad::quat_conj_rows(p.v_right));
    t = t * ad::exp(p.log_sigma);
    s = ad::quat_mul_rows(ad::quat_mul_rows(p.u_left, t), p.u_right);
    log_det_w = ad::sum_cols(p.log_sigma);
  } else {
    Var t = ad::quat_mul_rows(ad::quat_mul_rows(ad::quat_conj_rows(p.u_left), q), ad::quat_conj_rows(p.u_right));
    t = t * ad::exp(-p.log_sigma);
    s = ad::quat_mul_rows(ad::quat_mul_rows(p.v_left, t), p.v_right);
    log_det_w = -ad::sum_cols(p.log_sigma);
  }
  Var s2 = ad::dot_rows(s, s);
  Var q2 = ad::dot_rows(q, q);
  Var out = canonicalize(s / ad::sqrt(s2));
  Var logdet = log_det_w - 2.0 * ad::log(s2 / q2);
  return {quat_to_mat(out), logdet};
}

}  // namespace huproso3::taped
