#pragma once

#include "huproso3/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace huproso3 {

/// Adam moment accumulators laid out like a ParamStore.
struct AdamState {
  std::vector<ad::Array> m;
  std::vector<ad::Array> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros_like(const ad::ParamStore& params);
  bool matches(const ad::ParamStore& params) const;
};

/// One bias-corrected Adam update. Throws std::runtime_error naming the
/// parameter when a gradient entry is not finite; parameters are left
/// untouched in that case.
void adam_step(ad::ParamStore& params, const ad::Gradients& grads, AdamState& state, double lr);

}  // namespace huproso3
