#include "huproso3/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace huproso3 {

AdamState AdamState::zeros_like(const ad::ParamStore& params) {
  AdamState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Array& p = params.value(i);
    s.m.push_back(ad::Array::Zero(p.rows(), p.cols()));
    s.v.push_back(ad::Array::Zero(p.rows(), p.cols()));
  }
  return s;
}

bool AdamState::matches(const ad::ParamStore& params) const {
  if (m.size() != params.size() || v.size() != params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Array& p = params.value(i);
    if (m[i].rows() != p.rows() || m[i].cols() != p.cols() || v[i].rows() != p.rows() || v[i].cols() != p.cols()) {
      return false;
    }
  }
  return true;
}

void adam_step(ad::ParamStore& params, const ad::Gradients& grads, AdamState& state, double lr) {
  if (!state.matches(params)) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const ad::Array& p = params.value(i);
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + params.name(i));
    }
    if (!grads[i].allFinite()) throw std::runtime_error("adam_step: non-finite gradient for " + params.name(i));
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i].square();
    ad::Array& p = params.mutable_value(i);
    p -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + state.eps);
  }
}

}  // namespace huproso3
