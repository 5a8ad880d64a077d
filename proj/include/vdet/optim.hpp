#pragma once

#include <vector>

#include "vdet/error.hpp"
#include "vdet/layers.hpp"

namespace vdet {

template <typename T>
struct SgdmState {
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::vector<Tensor<T>> velocity;  // one per parameter, created on first step
};

// v <- momentum * v - learning_rate * g;  p <- p + v
template <typename T>
void sgdm_step(const std::vector<Param<T>*>& params, SgdmState<T>& state) {
  if (state.velocity.empty()) {
    for (const Param<T>* p : params) state.velocity.emplace_back(p->value.shape());
  }
  if (state.velocity.size() != params.size()) {
    throw ConfigError("sgdm_step: parameter list changed between steps");
  }
  const T mu = static_cast<T>(state.momentum);
  const T lr = static_cast<T>(state.learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<T>& p = *params[i];
    Tensor<T>& v = state.velocity[i];
    if (v.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw ConfigError("sgdm_step: shape mismatch");
    }
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = mu * v[j] - lr * p.grad[j];
      p.value[j] += v[j];
    }
  }
}

}  // namespace vdet
