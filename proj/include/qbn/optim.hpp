#pragma once

#include <cstdint>
#include <vector>

#include "qbn/tensor.hpp"

namespace qbn {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First and second moment buffers, one per parameter in `named()` order.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState zeros(const NamedTensors<T>& params);
};

// One bias-corrected Adam update from the gradients currently stored on
// `params`:
//   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
//   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
// Parameters without a gradient are skipped and keep their moments.
// `lr_scale` multiplies the learning rate (warmup). A non-finite gradient
// raises NumericError naming the parameter before anything is modified.
template <typename T>
void adam_step(const NamedTensors<T>& params, AdamState<T>& state,
               const AdamConfig& cfg, double lr_scale = 1.0);

}  // namespace qbn
