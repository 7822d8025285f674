#pragma once

#include <cstddef>
#include <string>

#include "qbn/rng.hpp"
#include "qbn/tensor.hpp"

namespace qbn {

// Uniform Glorot weights [fan_in x fan_out]. Values are drawn in double and
// rounded to T, so float and double builds of one seed agree to rounding.
template <typename T>
BasicTensor<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out,
                              CounterRng& rng);

// Training-time state threaded through a forward pass.
struct ForwardContext {
  bool training = false;
  CounterRng* dropout_rng = nullptr;
};

template <typename T>
BasicTensor<T> apply_dropout(const BasicTensor<T>& x, double rate,
                             const ForwardContext& ctx);

// y = x W + b, W is [in x out].
template <typename T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  static Linear init(std::size_t in, std::size_t out, CounterRng& rng);
  static Linear zeros(std::size_t in, std::size_t out);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct LayerNormParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  static LayerNormParams init(std::size_t dim);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

// Position-wise dim -> 4 dim -> ReLU -> dim.
template <typename T>
struct FeedForward {
  Linear<T> expand;
  Linear<T> contract;

  static FeedForward init(std::size_t dim, CounterRng& rng);
  BasicTensor<T> operator()(const BasicTensor<T>& x, double dropout_rate,
                            const ForwardContext& ctx) const;
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

}  // namespace qbn
