#include "qbn/layers.hpp"

#include <cmath>

namespace qbn {

template <typename T>
BasicTensor<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out,
                              CounterRng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> w(fan_in * fan_out);
  for (T& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
  return BasicTensor<T>({fan_in, fan_out}, std::move(w), true);
}

template <typename T>
BasicTensor<T> apply_dropout(const BasicTensor<T>& x, double rate,
                             const ForwardContext& ctx) {
  if (!ctx.training || rate == 0.0) return x;
  if (!ctx.dropout_rng) {
    throw ContractError("training forward pass with dropout needs an rng");
  }
  return dropout(x, rate, *ctx.dropout_rng);
}

template <typename T>
Linear<T> Linear<T>::init(std::size_t in, std::size_t out, CounterRng& rng) {
  return {glorot_uniform<T>(in, out, rng), BasicTensor<T>::zeros({out}, true)};
}

template <typename T>
Linear<T> Linear<T>::zeros(std::size_t in, std::size_t out) {
  return {BasicTensor<T>::zeros({in, out}, true),
          BasicTensor<T>::zeros({out}, true)};
}

template <typename T>
BasicTensor<T> Linear<T>::operator()(const BasicTensor<T>& x) const {
  return add(matmul(x, weight), bias);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix,
                        NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::init(std::size_t dim) {
  return {BasicTensor<T>::full({dim}, T(1), true),
          BasicTensor<T>::zeros({dim}, true)};
}

template <typename T>
BasicTensor<T> LayerNormParams<T>::operator()(const BasicTensor<T>& x) const {
  return layer_norm(x, gamma, beta);
}

template <typename T>
void LayerNormParams<T>::collect(const std::string& prefix,
                                 NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

template <typename T>
FeedForward<T> FeedForward<T>::init(std::size_t dim, CounterRng& rng) {
  FeedForward f;
  f.expand = Linear<T>::init(dim, 4 * dim, rng);
  f.contract = Linear<T>::init(4 * dim, dim, rng);
  return f;
}

template <typename T>
BasicTensor<T> FeedForward<T>::operator()(const BasicTensor<T>& x,
                                          double dropout_rate,
                                          const ForwardContext& ctx) const {
  return apply_dropout(contract(relu(expand(x))), dropout_rate, ctx);
}

template <typename T>
void FeedForward<T>::collect(const std::string& prefix,
                             NamedTensors<T>& out) const {
  expand.collect(prefix + ".expand", out);
  contract.collect(prefix + ".contract", out);
}

#define QBN_INSTANTIATE_LAYERS(T)                                          \
  template BasicTensor<T> glorot_uniform<T>(std::size_t, std::size_t,      \
                                            CounterRng&);                  \
  template BasicTensor<T> apply_dropout(const BasicTensor<T>&, double,     \
                                        const ForwardContext&);            \
  template struct Linear<T>;                                               \
  template struct LayerNormParams<T>;                                      \
  template struct FeedForward<T>;

QBN_INSTANTIATE_LAYERS(float)
QBN_INSTANTIATE_LAYERS(double)

}  // namespace qbn
