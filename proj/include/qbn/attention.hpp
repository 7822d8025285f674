#pragma once

#include <cstddef>
#include <string>

#include "qbn/layers.hpp"
#include "qbn/mask.hpp"
#include "qbn/tensor.hpp"

namespace qbn {

struct AttentionConfig {
  std::size_t model_dim = 512;
  std::size_t num_heads = 16;
  double dropout_rate = 0.1;
  // Rescale gated attention rows back to sum 1. Off multiplies the softmax
  // map by the gate and leaves rows summing to less than 1.
  bool gate_renormalize = true;

  std::size_t head_dim() const { return model_dim / num_heads; }
  // Throws ConfigError on zero extents, a non-dividing head count or a
  // dropout rate outside [0, 1).
  void validate() const;
};

template <typename T>
struct AttentionResult {
  BasicTensor<T> output;
  // Attention map after gating, [h x n_q x n_k] or [B x h x n_q x n_k].
  BasicTensor<T> weights;
};

// Q [h x n_q x d], K and V [h x n_k x d], or the same with a leading batch
// axis. The optional gate is [n_q x n_k] (batched: [B x n_q x n_k]) and is
// shared over heads. Masked keys get weight 0; an example whose keys are all
// masked is a ContractError.
template <typename T>
AttentionResult<T> scaled_attention(const BasicTensor<T>& q,
                                    const BasicTensor<T>& k,
                                    const BasicTensor<T>& v,
                                    const BasicTensor<T>& gate = {},
                                    const KeyMask* key_mask = nullptr,
                                    bool gate_renormalize = true);

template <typename T>
struct MultiHeadAttentionParams {
  Linear<T> query;
  Linear<T> key;
  Linear<T> value;
  Linear<T> output;

  static MultiHeadAttentionParams init(std::size_t model_dim, CounterRng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

// Inputs are [n x model_dim] or [B x n x model_dim].
template <typename T>
AttentionResult<T> multi_head_attention(
    const BasicTensor<T>& query, const BasicTensor<T>& key,
    const BasicTensor<T>& value, const AttentionConfig& cfg,
    const MultiHeadAttentionParams<T>& params, const BasicTensor<T>& gate = {},
    const KeyMask* key_mask = nullptr);

template <typename T>
struct SelfAttentionParams {
  MultiHeadAttentionParams<T> attention;
  LayerNormParams<T> attention_norm;
  FeedForward<T> ffn;
  LayerNormParams<T> ffn_norm;

  static SelfAttentionParams init(std::size_t model_dim, CounterRng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

// Post-norm encoder layer:
//   y = LN(x + Drop(MHA(x, x, x)));  out = LN(y + Drop(FFN(y)))
template <typename T>
BasicTensor<T> self_attention_layer(const BasicTensor<T>& x,
                                    const AttentionConfig& cfg,
                                    const SelfAttentionParams<T>& params,
                                    const KeyMask* key_mask = nullptr,
                                    const ForwardContext& ctx = {});

}  // namespace qbn
