#include "qbn/attention.hpp"

#include <cmath>

namespace qbn {

void AttentionConfig::validate() const {
  if (model_dim == 0 || num_heads == 0) {
    throw ConfigError("model_dim and num_heads must be positive");
  }
  if (model_dim % num_heads != 0) {
    throw ConfigError("num_heads " + std::to_string(num_heads) +
                      " does not divide model_dim " +
                      std::to_string(model_dim));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout_rate must lie in [0, 1)");
  }
}

template <typename T>
AttentionResult<T> scaled_attention(const BasicTensor<T>& q,
                                    const BasicTensor<T>& k,
                                    const BasicTensor<T>& v,
                                    const BasicTensor<T>& gate,
                                    const KeyMask* key_mask,
                                    bool gate_renormalize) {
  const bool batched = q.rank() == 4;
  if ((q.rank() != 3 && q.rank() != 4) || k.rank() != q.rank() ||
      v.rank() != q.rank()) {
    throw DimensionError("attention wants rank-3 or rank-4 Q/K/V, got " +
                         to_string(q.shape()) + ", " + to_string(k.shape()) +
                         ", " + to_string(v.shape()));
  }
  auto as4 = [](const BasicTensor<T>& x) {
    if (x.rank() == 4) return x;
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    return reshape(x, s);
  };
  const BasicTensor<T> q4 = as4(q), k4 = as4(k), v4 = as4(v);
  const std::size_t b = q4.dim(0), h = q4.dim(1), nq = q4.dim(2),
                    d = q4.dim(3), nk = k4.dim(2);
  if (k4.dim(0) != b || v4.dim(0) != b || k4.dim(1) != h || v4.dim(1) != h ||
      k4.dim(3) != d || v4.dim(2) != nk) {
    throw DimensionError("attention head shapes disagree: Q " +
                         to_string(q.shape()) + ", K " + to_string(k.shape()) +
                         ", V " + to_string(v.shape()));
  }

  BasicTensor<T> logits =
      scale(matmul(q4, transpose(k4)), T(1) / std::sqrt(static_cast<T>(d)));
  if (key_mask) {
    key_mask->require_nonempty_rows();
    logits = add(logits, key_mask->additive_bias<T>(logits.shape()));
  }
  BasicTensor<T> weights = softmax(logits, 3);

  if (gate.defined()) {
    const Shape expected = batched ? Shape{b, nq, nk} : Shape{nq, nk};
    if (gate.shape() != expected) {
      throw DimensionError("gate shape " + to_string(gate.shape()) +
                           " does not match attention map " +
                           to_string(expected));
    }
    const BasicTensor<T> g3 = batched ? gate : reshape(gate, {1, nq, nk});
    weights = mul(weights, expand(g3, 1, h));
    if (gate_renormalize) {
      weights = div(weights, expand(sum(weights, 3), 3, nk));
    }
  }

  BasicTensor<T> out = matmul(weights, v4);
  if (!batched) {
    out = reshape(out, {h, nq, d});
    weights = reshape(weights, {h, nq, nk});
  }
  return {out, weights};
}

template <typename T>
MultiHeadAttentionParams<T> MultiHeadAttentionParams<T>::init(
    std::size_t model_dim, CounterRng& rng) {
  MultiHeadAttentionParams p;
  p.query = Linear<T>::init(model_dim, model_dim, rng);
  p.key = Linear<T>::init(model_dim, model_dim, rng);
  p.value = Linear<T>::init(model_dim, model_dim, rng);
  p.output = Linear<T>::init(model_dim, model_dim, rng);
  return p;
}

template <typename T>
void MultiHeadAttentionParams<T>::collect(const std::string& prefix,
                                          NamedTensors<T>& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

template <typename T>
AttentionResult<T> multi_head_attention(
    const BasicTensor<T>& query, const BasicTensor<T>& key,
    const BasicTensor<T>& value, const AttentionConfig& cfg,
    const MultiHeadAttentionParams<T>& params, const BasicTensor<T>& gate,
    const KeyMask* key_mask) {
  cfg.validate();
  const bool batched = query.rank() == 3;
  for (const BasicTensor<T>* x : {&query, &key, &value}) {
    if ((x->rank() != 2 && x->rank() != 3) || x->rank() != query.rank() ||
        x->shape().back() != cfg.model_dim) {
      throw DimensionError("multi-head attention wants [n x " +
                           std::to_string(cfg.model_dim) +
                           "] inputs (optionally batched), got " +
                           to_string(x->shape()));
    }
  }
  const std::size_t h = cfg.num_heads, dh = cfg.head_dim();
  auto split = [&](const BasicTensor<T>& x) {
    const std::size_t b = batched ? x.dim(0) : 1;
    const std::size_t n = x.dim(x.rank() - 2);
    return permute(reshape(x, {b, n, h, dh}), {0, 2, 1, 3});
  };
  BasicTensor<T> g = gate;
  if (g.defined() && !batched) {
    Shape s = g.shape();
    s.insert(s.begin(), 1);
    g = reshape(g, s);
  }
  AttentionResult<T> heads =
      scaled_attention(split(params.query(query)), split(params.key(key)),
                       split(params.value(value)), g, key_mask,
                       cfg.gate_renormalize);
  const std::size_t b = heads.output.dim(0), nq = heads.output.dim(2);
  BasicTensor<T> merged =
      reshape(permute(heads.output, {0, 2, 1, 3}), {b, nq, cfg.model_dim});
  if (!batched) {
    merged = reshape(merged, {nq, cfg.model_dim});
    heads.weights = reshape(heads.weights,
                            {h, nq, heads.weights.dim(3)});
  }
  return {params.output(merged), heads.weights};
}

template <typename T>
SelfAttentionParams<T> SelfAttentionParams<T>::init(std::size_t model_dim,
                                                    CounterRng& rng) {
  SelfAttentionParams p;
  p.attention = MultiHeadAttentionParams<T>::init(model_dim, rng);
  p.attention_norm = LayerNormParams<T>::init(model_dim);
  p.ffn = FeedForward<T>::init(model_dim, rng);
  p.ffn_norm = LayerNormParams<T>::init(model_dim);
  return p;
}

template <typename T>
void SelfAttentionParams<T>::collect(const std::string& prefix,
                                     NamedTensors<T>& out) const {
  attention.collect(prefix + ".attention", out);
  attention_norm.collect(prefix + ".attention_norm", out);
  ffn.collect(prefix + ".ffn", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
}

template <typename T>
BasicTensor<T> self_attention_layer(const BasicTensor<T>& x,
                                    const AttentionConfig& cfg,
                                    const SelfAttentionParams<T>& params,
                                    const KeyMask* key_mask,
                                    const ForwardContext& ctx) {
  const BasicTensor<T> attended =
      multi_head_attention(x, x, x, cfg, params.attention, {}, key_mask).output;
  const BasicTensor<T> y = params.attention_norm(
      add(x, apply_dropout(attended, cfg.dropout_rate, ctx)));
  return params.ffn_norm(add(y, params.ffn(y, cfg.dropout_rate, ctx)));
}

#define QBN_INSTANTIATE_ATTENTION(T)                                        \
  template AttentionResult<T> scaled_attention(                             \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
      const BasicTensor<T>&, const KeyMask*, bool);                         \
  template struct MultiHeadAttentionParams<T>;                              \
  template AttentionResult<T> multi_head_attention(                         \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
      const AttentionConfig&, const MultiHeadAttentionParams<T>&,           \
      const BasicTensor<T>&, const KeyMask*);                               \
  template struct SelfAttentionParams<T>;                                   \
  template BasicTensor<T> self_attention_layer(                             \
      const BasicTensor<T>&, const AttentionConfig&,                        \
      const SelfAttentionParams<T>&, const KeyMask*, const ForwardContext&);

QBN_INSTANTIATE_ATTENTION(float)
QBN_INSTANTIATE_ATTENTION(double)

}  // namespace qbn
