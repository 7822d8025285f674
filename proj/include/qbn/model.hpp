#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "qbn/attention.hpp"
#include "qbn/layers.hpp"
#include "qbn/mask.hpp"
#include "qbn/quaternion.hpp"
#include "qbn/tensor.hpp"

namespace qbn {

inline constexpr std::int32_t kPadToken = 0;

struct QBNConfig {
  std::size_t model_dim = 512;
  std::size_t num_heads = 16;
  std::size_t num_blocks = 4;
  std::size_t question_len = 14;
  std::size_t num_regions = 16;
  std::size_t region_spatial = 2;  // s, regions carry an s x s grid
  std::size_t region_channels = 64;
  std::size_t vocab_size = 0;
  std::size_t num_answers = 0;
  double dropout_rate = 0.1;
  bool use_relationship_gate = true;
  bool use_content_learning = true;
  bool gate_renormalize = true;

  AttentionConfig attention() const;
  std::size_t cells() const { return region_spatial * region_spatial; }
  // Throws ConfigError.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// Single-layer LSTM, gate order (input, forget, cell, output).
template <typename T>
struct LstmParams {
  BasicTensor<T> input_weight;   // [in x 4h]
  BasicTensor<T> hidden_weight;  // [h x 4h]
  BasicTensor<T> bias;           // [4h]

  static LstmParams init(std::size_t in, std::size_t hidden, CounterRng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

// Single-layer GRU, gate order (reset, update, candidate):
//   r = sig(x Wr + h Ur), z = sig(x Wz + h Uz), n = tanh(x Wn + r * (h Un))
//   h' = (1 - z) * n + z * h
template <typename T>
struct GruParams {
  BasicTensor<T> input_weight;   // [in x 3h]
  BasicTensor<T> hidden_weight;  // [h x 3h]
  BasicTensor<T> input_bias;     // [3h]
  BasicTensor<T> hidden_bias;    // [3h]

  static GruParams init(std::size_t in, std::size_t hidden, CounterRng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct QuestionEncoderParams {
  BasicTensor<T> embedding;  // [vocab x D]
  BasicTensor<T> position;   // [len x D]
  LstmParams<T> lstm;

  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct FilmParams {
  Linear<T> gamma;    // D -> c, bias starts at 1
  Linear<T> beta;     // D -> c
  Linear<T> project;  // c -> D

  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct BlockParams {
  std::array<SelfAttentionParams<T>, 3> visual_chain;
  std::array<SelfAttentionParams<T>, 3> text_chain;
  GruParams<T> summary;
  std::array<MultiHeadAttentionParams<T>, 4> coattention;  // one per layer
  Linear<T> fuse;  // 4D -> D
  FeedForward<T> ffn;
  LayerNormParams<T> norm;

  static BlockParams init(std::size_t model_dim, CounterRng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct ClassifierParams {
  Linear<T> pool_query;  // q_t -> pooling query
  Linear<T> pool_key;    // regions -> pooling keys
  Linear<T> question;    // q_t -> fusion vector
  Linear<T> hidden;
  Linear<T> output;  // zero-initialized

  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct QBNParams {
  QuestionEncoderParams<T> question;
  FilmParams<T> film;
  std::vector<BlockParams<T>> blocks;
  ClassifierParams<T> classifier;

  // Each submodule draws from its own stream of `seed`, so e.g. block 0 is
  // initialized identically whatever num_blocks is.
  static QBNParams init(const QBNConfig& cfg, std::uint64_t seed);
  NamedTensors<T> named() const;
};

// ---------------------------------------------------------------------------
// Forward pieces. Everything is batched: text [B x len x D], regions
// [B x mu x s*s x c], visual [B x mu x D].
// ---------------------------------------------------------------------------

template <typename T>
struct QuestionEncoding {
  BasicTensor<T> word_states;  // [B x len x D]
  BasicTensor<T> question;     // q_t, [B x D]
};

// Validity of each token position (token != pad).
KeyMask word_mask(std::span<const std::int32_t> tokens, std::size_t batch,
                  std::size_t length);

// Pad steps leave the LSTM state unchanged, so q_t is the state after the last
// real token. Token ids >= vocab size raise InputError.
template <typename T>
QuestionEncoding<T> encode_question(std::span<const std::int32_t> tokens,
                                    std::size_t batch, const QBNConfig& cfg,
                                    const QuestionEncoderParams<T>& params);

template <typename T>
struct FilmResult {
  BasicTensor<T> gamma;   // [B x c]
  BasicTensor<T> beta;    // [B x c]
  BasicTensor<T> scaled;  // gamma * R + beta, [B x mu x s*s x c]
  BasicTensor<T> output;  // [B x mu x D]
};

template <typename T>
FilmResult<T> film_condition(const BasicTensor<T>& regions,
                             const BasicTensor<T>& question,
                             const QBNConfig& cfg, const FilmParams<T>& params);

// r = x0, i = Sa(r), j = Sa(i), k = Sa(j).
template <typename T>
QuaternionFeatureStack<T> build_layer_chain(
    const BasicTensor<T>& x0, const std::array<SelfAttentionParams<T>, 3>& sa,
    const AttentionConfig& cfg, const KeyMask* mask = nullptr,
    const ForwardContext& ctx = {});

template <typename T>
struct ContentSummary {
  std::array<BasicTensor<T>, 4> layer_means;  // [B x D] each
  BasicTensor<T> multi_qn;                    // [B x D]
};

// Masked mean of every text layer over real tokens, then a 4-step GRU over
// (r, i, j, k). A question without real tokens is a ContractError.
template <typename T>
ContentSummary<T> content_summary(const QuaternionFeatureStack<T>& text,
                                  const KeyMask& mask,
                                  const GruParams<T>& rnn);

template <typename T>
struct CoattentionResult {
  std::array<BasicTensor<T>, 4> update;   // [B x mu x D]
  std::array<BasicTensor<T>, 4> weights;  // [B x h x mu x len]
};

// Layer x of the visual stack attends over text layer x plus multi_qn,
// gated by gate_x. A null gate or summary skips that path.
template <typename T>
CoattentionResult<T> coattention_update(
    const QuaternionFeatureStack<T>& visual,
    const QuaternionFeatureStack<T>& text, const ContentSummary<T>* summary,
    const QuaternionGate<T>* gate, const KeyMask& mask,
    const AttentionConfig& cfg,
    const std::array<MultiHeadAttentionParams<T>, 4>& params);

template <typename T>
struct BlockResult {
  BasicTensor<T> visual;  // v_out
  BasicTensor<T> text;    // w_out (= k layer of the text chain)
  QuaternionFeatureStack<T> visual_stack;
  QuaternionFeatureStack<T> text_stack;
  ContentSummary<T> summary;  // empty when content learning is off
  QuaternionGate<T> gate;     // empty when the relationship gate is off
  CoattentionResult<T> coattention;
};

template <typename T>
BlockResult<T> quaternion_block(const BasicTensor<T>& visual,
                                const BasicTensor<T>& text,
                                const KeyMask& mask, const BlockParams<T>& params,
                                const QBNConfig& cfg,
                                const ForwardContext& ctx = {});

template <typename T>
struct ClassifierResult {
  BasicTensor<T> logits;          // [B x answers]
  BasicTensor<T> region_weights;  // pooling attention, [B x mu]
};

template <typename T>
ClassifierResult<T> classify(const BasicTensor<T>& visual,
                             const BasicTensor<T>& question,
                             const ClassifierParams<T>& params);

// Pooling attention of the classifier evaluated on any [B x mu x D] input.
template <typename T>
BasicTensor<T> region_weights(const BasicTensor<T>& visual,
                              const BasicTensor<T>& question,
                              const ClassifierParams<T>& params);

template <typename T>
struct ModelInput {
  std::size_t batch = 0;
  BasicTensor<T> regions;             // [B x mu x s*s x c]
  std::vector<std::int32_t> tokens;  // [B x len]
};

template <typename T>
struct ForwardTrace {
  QuestionEncoding<T> question;
  FilmResult<T> film;
  std::vector<BlockResult<T>> blocks;
  // Classifier pooling attention applied to each block's visual output.
  std::vector<BasicTensor<T>> block_region_weights;
};

template <typename T>
ClassifierResult<T> forward(const QBNConfig& cfg, const QBNParams<T>& params,
                            const ModelInput<T>& input,
                            const ForwardContext& ctx = {},
                            ForwardTrace<T>* trace = nullptr);

}  // namespace qbn
