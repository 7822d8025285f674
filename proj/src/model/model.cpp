#include "qbn/model.hpp"

#include <cmath>

namespace qbn {

AttentionConfig QBNConfig::attention() const {
  AttentionConfig a;
  a.model_dim = model_dim;
  a.num_heads = num_heads;
  a.dropout_rate = dropout_rate;
  a.gate_renormalize = gate_renormalize;
  return a;
}

void QBNConfig::validate() const {
  attention().validate();
  if (num_blocks < 1) throw ConfigError("num_blocks must be at least 1");
  if (question_len < 1) throw ConfigError("question_len must be at least 1");
  if (num_regions < 1) throw ConfigError("num_regions must be at least 1");
  if (region_spatial != 1 && region_spatial != 2) {
    throw ConfigError("region_spatial must be 1 or 2, got " +
                      std::to_string(region_spatial));
  }
  if (region_channels < 1) throw ConfigError("region_channels must be positive");
  if (vocab_size < 2) {
    throw ConfigError("vocab_size must cover the pad token and one word");
  }
  if (num_answers < 1) throw ConfigError("num_answers must be positive");
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
LstmParams<T> LstmParams<T>::init(std::size_t in, std::size_t hidden,
                                  CounterRng& rng) {
  return {glorot_uniform<T>(in, 4 * hidden, rng),
          glorot_uniform<T>(hidden, 4 * hidden, rng),
          BasicTensor<T>::zeros({4 * hidden}, true)};
}

template <typename T>
void LstmParams<T>::collect(const std::string& prefix,
                            NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".input_weight", input_weight);
  out.emplace_back(prefix + ".hidden_weight", hidden_weight);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
GruParams<T> GruParams<T>::init(std::size_t in, std::size_t hidden,
                                CounterRng& rng) {
  return {glorot_uniform<T>(in, 3 * hidden, rng),
          glorot_uniform<T>(hidden, 3 * hidden, rng),
          BasicTensor<T>::zeros({3 * hidden}, true),
          BasicTensor<T>::zeros({3 * hidden}, true)};
}

template <typename T>
void GruParams<T>::collect(const std::string& prefix,
                           NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".input_weight", input_weight);
  out.emplace_back(prefix + ".hidden_weight", hidden_weight);
  out.emplace_back(prefix + ".input_bias", input_bias);
  out.emplace_back(prefix + ".hidden_bias", hidden_bias);
}

template <typename T>
void QuestionEncoderParams<T>::collect(const std::string& prefix,
                                       NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".embedding", embedding);
  out.emplace_back(prefix + ".position", position);
  lstm.collect(prefix + ".lstm", out);
}

template <typename T>
void FilmParams<T>::collect(const std::string& prefix,
                            NamedTensors<T>& out) const {
  gamma.collect(prefix + ".gamma", out);
  beta.collect(prefix + ".beta", out);
  project.collect(prefix + ".project", out);
}

template <typename T>
BlockParams<T> BlockParams<T>::init(std::size_t d, CounterRng& rng) {
  BlockParams p;
  for (auto& sa : p.visual_chain) sa = SelfAttentionParams<T>::init(d, rng);
  for (auto& sa : p.text_chain) sa = SelfAttentionParams<T>::init(d, rng);
  p.summary = GruParams<T>::init(d, d, rng);
  for (auto& mha : p.coattention) {
    mha = MultiHeadAttentionParams<T>::init(d, rng);
  }
  p.fuse = Linear<T>::init(4 * d, d, rng);
  p.ffn = FeedForward<T>::init(d, rng);
  p.norm = LayerNormParams<T>::init(d);
  return p;
}

template <typename T>
void BlockParams<T>::collect(const std::string& prefix,
                             NamedTensors<T>& out) const {
  for (std::size_t n = 0; n < 3; ++n) {
    visual_chain[n].collect(prefix + ".visual_sa" + std::to_string(n), out);
  }
  for (std::size_t n = 0; n < 3; ++n) {
    text_chain[n].collect(prefix + ".text_sa" + std::to_string(n), out);
  }
  summary.collect(prefix + ".summary_gru", out);
  for (std::size_t c = 0; c < 4; ++c) {
    coattention[c].collect(
        prefix + ".coattention_" + kComponentNames[c], out);
  }
  fuse.collect(prefix + ".fuse", out);
  ffn.collect(prefix + ".ffn", out);
  norm.collect(prefix + ".norm", out);
}

template <typename T>
void ClassifierParams<T>::collect(const std::string& prefix,
                                  NamedTensors<T>& out) const {
  pool_query.collect(prefix + ".pool_query", out);
  pool_key.collect(prefix + ".pool_key", out);
  question.collect(prefix + ".question", out);
  hidden.collect(prefix + ".hidden", out);
  output.collect(prefix + ".output", out);
}

template <typename T>
QBNParams<T> QBNParams<T>::init(const QBNConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  QBNParams p;

  CounterRng q_rng(CounterRng::derive(seed, 1));
  p.question.embedding = glorot_uniform<T>(cfg.vocab_size, d, q_rng);
  p.question.position = glorot_uniform<T>(cfg.question_len, d, q_rng);
  p.question.lstm = LstmParams<T>::init(d, d, q_rng);

  CounterRng f_rng(CounterRng::derive(seed, 2));
  p.film.gamma = Linear<T>::init(d, cfg.region_channels, f_rng);
  for (T& b : p.film.gamma.bias.mutable_values()) b = T(1);
  p.film.beta = Linear<T>::init(d, cfg.region_channels, f_rng);
  p.film.project = Linear<T>::init(cfg.region_channels, d, f_rng);

  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    CounterRng b_rng(CounterRng::derive(seed, 100 + b));
    p.blocks.push_back(BlockParams<T>::init(d, b_rng));
  }

  CounterRng c_rng(CounterRng::derive(seed, 3));
  p.classifier.pool_query = Linear<T>::init(d, d, c_rng);
  p.classifier.pool_key = Linear<T>::init(d, d, c_rng);
  p.classifier.question = Linear<T>::init(d, d, c_rng);
  p.classifier.hidden = Linear<T>::init(d, d, c_rng);
  p.classifier.output = Linear<T>::zeros(d, cfg.num_answers);
  return p;
}

template <typename T>
NamedTensors<T> QBNParams<T>::named() const {
  NamedTensors<T> out;
  question.collect("question", out);
  film.collect("film", out);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].collect("block" + std::to_string(b), out);
  }
  classifier.collect("classifier", out);
  return out;
}

// ---------------------------------------------------------------------------
// Forward

KeyMask word_mask(std::span<const std::int32_t> tokens, std::size_t batch,
                  std::size_t length) {
  if (tokens.size() != batch * length) {
    throw DimensionError("expected " + std::to_string(batch * length) +
                         " tokens, got " + std::to_string(tokens.size()));
  }
  std::vector<std::uint8_t> valid(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    valid[i] = tokens[i] != kPadToken;
  }
  return KeyMask(batch, length, std::move(valid));
}

namespace {

template <typename T>
BasicTensor<T> columns(const BasicTensor<T>& x, std::size_t block,
                       std::size_t width) {
  return slice(x, x.rank() - 1, block * width, (block + 1) * width);
}

// Row t of a [B x len x w] tensor as [B x w].
template <typename T>
BasicTensor<T> step(const BasicTensor<T>& x, std::size_t t) {
  return reshape(slice(x, 1, t, t + 1), {x.dim(0), x.dim(2)});
}

}  // namespace

template <typename T>
QuestionEncoding<T> encode_question(std::span<const std::int32_t> tokens,
                                    std::size_t batch, const QBNConfig& cfg,
                                    const QuestionEncoderParams<T>& params) {
  const std::size_t len = cfg.question_len, d = cfg.model_dim;
  const KeyMask mask = word_mask(tokens, batch, len);
  const BasicTensor<T> embedded =
      add(embedding(params.embedding, tokens, {batch, len}), params.position);
  const BasicTensor<T> input_gates =
      add(matmul(embedded, params.lstm.input_weight), params.lstm.bias);

  BasicTensor<T> h = BasicTensor<T>::zeros({batch, d});
  BasicTensor<T> c = BasicTensor<T>::zeros({batch, d});
  std::vector<BasicTensor<T>> states;
  states.reserve(len);
  for (std::size_t t = 0; t < len; ++t) {
    std::size_t live = 0;
    for (std::size_t b = 0; b < batch; ++b) live += mask.valid(b, t);
    if (live > 0) {
      const BasicTensor<T> g =
          add(step(input_gates, t), matmul(h, params.lstm.hidden_weight));
      const BasicTensor<T> i = sigmoid(columns(g, 0, d));
      const BasicTensor<T> f = sigmoid(columns(g, 1, d));
      const BasicTensor<T> cell = tanh(columns(g, 2, d));
      const BasicTensor<T> o = sigmoid(columns(g, 3, d));
      BasicTensor<T> c_new = add(mul(f, c), mul(i, cell));
      BasicTensor<T> h_new = mul(o, tanh(c_new));
      if (live < batch) {
        // Freeze the state of examples that are already padding.
        std::vector<T> keep(batch * d), take(batch * d);
        for (std::size_t b = 0; b < batch; ++b) {
          const T m = mask.valid(b, t) ? T(1) : T(0);
          for (std::size_t k = 0; k < d; ++k) {
            take[b * d + k] = m;
            keep[b * d + k] = T(1) - m;
          }
        }
        const BasicTensor<T> take_t({batch, d}, take), keep_t({batch, d}, keep);
        c_new = add(mul(take_t, c_new), mul(keep_t, c));
        h_new = add(mul(take_t, h_new), mul(keep_t, h));
      }
      c = c_new;
      h = h_new;
    }
    states.push_back(reshape(h, {batch, 1, d}));
  }
  return {concat(states, 1), h};
}

template <typename T>
FilmResult<T> film_condition(const BasicTensor<T>& regions,
                             const BasicTensor<T>& question,
                             const QBNConfig& cfg,
                             const FilmParams<T>& params) {
  const Shape expected = {question.dim(0), cfg.num_regions, cfg.cells(),
                          cfg.region_channels};
  if (regions.shape() != expected) {
    throw DimensionError("region features " + to_string(regions.shape()) +
                         " do not match " + to_string(expected));
  }
  FilmResult<T> r;
  r.gamma = params.gamma(question);
  r.beta = params.beta(question);
  auto spread = [&](const BasicTensor<T>& x) {
    return expand(expand(x, 1, cfg.num_regions), 2, cfg.cells());
  };
  r.scaled = add(mul(regions, spread(r.gamma)), spread(r.beta));
  r.output = params.project(mean(r.scaled, 2));
  return r;
}

template <typename T>
QuaternionFeatureStack<T> build_layer_chain(
    const BasicTensor<T>& x0, const std::array<SelfAttentionParams<T>, 3>& sa,
    const AttentionConfig& cfg, const KeyMask* mask,
    const ForwardContext& ctx) {
  QuaternionFeatureStack<T> s;
  s[kReal] = x0;
  for (std::size_t n = 0; n < 3; ++n) {
    s[n + 1] = self_attention_layer(s[n], cfg, sa[n], mask, ctx);
  }
  return s;
}

template <typename T>
ContentSummary<T> content_summary(const QuaternionFeatureStack<T>& text,
                                  const KeyMask& mask,
                                  const GruParams<T>& rnn) {
  text.validate("text");
  if (text.shape().size() != 3) {
    throw DimensionError("content summary wants batched text layers, got " +
                         to_string(text.shape()));
  }
  const std::size_t batch = text.shape()[0], d = text.channels();
  const BasicTensor<T> weights = mask.mean_weights<T>(d);
  if (weights.shape() != text.shape()) {
    throw DimensionError("word mask does not match text layers " +
                         to_string(text.shape()));
  }
  ContentSummary<T> s;
  for (std::size_t c = 0; c < 4; ++c) {
    s.layer_means[c] = sum(mul(text[c], weights), 1);
  }
  BasicTensor<T> h = BasicTensor<T>::zeros({batch, d});
  for (std::size_t c = 0; c < 4; ++c) {
    const BasicTensor<T> gx =
        add(matmul(s.layer_means[c], rnn.input_weight), rnn.input_bias);
    const BasicTensor<T> gh = add(matmul(h, rnn.hidden_weight), rnn.hidden_bias);
    const BasicTensor<T> r = sigmoid(add(columns(gx, 0, d), columns(gh, 0, d)));
    const BasicTensor<T> z = sigmoid(add(columns(gx, 1, d), columns(gh, 1, d)));
    const BasicTensor<T> n =
        tanh(add(columns(gx, 2, d), mul(r, columns(gh, 2, d))));
    h = add(mul(affine(z, T(-1), T(1)), n), mul(z, h));
  }
  s.multi_qn = h;
  return s;
}

template <typename T>
CoattentionResult<T> coattention_update(
    const QuaternionFeatureStack<T>& visual,
    const QuaternionFeatureStack<T>& text, const ContentSummary<T>* summary,
    const QuaternionGate<T>* gate, const KeyMask& mask,
    const AttentionConfig& cfg,
    const std::array<MultiHeadAttentionParams<T>, 4>& params) {
  visual.validate("visual");
  text.validate("text");
  const std::size_t len = text.shape()[1];
  CoattentionResult<T> out;
  for (std::size_t c = 0; c < 4; ++c) {
    BasicTensor<T> keys = text[c];
    if (summary) keys = add(keys, expand(summary->multi_qn, 1, len));
    const BasicTensor<T> g = gate ? gate->gate[c] : BasicTensor<T>();
    AttentionResult<T> res =
        multi_head_attention(visual[c], keys, keys, cfg, params[c], g, &mask);
    out.update[c] = res.output;
    out.weights[c] = res.weights;
  }
  return out;
}

template <typename T>
BlockResult<T> quaternion_block(const BasicTensor<T>& visual,
                                const BasicTensor<T>& text,
                                const KeyMask& mask,
                                const BlockParams<T>& params,
                                const QBNConfig& cfg,
                                const ForwardContext& ctx) {
  const AttentionConfig acfg = cfg.attention();
  BlockResult<T> r;
  r.visual_stack =
      build_layer_chain(visual, params.visual_chain, acfg, nullptr, ctx);
  r.text_stack = build_layer_chain(text, params.text_chain, acfg, &mask, ctx);
  if (cfg.use_content_learning) {
    r.summary = content_summary(r.text_stack, mask, params.summary);
  }
  if (cfg.use_relationship_gate) {
    r.gate = quaternion_softmax(quaternion_scores(r.visual_stack, r.text_stack),
                                &mask);
  }
  r.coattention = coattention_update(
      r.visual_stack, r.text_stack,
      cfg.use_content_learning ? &r.summary : nullptr,
      cfg.use_relationship_gate ? &r.gate : nullptr, mask, acfg,
      params.coattention);
  const auto& u = r.coattention.update;
  const BasicTensor<T> fused = params.fuse(concat<T>({u[0], u[1], u[2], u[3]}, 2));
  r.visual =
      params.norm(add(visual, params.ffn(fused, cfg.dropout_rate, ctx)));
  r.text = r.text_stack[kK];
  return r;
}

template <typename T>
BasicTensor<T> region_weights(const BasicTensor<T>& visual,
                              const BasicTensor<T>& question,
                              const ClassifierParams<T>& params) {
  const std::size_t batch = visual.dim(0), mu = visual.dim(1),
                    d = visual.dim(2);
  const BasicTensor<T> q = reshape(params.pool_query(question), {batch, d, 1});
  const BasicTensor<T> scores = reshape(matmul(params.pool_key(visual), q),
                                        {batch, mu});
  return softmax(scale(scores, T(1) / std::sqrt(static_cast<T>(d))), 1);
}

template <typename T>
ClassifierResult<T> classify(const BasicTensor<T>& visual,
                             const BasicTensor<T>& question,
                             const ClassifierParams<T>& params) {
  const std::size_t batch = visual.dim(0), mu = visual.dim(1),
                    d = visual.dim(2);
  ClassifierResult<T> r;
  r.region_weights = region_weights(visual, question, params);
  const BasicTensor<T> pooled =
      reshape(matmul(reshape(r.region_weights, {batch, 1, mu}), visual),
              {batch, d});
  const BasicTensor<T> fused = mul(pooled, params.question(question));
  r.logits = params.output(relu(params.hidden(fused)));
  return r;
}

template <typename T>
ClassifierResult<T> forward(const QBNConfig& cfg, const QBNParams<T>& params,
                            const ModelInput<T>& input,
                            const ForwardContext& ctx, ForwardTrace<T>* trace) {
  if (params.blocks.size() != cfg.num_blocks) {
    throw ConfigError("parameters hold " + std::to_string(params.blocks.size()) +
                      " blocks, config wants " + std::to_string(cfg.num_blocks));
  }
  const KeyMask mask = word_mask(input.tokens, input.batch, cfg.question_len);
  QuestionEncoding<T> question =
      encode_question(std::span<const std::int32_t>(input.tokens), input.batch,
                      cfg, params.question);
  FilmResult<T> film =
      film_condition(input.regions, question.question, cfg, params.film);
  BasicTensor<T> v = film.output;
  BasicTensor<T> w = question.word_states;
  if (trace) {
    trace->blocks.clear();
    trace->block_region_weights.clear();
  }
  for (const BlockParams<T>& block : params.blocks) {
    BlockResult<T> r = quaternion_block(v, w, mask, block, cfg, ctx);
    v = r.visual;
    w = r.text;
    if (trace) {
      trace->block_region_weights.push_back(
          region_weights(r.visual, question.question, params.classifier));
      trace->blocks.push_back(std::move(r));
    }
  }
  ClassifierResult<T> out = classify(v, question.question, params.classifier);
  if (trace) {
    trace->question = question;
    trace->film = film;
  }
  return out;
}

#define QBN_INSTANTIATE_MODEL(T)                                              \
  template struct LstmParams<T>;                                              \
  template struct GruParams<T>;                                               \
  template struct QuestionEncoderParams<T>;                                   \
  template struct FilmParams<T>;                                              \
  template struct BlockParams<T>;                                             \
  template struct ClassifierParams<T>;                                        \
  template struct QBNParams<T>;                                               \
  template QuestionEncoding<T> encode_question(                               \
      std::span<const std::int32_t>, std::size_t, const QBNConfig&,           \
      const QuestionEncoderParams<T>&);                                       \
  template FilmResult<T> film_condition(const BasicTensor<T>&,                \
                                        const BasicTensor<T>&,                \
                                        const QBNConfig&, const FilmParams<T>&); \
  template QuaternionFeatureStack<T> build_layer_chain(                       \
      const BasicTensor<T>&, const std::array<SelfAttentionParams<T>, 3>&,    \
      const AttentionConfig&, const KeyMask*, const ForwardContext&);         \
  template ContentSummary<T> content_summary(                                 \
      const QuaternionFeatureStack<T>&, const KeyMask&, const GruParams<T>&); \
  template CoattentionResult<T> coattention_update(                           \
      const QuaternionFeatureStack<T>&, const QuaternionFeatureStack<T>&,     \
      const ContentSummary<T>*, const QuaternionGate<T>*, const KeyMask&,     \
      const AttentionConfig&,                                                 \
      const std::array<MultiHeadAttentionParams<T>, 4>&);                     \
  template BlockResult<T> quaternion_block(                                   \
      const BasicTensor<T>&, const BasicTensor<T>&, const KeyMask&,           \
      const BlockParams<T>&, const QBNConfig&, const ForwardContext&);        \
  template BasicTensor<T> region_weights(const BasicTensor<T>&,               \
                                         const BasicTensor<T>&,               \
                                         const ClassifierParams<T>&);         \
  template ClassifierResult<T> classify(const BasicTensor<T>&,                \
                                        const BasicTensor<T>&,                \
                                        const ClassifierParams<T>&);          \
  template ClassifierResult<T> forward(const QBNConfig&, const QBNParams<T>&, \
                                       const ModelInput<T>&,                  \
                                       const ForwardContext&, ForwardTrace<T>*);

QBN_INSTANTIATE_MODEL(float)
QBN_INSTANTIATE_MODEL(double)

}  // namespace qbn
