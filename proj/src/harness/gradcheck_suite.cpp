#include <cmath>

#include "qbn/gradcheck.hpp"
#include "qbn/harness.hpp"

namespace qbn {

namespace {

using D = BasicTensor<double>;

D random(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  CounterRng rng(seed);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return D(shape, std::move(v), true);
}

// Values in +-[0.1, 1], away from the relu kink.
D away_from_zero(const Shape& shape, std::uint64_t seed) {
  D t = random(shape, seed, 0.1, 1.0);
  CounterRng sign(seed + 1);
  for (auto& x : t.mutable_values()) x = sign.bernoulli(0.5) ? -x : x;
  return t;
}

void randomize(D& t, std::uint64_t seed) {
  CounterRng rng(seed);
  for (auto& x : t.mutable_values()) x = rng.uniform(-0.5, 0.5);
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(double tol) {
  const GradcheckOptions opts{.eps = 1e-5, .tol = tol};
  std::vector<GradcheckCase> cases;
  auto run = [&](std::string name, std::function<D()> f, NamedTensors<double> inputs) {
    const auto r = gradcheck<double>(f, inputs, opts);
    cases.push_back({std::move(name), r.max_rel_error, r.elements_checked, r.passed});
  };

  const D a = random({3, 4}, 1), b = random({4}, 2), c = random({3, 4}, 3);
  const D pos = random({3, 4}, 4, 0.5, 1.5);
  run("add", [&] { return add(a, b); }, {{"a", a}, {"b", b}});
  run("sub", [&] { return sub(a, c); }, {{"a", a}, {"c", c}});
  run("mul", [&] { return mul(a, b); }, {{"a", a}, {"b", b}});
  run("div", [&] { return div(a, pos); }, {{"a", a}, {"pos", pos}});
  run("affine", [&] { return affine(a, 1.5, -0.25); }, {{"a", a}});
  run("tanh", [&] { return qbn::tanh(a); }, {{"a", a}});
  run("sigmoid", [&] { return sigmoid(a); }, {{"a", a}});
  const D r = away_from_zero({3, 4}, 5);
  run("relu", [&] { return relu(r); }, {{"r", r}});

  const D m3 = random({2, 3, 4}, 6), w = random({4, 5}, 7), m3b = random({2, 4, 5}, 8);
  run("matmul", [&] { return matmul(m3, w); }, {{"a", m3}, {"w", w}});
  run("matmul_batched", [&] { return matmul(m3, m3b); }, {{"a", m3}, {"b", m3b}});
  run("transpose", [&] { return transpose(m3); }, {{"x", m3}});
  run("reshape", [&] { return reshape(m3, {4, 6}); }, {{"x", m3}});
  run("permute", [&] { return permute(m3, {2, 0, 1}); }, {{"x", m3}});
  run("expand", [&] { return expand(a, 1, 3); }, {{"x", a}});
  run("concat", [&] { return concat(std::vector<D>{a, c}, 1); }, {{"a", a}, {"c", c}});
  run("slice", [&] { return slice(m3, 2, 1, 3); }, {{"x", m3}});
  run("sum", [&] { return sum(m3, 1); }, {{"x", m3}});
  run("mean", [&] { return mean(m3, 0); }, {{"x", m3}});
  run("sum_all", [&] { return sum_all(m3); }, {{"x", m3}});
  run("mean_all", [&] { return mean_all(m3); }, {{"x", m3}});
  run("softmax", [&] { return softmax(m3, 2); }, {{"x", m3}});
  const D gamma = random({4}, 9, 0.5, 1.5), beta = random({4}, 10);
  run("layer_norm", [&] { return layer_norm(m3, gamma, beta); },
      {{"x", m3}, {"gamma", gamma}, {"beta", beta}});
  const D table = random({6, 3}, 11);
  const std::vector<std::int32_t> ids = {0, 5, 2, 2};
  run("embedding", [&] { return embedding(table, std::span<const std::int32_t>(ids), {2, 2}); },
      {{"table", table}});
  const std::vector<std::int32_t> labels = {1, 3, 0};
  run("softmax_cross_entropy",
      [&] { return softmax_cross_entropy(a, std::span<const std::int32_t>(labels)); },
      {{"logits", a}});
  run("dropout",
      [&] {
        CounterRng rng(12);
        return dropout(a, 0.3, rng);
      },
      {{"x", a}});

  // Quaternion algebra and scores.
  QuaternionFeatureStack<double> qv, qw;
  NamedTensors<double> stack_inputs;
  for (std::size_t k = 0; k < 4; ++k) {
    qv[k] = random({1, 2, 4}, 20 + k);
    qw[k] = random({1, 3, 4}, 30 + k);
    stack_inputs.emplace_back(std::string("v_") + kComponentNames[k], qv[k]);
    stack_inputs.emplace_back(std::string("w_") + kComponentNames[k], qw[k]);
  }
  QuaternionFeatureStack<double> qv2;
  for (std::size_t k = 0; k < 4; ++k) qv2[k] = random({1, 2, 4}, 40 + k);
  NamedTensors<double> product_inputs;
  for (std::size_t k = 0; k < 4; ++k) {
    product_inputs.emplace_back(std::string("v_") + kComponentNames[k], qv[k]);
    product_inputs.emplace_back(std::string("u_") + kComponentNames[k], qv2[k]);
  }
  run("hamilton_product",
      [&] {
        const auto p = hamilton_product(qv, qv2);
        return concat(std::vector<D>{p[0], p[1], p[2], p[3]}, 2);
      },
      product_inputs);
  const KeyMask mask(1, 3, {1, 1, 0});
  run("quaternion_score_softmax",
      [&] {
        const auto g = quaternion_softmax(quaternion_scores(qv, qw), &mask);
        return concat(std::vector<D>{g.gate[0], g.gate[1], g.gate[2], g.gate[3]}, 2);
      },
      stack_inputs);

  // Attention.
  const D q = random({1, 2, 3, 4}, 50), k = random({1, 2, 5, 4}, 51),
          v = random({1, 2, 5, 4}, 52);
  const D gate = softmax(random({1, 3, 5}, 53), 2).detach();
  run("gated_attention",
      [&] { return scaled_attention(q, k, v, gate).output; },
      {{"q", q}, {"k", k}, {"v", v}});

  AttentionConfig acfg;
  acfg.model_dim = 8;
  acfg.num_heads = 2;
  acfg.dropout_rate = 0.0;
  CounterRng init_rng(60);
  const auto mha = MultiHeadAttentionParams<double>::init(8, init_rng);
  NamedTensors<double> mha_inputs;
  mha.collect("mha", mha_inputs);
  const D xq = random({2, 3, 8}, 61), xk = random({2, 4, 8}, 62);
  mha_inputs.emplace_back("query_in", xq);
  mha_inputs.emplace_back("key_in", xk);
  run("multi_head_attention",
      [&] { return multi_head_attention(xq, xk, xk, acfg, mha).output; }, mha_inputs);

  const auto sa = SelfAttentionParams<double>::init(8, init_rng);
  NamedTensors<double> sa_inputs;
  sa.collect("sa", sa_inputs);
  const D xs = random({2, 4, 8}, 63);
  sa_inputs.emplace_back("x", xs);
  const KeyMask sa_mask(2, 4, {1, 1, 1, 1, 1, 1, 0, 0});
  run("self_attention_layer",
      [&] { return self_attention_layer(xs, acfg, sa, &sa_mask); }, sa_inputs);

  // Tiny full model: model_dim 8, one block.
  QBNConfig cfg;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.num_blocks = 1;
  cfg.question_len = 3;
  cfg.num_regions = 2;
  cfg.region_spatial = 2;
  cfg.region_channels = 3;
  cfg.vocab_size = 7;
  cfg.num_answers = 4;
  cfg.dropout_rate = 0.0;
  auto params = QBNParams<double>::init(cfg, 70);
  // A zero output layer would block every upstream gradient.
  randomize(params.classifier.output.weight, 71);
  randomize(params.classifier.output.bias, 72);
  ModelInput<double> in{2, random({2, 2, 4, 3}, 73), {3, 1, 0, 6, 2, 5}};
  const std::vector<std::int32_t> answers = {1, 3};
  run("tiny_model",
      [&] {
        return softmax_cross_entropy(forward(cfg, params, in).logits,
                                     std::span<const std::int32_t>(answers));
      },
      params.named());
  return cases;
}

}  // namespace qbn
