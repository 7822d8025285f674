#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "qbn/error.hpp"
#include "qbn/harness.hpp"

using namespace qbn;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "qbn_harness_test" / name;
  fs::remove_all(p);
  return p;
}

TrainConfig tiny_train_config(const fs::path& dir) {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.seed = 3;
  c.learning_rate = 1e-3;
  c.checkpoint_dir = dir;
  DatasetSpec s;
  s.seed = 9;
  s.num_regions = 4;
  s.region_channels = 8;
  s.max_objects = 3;
  c.data.spec = s;
  c.data.num_train = 24;
  c.data.num_validation = 8;
  c.model.model_dim = 16;
  c.model.num_heads = 4;
  c.model.num_blocks = 2;
  return c;
}

bool bit_equal(const BasicTensor<float>& a, const BasicTensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(float)) == 0;
}

bool same_params(const QBNParams<float>& a, const QBNParams<float>& b) {
  const auto na = a.named(), nb = b.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first || !bit_equal(na[i].second, nb[i].second)) return false;
  }
  return true;
}

void randomize(BasicTensor<float> t, std::uint64_t seed) {
  CounterRng rng(seed);
  for (auto& x : t.mutable_values()) x = static_cast<float>(rng.uniform(-0.5, 0.5));
}

// Leaves exactly `g` in p's gradient buffer: d/dp sum(p * g) = g.
template <typename T>
void set_grad(BasicTensor<T> p, std::vector<T> g) {
  p.zero_grad();
  sum_all(mul(p, BasicTensor<T>(p.shape(), std::move(g)))).backward();
}

std::vector<std::size_t> first_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstStepWithUnitGradientMovesByLearningRate) {
  BasicTensor<float> p({5}, {0.5f, -1.f, 2.f, 0.f, 3.f}, true);
  NamedTensors<float> params = {{"p", p}};
  auto state = AdamState<float>::zeros(params);
  set_grad(p, std::vector<float>(5, 1.0f));
  const std::vector<float> before(p.values().begin(), p.values().end());
  adam_step(params, state, {.learning_rate = 1e-3});
  // Tolerance is float rounding of the updated value (|x| <= 3).
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(p.values()[i] - before[i], -1e-3, 5e-7);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientFromZeroStateLeavesParamsUnchanged) {
  BasicTensor<float> p({3}, {1.f, 2.f, 3.f}, true);
  NamedTensors<float> params = {{"p", p}};
  auto state = AdamState<float>::zeros(params);
  set_grad(p, std::vector<float>(3, 0.0f));
  adam_step(params, state, {});
  EXPECT_EQ(std::vector<float>(p.values().begin(), p.values().end()),
            (std::vector<float>{1.f, 2.f, 3.f}));
}

TEST(Adam, ThreeStepsOnSquareMatchHandTrace) {
  BasicTensor<double> x({1}, {1.0}, true);
  NamedTensors<double> params = {{"x", x}};
  auto state = AdamState<double>::zeros(params);
  // x <- x - lr * mhat / (sqrt(vhat) + eps) with g = 2x, lr = 0.1, worked by
  // hand in scalar arithmetic.
  const double expected[] = {0.9000000005, 0.8004122286917928, 0.7015862729460303};
  for (double want : expected) {
    x.zero_grad();
    sum_all(mul(x, x)).backward();
    adam_step(params, state, {.learning_rate = 0.1});
    EXPECT_NEAR(x.values()[0], want, 1e-12);
  }
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  BasicTensor<float> a({2}, {1.f, 2.f}, true), b({2}, {3.f, 4.f}, true);
  NamedTensors<float> params = {{"alpha", a}, {"block0.beta", b}};
  auto state = AdamState<float>::zeros(params);
  set_grad(a, {1.0f, 0.0f});
  set_grad(b, {0.0f, std::numeric_limits<float>::quiet_NaN()});
  try {
    adam_step(params, state, {});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block0.beta"), std::string::npos);
  }
  EXPECT_EQ(a.values()[0], 1.0f);
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, MismatchedStateIsContractError) {
  BasicTensor<float> a({2}, {1.f, 2.f}, true);
  NamedTensors<float> params = {{"a", a}};
  AdamState<float> state;
  EXPECT_THROW(adam_step(params, state, {}), ContractError);
}

TEST(Adam, ParametersWithoutGradientAreSkipped) {
  BasicTensor<float> a({1}, {1.f}, true), b({1}, {1.f}, true);
  NamedTensors<float> params = {{"a", a}, {"b", b}};
  auto state = AdamState<float>::zeros(params);
  set_grad(a, {1.0f});
  adam_step(params, state, {});
  EXPECT_NE(a.values()[0], 1.0f);
  EXPECT_EQ(b.values()[0], 1.0f);
}

// ---------------------------------------------------------------------------
// Config

TEST(TrainConfigJson, RoundTrips) {
  TrainConfig c = tiny_train_config("/tmp/x");
  c.beta2 = 0.98;
  c.warmup_steps = 7;
  c.model.use_content_learning = false;
  c.word_embeddings = "/tmp/words.qbnt";
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_DOUBLE_EQ(back.beta2, 0.98);
}

TEST(TrainConfigJson, DefaultsFollowOptimizerSetting) {
  const TrainConfig c = train_config_from_json(nlohmann::json::object());
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.epochs, 13u);
  EXPECT_DOUBLE_EQ(c.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.eps, 1e-8);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.model.model_dim, 512u);
  EXPECT_EQ(c.model.num_heads, 16u);
}

TEST(TrainConfigJson, RejectsMalformedInput) {
  EXPECT_THROW(train_config_from_json({{"learnign_rate", 1}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"model", {{"dim", 3}}}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"betas", {0.9}}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"epochs", "many"}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"data", {{"spec", {{"colours", 2}}}}}}),
               ConfigError);
  TrainConfig c;
  EXPECT_THROW(c.validate(), ConfigError);  // no data source
  c = tiny_train_config("/tmp/x");
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, ShapeFieldsComeFromData) {
  const TrainConfig c = tiny_train_config("/tmp/x");
  const Split s = load_data(c.data);
  const QBNConfig m = resolve_model_config(c.model, s.train);
  EXPECT_EQ(m.num_regions, 4u);
  EXPECT_EQ(m.region_channels, 8u);
  EXPECT_EQ(m.vocab_size, vocab_size());
  EXPECT_EQ(m.num_answers, num_answers());
  QBNConfig wrong = c.model;
  wrong.num_regions = 5;
  EXPECT_THROW(resolve_model_config(wrong, s.train), ConfigError);
}

TEST(ModelConfig, HashSeparatesConfigs) {
  QBNConfig a;
  a.vocab_size = 28;
  a.num_answers = 22;
  QBNConfig b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.use_relationship_gate = false;
  EXPECT_NE(config_hash(a), config_hash(b));
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path dir = fresh_dir("ckpt");
  TrainConfig c = tiny_train_config(dir);
  const Split s = load_data(c.data);
  c.model = resolve_model_config(c.model, s.train);
  Checkpoint ckpt{c, QBNParams<float>::init(c.model, 5), {}, 4, config_hash(c.model)};
  randomize(ckpt.params.classifier.output.weight, 1);
  const auto named = ckpt.params.named();
  ckpt.optimizer = AdamState<float>::zeros(named);
  ckpt.optimizer.step = 123456789012ULL;
  ckpt.optimizer.m[3][0] = 0.125f;
  ckpt.optimizer.v[7][1] = 3e-9f;
  save_checkpoint(dir / "c.qbnt", ckpt);

  const Checkpoint back = load_checkpoint(dir / "c.qbnt");
  EXPECT_EQ(to_json(back.config), to_json(c));
  EXPECT_EQ(back.epoch, 4u);
  EXPECT_EQ(back.optimizer.step, 123456789012ULL);
  EXPECT_EQ(back.optimizer.m, ckpt.optimizer.m);
  EXPECT_EQ(back.optimizer.v, ckpt.optimizer.v);
  EXPECT_TRUE(same_params(back.params, ckpt.params));
  const auto batch = s.validation.batch(first_n(4));
  EXPECT_TRUE(bit_equal(forward(c.model, ckpt.params, batch).logits,
                        forward(back.config.model, back.params, batch).logits));
}

TEST(Checkpoint, HashMismatchIsConfigError) {
  const fs::path dir = fresh_dir("ckpt_hash");
  TrainConfig c = tiny_train_config(dir);
  c.model = resolve_model_config(c.model, load_data(c.data).train);
  Checkpoint ckpt{c, QBNParams<float>::init(c.model, 5), {}, 0, config_hash(c.model) + 1};
  save_checkpoint(dir / "c.qbnt", ckpt);
  EXPECT_THROW(load_checkpoint(dir / "c.qbnt"), ConfigError);
}

TEST(Checkpoint, MissingOrForeignTensorsAreInputErrors) {
  const fs::path dir = fresh_dir("ckpt_tensors");
  TrainConfig c = tiny_train_config(dir);
  c.model = resolve_model_config(c.model, load_data(c.data).train);
  Checkpoint ckpt{c, QBNParams<float>::init(c.model, 5), {}, 0, config_hash(c.model)};
  save_checkpoint(dir / "c.qbnt", ckpt);
  auto records = read_container(dir / "c.qbnt");
  auto extra = records;
  extra.push_back({"param/stray", {1}, {0.f}});
  write_container(dir / "extra.qbnt", extra);
  EXPECT_THROW(load_checkpoint(dir / "extra.qbnt"), InputError);
  records.erase(records.begin() + 5);
  write_container(dir / "missing.qbnt", records);
  EXPECT_THROW(load_checkpoint(dir / "missing.qbnt"), InputError);
}

// ---------------------------------------------------------------------------
// Training

TEST(Train, ZeroEpochsWritesInitialCheckpointOnly) {
  const fs::path dir = fresh_dir("epochs0");
  TrainConfig c = tiny_train_config(dir);
  c.epochs = 0;
  const RunReport r = train(c);
  EXPECT_TRUE(r.step_losses.empty());
  EXPECT_TRUE(r.epochs.empty());
  ASSERT_TRUE(fs::exists(dir / "epoch_0000.qbnt"));
  ASSERT_TRUE(fs::exists(dir / "best.qbnt"));
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  const Checkpoint ckpt = load_checkpoint(dir / "epoch_0000.qbnt");
  EXPECT_EQ(ckpt.optimizer.step, 0u);
  EXPECT_TRUE(same_params(ckpt.params, QBNParams<float>::init(ckpt.config.model, c.seed)));
}

TEST(Train, SameSeedGivesBitIdenticalFirstTenLosses) {
  TrainConfig c = tiny_train_config(fresh_dir("det"));
  c.epochs = 10;
  c.batch_size = 4;
  const TrainOptions opts{.max_steps = 10, .write_checkpoints = false};
  const RunReport a = train(c, opts), b = train(c, opts);
  ASSERT_EQ(a.step_losses.size(), 10u);
  EXPECT_EQ(0, std::memcmp(a.step_losses.data(), b.step_losses.data(),
                           10 * sizeof(double)));
  c.seed = 4;
  const RunReport other = train(c, opts);
  EXPECT_NE(a.step_losses, other.step_losses);
}

TEST(Train, WritesEpochCheckpointsBestAndFiniteReport) {
  const fs::path dir = fresh_dir("run");
  const TrainConfig c = tiny_train_config(dir);
  const RunReport r = train(c);
  ASSERT_EQ(r.epochs.size(), 2u);
  for (const auto& e : r.epochs) {
    EXPECT_TRUE(std::isfinite(e.train_loss));
    ASSERT_TRUE(e.validation_accuracy.has_value());
  }
  for (double l : r.step_losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(r.step_losses.size(), 2u * 3u);
  for (const char* f : {"epoch_0000.qbnt", "epoch_0001.qbnt", "epoch_0002.qbnt",
                        "best.qbnt", "report.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const Checkpoint last = load_checkpoint(r.last_checkpoint);
  EXPECT_EQ(last.config_hash, r.config_hash);
  EXPECT_EQ(last.optimizer.step, 6u);
  EXPECT_EQ(last.epoch, 2u);
  const Split s = load_data(c.data);
  EXPECT_DOUBLE_EQ(evaluate(last, s.validation).overall.accuracy(),
                   *r.epochs.back().validation_accuracy);
  const Checkpoint best = load_checkpoint(r.best_checkpoint);
  EXPECT_DOUBLE_EQ(evaluate(best, s.validation).overall.accuracy(), r.best_accuracy);

  std::ifstream in(dir / "report.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["step_losses"].size(), 6u);
  EXPECT_FALSE(j["aborted"].get<bool>());
}

TEST(Train, ResumedOptimizerStateContinuesExactly) {
  // Two epochs in one run equal one epoch, reload, then the second epoch's
  // steps replayed on the loaded state.
  const fs::path dir = fresh_dir("resume");
  TrainConfig c = tiny_train_config(dir);
  c.model.dropout_rate = 0.0;
  const RunReport full = train(c);
  const Checkpoint one = load_checkpoint(dir / "epoch_0001.qbnt");
  const Checkpoint two = load_checkpoint(dir / "epoch_0002.qbnt");

  Checkpoint ckpt = one;
  const Split s = load_data(c.data);
  const auto named = ckpt.params.named();
  // Replay epoch 2 with the same shuffle the trainer uses.
  std::vector<std::size_t> order(s.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(CounterRng::derive(c.seed, 2000 + 2));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  for (std::size_t start = 0; start < order.size(); start += c.batch_size) {
    const std::span<const std::size_t> idx(order.data() + start,
                                           std::min(c.batch_size, order.size() - start));
    const auto answers = s.train.batch_answers(idx);
    const auto loss = softmax_cross_entropy(
        forward(ckpt.config.model, ckpt.params, s.train.batch(idx)).logits,
        std::span<const std::int32_t>(answers));
    for (const auto& [n, p] : named) BasicTensor<float>(p).zero_grad();
    loss.backward();
    adam_step(named, ckpt.optimizer, c.adam());
  }
  EXPECT_TRUE(same_params(ckpt.params, two.params));
  EXPECT_EQ(ckpt.optimizer.m, two.optimizer.m);
  EXPECT_EQ(full.step_losses.size(), 6u);
}

TEST(Train, KeepsOnlyNewestCheckpointsWhenAsked) {
  const fs::path dir = fresh_dir("keep");
  TrainConfig c = tiny_train_config(dir);
  c.epochs = 3;
  c.keep_last_checkpoints = 1;
  train(c);
  EXPECT_TRUE(fs::exists(dir / "epoch_0000.qbnt"));
  EXPECT_FALSE(fs::exists(dir / "epoch_0001.qbnt"));
  EXPECT_FALSE(fs::exists(dir / "epoch_0002.qbnt"));
  EXPECT_TRUE(fs::exists(dir / "epoch_0003.qbnt"));
}

TEST(Train, DivergenceAbortsAndNamesLastGoodCheckpoint) {
  const fs::path dir = fresh_dir("diverge");
  TrainConfig c = tiny_train_config(dir);
  c.learning_rate = 1e30;
  c.epochs = 5;
  try {
    train(c);
    FAIL() << "training did not abort";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("last good checkpoint"), std::string::npos);
  }
  std::ifstream in(dir / "report.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_TRUE(j["aborted"].get<bool>());
  EXPECT_TRUE(fs::exists(j["last_checkpoint"].get<std::string>()));
}

TEST(Train, StopsOnceTrainingSetIsFit) {
  TrainConfig c = tiny_train_config(fresh_dir("fit"));
  c.data.num_train = 8;
  c.data.num_validation = 0;
  c.learning_rate = 3e-3;
  c.epochs = 200;
  c.stop_at_full_train_accuracy = true;
  const RunReport r = train(c, {.write_checkpoints = false});
  ASSERT_FALSE(r.epochs.empty());
  EXPECT_EQ(r.epochs.back().train_accuracy, 1.0);
  EXPECT_LT(r.epochs.size(), 200u);
  EXPECT_EQ(r.best_metric, "train_accuracy");
}

TEST(Train, ExternalWordEmbeddingsReplaceInitialTable) {
  const fs::path dir = fresh_dir("words");
  fs::create_directories(dir);
  TrainConfig c = tiny_train_config(dir);
  c.epochs = 0;
  const std::size_t vocab = vocabulary().size();
  std::vector<float> table(vocab * c.model.model_dim);
  std::iota(table.begin(), table.end(), 0.0f);
  write_container(dir / "words.qbnt",
                  std::vector<TensorRecord>{{"word_embeddings", {vocab, c.model.model_dim}, table}});
  c.word_embeddings = dir / "words.qbnt";
  train(c);
  const Checkpoint ckpt = load_checkpoint(dir / "epoch_0000.qbnt");
  const auto got = ckpt.params.question.embedding.values();
  EXPECT_TRUE(std::equal(got.begin(), got.end(), table.begin(), table.end()));

  write_container(dir / "short.qbnt",
                  std::vector<TensorRecord>{{"word_embeddings", {vocab - 1, c.model.model_dim},
                                             std::vector<float>((vocab - 1) * c.model.model_dim)}});
  c.word_embeddings = dir / "short.qbnt";
  EXPECT_THROW(train(c), InputError);
  write_container(dir / "other.qbnt", std::vector<TensorRecord>{{"x", {1}, {0.f}}});
  c.word_embeddings = dir / "other.qbnt";
  EXPECT_THROW(train(c), InputError);
}

TEST(Train, WallBudgetStopsAfterCurrentStep) {
  TrainConfig c = tiny_train_config(fresh_dir("budget"));
  c.epochs = 50;
  c.batch_size = 4;
  const RunReport r =
      train(c, {.max_wall_seconds = 1e-9, .write_checkpoints = false});
  EXPECT_TRUE(r.out_of_time);
  EXPECT_EQ(r.step_losses.size(), 1u);
  EXPECT_TRUE(r.epochs.empty());
  EXPECT_TRUE(to_json(r)["out_of_time"].get<bool>());
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, EmptyDatasetIsAnError) {
  TrainConfig c = tiny_train_config("/tmp/x");
  const Split s = load_data(c.data);
  const QBNConfig m = resolve_model_config(c.model, s.train);
  Dataset empty = s.train;
  empty.answers.clear();
  EXPECT_THROW(evaluate(m, QBNParams<float>::init(m, 1), empty), InputError);
}

TEST(Evaluate, MismatchedShapesAreInputErrors) {
  TrainConfig c = tiny_train_config("/tmp/x");
  const Split s = load_data(c.data);
  QBNConfig m = resolve_model_config(c.model, s.train);
  m.num_regions = 6;
  EXPECT_THROW(evaluate(m, QBNParams<float>::init(m, 1), s.train), InputError);
}

TEST(Evaluate, InitialModelSitsAtChance) {
  DatasetSpec spec;
  spec.num_examples = 600;
  spec.num_regions = 4;
  spec.region_channels = 8;
  const Dataset d = generate(spec);
  QBNConfig m = resolve_model_config(TrainConfig::unshaped_model_config(), d);
  m.model_dim = 16;
  m.num_heads = 2;
  m.num_blocks = 1;
  auto params = QBNParams<float>::init(m, 2);
  // The zero output layer gives uniform logits: loss ln(answers), and the
  // argmax is answer 0.
  const EvalReport r0 = evaluate(m, params, d);
  EXPECT_NEAR(r0.mean_loss, std::log(double(num_answers())), 1e-5);
  const auto zeros = std::count(d.answers.begin(), d.answers.end(), 0);
  EXPECT_DOUBLE_EQ(r0.overall.accuracy(), double(zeros) / double(d.size()));
  randomize(params.classifier.output.weight, 3);
  const EvalReport r = evaluate(m, params, d);
  EXPECT_NEAR(r.overall.accuracy(), 1.0 / double(num_answers()), 0.05);

  std::size_t by_template = 0, by_category = 0;
  for (const auto& [k, t] : r.per_template) by_template += t.total;
  for (const auto& [k, t] : r.per_category) by_category += t.total;
  EXPECT_EQ(by_template, d.size());
  EXPECT_EQ(by_category, d.size());
  EXPECT_EQ(r.per_category.size(), 3u);
  EXPECT_EQ(r.predictions.size(), d.size());
}

// ---------------------------------------------------------------------------
// Attention dumps

class AttentionDumpTest : public ::testing::Test {
 protected:
  void SetUp() override {
    TrainConfig c = tiny_train_config("/tmp/x");
    split = load_data(c.data);
    cfg = resolve_model_config(c.model, split.train);
    params = QBNParams<float>::init(cfg, 8);
    randomize(params.classifier.output.weight, 9);
  }
  Split split;
  QBNConfig cfg;
  QBNParams<float> params;
};

TEST_F(AttentionDumpTest, EveryMapRowIsStochastic) {
  for (std::size_t i = 0; i < 4; ++i) {
    const AttentionDump d = dump_attention(cfg, params, split.validation, i);
    ASSERT_EQ(d.blocks.size(), cfg.num_blocks);
    auto check_rows = [](const std::vector<std::vector<double>>& m) {
      for (const auto& row : m) {
        double s = 0.0;
        for (double x : row) {
          EXPECT_GE(x, 0.0);
          s += x;
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
      }
    };
    for (const auto& b : d.blocks) {
      ASSERT_TRUE(b.gates.has_value());
      for (std::size_t c = 0; c < 4; ++c) {
        check_rows((*b.gates)[c]);
        EXPECT_EQ(b.coattention[c].size(), cfg.num_heads);
        for (const auto& head : b.coattention[c]) check_rows(head);
      }
      check_rows({b.region_weights});
    }
    check_rows({d.region_weights});
    EXPECT_EQ(d.argmax_region,
              std::max_element(d.region_weights.begin(), d.region_weights.end()) -
                  d.region_weights.begin());
    EXPECT_EQ(d.answer, answer_names()[split.validation.answers[i]]);
  }
}

TEST_F(AttentionDumpTest, JsonRoundTrips) {
  const AttentionDump d = dump_attention(cfg, params, split.validation, 1);
  const auto j = to_json(d);
  EXPECT_EQ(j["schema"], kAttentionDumpSchema);
  EXPECT_EQ(attention_dump_from_json(nlohmann::json::parse(j.dump())), d);
  auto broken = j;
  broken["blocks"][0]["coattention"]["j"][0].erase(0);
  EXPECT_THROW(attention_dump_from_json(broken), FormatError);
  broken = j;
  broken.erase("region_weights");
  EXPECT_THROW(attention_dump_from_json(broken), FormatError);
}

TEST_F(AttentionDumpTest, GateOffDumpHasNoGates) {
  QBNConfig off = cfg;
  off.use_relationship_gate = false;
  const AttentionDump d = dump_attention(off, params, split.validation, 0);
  for (const auto& b : d.blocks) EXPECT_FALSE(b.gates.has_value());
  EXPECT_EQ(attention_dump_from_json(to_json(d)), d);
}

TEST_F(AttentionDumpTest, IndexOutOfRangeIsInputError) {
  EXPECT_THROW(dump_attention(cfg, params, split.validation, split.validation.size()),
               InputError);
}

TEST_F(AttentionDumpTest, AgreementMatchesPerExampleArgmax) {
  std::size_t hits = 0, targeted = 0;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    const AttentionDump d = dump_attention(cfg, params, split.train, i);
    if (!d.attention_target) continue;
    ++targeted;
    hits += d.argmax_region == *d.attention_target;
  }
  ASSERT_GT(targeted, 0u);
  EXPECT_DOUBLE_EQ(attention_agreement(cfg, params, split.train),
                   double(hits) / double(targeted));
  Dataset untargeted = split.train;
  std::fill(untargeted.targets.begin(), untargeted.targets.end(), -1);
  EXPECT_THROW(attention_agreement(cfg, params, untargeted), InputError);
}

// ---------------------------------------------------------------------------
// Ablations

TEST(Ablation, ArmMatrix) {
  TrainConfig base = tiny_train_config("/tmp/abl");
  base.model.model_dim = 512;
  base.model.num_heads = 16;
  const auto arms = ablation_arms(base);
  std::vector<std::string> names;
  for (const auto& a : arms) names.push_back(a.name);
  EXPECT_EQ(names, (std::vector<std::string>{
                       "full", "no_gate", "no_content", "regions_1x1", "regions_2x2",
                       "heads_8", "heads_12", "heads_16", "blocks_1", "blocks_2",
                       "blocks_3", "blocks_4"}));
  EXPECT_EQ(arms[6].config.model.model_dim, 516u);
  EXPECT_EQ(arms[5].config.model.model_dim, 512u);
  EXPECT_EQ(arms[3].config.data.spec->region_spatial, 1u);
  EXPECT_FALSE(arms[1].config.model.use_relationship_gate);
  EXPECT_FALSE(arms[2].config.model.use_content_learning);
  base.data.spec.reset();
  base.data.train_path = "/tmp/data.qbnt";
  EXPECT_THROW(ablation_arms(base), ConfigError);
}

TEST(Ablation, InvariantChecksCatchTamperedDisabledPath) {
  TrainConfig c = tiny_train_config("/tmp/x");
  const Split s = load_data(c.data);
  QBNConfig m = resolve_model_config(c.model, s.train);
  m.use_content_learning = false;
  m.use_relationship_gate = false;
  auto params = QBNParams<float>::init(m, 4);
  randomize(params.classifier.output.weight, 5);
  const auto initial = clone_params(m, params);
  const auto batch = s.validation.batch(first_n(3));
  const auto checks = verify_arm_invariants(m, params, initial, batch);
  EXPECT_EQ(checks.size(), 5u);
  for (auto& [name, t] : params.named()) {
    if (name == "block1.summary_gru.hidden_bias") t.mutable_values()[0] += 1.0f;
  }
  EXPECT_THROW(verify_arm_invariants(m, params, initial, batch), ContractError);
}

TEST(Ablation, RunsEveryArmAndWritesTables) {
  const fs::path dir = fresh_dir("ablate");
  TrainConfig base = tiny_train_config(dir);
  base.epochs = 1;
  base.data.num_train = 16;
  base.model.num_heads = 8;  // heads_8 reuses the full run
  const AblationReport r = run_ablations(base);
  ASSERT_EQ(r.rows.size(), 12u);
  for (const auto& row : r.rows) {
    EXPECT_TRUE(row.invariants_hold) << row.arm;
    EXPECT_TRUE(std::isfinite(row.validation.overall.accuracy())) << row.arm;
    EXPECT_TRUE(std::isfinite(row.final_train_loss)) << row.arm;
  }
  EXPECT_EQ(r.rows[5].arm, "heads_8");
  EXPECT_EQ(r.rows[5].shared_with, "full");
  EXPECT_EQ(r.rows[6].model.model_dim, 24u);
  EXPECT_EQ(r.rows[3].model.region_spatial, 1u);
  const std::string md = r.to_markdown();
  EXPECT_EQ(std::count(md.begin(), md.end(), '\n'), 14);
  EXPECT_TRUE(fs::exists(dir / "ablation.md"));
  std::ifstream in(dir / "ablation.json");
  EXPECT_EQ(nlohmann::json::parse(in)["rows"].size(), 12u);
}

// ---------------------------------------------------------------------------

TEST(GradcheckSuite, EveryCasePasses) {
  const auto cases = run_gradcheck_suite(1e-2);
  EXPECT_GE(cases.size(), 30u);
  for (const auto& c : cases) {
    EXPECT_TRUE(c.passed) << c.name << " " << c.max_rel_error;
    EXPECT_GT(c.elements, 0u) << c.name;
  }
}
