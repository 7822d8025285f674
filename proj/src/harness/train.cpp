#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <numeric>

#include "qbn/error.hpp"
#include "qbn/harness.hpp"

namespace qbn {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed,
                                  std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(CounterRng::derive(seed, 2000 + epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

fs::path epoch_path(const fs::path& dir, std::size_t epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%04zu.qbnt", epoch);
  return dir / name;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw InputError("cannot write " + path.string());
}

void require_shapes(const QBNConfig& cfg, const Dataset& data) {
  if (data.num_regions != cfg.num_regions || data.region_spatial != cfg.region_spatial ||
      data.region_channels != cfg.region_channels ||
      data.question_len != cfg.question_len) {
    throw InputError("dataset shapes (mu " + std::to_string(data.num_regions) +
                     ", s " + std::to_string(data.region_spatial) + ", c " +
                     std::to_string(data.region_channels) + ", len " +
                     std::to_string(data.question_len) +
                     ") do not match the model");
  }
  if (cfg.num_answers != num_answers() || cfg.vocab_size != vocab_size()) {
    throw InputError("model vocabulary does not match the dataset vocabulary");
  }
}

std::size_t argmax(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

template <typename T>
std::vector<double> to_vector(std::span<const T> v) {
  return {v.begin(), v.end()};
}

}  // namespace

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    nlohmann::json je = {{"epoch", e.epoch},
                         {"train_loss", e.train_loss},
                         {"train_accuracy", e.train_accuracy},
                         {"wall_seconds", e.wall_seconds}};
    je["validation_accuracy"] =
        e.validation_accuracy ? nlohmann::json(*e.validation_accuracy) : nlohmann::json();
    epochs.push_back(je);
  }
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(r.config_hash));
  nlohmann::json j = {{"epochs", epochs},
                      {"step_losses", r.step_losses},
                      {"config_hash", hash},
                      {"num_parameters", r.num_parameters},
                      {"majority_baseline", r.majority_baseline},
                      {"best_epoch", r.best_epoch},
                      {"best_accuracy", r.best_accuracy},
                      {"best_metric", r.best_metric},
                      {"best_checkpoint", r.best_checkpoint.string()},
                      {"last_checkpoint", r.last_checkpoint.string()},
                      {"wall_seconds", r.wall_seconds},
                      {"aborted", r.aborted},
                      {"abort_reason", r.abort_reason},
                      {"out_of_time", r.out_of_time}};
  j["attention_agreement"] =
      r.attention_agreement ? nlohmann::json(*r.attention_agreement) : nlohmann::json();
  return j;
}

RunReport train(const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  return train(cfg, load_data(cfg.data), options);
}

RunReport train(const TrainConfig& base, const Split& data,
                const TrainOptions& options) {
  const auto t0 = Clock::now();
  base.validate();
  if (data.train.empty()) throw InputError("the training set is empty");
  TrainConfig cfg = base;
  cfg.model = resolve_model_config(cfg.model, data.train);
  const bool has_validation = !data.validation.empty();
  if (has_validation) require_shapes(cfg.model, data.validation);

  Checkpoint ckpt{cfg, QBNParams<float>::init(cfg.model, cfg.seed), {}, 0,
                  config_hash(cfg.model)};
  if (!cfg.word_embeddings.empty()) load_word_embeddings(cfg.word_embeddings, ckpt.params);
  const auto named = ckpt.params.named();
  ckpt.optimizer = AdamState<float>::zeros(named);

  RunReport report;
  report.config_hash = ckpt.config_hash;
  for (const auto& [name, t] : named) report.num_parameters += t.numel();
  report.majority_baseline =
      majority_baseline(has_validation ? data.validation : data.train).accuracy;
  report.best_metric = has_validation ? "validation_accuracy" : "train_accuracy";
  report.best_accuracy = -1.0;

  const fs::path dir = cfg.checkpoint_dir;
  const fs::path report_path = dir / "report.json";
  auto save = [&](const fs::path& path) {
    if (options.write_checkpoints) save_checkpoint(path, ckpt);
  };
  auto write_report = [&] {
    report.wall_seconds = seconds_since(t0);
    if (options.write_checkpoints) write_json(report_path, to_json(report));
  };

  save(epoch_path(dir, 0));
  report.last_checkpoint = epoch_path(dir, 0);
  if (cfg.epochs == 0) {
    save(dir / "best.qbnt");
    report.best_checkpoint = dir / "best.qbnt";
    report.best_accuracy = 0.0;
    write_report();
    return report;
  }

  const AdamConfig adam = cfg.adam();
  const std::uint64_t dropout_key = CounterRng::derive(cfg.seed, 3000);
  std::size_t step = 0;
  std::deque<fs::path> kept;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto te = Clock::now();
    const auto order = shuffled(data.train.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    bool stop = false;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(
          order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const auto input = data.train.batch(idx);
      const auto answers = data.train.batch_answers(idx);
      CounterRng dropout_rng(CounterRng::derive(dropout_key, step));
      try {
        const auto logits =
            forward(cfg.model, ckpt.params, input, {true, &dropout_rng}).logits;
        const auto loss =
            softmax_cross_entropy(logits, std::span<const std::int32_t>(answers));
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw NumericError("non-finite loss at step " + std::to_string(step));
        }
        for (const auto& [name, p] : named) BasicTensor<float>(p).zero_grad();
        loss.backward();
        const double lr_scale =
            cfg.warmup_steps
                ? std::min(1.0, double(step + 1) / double(cfg.warmup_steps))
                : 1.0;
        adam_step(named, ckpt.optimizer, adam, lr_scale);
        report.step_losses.push_back(value);
        loss_sum += value * double(idx.size());
        loss_count += idx.size();
      } catch (const NumericError& e) {
        report.aborted = true;
        report.abort_reason = e.what();
        write_report();
        throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                           report.last_checkpoint.string());
      }
      ++step;
      if (options.max_steps && step >= options.max_steps) {
        stop = true;
        break;
      }
      if (options.max_wall_seconds > 0.0 &&
          seconds_since(t0) >= options.max_wall_seconds) {
        report.out_of_time = true;
        stop = true;
        break;
      }
    }
    if (stop && loss_count < data.train.size()) {
      write_report();
      return report;  // partial epoch: no epoch statistics
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / double(loss_count);
    stats.train_accuracy = evaluate(cfg.model, ckpt.params, data.train).overall.accuracy();
    if (has_validation) {
      stats.validation_accuracy =
          evaluate(cfg.model, ckpt.params, data.validation).overall.accuracy();
    }
    stats.wall_seconds = seconds_since(te);
    ckpt.epoch = epoch;

    const fs::path path = epoch_path(dir, epoch);
    save(path);
    report.last_checkpoint = path;
    if (cfg.keep_last_checkpoints && options.write_checkpoints) {
      kept.push_back(path);
      while (kept.size() > cfg.keep_last_checkpoints) {
        fs::remove(kept.front());
        kept.pop_front();
      }
    }
    const double metric =
        has_validation ? *stats.validation_accuracy : stats.train_accuracy;
    if (metric > report.best_accuracy) {
      report.best_accuracy = metric;
      report.best_epoch = epoch;
      report.best_checkpoint = dir / "best.qbnt";
      save(report.best_checkpoint);
    }
    report.epochs.push_back(stats);
    write_report();
    if (options.on_epoch) options.on_epoch(stats);
    if (stop) break;
    if (cfg.stop_at_full_train_accuracy && stats.train_accuracy == 1.0) break;
  }
  write_report();
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation

nlohmann::json to_json(const EvalReport& r) {
  auto tally = [](const AccuracyTally& t) {
    return nlohmann::json{{"correct", t.correct}, {"total", t.total},
                          {"accuracy", t.accuracy()}};
  };
  nlohmann::json per_template = nlohmann::json::object();
  for (const auto& [k, v] : r.per_template) per_template[k] = tally(v);
  nlohmann::json per_category = nlohmann::json::object();
  for (const auto& [k, v] : r.per_category) per_category[k] = tally(v);
  return {{"overall", tally(r.overall)},
          {"per_template", per_template},
          {"per_category", per_category},
          {"mean_loss", r.mean_loss}};
}

EvalReport evaluate(const QBNConfig& cfg, const QBNParams<float>& params,
                    const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw InputError("cannot evaluate on an empty dataset");
  require_shapes(cfg, data);
  NoGradGuard no_grad;
  EvalReport r;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto answers = data.batch_answers(idx);
    const auto logits = forward(cfg, params, data.batch(idx)).logits;
    loss_sum += softmax_cross_entropy(logits, std::span<const std::int32_t>(answers))
                    .item() *
                double(idx.size());
    const auto values = logits.values();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto pred = static_cast<std::int32_t>(
          argmax(values.subspan(b * cfg.num_answers, cfg.num_answers)));
      r.predictions.push_back(pred);
      const bool ok = pred == answers[b];
      const auto t = static_cast<QuestionTemplate>(data.templates[idx[b]]);
      for (AccuracyTally* tally :
           {&r.overall, &r.per_template[std::string(kTemplateNames[int(t)])],
            &r.per_category[std::string(answer_category(t))]}) {
        tally->correct += ok;
        ++tally->total;
      }
    }
  }
  r.mean_loss = loss_sum / double(data.size());
  return r;
}

EvalReport evaluate(const Checkpoint& ckpt, const Dataset& data) {
  return evaluate(ckpt.config.model, ckpt.params, data);
}

Dataset checkpoint_dataset(const Checkpoint& ckpt) {
  Split s = load_data(ckpt.config.data);
  return s.validation.empty() ? std::move(s.train) : std::move(s.validation);
}

// ---------------------------------------------------------------------------
// Attention dumps

AttentionDump dump_attention(const QBNConfig& cfg, const QBNParams<float>& params,
                             const Dataset& data, std::size_t index) {
  if (index >= data.size()) {
    throw InputError("example " + std::to_string(index) + " is out of range (" +
                     std::to_string(data.size()) + " examples)");
  }
  require_shapes(cfg, data);
  NoGradGuard no_grad;
  const std::size_t idx[] = {index};
  ForwardTrace<float> trace;
  const auto result = forward(cfg, params, data.batch(idx), {}, &trace);

  AttentionDump d;
  d.example = index;
  d.scene_id = data.scene_ids[index];
  for (std::size_t t = 0; t < data.question_len; ++t) {
    const auto tok = data.tokens[index * data.question_len + t];
    if (tok != kPadToken) d.question.push_back(vocabulary()[tok]);
  }
  d.answer = answer_names()[data.answers[index]];
  d.prediction = answer_names()[argmax(result.logits.values())];
  if (data.targets[index] >= 0) d.attention_target = data.targets[index];
  d.region_weights = to_vector(result.region_weights.values());
  d.argmax_region = static_cast<std::size_t>(
      std::max_element(d.region_weights.begin(), d.region_weights.end()) -
      d.region_weights.begin());

  const std::size_t mu = cfg.num_regions, len = cfg.question_len;
  auto rows = [&](std::span<const float> v, std::size_t offset) {
    std::vector<std::vector<double>> m(mu);
    for (std::size_t i = 0; i < mu; ++i) {
      m[i] = to_vector(v.subspan(offset + i * len, len));
    }
    return m;
  };
  for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
    const auto& blk = trace.blocks[b];
    BlockAttention ba;
    if (blk.gate.gate[0].defined()) {
      ba.gates.emplace();
      for (std::size_t c = 0; c < 4; ++c) (*ba.gates)[c] = rows(blk.gate.gate[c].values(), 0);
    }
    for (std::size_t c = 0; c < 4; ++c) {
      const auto w = blk.coattention.weights[c].values();
      for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        ba.coattention[c].push_back(rows(w, h * mu * len));
      }
    }
    ba.region_weights = to_vector(trace.block_region_weights[b].values());
    d.blocks.push_back(std::move(ba));
  }
  return d;
}

nlohmann::json to_json(const AttentionDump& d) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : d.blocks) {
    nlohmann::json jb;
    if (b.gates) {
      for (std::size_t c = 0; c < 4; ++c) jb["gates"][kComponentNames[c]] = (*b.gates)[c];
    } else {
      jb["gates"] = nullptr;
    }
    for (std::size_t c = 0; c < 4; ++c) {
      jb["coattention"][kComponentNames[c]] = b.coattention[c];
    }
    jb["region_weights"] = b.region_weights;
    blocks.push_back(jb);
  }
  nlohmann::json j = {{"schema", kAttentionDumpSchema},
                      {"example", d.example},
                      {"scene_id", d.scene_id},
                      {"question", d.question},
                      {"answer", d.answer},
                      {"prediction", d.prediction},
                      {"region_weights", d.region_weights},
                      {"argmax_region", d.argmax_region},
                      {"blocks", blocks}};
  j["attention_target"] =
      d.attention_target ? nlohmann::json(*d.attention_target) : nlohmann::json();
  return j;
}

AttentionDump attention_dump_from_json(const nlohmann::json& j) {
  auto fail = [](const std::string& what) -> void {
    throw FormatError("attention dump: " + what, 0);
  };
  AttentionDump d;
  try {
    if (j.at("schema").get<std::string>() != kAttentionDumpSchema) fail("unknown schema");
    d.example = j.at("example").get<std::size_t>();
    d.scene_id = j.at("scene_id").get<std::uint64_t>();
    d.question = j.at("question").get<std::vector<std::string>>();
    d.answer = j.at("answer").get<std::string>();
    d.prediction = j.at("prediction").get<std::string>();
    if (!j.at("attention_target").is_null()) {
      d.attention_target = j.at("attention_target").get<std::size_t>();
    }
    d.region_weights = j.at("region_weights").get<std::vector<double>>();
    d.argmax_region = j.at("argmax_region").get<std::size_t>();
    const std::size_t mu = d.region_weights.size();
    if (d.argmax_region >= mu) fail("argmax_region out of range");
    std::size_t len = 0;
    auto check_map = [&](const std::vector<std::vector<double>>& m) {
      if (m.size() != mu) fail("a map does not have one row per region");
      for (const auto& row : m) {
        if (len == 0) len = row.size();
        if (row.size() != len || len == 0) fail("ragged map rows");
      }
    };
    for (const auto& jb : j.at("blocks")) {
      BlockAttention b;
      if (!jb.at("gates").is_null()) {
        b.gates.emplace();
        for (std::size_t c = 0; c < 4; ++c) {
          (*b.gates)[c] = jb.at("gates")
                              .at(std::string(kComponentNames[c]))
                              .get<std::vector<std::vector<double>>>();
          check_map((*b.gates)[c]);
        }
      }
      for (std::size_t c = 0; c < 4; ++c) {
        b.coattention[c] = jb.at("coattention")
                               .at(std::string(kComponentNames[c]))
                               .get<std::vector<std::vector<std::vector<double>>>>();
        if (b.coattention[c].empty() ||
            b.coattention[c].size() != b.coattention[0].size()) {
          fail("inconsistent head count");
        }
        for (const auto& head : b.coattention[c]) check_map(head);
      }
      b.region_weights = jb.at("region_weights").get<std::vector<double>>();
      if (b.region_weights.size() != mu) fail("block region_weights length");
      d.blocks.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(e.what());
  }
  return d;
}

double attention_agreement(const QBNConfig& cfg, const QBNParams<float>& params,
                           const Dataset& data) {
  require_shapes(cfg, data);
  std::vector<std::size_t> targeted;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.targets[i] >= 0) targeted.push_back(i);
  }
  if (targeted.empty()) throw InputError("no example has an attention target");
  NoGradGuard no_grad;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < targeted.size(); start += 64) {
    const std::span<const std::size_t> idx(
        targeted.data() + start, std::min<std::size_t>(64, targeted.size() - start));
    const auto w = forward(cfg, params, data.batch(idx)).region_weights.values();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = w.subspan(b * cfg.num_regions, cfg.num_regions);
      hits += static_cast<std::int32_t>(argmax(row)) == data.targets[idx[b]];
    }
  }
  return double(hits) / double(targeted.size());
}

}  // namespace qbn
