#include <chrono>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "qbn/error.hpp"
#include "qbn/harness.hpp"

namespace qbn {

namespace {

namespace fs = std::filesystem;

bool bit_equal(const BasicTensor<float>& a, const BasicTensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(),
                     a.numel() * sizeof(float)) == 0;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError("ablation invariant failed: " + what);
}

// Forward pass assembled from the public building blocks with no quaternion
// scores or gates anywhere.
BasicTensor<float> forward_without_gate_path(const QBNConfig& cfg,
                                             const QBNParams<float>& params,
                                             const ModelInput<float>& in) {
  const KeyMask mask = word_mask(in.tokens, in.batch, cfg.question_len);
  const auto q = encode_question<float>(in.tokens, in.batch, cfg, params.question);
  auto v = film_condition(in.regions, q.question, cfg, params.film).output;
  auto w = q.word_states;
  const AttentionConfig acfg = cfg.attention();
  for (const auto& bp : params.blocks) {
    const auto vs = build_layer_chain(v, bp.visual_chain, acfg);
    const auto ws = build_layer_chain(w, bp.text_chain, acfg, &mask);
    std::vector<BasicTensor<float>> updates;
    std::optional<ContentSummary<float>> summary;
    if (cfg.use_content_learning) summary = content_summary(ws, mask, bp.summary);
    for (std::size_t c = 0; c < 4; ++c) {
      const auto kv = summary ? add(ws[c], expand(summary->multi_qn, 1, cfg.question_len))
                              : ws[c];
      updates.push_back(
          multi_head_attention(vs[c], kv, kv, acfg, bp.coattention[c], {}, &mask).output);
    }
    v = bp.norm(add(v, bp.ffn(bp.fuse(concat(updates, 2)), 0.0, {})));
    w = ws[3];
  }
  return classify(v, q.question, params.classifier).logits;
}

std::string percent(double x) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << 100.0 * x;
  return s.str();
}

}  // namespace

std::vector<std::string> verify_arm_invariants(const QBNConfig& cfg,
                                               const QBNParams<float>& params,
                                               const QBNParams<float>& initial,
                                               const ModelInput<float>& batch) {
  NoGradGuard no_grad;
  std::vector<std::string> checks;
  ForwardTrace<float> trace;
  const auto out = forward(cfg, params, batch, {}, &trace).logits;
  require(bit_equal(out, forward(cfg, params, batch).logits),
          "repeated forward differs");
  checks.push_back("repeated forward is bit-identical");
  require(trace.blocks.size() == cfg.num_blocks, "block count");
  for (const auto& b : trace.blocks) {
    require(b.visual.shape() == Shape{batch.batch, cfg.num_regions, cfg.model_dim},
            "block output shape");
    require(b.summary.multi_qn.defined() == cfg.use_content_learning,
            "content path present iff enabled");
    require(b.gate.gate[0].defined() == cfg.use_relationship_gate,
            "gate path present iff enabled");
  }
  checks.push_back("trace holds exactly the enabled paths");

  if (!cfg.use_content_learning) {
    const auto now = params.named(), init = initial.named();
    for (std::size_t i = 0; i < now.size(); ++i) {
      if (now[i].first.find(".summary_gru.") == std::string::npos) continue;
      require(bit_equal(now[i].second, init[i].second),
              now[i].first + " changed although content learning is off");
    }
    checks.push_back("summary GRU weights untouched by training");
    QBNConfig on = cfg;
    on.use_content_learning = true;
    auto zeroed = clone_params(cfg, params);
    for (auto& [name, t] : zeroed.named()) {
      if (name.find(".summary_gru.") == std::string::npos) continue;
      auto v = BasicTensor<float>(t).mutable_values();
      std::fill(v.begin(), v.end(), 0.0f);
    }
    require(bit_equal(out, forward(on, zeroed, batch).logits),
            "content-off differs from a zero summary RNN");
    checks.push_back("content-off equals content-on with a zero summary RNN");
  }
  if (!cfg.use_relationship_gate) {
    require(bit_equal(out, forward_without_gate_path(cfg, params, batch)),
            "gate-off differs from the gate-free composition");
    checks.push_back("gate-off equals the gate-free composition");
  }
  return checks;
}

std::vector<AblationArm> ablation_arms(const TrainConfig& base) {
  std::vector<AblationArm> arms;
  auto add_arm = [&](std::string name, std::string description, auto edit) {
    TrainConfig c = base;
    edit(c);
    c.checkpoint_dir = base.checkpoint_dir / name;
    arms.push_back({std::move(name), std::move(description), std::move(c)});
  };
  add_arm("full", "all paths enabled", [](TrainConfig&) {});
  add_arm("no_gate", "without relationship gate",
          [](TrainConfig& c) { c.model.use_relationship_gate = false; });
  add_arm("no_content", "without multi-layer content learning",
          [](TrainConfig& c) { c.model.use_content_learning = false; });
  for (std::size_t s : {1u, 2u}) {
    const std::string tag = std::to_string(s) + "x" + std::to_string(s);
    add_arm("regions_" + tag, tag + " region grid", [&](TrainConfig& c) {
      if (!c.data.spec) {
        throw ConfigError("region-grid arms need a generated dataset spec");
      }
      c.data.spec->region_spatial = s;
      c.model.region_spatial = 0;
    });
  }
  for (std::size_t h : {8u, 12u, 16u}) {
    add_arm("heads_" + std::to_string(h), std::to_string(h) + " parallel heads",
            [&](TrainConfig& c) {
              c.model.num_heads = h;
              c.model.model_dim = (c.model.model_dim + h - 1) / h * h;
            });
  }
  for (std::size_t n = 1; n <= 4; ++n) {
    add_arm("blocks_" + std::to_string(n), "QB-" + std::to_string(n),
            [&](TrainConfig& c) { c.model.num_blocks = n; });
  }
  return arms;
}

AblationReport run_ablations(const TrainConfig& base, const AblationOptions& options) {
  base.validate();
  AblationReport report;
  std::map<std::string, Split> data_cache;
  std::map<std::string, std::size_t> run_by_config;

  for (const auto& arm : ablation_arms(base)) {
    nlohmann::json key = to_json(arm.config);
    key.erase("checkpoint_dir");
    const std::string key_text = key.dump();
    if (auto it = run_by_config.find(key_text); it != run_by_config.end()) {
      AblationRow row = report.rows[it->second];
      row.shared_with = row.shared_with.empty() ? row.arm : row.shared_with;
      row.arm = arm.name;
      row.description = arm.description;
      report.rows.push_back(row);
      if (options.on_row) options.on_row(report.rows.back());
      continue;
    }

    const std::string data_key = to_json(arm.config)["data"].dump();
    auto data_it = data_cache.find(data_key);
    if (data_it == data_cache.end()) {
      data_it = data_cache.emplace(data_key, load_data(arm.config.data)).first;
    }
    const Split& data = data_it->second;

    const auto t0 = std::chrono::steady_clock::now();
    const RunReport run = train(arm.config, data);
    AblationRow row;
    row.arm = arm.name;
    row.description = arm.description;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    row.num_parameters = run.num_parameters;
    row.final_train_loss = run.epochs.empty() ? 0.0 : run.epochs.back().train_loss;

    const Checkpoint last = load_checkpoint(run.last_checkpoint);
    const Checkpoint init = load_checkpoint(arm.config.checkpoint_dir / "epoch_0000.qbnt");
    row.model = last.config.model;
    const Dataset& eval_set = data.validation.empty() ? data.train : data.validation;
    row.validation = evaluate(last, eval_set);
    std::vector<std::size_t> probe;
    for (std::size_t i = 0; i < std::min<std::size_t>(4, eval_set.size()); ++i) {
      probe.push_back(i);
    }
    try {
      row.invariant_checks = verify_arm_invariants(row.model, last.params, init.params,
                                                   eval_set.batch(probe));
    } catch (const ContractError& e) {
      row.invariants_hold = false;
      row.invariant_checks.push_back(e.what());
    }
    run_by_config.emplace(key_text, report.rows.size());
    report.rows.push_back(std::move(row));
    if (options.on_row) options.on_row(report.rows.back());
  }

  fs::create_directories(base.checkpoint_dir);
  std::ofstream(base.checkpoint_dir / "ablation.json") << report.to_json().dump(2) << "\n";
  std::ofstream(base.checkpoint_dir / "ablation.md") << report.to_markdown();
  return report;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"arm", r.arm},
                         {"description", r.description},
                         {"model", qbn::to_json(r.model)},
                         {"num_parameters", r.num_parameters},
                         {"validation", qbn::to_json(r.validation)},
                         {"final_train_loss", r.final_train_loss},
                         {"wall_seconds", r.wall_seconds},
                         {"shared_with", r.shared_with},
                         {"invariants_hold", r.invariants_hold},
                         {"invariant_checks", r.invariant_checks}});
  }
  return {{"rows", rows_json}};
}

std::string AblationReport::to_markdown() const {
  std::ostringstream md;
  md << "| Arm | Setting | D | Heads | Blocks | Params | Yes/No | Number | Other | "
        "All | Train loss | Invariants |\n"
     << "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  auto cat = [](const EvalReport& e, const std::string& name) {
    auto it = e.per_category.find(name);
    return it == e.per_category.end() ? std::string("-") : percent(it->second.accuracy());
  };
  for (const auto& r : rows) {
    md << "| " << r.arm << " | " << r.description
       << (r.shared_with.empty() ? "" : " (same run as " + r.shared_with + ")") << " | "
       << r.model.model_dim << " | " << r.model.num_heads << " | " << r.model.num_blocks
       << " | " << r.num_parameters << " | " << cat(r.validation, "yes/no") << " | "
       << cat(r.validation, "number") << " | " << cat(r.validation, "other") << " | "
       << percent(r.validation.overall.accuracy()) << " | " << r.final_train_loss
       << " | " << (r.invariants_hold ? "hold" : "FAIL") << " |\n";
  }
  return md.str();
}

}  // namespace qbn
