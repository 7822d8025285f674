// qbn command-line front end: train, eval, gradcheck, dump-attention, ablate,
// generate.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "qbn/error.hpp"
#include "qbn/harness.hpp"

namespace {

using namespace qbn;
namespace fs = std::filesystem;

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw InputError("cannot write " + path.string());
}

// --data accepts a dataset file, a dataset-spec JSON file, an inline spec
// ("{...}"), or "train"/"validation" for the checkpoint's own split.
Dataset resolve_dataset(const std::string& arg, const Checkpoint* ckpt) {
  if ((arg == "train" || arg == "validation") && ckpt) {
    Split s = load_data(ckpt->config.data);
    return arg == "train" ? std::move(s.train) : std::move(s.validation);
  }
  if (!arg.empty() && arg.front() == '{') {
    try {
      return generate(dataset_spec_from_json(nlohmann::json::parse(arg)));
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(std::string("inline dataset spec is not valid JSON: ") + e.what());
    }
  }
  if (fs::path(arg).extension() == ".json") {
    return generate(dataset_spec_from_json(read_json_file(arg)));
  }
  return load_features(arg);
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quaternion block network: training, evaluation and diagnostics"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
  std::string train_config;
  std::optional<std::uint64_t> train_seed;
  std::string train_out;
  train_cmd->add_option("--config", train_config, "train config JSON")->required();
  train_cmd->add_option("--seed", train_seed, "override the training seed");
  train_cmd->add_option("--out", train_out, "override the checkpoint directory");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data = "validation";
  std::string eval_out;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data,
                       "dataset file, spec JSON (file or inline), or train/validation");
  eval_cmd->add_option("--out", eval_out, "also write the report here");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "run the double-precision gradient checks");
  double grad_tol = 1e-2;
  grad_cmd->add_option("--tol", grad_tol, "relative error tolerance");

  // dump-attention
  auto* dump_cmd = app.add_subcommand("dump-attention", "write attention maps for one example");
  std::string dump_ckpt, dump_out, dump_data;
  std::size_t dump_example = 0;
  dump_cmd->add_option("--ckpt", dump_ckpt, "checkpoint file")->required();
  dump_cmd->add_option("--example", dump_example, "example index")->required();
  dump_cmd->add_option("--out", dump_out, "output JSON")->required();
  dump_cmd->add_option("--data", dump_data,
                       "dataset (default: the checkpoint's validation split)");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "train every ablation arm");
  std::string ablate_config, ablate_out;
  ablate_cmd->add_option("--config", ablate_config, "base train config JSON")->required();
  ablate_cmd->add_option("--out", ablate_out, "override the output directory");

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "write a synthetic dataset");
  std::string gen_spec, gen_out, gen_manifest;
  gen_cmd->add_option("--spec", gen_spec, "dataset spec JSON (file or inline)")->required();
  gen_cmd->add_option("--out", gen_out, "dataset file")->required();
  gen_cmd->add_option("--manifest", gen_manifest, "manifest JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*train_cmd) {
      TrainConfig cfg = load_train_config(train_config);
      if (train_seed) cfg.seed = *train_seed;
      if (!train_out.empty()) cfg.checkpoint_dir = train_out;
      TrainOptions opts;
      opts.on_epoch = [](const EpochStats& e) {
        std::fprintf(stderr, "epoch %zu loss %.6f train_acc %.4f", e.epoch, e.train_loss,
                     e.train_accuracy);
        if (e.validation_accuracy) std::fprintf(stderr, " val_acc %.4f", *e.validation_accuracy);
        std::fprintf(stderr, " (%.1fs)\n", e.wall_seconds);
      };
      const RunReport report = train(cfg, opts);
      std::cout << to_json(report).dump(2) << "\n";
    } else if (*eval_cmd) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const Dataset data = resolve_dataset(eval_data, &ckpt);
      const auto report = to_json(evaluate(ckpt, data));
      if (!eval_out.empty()) write_json_file(eval_out, report);
      std::cout << report.dump(2) << "\n";
    } else if (*grad_cmd) {
      std::size_t failed = 0;
      for (const auto& c : run_gradcheck_suite(grad_tol)) {
        std::printf("%-26s %-4s max_rel_err %.3e over %zu elements\n", c.name.c_str(),
                    c.passed ? "ok" : "FAIL", c.max_rel_error, c.elements);
        failed += !c.passed;
      }
      if (failed) throw NumericError(std::to_string(failed) + " gradient checks failed");
    } else if (*dump_cmd) {
      const Checkpoint ckpt = load_checkpoint(dump_ckpt);
      const Dataset data =
          dump_data.empty() ? checkpoint_dataset(ckpt) : resolve_dataset(dump_data, &ckpt);
      write_json_file(dump_out, to_json(dump_attention(ckpt.config.model, ckpt.params, data,
                                                       dump_example)));
    } else if (*ablate_cmd) {
      TrainConfig cfg = load_train_config(ablate_config);
      if (!ablate_out.empty()) cfg.checkpoint_dir = ablate_out;
      AblationOptions opts;
      opts.on_row = [](const AblationRow& r) {
        std::fprintf(stderr, "arm %s: accuracy %.4f (%.1fs)\n", r.arm.c_str(),
                     r.validation.overall.accuracy(), r.wall_seconds);
      };
      std::cout << run_ablations(cfg, opts).to_markdown();
    } else if (*gen_cmd) {
      const DatasetSpec spec = dataset_spec_from_json(
          !gen_spec.empty() && gen_spec.front() == '{' ? nlohmann::json::parse(gen_spec)
                                                       : read_json_file(gen_spec));
      const Dataset data = generate(spec);
      save_dataset(gen_out, data);
      if (!gen_manifest.empty()) write_json_file(gen_manifest, manifest(spec, data));
    }
  } catch (const qbn::Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.code().c_str(), one_line(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 0;
}
