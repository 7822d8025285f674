#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qbn/data.hpp"
#include "qbn/model.hpp"
#include "qbn/optim.hpp"

namespace qbn {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Either a generated split (`spec` set) or a pair of dataset files.
struct DataSource {
  std::optional<DatasetSpec> spec;
  std::size_t num_train = 0;
  std::size_t num_validation = 0;
  std::filesystem::path train_path;
  std::filesystem::path validation_path;  // optional
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 13;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 0;  // linear warmup, off by default
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_dir = "runs/qbn";
  // 0 keeps every per-epoch checkpoint; otherwise only the newest N.
  std::size_t keep_last_checkpoints = 0;
  // Stop once the model classifies the whole training set correctly.
  bool stop_at_full_train_accuracy = false;
  // Optional QBNT file whose "word_embeddings" tensor [vocab x model_dim]
  // replaces the initial word embedding.
  std::filesystem::path word_embeddings;
  DataSource data;
  // Input-shape fields left at 0 (question_len, num_regions, region_spatial,
  // region_channels, vocab_size, num_answers) are filled from the data.
  QBNConfig model = unshaped_model_config();

  AdamConfig adam() const;
  // Throws ConfigError.
  void validate() const;

  static QBNConfig unshaped_model_config();
};

nlohmann::json to_json(const QBNConfig& cfg);
QBNConfig model_config_from_json(const nlohmann::json& j,
                                 const QBNConfig& defaults = {});
nlohmann::json to_json(const TrainConfig& cfg);
// Unknown fields are a ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

// Fills the data-shaped model fields from `data`; a field that was set and
// disagrees is a ConfigError.
QBNConfig resolve_model_config(QBNConfig model, const Dataset& data);

// FNV-1a over the canonical model config plus both vocabularies.
std::uint64_t config_hash(const QBNConfig& cfg);

Split load_data(const DataSource& source);

// ---------------------------------------------------------------------------
// Checkpoints: a tensor container with param/<name>, adam/m/<name>,
// adam/v/<name> and meta/* records.
// ---------------------------------------------------------------------------

struct Checkpoint {
  TrainConfig config;  // model fields fully resolved
  QBNParams<float> params;
  AdamState<float> optimizer;
  std::size_t epoch = 0;
  std::uint64_t config_hash = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// ConfigError when the stored hash does not match the stored config;
// FormatError for malformed files; InputError for missing tensors.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Deep copy of parameter values into freshly allocated tensors.
QBNParams<float> clone_params(const QBNConfig& cfg, const QBNParams<float>& p);

// Copies the "word_embeddings" tensor of a QBNT file into the question
// embedding. A missing tensor or a shape other than [vocab x D] is an
// InputError.
void load_word_embeddings(const std::filesystem::path& path, QBNParams<float>& params);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over the epoch's steps
  double train_accuracy = 0.0;
  std::optional<double> validation_accuracy;
  double wall_seconds = 0.0;
};

struct RunReport {
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;
  std::uint64_t config_hash = 0;
  std::size_t num_parameters = 0;
  double majority_baseline = 0.0;  // on validation, or train without one
  std::size_t best_epoch = 0;
  double best_accuracy = 0.0;
  std::string best_metric;  // "validation_accuracy" or "train_accuracy"
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  double wall_seconds = 0.0;
  bool aborted = false;
  std::string abort_reason;
  bool out_of_time = false;  // stopped by TrainOptions::max_wall_seconds
  // Argmax-region agreement with attention targets, when measured.
  std::optional<double> attention_agreement;
};

nlohmann::json to_json(const RunReport& r);

struct TrainOptions {
  // Stop after this many optimizer steps (0 = no limit).
  std::size_t max_steps = 0;
  // Stop once this much wall time has passed (0 = no limit).
  double max_wall_seconds = 0.0;
  bool write_checkpoints = true;
  std::function<void(const EpochStats&)> on_epoch = nullptr;
};

// Writes <checkpoint_dir>/epoch_NNNN.qbnt for the initial state and every
// epoch, best.qbnt, and report.json. A non-finite loss or gradient writes the
// report and rethrows as NumericError naming the last good checkpoint.
RunReport train(const TrainConfig& cfg, const TrainOptions& options = {});
RunReport train(const TrainConfig& cfg, const Split& data,
                const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Evaluation and diagnostics
// ---------------------------------------------------------------------------

struct AccuracyTally {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const {
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }
};

struct EvalReport {
  AccuracyTally overall;
  std::map<std::string, AccuracyTally> per_template;
  std::map<std::string, AccuracyTally> per_category;  // yes/no, number, other
  double mean_loss = 0.0;
  std::vector<std::int32_t> predictions;
};

nlohmann::json to_json(const EvalReport& r);

// Empty data is an InputError; so is data whose shapes the model can't take.
EvalReport evaluate(const QBNConfig& cfg, const QBNParams<float>& params,
                    const Dataset& data, std::size_t batch_size = 64);
EvalReport evaluate(const Checkpoint& ckpt, const Dataset& data);

struct BlockAttention {
  // Relationship gates [mu x len] per component (absent with the gate off).
  std::optional<std::array<std::vector<std::vector<double>>, 4>> gates;
  // Co-attention maps [heads x mu x len] per component.
  std::array<std::vector<std::vector<std::vector<double>>>, 4> coattention;
  std::vector<double> region_weights;  // classifier pooling on this block
  friend bool operator==(const BlockAttention&, const BlockAttention&) = default;
};

struct AttentionDump {
  std::size_t example = 0;
  std::uint64_t scene_id = 0;
  std::vector<std::string> question;
  std::string answer;
  std::string prediction;
  std::optional<std::size_t> attention_target;
  std::vector<double> region_weights;  // final pooling weights
  std::size_t argmax_region = 0;
  std::vector<BlockAttention> blocks;
  friend bool operator==(const AttentionDump&, const AttentionDump&) = default;
};

inline constexpr const char* kAttentionDumpSchema = "qbn.attention.v1";

AttentionDump dump_attention(const QBNConfig& cfg, const QBNParams<float>& params,
                             const Dataset& data, std::size_t index);
nlohmann::json to_json(const AttentionDump& d);
// Checks the documented layout; violations are a FormatError at offset 0.
AttentionDump attention_dump_from_json(const nlohmann::json& j);

// Fraction of examples with an attention target whose argmax pooling region
// equals it. InputError when no example has a target.
double attention_agreement(const QBNConfig& cfg, const QBNParams<float>& params,
                           const Dataset& data);

// The evaluation set a checkpoint was trained against: its validation split
// when it has one, else its training data.
Dataset checkpoint_dataset(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationArm {
  std::string name;
  std::string description;
  TrainConfig config;
};

// full, no_gate, no_content, regions_1x1, regions_2x2, heads_8/12/16,
// blocks_1..4. Head counts that don't divide model_dim round model_dim up to
// the next multiple.
std::vector<AblationArm> ablation_arms(const TrainConfig& base);

struct AblationRow {
  std::string arm;
  std::string description;
  QBNConfig model;
  std::size_t num_parameters = 0;
  EvalReport validation;
  double final_train_loss = 0.0;
  double wall_seconds = 0.0;
  std::string shared_with;  // arm whose identical run was reused
  bool invariants_hold = true;
  std::vector<std::string> invariant_checks;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  nlohmann::json to_json() const;
  std::string to_markdown() const;
};

// Bit-identity checks for the paths an arm switches off, run on `batch` in
// eval mode. Returns the checks performed; throws ContractError on failure.
std::vector<std::string> verify_arm_invariants(const QBNConfig& cfg,
                                               const QBNParams<float>& params,
                                               const QBNParams<float>& initial,
                                               const ModelInput<float>& batch);

struct AblationOptions {
  std::function<void(const AblationRow&)> on_row;
};

// Trains every arm on the same data and seed. Writes ablation.json and
// ablation.md to base.checkpoint_dir.
AblationReport run_ablations(const TrainConfig& base,
                             const AblationOptions& options = {});

// ---------------------------------------------------------------------------
// Gradient-check suite (double precision)
// ---------------------------------------------------------------------------

struct GradcheckCase {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t elements = 0;
  bool passed = false;
};

std::vector<GradcheckCase> run_gradcheck_suite(double tol);

}  // namespace qbn
