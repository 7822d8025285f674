#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qbn/model.hpp"

namespace qbn {

// ---------------------------------------------------------------------------
// Vocabulary and answers. Both are fixed so every dataset and checkpoint
// agree on ids; id 0 is the pad token.
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 4> kShapes = {
    "circle", "square", "triangle", "star"};
inline constexpr std::array<std::string_view, 6> kColors = {
    "red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<std::string_view, 2> kSizes = {"small", "large"};
inline constexpr std::array<std::string_view, 4> kQuadrants = {
    "top-left", "top-right", "bottom-left", "bottom-right"};
inline constexpr std::size_t kMaxCount = 3;

enum class QuestionTemplate : std::int32_t {
  kColorOfShape = 0,  // what color is the <shape>
  kShapeOfColor = 1,  // what shape is the <color> object
  kCount = 2,         // how many <shapes> are there
  kExists = 3,        // is there a <color> <shape>
  kSize = 4,          // what size is the <shape>
  kWhere = 5,         // where is the <color> <shape>
};
inline constexpr std::size_t kNumTemplates = 6;
inline constexpr std::array<std::string_view, kNumTemplates> kTemplateNames = {
    "color_of_shape", "shape_of_color", "count", "exists", "size", "where"};

// Answer-type grouping used in reports: yes/no, number, other.
std::string_view answer_category(QuestionTemplate t);

const std::vector<std::string>& vocabulary();
std::int32_t token_id(std::string_view word);  // InputError if unknown
const std::vector<std::string>& answer_names();
std::size_t vocab_size();
std::size_t num_answers();

// Answer id helpers.
std::int32_t color_answer(std::size_t color);
std::int32_t shape_answer(std::size_t shape);
std::int32_t count_answer(std::size_t count);
std::int32_t yes_no_answer(bool yes);
std::int32_t size_answer(std::size_t size);
std::int32_t position_answer(std::size_t quadrant);

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t num_examples = 1000;
  std::size_t num_regions = 16;     // mu
  std::size_t region_spatial = 2;   // s
  std::size_t region_channels = 64; // c
  std::size_t question_len = 14;
  double noise = 0.1;  // sigma of the additive Gaussian noise
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  std::size_t num_colors = kColors.size();
  std::size_t num_shapes = kShapes.size();
  std::array<double, kNumTemplates> template_weights = {1, 1, 1, 1, 1, 1};
  // Attribute codebook seed, separate from the scene seed so that splits
  // generated with different seeds share one feature encoding.
  std::uint64_t codebook_seed = 7;

  // Throws SpecError when the spec cannot be satisfied.
  void validate() const;
};

nlohmann::json to_json(const DatasetSpec& spec);
// Missing fields keep their defaults; unknown fields are a SpecError.
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

struct SceneObject {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t size = 0;
  std::size_t quadrant = 0;
  std::size_t region = 0;
};

struct SyntheticVQAExample {
  std::vector<float> regions;          // [mu x s x s x c]
  std::vector<std::int32_t> tokens;    // [question_len]
  std::int32_t answer = 0;
  QuestionTemplate question_template = QuestionTemplate::kColorOfShape;
  std::optional<std::size_t> attention_target;
  std::uint64_t scene_id = 0;
  std::vector<SceneObject> objects;
};

// Column-oriented example storage; all examples share one spec's shapes.
struct Dataset {
  std::size_t num_regions = 0;
  std::size_t region_spatial = 0;
  std::size_t region_channels = 0;
  std::size_t question_len = 0;
  std::vector<float> regions;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> answers;
  std::vector<std::int32_t> templates;
  std::vector<std::int32_t> targets;  // -1 when the question has no target
  std::vector<std::uint64_t> scene_ids;

  std::size_t size() const { return answers.size(); }
  bool empty() const { return answers.empty(); }
  std::size_t region_stride() const {
    return num_regions * region_spatial * region_spatial * region_channels;
  }
  void append(const SyntheticVQAExample& ex);
  // Model input for the given example indices; regions are laid out as
  // [B x mu x s*s x c].
  ModelInput<float> batch(std::span<const std::size_t> indices) const;
  std::vector<std::int32_t> batch_answers(
      std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Fixed attribute/position codes derived from spec.codebook_seed.
struct Codebook {
  std::vector<std::vector<float>> shape, color, size, position;
  static Codebook build(std::uint64_t seed, std::size_t channels);
};

// Example `index` of the stream defined by `spec`; depends only on
// (spec, index), so examples can be produced in any order.
SyntheticVQAExample generate_example(const DatasetSpec& spec,
                                     std::size_t index);
Dataset generate(const DatasetSpec& spec);

// Disjoint train / validation sets with exact sizes. Examples of one stream
// are routed by a hash of their scene id, so no scene can land in both.
struct Split {
  Dataset train;
  Dataset validation;
};
Split generate_split(const DatasetSpec& spec, std::size_t num_train,
                     std::size_t num_validation);

struct MajorityBaseline {
  std::int32_t answer = -1;
  double accuracy = 0.0;
};
MajorityBaseline majority_baseline(const Dataset& data);

nlohmann::json manifest(const DatasetSpec& spec, const Dataset& data);

// ---------------------------------------------------------------------------
// Tensor container: "QBNT", u16 version, then records of
// (u32 name length, name, u8 rank, u64 dims[rank], f32 payload), all
// little-endian.
// ---------------------------------------------------------------------------

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;
};

// Non-owning record, for writing tensors without copying them.
struct TensorView {
  std::string_view name;
  std::vector<std::uint64_t> dims;
  std::span<const float> data;
};

inline constexpr std::uint16_t kContainerVersion = 1;

void write_container(const std::filesystem::path& path,
                     const std::vector<TensorRecord>& records);
void write_container(const std::filesystem::path& path,
                     std::span<const TensorView> records);
// FormatError (with the failing byte offset) on bad magic, unknown version or
// truncation.
std::vector<TensorRecord> read_container(const std::filesystem::path& path);

void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_features(const std::filesystem::path& path);

}  // namespace qbn
