#include <algorithm>
#include <cmath>
#include <numeric>

#include "qbn/data.hpp"

namespace qbn {

// ---------------------------------------------------------------------------
// Vocabulary

namespace {

std::vector<std::string> build_vocabulary() {
  std::vector<std::string> v = {"<pad>", "what",  "color", "is",  "the",
                                "shape", "object", "how",  "many", "are",
                                "there", "a",     "size",  "where"};
  for (auto s : kShapes) v.emplace_back(s);
  for (auto s : kShapes) v.emplace_back(std::string(s) + "s");
  for (auto c : kColors) v.emplace_back(c);
  return v;
}

std::vector<std::string> build_answers() {
  std::vector<std::string> a;
  for (auto c : kColors) a.emplace_back(c);
  for (auto s : kShapes) a.emplace_back(s);
  for (std::size_t n = 0; n <= kMaxCount; ++n) a.push_back(std::to_string(n));
  a.emplace_back("yes");
  a.emplace_back("no");
  for (auto s : kSizes) a.emplace_back(s);
  for (auto q : kQuadrants) a.emplace_back(q);
  return a;
}

}  // namespace

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = build_vocabulary();
  return v;
}

const std::vector<std::string>& answer_names() {
  static const std::vector<std::string> a = build_answers();
  return a;
}

std::size_t vocab_size() { return vocabulary().size(); }
std::size_t num_answers() { return answer_names().size(); }

std::int32_t token_id(std::string_view word) {
  const auto& v = vocabulary();
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] == word) return static_cast<std::int32_t>(i);
  }
  throw InputError("unknown word '" + std::string(word) + "'");
}

std::int32_t color_answer(std::size_t color) {
  return static_cast<std::int32_t>(color);
}
std::int32_t shape_answer(std::size_t shape) {
  return static_cast<std::int32_t>(kColors.size() + shape);
}
std::int32_t count_answer(std::size_t count) {
  return static_cast<std::int32_t>(kColors.size() + kShapes.size() + count);
}
std::int32_t yes_no_answer(bool yes) {
  return count_answer(kMaxCount + 1) + (yes ? 0 : 1);
}
std::int32_t size_answer(std::size_t size) {
  return yes_no_answer(false) + 1 + static_cast<std::int32_t>(size);
}
std::int32_t position_answer(std::size_t quadrant) {
  return size_answer(kSizes.size()) + static_cast<std::int32_t>(quadrant);
}

std::string_view answer_category(QuestionTemplate t) {
  switch (t) {
    case QuestionTemplate::kExists: return "yes/no";
    case QuestionTemplate::kCount: return "number";
    default: return "other";
  }
}

// ---------------------------------------------------------------------------
// Spec

void DatasetSpec::validate() const {
  if (num_colors > kColors.size()) {
    throw SpecError("num_colors " + std::to_string(num_colors) +
                    " exceeds the palette of " + std::to_string(kColors.size()));
  }
  if (num_shapes > kShapes.size()) {
    throw SpecError("num_shapes " + std::to_string(num_shapes) +
                    " exceeds the " + std::to_string(kShapes.size()) +
                    " known shapes");
  }
  if (num_colors < 2 || num_shapes < 2) {
    throw SpecError("templates need at least 2 colors and 2 shapes to tell "
                    "targets from distractors");
  }
  if (min_objects < 1 || min_objects > max_objects) {
    throw SpecError("object count range [" + std::to_string(min_objects) +
                    ", " + std::to_string(max_objects) + "] is empty");
  }
  if (num_regions < max_objects) {
    throw SpecError("num_regions " + std::to_string(num_regions) +
                    " cannot hold max_objects " + std::to_string(max_objects));
  }
  if (region_spatial != 1 && region_spatial != 2) {
    throw SpecError("region_spatial must be 1 or 2");
  }
  if (region_channels < 1) throw SpecError("region_channels must be positive");
  if (question_len < 6) {
    throw SpecError("question_len " + std::to_string(question_len) +
                    " is shorter than the longest template (6 tokens)");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) {
    throw SpecError("noise must be a finite non-negative number");
  }
  double total = 0.0;
  for (double w : template_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw SpecError("template weights must be finite and non-negative");
    }
    total += w;
  }
  if (total <= 0.0) throw SpecError("every template weight is zero");
}

nlohmann::json to_json(const DatasetSpec& s) {
  nlohmann::json weights;
  for (std::size_t t = 0; t < kNumTemplates; ++t) {
    weights[std::string(kTemplateNames[t])] = s.template_weights[t];
  }
  return {{"seed", s.seed},
          {"num_examples", s.num_examples},
          {"num_regions", s.num_regions},
          {"region_spatial", s.region_spatial},
          {"region_channels", s.region_channels},
          {"question_len", s.question_len},
          {"noise", s.noise},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"num_colors", s.num_colors},
          {"num_shapes", s.num_shapes},
          {"template_weights", weights},
          {"codebook_seed", s.codebook_seed}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SpecError("dataset spec must be a JSON object");
  DatasetSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "num_examples") s.num_examples = value.get<std::size_t>();
      else if (key == "num_regions") s.num_regions = value.get<std::size_t>();
      else if (key == "region_spatial") s.region_spatial = value.get<std::size_t>();
      else if (key == "region_channels") s.region_channels = value.get<std::size_t>();
      else if (key == "question_len") s.question_len = value.get<std::size_t>();
      else if (key == "noise") s.noise = value.get<double>();
      else if (key == "min_objects") s.min_objects = value.get<std::size_t>();
      else if (key == "max_objects") s.max_objects = value.get<std::size_t>();
      else if (key == "num_colors") s.num_colors = value.get<std::size_t>();
      else if (key == "num_shapes") s.num_shapes = value.get<std::size_t>();
      else if (key == "codebook_seed") s.codebook_seed = value.get<std::uint64_t>();
      else if (key == "template_weights") {
        s.template_weights.fill(0.0);
        for (const auto& [name, w] : value.items()) {
          auto it = std::find(kTemplateNames.begin(), kTemplateNames.end(), name);
          if (it == kTemplateNames.end()) {
            throw SpecError("unknown question template '" + name + "'");
          }
          s.template_weights[it - kTemplateNames.begin()] = w.get<double>();
        }
      } else {
        throw SpecError("unknown dataset spec field '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("malformed dataset spec: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Generation

Codebook Codebook::build(std::uint64_t seed, std::size_t channels) {
  auto codes = [&](std::size_t count, std::uint64_t stream) {
    CounterRng rng(CounterRng::derive(seed, stream));
    std::vector<std::vector<float>> out(count, std::vector<float>(channels));
    for (auto& code : out)
      for (float& x : code) x = static_cast<float>(rng.normal());
    return out;
  };
  return {codes(kShapes.size(), 0), codes(kColors.size(), 1),
          codes(kSizes.size(), 2), codes(kQuadrants.size(), 3)};
}

namespace {

// Smooth weighted round-robin over templates: over any prefix, each template
// appears within one slot of its weighted share.
class TemplateScheduler {
 public:
  explicit TemplateScheduler(const std::array<double, kNumTemplates>& w)
      : weights_(w), total_(std::accumulate(w.begin(), w.end(), 0.0)) {}

  // Returns (template, how many times it was scheduled before).
  std::pair<QuestionTemplate, std::size_t> next() {
    std::size_t best = kNumTemplates;
    for (std::size_t t = 0; t < kNumTemplates; ++t) {
      if (weights_[t] <= 0.0) continue;
      current_[t] += weights_[t];
      if (best == kNumTemplates || current_[t] > current_[best]) best = t;
    }
    current_[best] -= total_;
    return {static_cast<QuestionTemplate>(best), seen_[best]++};
  }

 private:
  std::array<double, kNumTemplates> weights_;
  std::array<double, kNumTemplates> current_{};
  std::array<std::size_t, kNumTemplates> seen_{};
  double total_;
};

std::vector<std::int32_t> legal_answers(const DatasetSpec& spec,
                                        QuestionTemplate t) {
  std::vector<std::int32_t> a;
  switch (t) {
    case QuestionTemplate::kColorOfShape:
      for (std::size_t c = 0; c < spec.num_colors; ++c) a.push_back(color_answer(c));
      break;
    case QuestionTemplate::kShapeOfColor:
      for (std::size_t s = 0; s < spec.num_shapes; ++s) a.push_back(shape_answer(s));
      break;
    case QuestionTemplate::kCount:
      for (std::size_t n = 0; n <= std::min(kMaxCount, spec.max_objects); ++n)
        a.push_back(count_answer(n));
      break;
    case QuestionTemplate::kExists:
      a = {yes_no_answer(true), yes_no_answer(false)};
      break;
    case QuestionTemplate::kSize:
      for (std::size_t z = 0; z < kSizes.size(); ++z) a.push_back(size_answer(z));
      break;
    case QuestionTemplate::kWhere:
      for (std::size_t q = 0; q < kQuadrants.size(); ++q)
        a.push_back(position_answer(q));
      break;
  }
  return a;
}

// The occurrence-th answer of a template: legal answers are dealt in
// consecutive shuffled cycles, so counts per answer differ by at most one.
std::int32_t scheduled_answer(const DatasetSpec& spec, QuestionTemplate t,
                              std::size_t occurrence) {
  std::vector<std::int32_t> legal = legal_answers(spec, t);
  const std::size_t n = legal.size();
  CounterRng rng(CounterRng::derive(
      CounterRng::derive(spec.seed, 1000 + static_cast<std::uint64_t>(t)),
      occurrence / n));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(legal[i], legal[rng.index(i + 1)]);
  return legal[occurrence % n];
}

std::size_t other_than(std::size_t n, std::size_t excluded, CounterRng& rng) {
  const std::size_t pick = rng.index(n - 1);
  return pick >= excluded ? pick + 1 : pick;
}

class SceneBuilder {
 public:
  SceneBuilder(const DatasetSpec& spec, CounterRng& rng) : spec_(spec), rng_(rng) {}

  std::size_t shape() { return rng_.index(spec_.num_shapes); }
  std::size_t color() { return rng_.index(spec_.num_colors); }
  std::size_t size() { return rng_.index(kSizes.size()); }
  std::size_t quadrant() { return rng_.index(kQuadrants.size()); }

  SceneObject object(std::size_t shape, std::size_t color, std::size_t size,
                     std::size_t quadrant) {
    return {shape, color, size, quadrant, 0};
  }
  SceneObject random_object() { return object(shape(), color(), size(), quadrant()); }
  SceneObject without_shape(std::size_t s) {
    SceneObject o = random_object();
    o.shape = other_than(spec_.num_shapes, s, rng_);
    return o;
  }
  SceneObject without_color(std::size_t c) {
    SceneObject o = random_object();
    o.color = other_than(spec_.num_colors, c, rng_);
    return o;
  }
  SceneObject without_pair(std::size_t s, std::size_t c) {
    SceneObject o = random_object();
    if (o.shape == s && o.color == c) o.color = other_than(spec_.num_colors, c, rng_);
    return o;
  }

 private:
  const DatasetSpec& spec_;
  CounterRng& rng_;
};

std::vector<std::int32_t> words(std::initializer_list<std::string_view> ws,
                                std::size_t len) {
  std::vector<std::int32_t> ids(len, kPadToken);
  std::size_t i = 0;
  for (auto w : ws) ids[i++] = token_id(w);
  return ids;
}

std::string plural(std::size_t shape) { return std::string(kShapes[shape]) + "s"; }

SyntheticVQAExample generate_example_with(const DatasetSpec& spec,
                                          const Codebook& codebook,
                                          std::size_t index, QuestionTemplate t,
                                          std::int32_t answer) {
  SyntheticVQAExample ex;
  ex.scene_id = CounterRng::derive(spec.seed, index);
  ex.question_template = t;
  ex.answer = answer;
  CounterRng rng(ex.scene_id);
  SceneBuilder b(spec, rng);
  const std::size_t n =
      spec.min_objects + rng.index(spec.max_objects - spec.min_objects + 1);
  const std::size_t len = spec.question_len;
  auto& objs = ex.objects;
  bool has_target = true;

  switch (t) {
    case QuestionTemplate::kColorOfShape: {
      const std::size_t s = b.shape();
      objs.push_back(b.object(s, static_cast<std::size_t>(answer), b.size(), b.quadrant()));
      while (objs.size() < n) objs.push_back(b.without_shape(s));
      ex.tokens = words({"what", "color", "is", "the", kShapes[s]}, len);
      break;
    }
    case QuestionTemplate::kShapeOfColor: {
      const std::size_t c = b.color();
      const std::size_t s = static_cast<std::size_t>(answer - shape_answer(0));
      objs.push_back(b.object(s, c, b.size(), b.quadrant()));
      while (objs.size() < n) objs.push_back(b.without_color(c));
      ex.tokens = words({"what", "shape", "is", "the", kColors[c], "object"}, len);
      break;
    }
    case QuestionTemplate::kCount: {
      const std::size_t k = static_cast<std::size_t>(answer - count_answer(0));
      const std::size_t s = b.shape();
      const std::size_t total = std::max(n, k);
      for (std::size_t i = 0; i < k; ++i)
        objs.push_back(b.object(s, b.color(), b.size(), b.quadrant()));
      while (objs.size() < total) objs.push_back(b.without_shape(s));
      ex.tokens = words({"how", "many", plural(s), "are", "there"}, len);
      has_target = false;
      break;
    }
    case QuestionTemplate::kExists: {
      const std::size_t s = b.shape(), c = b.color();
      const bool yes = answer == yes_no_answer(true);
      if (yes) objs.push_back(b.object(s, c, b.size(), b.quadrant()));
      while (objs.size() < n) objs.push_back(b.without_pair(s, c));
      ex.tokens = words({"is", "there", "a", kColors[c], kShapes[s]}, len);
      has_target = yes;
      break;
    }
    case QuestionTemplate::kSize: {
      const std::size_t s = b.shape();
      objs.push_back(b.object(s, b.color(),
                              static_cast<std::size_t>(answer - size_answer(0)),
                              b.quadrant()));
      while (objs.size() < n) objs.push_back(b.without_shape(s));
      ex.tokens = words({"what", "size", "is", "the", kShapes[s]}, len);
      break;
    }
    case QuestionTemplate::kWhere: {
      const std::size_t s = b.shape(), c = b.color();
      objs.push_back(b.object(s, c, b.size(),
                              static_cast<std::size_t>(answer - position_answer(0))));
      while (objs.size() < n) objs.push_back(b.without_pair(s, c));
      ex.tokens = words({"where", "is", "the", kColors[c], kShapes[s]}, len);
      break;
    }
  }

  // Distinct random regions for the objects (partial Fisher-Yates).
  std::vector<std::size_t> slots(spec.num_regions);
  std::iota(slots.begin(), slots.end(), 0);
  for (std::size_t i = 0; i < objs.size(); ++i) {
    std::swap(slots[i], slots[i + rng.index(spec.num_regions - i)]);
    objs[i].region = slots[i];
  }
  if (has_target) ex.attention_target = objs.front().region;

  const std::size_t cells = spec.region_spatial * spec.region_spatial;
  const std::size_t c = spec.region_channels;
  ex.regions.assign(spec.num_regions * cells * c, 0.0f);
  for (const SceneObject& o : objs) {
    const std::size_t cell = spec.region_spatial == 2 ? o.quadrant : 0;
    float* dst = &ex.regions[(o.region * cells + cell) * c];
    for (std::size_t k = 0; k < c; ++k) {
      dst[k] = codebook.shape[o.shape][k] + codebook.color[o.color][k] +
               codebook.size[o.size][k];
      if (spec.region_spatial == 2) dst[k] += codebook.position[o.quadrant][k];
    }
  }
  if (spec.noise > 0.0) {
    CounterRng noise = rng.fork(1);
    for (float& x : ex.regions) x += static_cast<float>(spec.noise * noise.normal());
  }
  return ex;
}

}  // namespace

SyntheticVQAExample generate_example(const DatasetSpec& spec,
                                     std::size_t index) {
  spec.validate();
  TemplateScheduler schedule(spec.template_weights);
  std::pair<QuestionTemplate, std::size_t> slot;
  for (std::size_t i = 0; i <= index; ++i) slot = schedule.next();
  return generate_example_with(
      spec, Codebook::build(spec.codebook_seed, spec.region_channels), index,
      slot.first, scheduled_answer(spec, slot.first, slot.second));
}

namespace {

Dataset empty_like(const DatasetSpec& spec) {
  Dataset d;
  d.num_regions = spec.num_regions;
  d.region_spatial = spec.region_spatial;
  d.region_channels = spec.region_channels;
  d.question_len = spec.question_len;
  return d;
}

}  // namespace

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  const Codebook codebook = Codebook::build(spec.codebook_seed, spec.region_channels);
  TemplateScheduler schedule(spec.template_weights);
  Dataset d = empty_like(spec);
  for (std::size_t i = 0; i < spec.num_examples; ++i) {
    const auto [t, k] = schedule.next();
    d.append(generate_example_with(spec, codebook, i, t,
                                   scheduled_answer(spec, t, k)));
  }
  return d;
}

Split generate_split(const DatasetSpec& spec, std::size_t num_train,
                     std::size_t num_validation) {
  spec.validate();
  const Codebook codebook = Codebook::build(spec.codebook_seed, spec.region_channels);
  TemplateScheduler schedule(spec.template_weights);
  Split split{empty_like(spec), empty_like(spec)};
  const std::size_t total = num_train + num_validation;
  for (std::size_t i = 0; split.train.size() < num_train ||
                          split.validation.size() < num_validation;
       ++i) {
    const auto [t, k] = schedule.next();
    const std::uint64_t id = CounterRng::derive(spec.seed, i);
    const bool to_train = CounterRng::mix64(id ^ 0x5851F42D4C957F2DULL) % total <
                          num_train;
    Dataset& dst = to_train ? split.train : split.validation;
    if (dst.size() >= (to_train ? num_train : num_validation)) continue;
    dst.append(generate_example_with(spec, codebook, i, t,
                                     scheduled_answer(spec, t, k)));
  }
  return split;
}

void Dataset::append(const SyntheticVQAExample& ex) {
  if (ex.tokens.size() != question_len || ex.regions.size() != region_stride()) {
    throw DimensionError("example does not match dataset shapes");
  }
  regions.insert(regions.end(), ex.regions.begin(), ex.regions.end());
  tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
  answers.push_back(ex.answer);
  templates.push_back(static_cast<std::int32_t>(ex.question_template));
  targets.push_back(ex.attention_target
                        ? static_cast<std::int32_t>(*ex.attention_target)
                        : -1);
  scene_ids.push_back(ex.scene_id);
}

ModelInput<float> Dataset::batch(std::span<const std::size_t> indices) const {
  ModelInput<float> in;
  in.batch = indices.size();
  const std::size_t stride = region_stride();
  std::vector<float> r;
  r.reserve(indices.size() * stride);
  for (std::size_t i : indices) {
    if (i >= size()) {
      throw InputError("example index " + std::to_string(i) +
                       " out of range for " + std::to_string(size()) +
                       " examples");
    }
    r.insert(r.end(), regions.begin() + i * stride,
             regions.begin() + (i + 1) * stride);
    in.tokens.insert(in.tokens.end(), tokens.begin() + i * question_len,
                     tokens.begin() + (i + 1) * question_len);
  }
  in.regions = Tensor({indices.size(), num_regions,
                       region_spatial * region_spatial, region_channels},
                      std::move(r));
  return in;
}

std::vector<std::int32_t> Dataset::batch_answers(
    std::span<const std::size_t> indices) const {
  std::vector<std::int32_t> a;
  for (std::size_t i : indices) a.push_back(answers.at(i));
  return a;
}

MajorityBaseline majority_baseline(const Dataset& data) {
  if (data.empty()) return {};
  std::vector<std::size_t> counts(num_answers(), 0);
  for (std::int32_t a : data.answers) ++counts[a];
  const auto best = std::max_element(counts.begin(), counts.end());
  return {static_cast<std::int32_t>(best - counts.begin()),
          static_cast<double>(*best) / static_cast<double>(data.size())};
}

nlohmann::json manifest(const DatasetSpec& spec, const Dataset& data) {
  nlohmann::json per_template = nlohmann::json::object();
  nlohmann::json per_answer = nlohmann::json::object();
  std::vector<std::size_t> t_counts(kNumTemplates, 0), a_counts(num_answers(), 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    ++t_counts[data.templates[i]];
    ++a_counts[data.answers[i]];
  }
  for (std::size_t t = 0; t < kNumTemplates; ++t)
    per_template[std::string(kTemplateNames[t])] = t_counts[t];
  for (std::size_t a = 0; a < a_counts.size(); ++a)
    per_answer[answer_names()[a]] = a_counts[a];
  const MajorityBaseline base = majority_baseline(data);
  return {{"spec", to_json(spec)},
          {"counts",
           {{"examples", data.size()},
            {"per_template", per_template},
            {"per_answer", per_answer}}},
          {"majority_baseline",
           {{"answer", base.answer >= 0 ? answer_names()[base.answer] : ""},
            {"answer_id", base.answer},
            {"accuracy", base.accuracy}}},
          {"vocabulary", vocabulary()},
          {"answers", answer_names()}};
}

}  // namespace qbn
