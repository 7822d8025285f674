#include <fstream>
#include <set>

#include "qbn/error.hpp"
#include "qbn/harness.hpp"

namespace qbn {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown field '" + key + "' in " + where);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError("field '" + std::string(key) + "' in " + where +
                      " has the wrong type");
  }
}

}  // namespace

QBNConfig TrainConfig::unshaped_model_config() {
  QBNConfig c;
  c.question_len = c.num_regions = c.region_spatial = c.region_channels = 0;
  c.vocab_size = c.num_answers = 0;
  return c;
}

AdamConfig TrainConfig::adam() const {
  return {learning_rate, beta1, beta2, eps};
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (!data.spec && data.train_path.empty()) {
    throw ConfigError("data needs either a spec or a train_path");
  }
  if (data.spec && !data.train_path.empty()) {
    throw ConfigError("data takes a spec or a train_path, not both");
  }
  if (data.spec && data.num_train == 0) {
    throw ConfigError("a generated split needs num_train > 0");
  }
}

json to_json(const QBNConfig& c) {
  return {{"model_dim", c.model_dim},
          {"num_heads", c.num_heads},
          {"num_blocks", c.num_blocks},
          {"question_len", c.question_len},
          {"num_regions", c.num_regions},
          {"region_spatial", c.region_spatial},
          {"region_channels", c.region_channels},
          {"vocab_size", c.vocab_size},
          {"num_answers", c.num_answers},
          {"dropout_rate", c.dropout_rate},
          {"use_relationship_gate", c.use_relationship_gate},
          {"use_content_learning", c.use_content_learning},
          {"gate_renormalize", c.gate_renormalize}};
}

QBNConfig model_config_from_json(const json& j, const QBNConfig& defaults) {
  const std::string where = "model";
  reject_unknown(j,
                 {"model_dim", "num_heads", "num_blocks", "question_len",
                  "num_regions", "region_spatial", "region_channels", "vocab_size",
                  "num_answers", "dropout_rate", "use_relationship_gate",
                  "use_content_learning", "gate_renormalize"},
                 where);
  QBNConfig c = defaults;
  read(j, "model_dim", c.model_dim, where);
  read(j, "num_heads", c.num_heads, where);
  read(j, "num_blocks", c.num_blocks, where);
  read(j, "question_len", c.question_len, where);
  read(j, "num_regions", c.num_regions, where);
  read(j, "region_spatial", c.region_spatial, where);
  read(j, "region_channels", c.region_channels, where);
  read(j, "vocab_size", c.vocab_size, where);
  read(j, "num_answers", c.num_answers, where);
  read(j, "dropout_rate", c.dropout_rate, where);
  read(j, "use_relationship_gate", c.use_relationship_gate, where);
  read(j, "use_content_learning", c.use_content_learning, where);
  read(j, "gate_renormalize", c.gate_renormalize, where);
  return c;
}

json to_json(const TrainConfig& c) {
  json data = json::object();
  if (c.data.spec) {
    data["spec"] = to_json(*c.data.spec);
    data["num_train"] = c.data.num_train;
    data["num_validation"] = c.data.num_validation;
  } else {
    data["train_path"] = c.data.train_path.string();
    if (!c.data.validation_path.empty()) {
      data["validation_path"] = c.data.validation_path.string();
    }
  }
  json out = {{"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"warmup_steps", c.warmup_steps},
          {"seed", c.seed},
          {"checkpoint_dir", c.checkpoint_dir.string()},
          {"keep_last_checkpoints", c.keep_last_checkpoints},
          {"stop_at_full_train_accuracy", c.stop_at_full_train_accuracy},
          {"data", data},
          {"model", to_json(c.model)}};
  if (!c.word_embeddings.empty()) out["word_embeddings"] = c.word_embeddings.string();
  return out;
}

TrainConfig train_config_from_json(const json& j) {
  const std::string where = "train config";
  reject_unknown(j,
                 {"learning_rate", "epochs", "batch_size", "betas", "eps",
                  "warmup_steps", "seed", "checkpoint_dir", "keep_last_checkpoints",
                  "stop_at_full_train_accuracy", "word_embeddings", "data", "model"},
                 where);
  TrainConfig c;
  read(j, "learning_rate", c.learning_rate, where);
  read(j, "epochs", c.epochs, where);
  read(j, "batch_size", c.batch_size, where);
  if (j.contains("betas")) {
    std::vector<double> betas;
    read(j, "betas", betas, where);
    if (betas.size() != 2) throw ConfigError("betas must hold two numbers");
    c.beta1 = betas[0];
    c.beta2 = betas[1];
  }
  read(j, "eps", c.eps, where);
  read(j, "warmup_steps", c.warmup_steps, where);
  read(j, "seed", c.seed, where);
  std::string dir = c.checkpoint_dir.string();
  read(j, "checkpoint_dir", dir, where);
  c.checkpoint_dir = dir;
  read(j, "keep_last_checkpoints", c.keep_last_checkpoints, where);
  read(j, "stop_at_full_train_accuracy", c.stop_at_full_train_accuracy, where);
  std::string embeddings;
  read(j, "word_embeddings", embeddings, where);
  c.word_embeddings = embeddings;
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"spec", "num_train", "num_validation", "train_path",
                       "validation_path"},
                   "data");
    if (d.contains("spec")) {
      try {
        c.data.spec = dataset_spec_from_json(d.at("spec"));
      } catch (const SpecError& e) {
        throw ConfigError(std::string("data.spec: ") + e.what());
      }
    }
    read(d, "num_train", c.data.num_train, "data");
    read(d, "num_validation", c.data.num_validation, "data");
    std::string train, validation;
    read(d, "train_path", train, "data");
    read(d, "validation_path", validation, "data");
    c.data.train_path = train;
    c.data.validation_path = validation;
  }
  if (j.contains("model")) {
    c.model = model_config_from_json(j.at("model"), c.model);
  }
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

QBNConfig resolve_model_config(QBNConfig m, const Dataset& data) {
  auto fill = [](std::size_t& field, std::size_t value, const char* name) {
    if (field == 0) {
      field = value;
    } else if (field != value) {
      throw ConfigError(std::string("model.") + name + " = " +
                        std::to_string(field) + " but the data has " +
                        std::to_string(value));
    }
  };
  fill(m.question_len, data.question_len, "question_len");
  fill(m.num_regions, data.num_regions, "num_regions");
  fill(m.region_spatial, data.region_spatial, "region_spatial");
  fill(m.region_channels, data.region_channels, "region_channels");
  fill(m.vocab_size, vocab_size(), "vocab_size");
  fill(m.num_answers, num_answers(), "num_answers");
  m.validate();
  return m;
}

std::uint64_t config_hash(const QBNConfig& cfg) {
  json j = to_json(cfg);
  j["vocabulary"] = vocabulary();
  j["answers"] = answer_names();
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Split load_data(const DataSource& source) {
  if (source.spec) {
    return generate_split(*source.spec, source.num_train, source.num_validation);
  }
  Split s;
  s.train = load_features(source.train_path);
  if (!source.validation_path.empty()) {
    s.validation = load_features(source.validation_path);
  } else {
    s.validation = s.train;
    s.validation.regions.clear();
    s.validation.tokens.clear();
    s.validation.answers.clear();
    s.validation.templates.clear();
    s.validation.targets.clear();
    s.validation.scene_ids.clear();
  }
  return s;
}

}  // namespace qbn
