#include <algorithm>
#include <map>

#include "qbn/error.hpp"
#include "qbn/harness.hpp"

namespace qbn {

namespace {

// The container holds f32 only. Integers go in 16-bit chunks and text as one
// byte per element, both exactly representable.
TensorRecord u64_record(std::string name, std::uint64_t v) {
  TensorRecord r{std::move(name), {4}, {}};
  for (int c = 0; c < 4; ++c) r.data.push_back(static_cast<float>((v >> (16 * c)) & 0xFFFF));
  return r;
}

std::uint64_t u64_from(const TensorRecord& r) {
  if (r.data.size() != 4) throw InputError("record " + r.name + " is not a u64");
  std::uint64_t v = 0;
  for (int c = 0; c < 4; ++c) {
    v |= static_cast<std::uint64_t>(r.data[c]) << (16 * c);
  }
  return v;
}

TensorRecord text_record(std::string name, const std::string& text) {
  TensorRecord r{std::move(name), {text.size()}, {}};
  for (unsigned char ch : text) r.data.push_back(static_cast<float>(ch));
  return r;
}

std::string text_from(const TensorRecord& r) {
  std::string s;
  for (float f : r.data) s.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  return s;
}

std::vector<std::uint64_t> dims_of(const Shape& shape) {
  return {shape.begin(), shape.end()};
}

void copy_into(BasicTensor<float>& dst, const TensorRecord& r) {
  if (r.dims != dims_of(dst.shape())) {
    throw InputError("checkpoint tensor " + r.name + " has the wrong shape");
  }
  std::copy(r.data.begin(), r.data.end(), dst.mutable_values().begin());
}

}  // namespace

QBNParams<float> clone_params(const QBNConfig& cfg, const QBNParams<float>& p) {
  QBNParams<float> out = QBNParams<float>::init(cfg, 0);
  auto src = p.named();
  auto dst = out.named();
  if (src.size() != dst.size()) throw ContractError("parameter sets differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape()) {
      throw ContractError("parameter " + src[i].first + " does not match the config");
    }
    auto v = src[i].second.values();
    std::copy(v.begin(), v.end(), dst[i].second.mutable_values().begin());
  }
  return out;
}

void load_word_embeddings(const std::filesystem::path& path, QBNParams<float>& params) {
  auto& dst = params.question.embedding;
  for (const auto& r : read_container(path)) {
    if (r.name != "word_embeddings") continue;
    copy_into(dst, r);
    return;
  }
  throw InputError(path.string() + " has no word_embeddings tensor");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::vector<TensorRecord> meta = {
      text_record("meta/train_config", to_json(ckpt.config).dump()),
      u64_record("meta/config_hash", ckpt.config_hash),
      u64_record("meta/step", ckpt.optimizer.step),
      u64_record("meta/epoch", ckpt.epoch)};
  std::vector<TensorView> views;
  for (const auto& r : meta) views.push_back({r.name, r.dims, r.data});
  // Views point straight at parameter and moment storage; names live here.
  const auto named = ckpt.params.named();
  const bool has_state = ckpt.optimizer.m.size() == named.size();
  std::vector<std::string> names;
  names.reserve(3 * named.size());
  for (const auto& [name, t] : named) {
    names.push_back("param/" + name);
    if (has_state) {
      names.push_back("adam/m/" + name);
      names.push_back("adam/v/" + name);
    }
  }
  std::size_t n = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& t = named[i].second;
    views.push_back({names[n++], dims_of(t.shape()), t.values()});
    if (has_state) {
      views.push_back({names[n++], dims_of(t.shape()), ckpt.optimizer.m[i]});
      views.push_back({names[n++], dims_of(t.shape()), ckpt.optimizer.v[i]});
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_container(path, views);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::map<std::string, TensorRecord> by_name;
  for (auto& r : read_container(path)) {
    std::string name = r.name;
    by_name.emplace(std::move(name), std::move(r));
  }
  auto take = [&](const std::string& name) -> const TensorRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw InputError("checkpoint " + path.string() + " has no tensor " + name);
    }
    return it->second;
  };

  Checkpoint ckpt;
  try {
    ckpt.config = train_config_from_json(
        nlohmann::json::parse(text_from(take("meta/train_config"))));
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint config is not valid JSON: " + std::string(e.what()));
  }
  ckpt.config_hash = u64_from(take("meta/config_hash"));
  if (ckpt.config_hash != config_hash(ckpt.config.model)) {
    throw ConfigError("config hash mismatch in checkpoint " + path.string());
  }
  ckpt.config.model.validate();
  ckpt.epoch = u64_from(take("meta/epoch"));

  ckpt.params = QBNParams<float>::init(ckpt.config.model, 0);
  auto named = ckpt.params.named();
  ckpt.optimizer = AdamState<float>::zeros(named);
  ckpt.optimizer.step = u64_from(take("meta/step"));
  std::size_t expected = 4;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    copy_into(t, take("param/" + name));
    ++expected;
    if (by_name.count("adam/m/" + name)) {
      const auto& m = take("adam/m/" + name);
      const auto& v = take("adam/v/" + name);
      if (m.data.size() != t.numel() || v.data.size() != t.numel()) {
        throw InputError("optimizer state for " + name + " has the wrong size");
      }
      ckpt.optimizer.m[i] = m.data;
      ckpt.optimizer.v[i] = v.data;
      expected += 2;
    }
  }
  if (expected != by_name.size()) {
    throw InputError("checkpoint " + path.string() +
                     " holds tensors the model config does not define");
  }
  return ckpt;
}

}  // namespace qbn
