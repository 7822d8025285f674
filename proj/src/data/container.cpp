#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "qbn/data.hpp"

namespace qbn {

namespace {

constexpr char kMagic[4] = {'Q', 'B', 'N', 'T'};

// Little-endian encoder that streams to `out` in bounded chunks.
class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  ~Writer() { flush(); }

  template <typename U>
  void put(U v) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t,
                 std::conditional_t<sizeof(U) == 8, std::uint64_t,
                 std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    const Bits bits = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    if (bytes_.size() >= kChunk) flush();
  }
  void put_bytes(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
    if (bytes_.size() >= kChunk) flush();
  }
  void flush() {
    out_.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
    bytes_.clear();
  }

 private:
  static constexpr std::size_t kChunk = 1 << 20;
  std::ofstream& out_;
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw FormatError(std::string("truncated ") + what, pos_);
    }
  }

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
              << (8 * i);
    }
    pos_ += sizeof(U);
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t,
                 std::conditional_t<sizeof(U) == 8, std::uint64_t,
                 std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    return std::bit_cast<U>(static_cast<Bits>(bits));
  }

  std::string get_string(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::vector<char> bytes_;
  std::uint64_t pos_ = 0;
};

}  // namespace

void write_container(const std::filesystem::path& path,
                     std::span<const TensorView> records) {
  for (const TensorView& r : records) {
    std::uint64_t n = 1;
    for (std::uint64_t d : r.dims) n *= d;
    if (n != r.data.size()) {
      throw DimensionError("record '" + std::string(r.name) + "' has " +
                           std::to_string(r.data.size()) + " values for its dims");
    }
    if (r.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw DimensionError("record '" + std::string(r.name) + "' has too many dims");
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  {
    Writer w(out);
    w.put_bytes(kMagic, 4);
    w.put(kContainerVersion);
    for (const TensorView& r : records) {
      w.put(static_cast<std::uint32_t>(r.name.size()));
      w.put_bytes(r.name.data(), r.name.size());
      w.put(static_cast<std::uint8_t>(r.dims.size()));
      for (std::uint64_t d : r.dims) w.put(d);
      for (float x : r.data) w.put(x);
    }
  }
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

void write_container(const std::filesystem::path& path,
                     const std::vector<TensorRecord>& records) {
  std::vector<TensorView> views;
  views.reserve(records.size());
  for (const TensorRecord& r : records) views.push_back({r.name, r.dims, r.data});
  write_container(path, views);
}

std::vector<TensorRecord> read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  r.need(4, "magic");
  if (r.get_string(4, "magic") != std::string(kMagic, 4)) {
    throw FormatError("bad magic, not a QBNT container", 0);
  }
  const std::uint64_t version_at = r.offset();
  const auto version = r.get<std::uint16_t>("version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version),
                      version_at);
  }
  std::vector<TensorRecord> records;
  while (!r.done()) {
    TensorRecord rec;
    const auto name_len = r.get<std::uint32_t>("record name length");
    rec.name = r.get_string(name_len, "record name");
    const auto rank = r.get<std::uint8_t>("record rank");
    std::uint64_t n = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const auto d = r.get<std::uint64_t>("record dims");
      rec.dims.push_back(d);
      if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
        throw FormatError("record '" + rec.name + "' dims overflow", r.offset());
      }
      n *= d;
    }
    if (n > r.remaining() / 4) {
      throw FormatError("truncated payload of record '" + rec.name + "'",
                        r.offset());
    }
    rec.data.resize(n);
    for (float& x : rec.data) x = r.get<float>("payload");
    records.push_back(std::move(rec));
  }
  return records;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  if (d.empty()) {
    write_container(path, std::vector<TensorRecord>{});
    return;
  }
  const std::uint64_t n = d.size();
  auto ints = [](const std::vector<std::int32_t>& v) {
    return std::vector<float>(v.begin(), v.end());
  };
  std::vector<float> ids;
  for (std::uint64_t id : d.scene_ids)
    for (int chunk = 0; chunk < 4; ++chunk)
      ids.push_back(static_cast<float>((id >> (16 * chunk)) & 0xFFFF));
  write_container(
      path,
      {{"examples/regions",
        {n, d.num_regions, d.region_spatial, d.region_spatial, d.region_channels},
        d.regions},
       {"examples/tokens", {n, d.question_len}, ints(d.tokens)},
       {"examples/answers", {n}, ints(d.answers)},
       {"examples/templates", {n}, ints(d.templates)},
       {"examples/targets", {n}, ints(d.targets)},
       {"examples/scene_ids", {n, 4}, ids}});
}

Dataset load_features(const std::filesystem::path& path) {
  const std::vector<TensorRecord> records = read_container(path);
  Dataset d;
  if (records.empty()) return d;
  auto find = [&](const std::string& name,
                  std::size_t rank) -> const TensorRecord& {
    for (const auto& r : records) {
      if (r.name == name) {
        if (r.dims.size() != rank) {
          throw FormatError("record '" + name + "' has rank " +
                                std::to_string(r.dims.size()),
                            0);
        }
        return r;
      }
    }
    throw FormatError("dataset record '" + name + "' is missing", 0);
  };
  const auto& regions = find("examples/regions", 5);
  const std::uint64_t n = regions.dims[0];
  if (regions.dims[2] != regions.dims[3]) {
    throw FormatError("region grids must be square", 0);
  }
  d.num_regions = regions.dims[1];
  d.region_spatial = regions.dims[2];
  d.region_channels = regions.dims[4];
  d.regions = regions.data;
  const auto& tokens = find("examples/tokens", 2);
  d.question_len = tokens.dims[1];
  auto ints = [&](const TensorRecord& r) {
    if (r.dims[0] != n) {
      throw FormatError("record '" + r.name + "' has " +
                            std::to_string(r.dims[0]) + " rows, expected " +
                            std::to_string(n),
                        0);
    }
    return std::vector<std::int32_t>(r.data.begin(), r.data.end());
  };
  d.tokens = ints(tokens);
  d.answers = ints(find("examples/answers", 1));
  d.templates = ints(find("examples/templates", 1));
  d.targets = ints(find("examples/targets", 1));
  const auto& ids = find("examples/scene_ids", 2);
  ints(ids);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint64_t id = 0;
    for (int chunk = 0; chunk < 4; ++chunk)
      id |= static_cast<std::uint64_t>(ids.data[i * 4 + chunk]) << (16 * chunk);
    d.scene_ids.push_back(id);
  }
  for (std::int32_t t : d.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size())
      throw FormatError("token id " + std::to_string(t) + " outside vocabulary", 0);
  }
  for (std::int32_t a : d.answers) {
    if (a < 0 || static_cast<std::size_t>(a) >= num_answers())
      throw FormatError("answer id " + std::to_string(a) + " outside answer set", 0);
  }
  return d;
}

}  // namespace qbn
