#include "par/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "par/config_io.hpp"

namespace par {

namespace {

constexpr char kMagic[8] = {'P', 'A', 'R', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename I>
  void integer(I v) {
    bytes(&v, sizeof(v));
  }
  void string(const std::string& s) {
    integer(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > in_.size()) throw Error("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename I>
  I integer() {
    I v;
    bytes(&v, sizeof(v));
    return v;
  }
  std::string string() {
    const auto n = integer<std::uint32_t>();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& cfg, const ParameterSet<float>& params) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.integer(kCheckpointVersion);
  w.string(emit_model_config(cfg));
  w.integer(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, a] : params.entries()) {
    w.string(name);
    w.integer(std::uint8_t{0});
    w.integer(static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) w.integer(static_cast<std::uint64_t>(d));
  }
  for (const auto& [name, a] : params.entries()) w.bytes(a.data().data(), a.size() * sizeof(float));
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw Error("not a checkpoint file (bad magic)");
  const auto version = r.integer<std::uint32_t>();
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config = parse_model_config(r.string());
  const auto count = r.integer<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string();
    const auto dtype = r.integer<std::uint8_t>();
    if (dtype != 0) throw Error("array '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.integer<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.integer<std::uint64_t>());
    entries.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : entries) {
    Array<float> a(shape);
    r.bytes(a.data().data(), a.size() * sizeof(float));
    ck.params.add(name, std::move(a));
  }
  if (!r.done()) throw Error("checkpoint has trailing bytes");
  validate_params(ck.params, ck.config);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterSet<float>& params) {
  const auto bytes = serialize_checkpoint(cfg, params);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::vector<std::string> manifest(const ParameterSet<float>& params) {
  std::vector<std::string> lines;
  for (const auto& [name, a] : params.entries()) lines.push_back(name + " f32 " + shape_string(a.shape()));
  return lines;
}

}  // namespace par
