#include "stressvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace stressvit {

namespace {

constexpr char kMagic[8] = {'S', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("truncated checkpoint at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

struct Entry {
  bool trainable = true;
  Shape shape;
  std::vector<double> values;
};

struct Decoded {
  ViTConfig config;
  std::vector<std::pair<std::string, Entry>> entries;
};

Decoded decode(const std::string& bytes, bool with_entries) {
  Reader r(bytes);
  if (r.str(8) != std::string(kMagic, 8)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Decoded d;
  d.config = vit_config_from_json(r.str(r.le<std::uint32_t>()));
  if (!with_entries) return d;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string name = r.str(r.le<std::uint32_t>());
    Entry entry;
    entry.trainable = r.le<std::uint8_t>() != 0;
    const auto rank = r.le<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) entry.shape.push_back(static_cast<std::size_t>(r.le<std::uint64_t>()));
    const std::size_t n = shape_numel(entry.shape);
    entry.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) entry.values[i] = std::bit_cast<double>(r.le<std::uint64_t>());
    d.entries.emplace_back(std::move(name), std::move(entry));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint entries");
  return d;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

std::string vit_config_json(const ViTConfig& c) {
  nlohmann::json j{{"image_size", c.image_size}, {"patch_size", c.patch_size},   {"channels", c.channels},
                   {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
                   {"mlp_dim", c.mlp_dim},       {"attn_dropout", c.attn_dropout}, {"mlp_dropout", c.mlp_dropout},
                   {"num_outputs", c.num_outputs}, {"norm_eps", c.norm_eps}};
  return j.dump();
}

ViTConfig vit_config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ViTConfig c;
    c.image_size = j.at("image_size");
    c.patch_size = j.at("patch_size");
    c.channels = j.at("channels");
    c.hidden_dim = j.at("hidden_dim");
    c.num_layers = j.at("num_layers");
    c.num_heads = j.at("num_heads");
    c.mlp_dim = j.at("mlp_dim");
    c.attn_dropout = j.at("attn_dropout");
    c.mlp_dropout = j.at("mlp_dropout");
    c.num_outputs = j.at("num_outputs");
    c.norm_eps = j.at("norm_eps");
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad model config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("bad model config: ") + e.what());
  }
}

std::string encode_checkpoint(const ViTModel& model) {
  std::string out(kMagic, 8);
  put_le<std::uint32_t>(out, kVersion);
  const std::string cfg = vit_config_json(model.config);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto params = model.named_parameters();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint8_t>(out, p->trainable ? 1 : 0);
    const Shape& s = p->value.shape();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    for (auto d : s) put_le<std::uint64_t>(out, d);
    for (double v : p->value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ViTConfig decode_checkpoint_config(const std::string& bytes) { return decode(bytes, false).config; }

ViTModel decode_checkpoint(const std::string& bytes, const ViTConfig& config) {
  Decoded d = decode(bytes, true);
  ViTModel model(config);
  std::map<std::string, Entry*> stored;
  for (auto& [name, e] : d.entries) stored[name] = &e;

  std::vector<std::string> problems;
  for (auto& [name, p] : model.named_parameters()) {
    auto it = stored.find(name);
    if (it == stored.end()) {
      problems.push_back("missing " + name);
      continue;
    }
    Entry& e = *it->second;
    if (e.shape != p->value.shape()) {
      problems.push_back(name + " stored " + shape_str(e.shape) + " expected " + shape_str(p->value.shape()));
    } else {
      p->value = Tensor(e.shape, std::move(e.values));
      p->trainable = e.trainable;
      p->zero_grad();
    }
    stored.erase(it);
  }
  for (const auto& [name, e] : stored) problems.push_back("unexpected " + name);
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model config (" + std::to_string(problems.size()) + " entries):";
    const std::size_t shown = std::min<std::size_t>(problems.size(), 12);
    for (std::size_t i = 0; i < shown; ++i) msg += "\n  " + problems[i];
    if (shown < problems.size()) msg += "\n  ... " + std::to_string(problems.size() - shown) + " more";
    throw CheckpointError(msg);
  }
  return model;
}

void checkpoint_save(const ViTModel& model, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("short write to " + path.string());
}

ViTModel checkpoint_load(const std::filesystem::path& path, const ViTConfig& config) {
  try {
    return decode_checkpoint(read_file(path), config);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

ViTConfig checkpoint_config(const std::filesystem::path& path) { return decode_checkpoint_config(read_file(path)); }

ViTModel checkpoint_load(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return decode_checkpoint(bytes, decode_checkpoint_config(bytes));
}

}  // namespace stressvit
