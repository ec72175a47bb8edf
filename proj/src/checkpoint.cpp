#include "gpc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include <fmt/format.h>

#include "gpc/error.hpp"

namespace gpc {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'G', 'P', 'C', 'K', 'P', 'T', '\0', '\1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

class Writer {
 public:
  template <class T>
  void pod(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(std::string_view s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string_view data, const fs::path& path) : data_(data), path_(path) {}

  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(ErrorKind::CorruptCheckpoint, "truncated: " + path_.string());
  }
  std::string_view data_;
  std::size_t pos_ = 0;
  const fs::path& path_;
};

std::vector<NamedArray> collect(const torch::nn::Module& m) {
  std::vector<NamedArray> out;
  for (const auto& p : m.named_parameters(true)) {
    out.push_back({p.key(), p.value().detach().to(torch::kCPU, torch::kFloat32).contiguous().clone()});
  }
  for (const auto& b : m.named_buffers(true)) {
    out.push_back({"buffer:" + b.key(), b.value().detach().to(torch::kCPU, torch::kFloat32).contiguous().clone()});
  }
  return out;
}

std::uint64_t hash_arrays(const std::vector<NamedArray>& arrays) {
  std::uint64_t h = fnv1a("");
  for (const auto& a : arrays) {
    h = fnv1a(a.name, h);
    for (auto d : a.data.sizes()) h = fnv1a(std::string_view(reinterpret_cast<const char*>(&d), sizeof(d)), h);
    auto c = a.data.contiguous();
    h = fnv1a(std::string_view(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size()), h);
  }
  return h;
}

void flatten_diff(const nlohmann::json& a, const nlohmann::json& b, const std::string& prefix,
                  std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (auto it = a.begin(); it != a.end(); ++it) keys.insert(it.key());
    for (auto it = b.begin(); it != b.end(); ++it) keys.insert(it.key());
    for (const auto& k : keys) {
      const std::string path = prefix.empty() ? k : prefix + "/" + k;
      if (!a.contains(k) || !b.contains(k)) out.push_back(path);
      else flatten_diff(a[k], b[k], path, out);
    }
    return;
  }
  if (a != b) out.push_back(prefix);
}

}  // namespace

std::string_view role_name(Role r) {
  switch (r) {
    case Role::Classifier: return "classifier";
    case Role::GeneratorWg: return "generator_wg";
    case Role::GeneratorNg: return "generator_ng";
    case Role::DiscriminatorWg: return "discriminator_wg";
    case Role::DiscriminatorNg: return "discriminator_ng";
  }
  return "?";
}

Role role_from_name(std::string_view name) {
  for (Role r : {Role::Classifier, Role::GeneratorWg, Role::GeneratorNg, Role::DiscriminatorWg, Role::DiscriminatorNg}) {
    if (role_name(r) == name) return r;
  }
  throw Error(ErrorKind::CorruptCheckpoint, fmt::format("unknown role '{}'", name));
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t Checkpoint::parameter_hash() const { return hash_arrays(arrays); }

NetConfig Checkpoint::net_config() const {
  if (!meta.config.is_object() || !meta.config.contains("net")) {
    throw Error(ErrorKind::CorruptCheckpoint, "checkpoint metadata has no network configuration");
  }
  return meta.config.at("net").get<NetConfig>();
}

bool Checkpoint::same_parameters(const Checkpoint& other) const {
  if (arrays.size() != other.arrays.size()) return false;
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    if (arrays[i].name != other.arrays[i].name || !torch::equal(arrays[i].data, other.arrays[i].data)) return false;
  }
  return true;
}

std::uint64_t module_hash(const torch::nn::Module& m) { return hash_arrays(collect(m)); }

Checkpoint capture(const torch::nn::Module& m, Role role, CheckpointMeta meta) {
  return Checkpoint{role, collect(m), std::move(meta)};
}

void restore(torch::nn::Module& m, const Checkpoint& ckpt) {
  std::map<std::string, const torch::Tensor*> by_name;
  for (const auto& a : ckpt.arrays) by_name[a.name] = &a.data;

  torch::NoGradGuard guard;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorKind::ShapeMismatch, "checkpoint lacks array " + name);
    if (!it->second->sizes().equals(target.sizes())) {
      throw Error(ErrorKind::ShapeMismatch, "array " + name + " has a different shape");
    }
    target.copy_(*it->second);
    by_name.erase(it);
  };
  for (auto& p : m.named_parameters(true)) assign(p.key(), p.value());
  for (auto& b : m.named_buffers(true)) assign("buffer:" + b.key(), b.value());
  if (!by_name.empty()) throw Error(ErrorKind::ShapeMismatch, "checkpoint has extra array " + by_name.begin()->first);
}

namespace {

void expect_role(const Checkpoint& c, Role r) {
  if (c.role != r) {
    throw Error(ErrorKind::ConfigMismatch,
                fmt::format("expected a {} checkpoint, got {}", role_name(r), role_name(c.role)));
  }
}

}  // namespace

GazeClassifier classifier_from(const Checkpoint& ckpt) {
  expect_role(ckpt, Role::Classifier);
  auto net = build_classifier(ckpt.net_config(), 0);
  restore(*net, ckpt);
  net->eval();
  return net;
}

ResnetGenerator generator_from(const Checkpoint& ckpt) {
  if (ckpt.role != Role::GeneratorWg && ckpt.role != Role::GeneratorNg) expect_role(ckpt, Role::GeneratorNg);
  auto net = build_generator(ckpt.net_config(), 0);
  restore(*net, ckpt);
  net->eval();
  return net;
}

PatchDiscriminator discriminator_from(const Checkpoint& ckpt) {
  if (ckpt.role != Role::DiscriminatorWg && ckpt.role != Role::DiscriminatorNg) expect_role(ckpt, Role::DiscriminatorNg);
  auto net = build_discriminator(ckpt.net_config(), 0);
  restore(*net, ckpt);
  net->eval();
  return net;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kVersion);
  w.str(role_name(ckpt.role));
  w.pod<std::uint64_t>(ckpt.meta.config_hash);
  const nlohmann::json meta = {{"epoch", ckpt.meta.epoch},
                               {"val_metric", ckpt.meta.val_metric},
                               {"seed", ckpt.meta.seed},
                               {"config", ckpt.meta.config}};
  w.str(meta.dump());
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    auto data = a.data.to(torch::kCPU, torch::kFloat32).contiguous();
    w.str(a.name);
    w.pod<std::uint8_t>(kDtypeF32);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(data.dim()));
    for (auto d : data.sizes()) w.pod<std::int64_t>(d);
    const std::uint64_t nbytes = static_cast<std::uint64_t>(data.numel()) * sizeof(float);
    w.pod<std::uint64_t>(nbytes);
    w.bytes(data.data_ptr<float>(), nbytes);
  }
  w.pod<std::uint64_t>(fnv1a(w.buffer()));

  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw Error(ErrorKind::IoError, "short write to " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot rename into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::MissingFile, path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot read " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (data.size() < sizeof(kMagic) + sizeof(std::uint64_t) || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::CorruptCheckpoint, "bad header: " + path.string());
  }
  const std::string_view body(data.data(), data.size() - sizeof(std::uint64_t));
  std::uint64_t stored = 0;
  std::memcpy(&stored, data.data() + body.size(), sizeof(stored));
  if (stored != fnv1a(body)) throw Error(ErrorKind::CorruptCheckpoint, "hash mismatch: " + path.string());

  Reader r(body, path);
  r.bytes(sizeof(kMagic));
  if (r.pod<std::uint32_t>() != kVersion) throw Error(ErrorKind::CorruptCheckpoint, "unsupported version");
  Checkpoint c;
  c.role = role_from_name(r.str());
  c.meta.config_hash = r.pod<std::uint64_t>();
  try {
    const auto meta = nlohmann::json::parse(r.str());
    c.meta.epoch = meta.at("epoch").get<int>();
    c.meta.val_metric = meta.at("val_metric").get<double>();
    c.meta.seed = meta.at("seed").get<std::uint64_t>();
    c.meta.config = meta.at("config");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptCheckpoint, std::string("metadata: ") + e.what());
  }
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str();
    if (r.pod<std::uint8_t>() != kDtypeF32) throw Error(ErrorKind::CorruptCheckpoint, "unsupported dtype");
    const auto ndim = r.pod<std::uint32_t>();
    std::vector<std::int64_t> shape(ndim);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = r.pod<std::int64_t>();
      if (d < 0) throw Error(ErrorKind::CorruptCheckpoint, "negative dimension");
      numel *= d;
    }
    const auto nbytes = r.pod<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(numel) * sizeof(float)) {
      throw Error(ErrorKind::CorruptCheckpoint, "array size disagrees with its shape");
    }
    auto raw = r.bytes(nbytes);
    a.data = torch::empty(shape, torch::kFloat32);
    std::memcpy(a.data.data_ptr<float>(), raw.data(), nbytes);
    c.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw Error(ErrorKind::CorruptCheckpoint, "trailing bytes");
  return c;
}

std::vector<std::string> json_diff_keys(const nlohmann::json& a, const nlohmann::json& b) {
  std::vector<std::string> out;
  flatten_diff(a, b, "", out);
  return out;
}

}  // namespace gpc
