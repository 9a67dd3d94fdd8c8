#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tcl/netarch.hpp"

namespace tcl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes host floats as little-endian");

namespace {

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  template <typename V>
  V get(const char* what) {
    V v;
    std::memcpy(&v, take(sizeof(V), what), sizeof(V));
    return v;
  }
  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointIntegrityError(std::string("checkpoint truncated while reading ") + what);
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    const char* p = take(n, what);
    return std::string(p, n);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

std::string layer_of(const std::string& param_name) {
  return param_name.substr(0, param_name.find('.'));
}

// Description of each layer's configuration that affects its parameters or
// its function; two layers are compatible when these match.
nlohmann::json layer_descriptor(const ArchConfig& a, const std::string& layer) {
  if (layer.rfind("conv", 0) == 0) {
    const std::size_t i = std::stoul(layer.substr(4)) - 1;
    const ConvSpec& c = a.conv_specs.at(i);
    const int in = i == 0 ? 3 : a.scaled(a.conv_specs[i - 1].out_channels);
    nlohmann::json d = {{"in", in},
                        {"out", a.scaled(c.out_channels)},
                        {"kernel", c.kernel},
                        {"stride", c.stride},
                        {"padding", c.padding}};
    if (c.lrn) d["lrn"] = {a.lrn.size, a.lrn.k, a.lrn.alpha, a.lrn.beta};
    if (c.pool) d["pool"] = {a.pool_window, a.pool_stride};
    return d;
  }
  const auto shapes = a.chain_shapes();
  return {{"in", shape_size(shapes[shapes.size() - 2].second)}, {"out", a.scaled(a.fc6_units)}};
}

// First chain layer whose configuration differs, or empty.
std::string first_chain_mismatch(const ArchConfig& a, const ArchConfig& b) {
  if (a.input_height != b.input_height || a.input_width != b.input_width) return "input";
  for (const std::string& layer : chain_layers()) {
    if (layer_descriptor(a, layer) != layer_descriptor(b, layer)) return layer;
  }
  return {};
}

const Tensor* find_tensor(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& [n, t] : ckpt.parameters) {
    if (n == name) return &t;
  }
  return nullptr;
}

}  // namespace

std::string Checkpoint::fingerprint() const {
  nlohmann::json j = {{"kind", to_string(kind)}, {"n_phases", n_phases}, {"arch", arch.to_json()}};
  if (!lr_multipliers.empty()) j["lr_multipliers"] = lr_multipliers;
  return j.dump();
}

Checkpoint make_checkpoint(const Network& net, std::uint64_t epoch, double lr,
                           std::vector<Tensor> velocities) {
  Checkpoint c;
  c.kind = net.kind();
  c.n_phases = net.n_phases();
  c.arch = net.arch();
  c.epoch = epoch;
  c.lr = lr;
  for (const auto& p : net.parameters()) {
    c.parameters.emplace_back(p->name, p->value);
    if (p->lr_multiplier != 1.0) c.lr_multipliers[p->name] = p->lr_multiplier;
  }
  if (!velocities.empty() && velocities.size() != c.parameters.size()) {
    throw ConfigError("checkpoint: expected one velocity buffer per parameter");
  }
  for (std::size_t i = 0; i < velocities.size(); ++i) {
    if (velocities[i].shape() != c.parameters[i].second.shape()) {
      throw InvalidShapeError("checkpoint: velocity shape differs from " + c.parameters[i].first);
    }
  }
  c.velocities = std::move(velocities);
  return c;
}

std::size_t checkpoint_size(const Checkpoint& ckpt) {
  std::size_t n = sizeof(Checkpoint::kMagic) + 1;
  n += 4 + ckpt.fingerprint().size();
  n += 8 + 8 + 4;
  for (const auto& [name, t] : ckpt.parameters) {
    n += 4 + name.size() + 4 + 4 * t.rank() + 4 * t.size();
  }
  n += 4;
  for (const Tensor& v : ckpt.velocities) n += 4 * v.size();
  return n;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Writer w;
  w.put_bytes(Checkpoint::kMagic, sizeof(Checkpoint::kMagic));
  w.put(Checkpoint::kVersion);
  w.put_string(ckpt.fingerprint());
  w.put(static_cast<std::uint64_t>(ckpt.epoch));
  w.put(ckpt.lr);
  w.put(static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& [name, t] : ckpt.parameters) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(static_cast<std::uint32_t>(d));
    w.put_bytes(t.raw(), 4 * t.size());
  }
  w.put(static_cast<std::uint32_t>(ckpt.velocities.size()));
  for (const Tensor& v : ckpt.velocities) w.put_bytes(v.raw(), 4 * v.size());

  // Write to a sibling file first so an interrupted save leaves the old one.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UnreadableCheckpointError("cannot open checkpoint " + path.string());
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  char magic[4];
  std::memcpy(magic, r.take(4, "magic"), 4);
  if (std::memcmp(magic, Checkpoint::kMagic, 4) != 0) {
    throw UnreadableCheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint8_t>("version");
  if (version != Checkpoint::kVersion) {
    throw UnreadableCheckpointError("unsupported checkpoint version " + std::to_string(version) +
                                    " (expected " + std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint c;
  try {
    const auto fp = nlohmann::json::parse(r.get_string("fingerprint"));
    c.kind = net_kind_from_string(fp.at("kind").get<std::string>());
    c.n_phases = fp.at("n_phases").get<int>();
    c.arch = ArchConfig::from_json(fp.at("arch"));
    if (fp.contains("lr_multipliers")) {
      c.lr_multipliers = fp.at("lr_multipliers").get<std::map<std::string, double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointIntegrityError(std::string("corrupt checkpoint fingerprint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointIntegrityError(std::string("corrupt checkpoint fingerprint: ") + e.what());
  }
  c.epoch = r.get<std::uint64_t>("epoch");
  c.lr = r.get<double>("learning rate");
  const auto n_params = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = r.get_string("parameter name");
    const auto rank = r.get<std::uint32_t>("parameter rank");
    if (rank > 8) throw CheckpointIntegrityError("implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("parameter dims");
    Tensor t(shape);
    std::memcpy(t.raw(), r.take(4 * t.size(), "parameter data"), 4 * t.size());
    c.parameters.emplace_back(std::move(name), std::move(t));
  }
  const auto n_vel = r.get<std::uint32_t>("velocity count");
  if (n_vel != 0 && n_vel != n_params) {
    throw CheckpointIntegrityError("velocity count " + std::to_string(n_vel) +
                                   " does not match parameter count " + std::to_string(n_params));
  }
  for (std::uint32_t i = 0; i < n_vel; ++i) {
    Tensor v(c.parameters[i].second.shape());
    std::memcpy(v.raw(), r.take(4 * v.size(), "velocity data"), 4 * v.size());
    c.velocities.push_back(std::move(v));
  }
  if (!r.done()) throw CheckpointIntegrityError("trailing bytes after checkpoint payload");
  return c;
}

void load_parameters(Network& net, const Checkpoint& ckpt) {
  if (ckpt.kind != net.kind()) {
    throw IncompatibleCheckpointError("checkpoint holds a " + to_string(ckpt.kind) +
                                          " network, expected " + to_string(net.kind()),
                                      "network");
  }
  if (std::string layer = first_chain_mismatch(ckpt.arch, net.arch()); !layer.empty()) {
    throw IncompatibleCheckpointError("checkpoint architecture differs at layer " + layer, layer);
  }
  for (const auto& p : net.parameters()) {
    const Tensor* t = find_tensor(ckpt, p->name);
    if (t == nullptr || t->shape() != p->value.shape()) {
      const std::string layer = layer_of(p->name);
      throw IncompatibleCheckpointError(
          "checkpoint parameter " + p->name +
              (t == nullptr ? " is missing" : " has shape " + shape_string(t->shape()) +
                                                  ", expected " + shape_string(p->value.shape())),
          layer);
    }
  }
  if (ckpt.parameters.size() != net.parameters().size()) {
    throw IncompatibleCheckpointError("checkpoint has extra parameters", "network");
  }
  for (const auto& p : net.parameters()) {
    p->value = *find_tensor(ckpt, p->name);
    auto it = ckpt.lr_multipliers.find(p->name);
    p->lr_multiplier = it == ckpt.lr_multipliers.end() ? 1.0 : it->second;
  }
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
  Network net(ckpt.kind, ckpt.arch, ckpt.n_phases, 0);
  load_parameters(net, ckpt);
  return net;
}

void transfer_pretrained(const Checkpoint& src, Network& dst, double lr_multiplier) {
  if (std::string layer = first_chain_mismatch(src.arch, dst.arch()); !layer.empty()) {
    throw IncompatibleCheckpointError("pretrained chain differs at layer " + layer, layer);
  }
  for (const std::string& layer : chain_layers()) {
    for (const char* suffix : {".kernel", ".weights", ".bias"}) {
      const std::string name = layer + suffix;
      if (!dst.has_parameter(name)) continue;
      Parameter<float>& p = dst.parameter(name);
      const Tensor* t = find_tensor(src, name);
      if (t == nullptr || t->shape() != p.value.shape()) {
        throw IncompatibleCheckpointError("pretrained checkpoint lacks a compatible " + name, layer);
      }
      p.value = *t;
      p.lr_multiplier = lr_multiplier;
    }
  }
}

}  // namespace tcl
