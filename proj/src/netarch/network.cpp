#include <algorithm>
#include <cmath>

#include "tcl/netarch.hpp"

namespace tcl {

namespace {

constexpr const char* kGruNames[9] = {"gru.w_update", "gru.u_update", "gru.b_update",
                                      "gru.w_reset",  "gru.u_reset",  "gru.b_reset",
                                      "gru.w_cand",   "gru.u_cand",   "gru.b_cand"};

int pooled(int size, int window, int stride) { return (size - window) / stride + 1; }

}  // namespace

std::vector<ConvSpec> ArchConfig::alexnet_convs() {
  return {{11, 96, 4, 0, true, true},
          {5, 256, 1, 2, true, true},
          {3, 384, 1, 1, false, false},
          {3, 384, 1, 1, false, false},
          {3, 256, 1, 1, false, true}};
}

ArchConfig ArchConfig::desk() {
  ArchConfig a;
  a.input_height = 24;
  a.input_width = 32;
  a.conv_specs = {{5, 96, 2, 2, true, true},
                  {3, 256, 1, 1, true, true},
                  {3, 384, 1, 1, false, false},
                  {3, 384, 1, 1, false, false},
                  {3, 256, 1, 1, false, false}};
  a.pool_window = 2;
  a.pool_stride = 2;
  a.scale_factor = 16;
  return a;
}

int ArchConfig::scaled(int width) const { return std::max(1, width / scale_factor); }

void ArchConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("arch: " + msg); };
  if (input_height < 1 || input_width < 1) fail("input size must be positive");
  if (conv_specs.size() != 5) fail("expected 5 conv specs, got " + std::to_string(conv_specs.size()));
  if (scale_factor < 1) fail("scale_factor must be >= 1");
  if (fc6_units % scale_factor != 0) {
    fail("fc6_units " + std::to_string(fc6_units) + " not divisible by scale_factor " +
         std::to_string(scale_factor));
  }
  for (int w : {fc6_units, fc7_units, fc8_units, classifier_units, gru_hidden}) {
    if (w < 1) fail("layer widths must be positive");
  }
  for (const ConvSpec& c : conv_specs) {
    if (c.kernel < 1 || c.out_channels < 1 || c.stride < 1 || c.padding < 0) {
      fail("conv spec needs kernel, out_channels, stride >= 1 and padding >= 0");
    }
  }
  if (pool_window < 1 || pool_stride < 1) fail("pool window and stride must be positive");
  if (lrn.size < 1) fail("lrn size must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must lie in [0, 1)");
  chain_shapes();
}

std::vector<std::pair<std::string, Shape>> ArchConfig::chain_shapes(std::size_t batch) const {
  std::vector<std::pair<std::string, Shape>> out;
  int channels = 3, h = input_height, w = input_width;
  for (std::size_t i = 0; i < conv_specs.size(); ++i) {
    const ConvSpec& c = conv_specs[i];
    const std::string name = "conv" + std::to_string(i + 1);
    if (h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel) {
      throw ConfigError("arch: " + name + " kernel " + std::to_string(c.kernel) +
                        " exceeds padded input " + std::to_string(h) + "x" + std::to_string(w));
    }
    h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
    w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
    channels = scaled(c.out_channels);
    if (c.pool) {
      if (h < pool_window || w < pool_window) {
        throw ConfigError("arch: pool window " + std::to_string(pool_window) + " exceeds " + name +
                          " output " + std::to_string(h) + "x" + std::to_string(w));
      }
      h = pooled(h, pool_window, pool_stride);
      w = pooled(w, pool_window, pool_stride);
    }
    out.emplace_back(name, Shape{batch, std::size_t(channels), std::size_t(h), std::size_t(w)});
  }
  out.emplace_back("fc6", Shape{batch, std::size_t(scaled(fc6_units))});
  return out;
}

nlohmann::json ArchConfig::to_json() const {
  nlohmann::json convs = nlohmann::json::array();
  for (const ConvSpec& c : conv_specs) {
    convs.push_back({{"kernel", c.kernel},
                     {"out_channels", c.out_channels},
                     {"stride", c.stride},
                     {"padding", c.padding},
                     {"lrn", c.lrn},
                     {"pool", c.pool}});
  }
  return {{"input_height", input_height},
          {"input_width", input_width},
          {"conv_specs", convs},
          {"pool_window", pool_window},
          {"pool_stride", pool_stride},
          {"lrn", {{"size", lrn.size}, {"k", lrn.k}, {"alpha", lrn.alpha}, {"beta", lrn.beta}}},
          {"fc6_units", fc6_units},
          {"fc7_units", fc7_units},
          {"fc8_units", fc8_units},
          {"classifier_units", classifier_units},
          {"gru_hidden", gru_hidden},
          {"dropout_p", dropout_p},
          {"scale_factor", scale_factor}};
}

namespace {

void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

}  // namespace

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
  ArchConfig a;
  const nlohmann::json defaults = a.to_json();
  reject_unknown(j, defaults, "arch");
  read_key(j, "input_height", a.input_height, "arch");
  read_key(j, "input_width", a.input_width, "arch");
  read_key(j, "pool_window", a.pool_window, "arch");
  read_key(j, "pool_stride", a.pool_stride, "arch");
  read_key(j, "fc6_units", a.fc6_units, "arch");
  read_key(j, "fc7_units", a.fc7_units, "arch");
  read_key(j, "fc8_units", a.fc8_units, "arch");
  read_key(j, "classifier_units", a.classifier_units, "arch");
  read_key(j, "gru_hidden", a.gru_hidden, "arch");
  read_key(j, "dropout_p", a.dropout_p, "arch");
  read_key(j, "scale_factor", a.scale_factor, "arch");
  if (j.contains("lrn")) {
    const auto& l = j.at("lrn");
    reject_unknown(l, defaults.at("lrn"), "arch.lrn");
    read_key(l, "size", a.lrn.size, "arch.lrn");
    read_key(l, "k", a.lrn.k, "arch.lrn");
    read_key(l, "alpha", a.lrn.alpha, "arch.lrn");
    read_key(l, "beta", a.lrn.beta, "arch.lrn");
  }
  if (j.contains("conv_specs")) {
    const auto& arr = j.at("conv_specs");
    if (!arr.is_array()) throw ConfigError("arch.conv_specs: expected an array");
    a.conv_specs.clear();
    for (const auto& c : arr) {
      reject_unknown(c, defaults.at("conv_specs").at(0), "arch.conv_specs[]");
      ConvSpec s;
      read_key(c, "kernel", s.kernel, "arch.conv_specs[]");
      read_key(c, "out_channels", s.out_channels, "arch.conv_specs[]");
      read_key(c, "stride", s.stride, "arch.conv_specs[]");
      read_key(c, "padding", s.padding, "arch.conv_specs[]");
      read_key(c, "lrn", s.lrn, "arch.conv_specs[]");
      read_key(c, "pool", s.pool, "arch.conv_specs[]");
      a.conv_specs.push_back(s);
    }
  }
  return a;
}

std::string to_string(NetKind kind) {
  switch (kind) {
    case NetKind::kTcl:
      return "tcl";
    case NetKind::kNaive:
      return "naive";
    case NetKind::kTempCoNet:
      return "tempconet";
  }
  return "?";
}

NetKind net_kind_from_string(const std::string& s) {
  if (s == "tcl") return NetKind::kTcl;
  if (s == "naive") return NetKind::kNaive;
  if (s == "tempconet") return NetKind::kTempCoNet;
  throw ConfigError("unknown network kind '" + s + "' (expected tcl, naive or tempconet)");
}

const std::vector<std::string>& chain_layers() {
  static const std::vector<std::string> names = {"conv1", "conv2", "conv3", "conv4", "conv5", "fc6"};
  return names;
}

template <typename T>
BasicNetwork<T>::BasicNetwork(NetKind kind, ArchConfig arch, int n_phases, std::uint64_t init_seed)
    : kind_(kind), arch_(std::move(arch)), n_phases_(kind == NetKind::kTcl ? 2 : n_phases) {
  arch_.validate();
  if (kind != NetKind::kTcl && n_phases < 2) {
    throw ConfigError("phase networks need n_phases >= 2, got " + std::to_string(n_phases));
  }
  const auto shapes = arch_.chain_shapes();
  std::size_t in_ch = 3;
  for (std::size_t i = 0; i < arch_.conv_specs.size(); ++i) {
    const ConvSpec& c = arch_.conv_specs[i];
    const std::size_t out = arch_.scaled(c.out_channels), k = c.kernel;
    const std::string name = "conv" + std::to_string(i + 1);
    add(name + ".kernel", {out, in_ch, k, k}, in_ch * k * k, true, init_seed);
    add(name + ".bias", {out}, 1, false, init_seed);
    in_ch = out;
  }
  const Shape& last = shapes[shapes.size() - 2].second;
  const std::size_t flat = last[1] * last[2] * last[3];
  const std::size_t fc6 = arch_.scaled(arch_.fc6_units);
  add("fc6.weights", {flat, fc6}, flat, true, init_seed);
  add("fc6.bias", {fc6}, 1, false, init_seed);

  auto dense_layer = [&](const std::string& name, std::size_t in, std::size_t out) {
    add(name + ".weights", {in, out}, in, true, init_seed);
    add(name + ".bias", {out}, 1, false, init_seed);
  };
  const std::size_t n_out = n_phases_;
  hidden_ = TensorT(Shape{0});
  switch (kind_) {
    case NetKind::kTcl: {
      const std::size_t fc7 = arch_.scaled(arch_.fc7_units), fc8 = arch_.scaled(arch_.fc8_units);
      dense_layer("fc7", 2 * fc6, fc7);
      dense_layer("fc8", fc7, fc8);
      dense_layer("fc9", fc8, 2);
      std::vector<std::string> chain_names;
      for (const auto& p : params_) chain_names.push_back(p->name);
      for (const std::string& n : chain_names) {
        if (n.rfind("fc7", 0) == 0 || n.rfind("fc8", 0) == 0 || n.rfind("fc9", 0) == 0) continue;
        chain_b_[n] = params_[index_.at(n)];
        aliases_["chain_b." + n] = n;
      }
      break;
    }
    case NetKind::kNaive: {
      const std::size_t hidden = arch_.scaled(arch_.classifier_units);
      dense_layer("fc7", fc6, hidden);
      dense_layer("cls", hidden, n_out);
      break;
    }
    case NetKind::kTempCoNet: {
      const std::size_t h = arch_.scaled(arch_.gru_hidden);
      for (int gate = 0; gate < 3; ++gate) {
        add(kGruNames[3 * gate], {fc6, h}, fc6, true, init_seed);
        add(kGruNames[3 * gate + 1], {h, h}, h, true, init_seed);
        add(kGruNames[3 * gate + 2], {h}, 1, false, init_seed);
      }
      dense_layer("cls", h, n_out);
      hidden_ = TensorT({1, h});
      break;
    }
  }
}

template <typename T>
typename BasicNetwork<T>::ParamPtr BasicNetwork<T>::add(const std::string& name, Shape shape,
                                                        std::size_t fan_in, bool regularize,
                                                        std::uint64_t seed) {
  TensorT value(std::move(shape));
  if (regularize) {
    // Uniform He initialisation: variance 2 / fan_in.
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng(derive_seed(seed, name));
    for (T& v : value.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  }
  auto p = std::make_shared<Parameter<T>>(name, std::move(value), regularize);
  index_[name] = params_.size();
  params_.push_back(p);
  return p;
}

template <typename T>
template <typename U>
BasicNetwork<U> BasicNetwork<T>::cast() const {
  BasicNetwork<U> out;
  out.kind_ = kind_;
  out.arch_ = arch_;
  out.n_phases_ = n_phases_;
  out.index_ = index_;
  out.aliases_ = aliases_;
  out.hidden_ = hidden_.template cast<U>();
  for (const auto& p : params_) {
    auto q = std::make_shared<Parameter<U>>(p->name, p->value.template cast<U>(), p->regularize);
    q->grad = p->grad.template cast<U>();
    q->lr_multiplier = p->lr_multiplier;
    out.params_.push_back(std::move(q));
  }
  for (const auto& [name, _] : chain_b_) out.chain_b_[name] = out.params_[index_.at(name)];
  return out;
}

template <typename T>
BasicNetwork<T> BasicNetwork<T>::clone() const {
  return cast<T>();
}

template <typename T>
std::size_t BasicNetwork<T>::output_width() const {
  return kind_ == NetKind::kTcl ? 2 : static_cast<std::size_t>(n_phases_);
}

template <typename T>
Parameter<T>& BasicNetwork<T>::parameter(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return *params_[it->second];
}

template <typename T>
const Parameter<T>& BasicNetwork<T>::parameter(const std::string& name) const {
  return const_cast<BasicNetwork*>(this)->parameter(name);
}

template <typename T>
bool BasicNetwork<T>::has_parameter(const std::string& name) const {
  return index_.count(name) != 0;
}

template <typename T>
std::size_t BasicNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

template <typename T>
const typename BasicNetwork<T>::ParamPtr& BasicNetwork<T>::chain_parameter(
    int slot, const std::string& name) const {
  if (slot == 1) {
    auto it = chain_b_.find(name);
    if (it != chain_b_.end()) return it->second;
  }
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return params_[it->second];
}

template <typename T>
void BasicNetwork<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
Var<T> BasicNetwork<T>::bind(Tape<T>& tape, const std::string& name, int slot) {
  return tape.param(*chain_parameter(slot, name));
}

template <typename T>
Var<T> BasicNetwork<T>::embed(Tape<T>& tape, Var<T> frames, int slot) {
  const Shape& s = frames.shape();
  const Shape want = {3, std::size_t(arch_.input_height), std::size_t(arch_.input_width)};
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != want) {
    throw InvalidShapeError("network input must be Bx" + shape_string(want) + ", got " +
                            shape_string(s));
  }
  Var<T> x = frames;
  for (std::size_t i = 0; i < arch_.conv_specs.size(); ++i) {
    const ConvSpec& c = arch_.conv_specs[i];
    const std::string name = "conv" + std::to_string(i + 1);
    x = ops::conv2d(x, bind(tape, name + ".kernel", slot), bind(tape, name + ".bias", slot),
                    c.stride, c.padding);
    x = ops::relu(x);
    if (c.lrn) x = ops::local_response_norm(x, arch_.lrn);
    if (c.pool) x = ops::max_pool2d(x, arch_.pool_window, arch_.pool_stride);
  }
  const Shape& o = x.shape();
  x = ops::reshape(x, {o[0], o[1] * o[2] * o[3]});
  return ops::relu(ops::dense(x, bind(tape, "fc6.weights", slot), bind(tape, "fc6.bias", slot)));
}

template <typename T>
Var<T> BasicNetwork<T>::fc6_block(Tape<T>&, Var<T> embedding, ops::Mode mode, Rng& rng) {
  return ops::dropout(embedding, arch_.dropout_p, mode, rng);
}

namespace {

template <typename T>
NetOutput<T> tcl_head(Tape<T>& tape, BasicNetwork<T>& net, Var<T> a, Var<T> b, ops::Mode mode,
                      Rng& rng) {
  auto p = [&](const std::string& n) { return tape.param(*net.chain_parameter(0, n)); };
  Var<T> x = ops::concat(a, b);
  x = ops::relu(ops::dense(x, p("fc7.weights"), p("fc7.bias")));
  x = ops::dropout(x, net.arch().dropout_p, mode, rng);
  x = ops::dense(x, p("fc8.weights"), p("fc8.bias"));
  Var<T> logits = ops::dense(x, p("fc9.weights"), p("fc9.bias"));
  return {logits, ops::softmax(logits)};
}

}  // namespace

template <typename T>
NetOutput<T> BasicNetwork<T>::order_forward(Tape<T>& tape, Var<T> frames_a, Var<T> frames_b,
                                            ops::Mode mode, Rng& rng) {
  if (kind_ != NetKind::kTcl) throw ConfigError("order_forward needs the siamese order network");
  if (frames_a.shape() != frames_b.shape()) {
    throw InvalidShapeError("siamese inputs differ in shape: " + shape_string(frames_a.shape()) +
                            " vs " + shape_string(frames_b.shape()));
  }
  Var<T> ea = embed(tape, frames_a, 0);
  Var<T> eb = embed(tape, frames_b, 1);
  Var<T> da = fc6_block(tape, ea, mode, rng);
  Var<T> db = fc6_block(tape, eb, mode, rng);
  return tcl_head(tape, *this, da, db, mode, rng);
}

template <typename T>
NetOutput<T> BasicNetwork<T>::order_forward_indexed(Tape<T>& tape, Var<T> frames,
                                                    std::span<const std::size_t> index_a,
                                                    std::span<const std::size_t> index_b,
                                                    ops::Mode mode, Rng& rng) {
  if (kind_ != NetKind::kTcl) throw ConfigError("order_forward needs the siamese order network");
  if (index_a.size() != index_b.size()) {
    throw InvalidShapeError("pair index lists differ in length");
  }
  // Both chains hold the same storage, so one pass over the distinct frames
  // serves both slots.
  Var<T> e = embed(tape, frames, 0);
  Var<T> da = fc6_block(tape, ops::gather_rows(e, index_a), mode, rng);
  Var<T> db = fc6_block(tape, ops::gather_rows(e, index_b), mode, rng);
  return tcl_head(tape, *this, da, db, mode, rng);
}

template <typename T>
NetOutput<T> BasicNetwork<T>::phase_forward(Tape<T>& tape, Var<T> frames, ops::Mode mode, Rng& rng) {
  if (kind_ == NetKind::kTcl) throw ConfigError("phase_forward needs a phase network");
  auto p = [&](const std::string& n) { return bind(tape, n); };
  Var<T> x = fc6_block(tape, embed(tape, frames), mode, rng);
  if (kind_ == NetKind::kNaive) {
    x = ops::relu(ops::dense(x, p("fc7.weights"), p("fc7.bias")));
  } else {
    const std::size_t batch = x.shape()[0], width = x.shape()[1];
    // The batch becomes one sequence of length `batch`.
    Var<T> seq = ops::reshape(x, {batch, 1, width});
    ops::GruWeights<T> w{p(kGruNames[0]), p(kGruNames[1]), p(kGruNames[2]),
                         p(kGruNames[3]), p(kGruNames[4]), p(kGruNames[5]),
                         p(kGruNames[6]), p(kGruNames[7]), p(kGruNames[8])};
    auto res = ops::gru_sequence(seq, tape.constant(hidden_), w);
    hidden_ = res.last.value();
    x = ops::reshape(res.outputs, {batch, hidden_.size()});
  }
  Var<T> logits = ops::dense(x, p("cls.weights"), p("cls.bias"));
  return {logits, ops::softmax(logits)};
}

template <typename T>
void BasicNetwork<T>::set_hidden_state(TensorT h) {
  if (kind_ != NetKind::kTempCoNet) throw ConfigError("only the recurrent network has a hidden state");
  if (h.shape() != hidden_.shape()) {
    throw InvalidShapeError("hidden state must be " + shape_string(hidden_.shape()) + ", got " +
                            shape_string(h.shape()));
  }
  hidden_ = std::move(h);
}

template <typename T>
void BasicNetwork<T>::reset_hidden_state() {
  hidden_.fill(T{0});
}

template class BasicNetwork<float>;
template class BasicNetwork<double>;
template BasicNetwork<double> BasicNetwork<float>::cast<double>() const;
template BasicNetwork<float> BasicNetwork<double>::cast<float>() const;

Network build_tcl_net(const ArchConfig& arch, std::uint64_t init_seed) {
  return Network(NetKind::kTcl, arch, 2, init_seed);
}

Network build_naive_lwfnet(const ArchConfig& arch, int n_phases, std::uint64_t init_seed) {
  return Network(NetKind::kNaive, arch, n_phases, init_seed);
}

Network build_tempconet(const ArchConfig& arch, int n_phases, std::uint64_t init_seed) {
  return Network(NetKind::kTempCoNet, arch, n_phases, init_seed);
}

}  // namespace tcl
