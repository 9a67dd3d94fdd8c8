#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "tcl/ops.hpp"
#include "tcl/tape.hpp"
#include "tcl/tensor.hpp"

namespace tcl {

struct ConvSpec {
  int kernel = 3;
  int out_channels = 1;
  int stride = 1;
  int padding = 0;
  bool lrn = false;
  bool pool = false;

  bool operator==(const ConvSpec&) const = default;
};

// Layer sizes for every network. Channel and unit widths are given at full
// size and divided by scale_factor when a network is built.
struct ArchConfig {
  int input_height = 240;
  int input_width = 320;
  std::vector<ConvSpec> conv_specs = alexnet_convs();
  int pool_window = 3;
  int pool_stride = 2;
  ops::LrnParams lrn;
  int fc6_units = 4096;
  int fc7_units = 4096;
  int fc8_units = 1024;
  int classifier_units = 512;
  int gru_hidden = 256;
  double dropout_p = 0.5;
  int scale_factor = 1;

  static std::vector<ConvSpec> alexnet_convs();

  // 32x24 frames, widths / 16, lighter strides so the map stays non-empty.
  static ArchConfig desk();

  int scaled(int width) const;
  void validate() const;  // throws ConfigError

  // Output shape of every chain layer for a batch of `batch` frames, ending at
  // FC6. Names are conv1..conv5 (after pooling) and fc6.
  std::vector<std::pair<std::string, Shape>> chain_shapes(std::size_t batch = 1) const;

  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);  // rejects unknown keys
  bool operator==(const ArchConfig&) const = default;
};

enum class NetKind { kTcl, kNaive, kTempCoNet };

std::string to_string(NetKind kind);
NetKind net_kind_from_string(const std::string& s);

// The names of the shared feature chain, in order.
const std::vector<std::string>& chain_layers();

// Probabilities together with the pre-softmax scores.
template <typename T>
struct NetOutput {
  Var<T> logits;
  Var<T> probs;
};

// One of the three networks: the siamese order net, the frame classifier, or
// the recurrent phase net. Parameters are shared objects so that the second
// siamese chain can hold the very same storage as the first.
template <typename T>
class BasicNetwork {
 public:
  using TensorT = BasicTensor<T>;
  using ParamPtr = std::shared_ptr<Parameter<T>>;

  BasicNetwork(NetKind kind, ArchConfig arch, int n_phases, std::uint64_t init_seed);

  // Deep copy with fresh storage and the same aliasing structure.
  BasicNetwork clone() const;

  template <typename U>
  BasicNetwork<U> cast() const;

  NetKind kind() const noexcept { return kind_; }
  const ArchConfig& arch() const noexcept { return arch_; }
  int n_phases() const noexcept { return n_phases_; }
  std::size_t output_width() const;

  // Unique parameters in build order.
  const std::vector<ParamPtr>& parameters() const noexcept { return params_; }
  Parameter<T>& parameter(const std::string& name);
  const Parameter<T>& parameter(const std::string& name) const;
  bool has_parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  // Chain parameter seen by siamese input slot 0 or 1.
  const ParamPtr& chain_parameter(int slot, const std::string& name) const;
  // "chain_b.<name>" -> "<name>" for every aliased parameter.
  const std::map<std::string, std::string>& aliases() const noexcept { return aliases_; }

  void zero_grad();

  // Chain up to FC6 with ReLU (dropout not applied). frames: B x 3 x H x W.
  Var<T> embed(Tape<T>& tape, Var<T> frames, int slot = 0);

  // Siamese order prediction over frame pairs (a_i, b_i). Label 0 means a is
  // earlier. Probabilities are N x 2.
  NetOutput<T> order_forward(Tape<T>& tape, Var<T> frames_a, Var<T> frames_b, ops::Mode mode,
                             Rng& rng);

  // Same result as order_forward, but every distinct frame passes through the
  // chain once. Pair i uses frames[index_a[i]] and frames[index_b[i]].
  NetOutput<T> order_forward_indexed(Tape<T>& tape, Var<T> frames,
                                     std::span<const std::size_t> index_a,
                                     std::span<const std::size_t> index_b, ops::Mode mode,
                                     Rng& rng);

  // Phase probabilities for a chunk of consecutive frames of one video. The
  // recurrent net starts from hidden_state() and stores its final state back.
  NetOutput<T> phase_forward(Tape<T>& tape, Var<T> frames, ops::Mode mode, Rng& rng);

  // Persistent 1 x H recurrent state; empty for the other kinds.
  const TensorT& hidden_state() const noexcept { return hidden_; }
  void set_hidden_state(TensorT h);
  void reset_hidden_state();

 private:
  template <typename U>
  friend class BasicNetwork;

  BasicNetwork() = default;
  ParamPtr add(const std::string& name, Shape shape, std::size_t fan_in, bool regularize,
               std::uint64_t seed);
  Var<T> bind(Tape<T>& tape, const std::string& name, int slot = 0);
  Var<T> fc6_block(Tape<T>& tape, Var<T> embedding, ops::Mode mode, Rng& rng);

  NetKind kind_ = NetKind::kTcl;
  ArchConfig arch_;
  int n_phases_ = 2;
  std::vector<ParamPtr> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, ParamPtr> chain_b_;
  std::map<std::string, std::string> aliases_;
  TensorT hidden_;
};

using Network = BasicNetwork<float>;

Network build_tcl_net(const ArchConfig& arch, std::uint64_t init_seed = 0);
Network build_naive_lwfnet(const ArchConfig& arch, int n_phases, std::uint64_t init_seed = 0);
Network build_tempconet(const ArchConfig& arch, int n_phases, std::uint64_t init_seed = 0);

// On-disk state of a network plus optimizer and counters.
struct Checkpoint {
  static constexpr char kMagic[4] = {'T', 'C', 'L', 'N'};
  static constexpr std::uint8_t kVersion = 1;

  NetKind kind = NetKind::kTcl;
  int n_phases = 2;
  ArchConfig arch;
  std::uint64_t epoch = 0;
  double lr = 0.0;
  std::vector<std::pair<std::string, Tensor>> parameters;
  std::vector<Tensor> velocities;  // empty or one per parameter, same order
  std::map<std::string, double> lr_multipliers;  // entries different from 1

  std::string fingerprint() const;
};

Checkpoint make_checkpoint(const Network& net, std::uint64_t epoch = 0, double lr = 0.0,
                           std::vector<Tensor> velocities = {});

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Exact byte count save_checkpoint writes for `ckpt`.
std::size_t checkpoint_size(const Checkpoint& ckpt);

// Rebuilds the network described by the checkpoint with its stored values.
Network network_from_checkpoint(const Checkpoint& ckpt);

// Copies every parameter value and learning-rate multiplier. Throws
// IncompatibleCheckpointError naming the first mismatching layer.
void load_parameters(Network& net, const Checkpoint& ckpt);

// Copies conv1..fc6 from a pretrained order net into `dst` and gives those
// parameters lr_multiplier 0.1. Other layers are untouched.
void transfer_pretrained(const Checkpoint& src, Network& dst, double lr_multiplier = 0.1);

}  // namespace tcl
