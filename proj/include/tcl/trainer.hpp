#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tcl/datapipe.hpp"
#include "tcl/netarch.hpp"

namespace tcl {

enum class Task { kPretrain, kFinetune };

struct TrainConfig {
  Task task = Task::kPretrain;
  double base_lr = 5e-4;
  double momentum = 0.9;
  int epochs = 10000;
  int batch_size = 256;
  double lr_decay_alpha = 0.975;  // fine-tuning only
  double l1_weight = 1e-5;        // fine-tuning only
  double l2_weight = 1e-3;        // fine-tuning only
  std::uint64_t seed = 0;

  static TrainConfig pretrain_defaults();
  static TrainConfig finetune_defaults();

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  // Starts from the defaults of the task named in `j` (or `task`); rejects unknown keys.
  static TrainConfig from_json(const nlohmann::json& j, Task task);
};

std::string to_string(Task task);

struct OptimizerState {
  std::vector<Tensor> velocity;  // one per parameter, same order as the network
  double lr = 0.0;
  int epoch = 0;

  static OptimizerState for_network(const Network& net, double lr);
};

// v <- mu v - lr_eff g;  theta <- theta + mu v - lr_eff g, with
// lr_eff = lr * lr_multiplier. Throws DivergedError on a non-finite gradient.
void sgd_nesterov_step(const std::vector<std::shared_ptr<Parameter<float>>>& params,
                       OptimizerState& state, double lr, double momentum);

// g += l1 sign(theta) + 2 l2 theta for every parameter with regularize set.
void apply_regularization(const std::vector<std::shared_ptr<Parameter<float>>>& params, double l1,
                          double l2);

// lambda <- alpha lambda.
void decay_learning_rate(OptimizerState& state, double alpha);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> records;

  static constexpr const char* kHeader = "epoch,lr,loss,accuracy";
  std::string to_csv() const;
  static std::string csv_line(const EpochRecord& r);
};

// Called after every epoch with the network in its post-epoch state. Return
// false to stop training after this epoch.
using EpochHook = std::function<bool(const EpochRecord&, Network&, const OptimizerState&)>;

struct TrainResult {
  TrainLog log;
  OptimizerState state;
};

// Order-prediction training of a siamese network. Each epoch draws
// batch_size triples (6 * batch_size pairs) and steps once per batch_size
// pairs at a constant learning rate. `resume` continues from a checkpoint.
TrainResult pretrain(const TrainConfig& cfg, const VideoDataset& data, Network& net,
                     const std::optional<Checkpoint>& resume = std::nullopt,
                     const EpochHook& hook = nullptr);

// Pair-order accuracy of `net` on `pairs` in eval mode. Videos are looked up
// by id; frame positions index the prepared rows.
double pair_accuracy(Network& net, const std::vector<PreparedVideo>& videos,
                     const std::vector<InequationSample>& pairs, std::size_t batch_pairs = 512);

// Phase training. Each epoch visits the videos in a seeded random order; a
// video is processed in consecutive chunks of batch_size frames with the
// recurrent state carried (without gradient) from chunk to chunk.
TrainResult finetune(const TrainConfig& cfg, const std::vector<PreparedVideo>& videos, Network& net,
                     const std::optional<Checkpoint>& resume = std::nullopt,
                     const EpochHook& hook = nullptr);

// Mean cross-entropy of `net` over one video processed in chunks, in eval mode.
double video_loss(Network& net, const PreparedVideo& video, std::size_t batch_size);

}  // namespace tcl
