#include "tcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "tcl/error.hpp"
#include "tcl/ops.hpp"

namespace tcl {

namespace {

using ParamList = std::vector<std::shared_ptr<Parameter<float>>>;

const char* kTrainKeys[] = {"task",           "base_lr",   "momentum",  "epochs", "batch_size",
                            "lr_decay_alpha", "l1_weight", "l2_weight", "seed"};

// Column of the row maximum; ties go to the lowest column.
std::size_t argmax_row(const Tensor& t, std::size_t row) {
  const std::size_t w = t.shape()[1];
  std::size_t best = 0;
  for (std::size_t c = 1; c < w; ++c) {
    if (t[row * w + c] > t[row * w + best]) best = c;
  }
  return best;
}

std::vector<Tensor> snapshot(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p->value);
  return out;
}

void restore(const ParamList& params, const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

void check_finite_loss(double loss, int epoch) {
  if (!std::isfinite(loss)) {
    throw DivergedError("training diverged: non-finite loss at epoch " + std::to_string(epoch), "loss",
                        epoch);
  }
}

OptimizerState initial_state(const Network& net, double base_lr, const std::optional<Checkpoint>& resume) {
  OptimizerState state = OptimizerState::for_network(net, base_lr);
  if (!resume) return state;
  state.lr = resume->lr;
  state.epoch = static_cast<int>(resume->epoch);
  if (!resume->velocities.empty()) {
    if (resume->velocities.size() != state.velocity.size()) {
      throw CheckpointIntegrityError("checkpoint velocity count does not match the network");
    }
    for (std::size_t i = 0; i < state.velocity.size(); ++i) {
      if (resume->velocities[i].shape() != state.velocity[i].shape()) {
        throw IncompatibleCheckpointError("velocity shape mismatch for " + net.parameters()[i]->name,
                                          net.parameters()[i]->name);
      }
      state.velocity[i] = resume->velocities[i];
    }
  }
  return state;
}

}  // namespace

// ------------------------------------------------------------------ config

TrainConfig TrainConfig::pretrain_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.task = Task::kFinetune;
  c.base_lr = 1e-3;
  c.epochs = 100;
  return c;
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_decay_alpha > 0.0 && lr_decay_alpha <= 1.0)) throw ConfigError("lr_decay_alpha must lie in (0, 1]");
  if (!(l1_weight >= 0.0) || !(l2_weight >= 0.0)) throw ConfigError("l1_weight and l2_weight must be >= 0");
}

std::string to_string(Task task) { return task == Task::kPretrain ? "pretrain" : "finetune"; }

nlohmann::json TrainConfig::to_json() const {
  return {{"task", to_string(task)},        {"base_lr", base_lr},     {"momentum", momentum},
          {"epochs", epochs},               {"batch_size", batch_size},
          {"lr_decay_alpha", lr_decay_alpha}, {"l1_weight", l1_weight}, {"l2_weight", l2_weight},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, Task task) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(kTrainKeys), std::end(kTrainKeys), key) == std::end(kTrainKeys)) {
      throw ConfigError("unknown training config key '" + key + "'");
    }
  }
  if (j.contains("task")) {
    const std::string t = j.at("task").get<std::string>();
    if (t == "pretrain") task = Task::kPretrain;
    else if (t == "finetune") task = Task::kFinetune;
    else throw ConfigError("task must be pretrain or finetune, got '" + t + "'");
  }
  TrainConfig c = task == Task::kPretrain ? pretrain_defaults() : finetune_defaults();
  try {
    if (j.contains("base_lr")) c.base_lr = j.at("base_lr").get<double>();
    if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("lr_decay_alpha")) c.lr_decay_alpha = j.at("lr_decay_alpha").get<double>();
    if (j.contains("l1_weight")) c.l1_weight = j.at("l1_weight").get<double>();
    if (j.contains("l2_weight")) c.l2_weight = j.at("l2_weight").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

// --------------------------------------------------------------- optimizer

OptimizerState OptimizerState::for_network(const Network& net, double lr) {
  OptimizerState s;
  s.lr = lr;
  for (const auto& p : net.parameters()) s.velocity.emplace_back(p->value.shape());
  return s;
}

void sgd_nesterov_step(const ParamList& params, OptimizerState& state, double lr, double momentum) {
  if (state.velocity.size() != params.size()) {
    throw InvalidShapeError("optimizer holds " + std::to_string(state.velocity.size()) +
                            " velocity buffers for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<float>& p = *params[i];
    if (state.velocity[i].shape() != p.value.shape()) {
      throw InvalidShapeError("velocity shape mismatch for " + p.name);
    }
    for (float g : p.grad.data()) {
      if (!std::isfinite(g)) {
        throw DivergedError("non-finite gradient in " + p.name + " at epoch " + std::to_string(state.epoch),
                            p.name, state.epoch);
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = *params[i];
    const double rate = lr * p.lr_multiplier;
    float* theta = p.value.data().data();
    float* v = state.velocity[i].data().data();
    const float* g = p.grad.data().data();
    for (std::size_t k = 0, n = p.value.size(); k < n; ++k) {
      const double step = rate * g[k];
      const double vk = momentum * v[k] - step;
      v[k] = static_cast<float>(vk);
      theta[k] = static_cast<float>(theta[k] + (momentum * vk - step));
    }
  }
}

void apply_regularization(const ParamList& params, double l1, double l2) {
  if (l1 == 0.0 && l2 == 0.0) return;
  for (const auto& p : params) {
    if (!p->regularize) continue;
    const auto theta = p->value.data();
    auto g = p->grad.data();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double t = theta[k];
      const double sign = (t > 0) - (t < 0);
      g[k] = static_cast<float>(g[k] + l1 * sign + 2.0 * l2 * t);
    }
  }
}

void decay_learning_rate(OptimizerState& state, double alpha) { state.lr *= alpha; }

// --------------------------------------------------------------------- log

std::string TrainLog::csv_line(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g", r.epoch, r.lr, r.loss, r.accuracy);
  return buf;
}

std::string TrainLog::to_csv() const {
  std::string out = std::string(kHeader) + "\n";
  for (const EpochRecord& r : records) out += csv_line(r) + "\n";
  return out;
}

// ------------------------------------------------------------- pretraining

namespace {

struct PairBatch {
  Tensor frames;
  std::vector<std::size_t> index_a, index_b;
  std::vector<int> labels;
};

// Stacks the distinct frames referenced by pairs[begin, end) once each.
PairBatch gather_pairs(const std::map<std::string, const PreparedVideo*>& by_id,
                       const std::vector<InequationSample>& pairs, std::size_t begin, std::size_t end) {
  std::map<std::pair<std::string, std::size_t>, std::size_t> row_of;
  std::vector<std::pair<const PreparedVideo*, std::size_t>> rows;
  PairBatch b;
  auto row = [&](const std::string& id, std::size_t pos) {
    auto [it, fresh] = row_of.try_emplace({id, pos}, rows.size());
    if (fresh) {
      auto v = by_id.find(id);
      if (v == by_id.end()) throw SamplingError("pair references unknown video " + id);
      if (pos >= v->second->size()) throw SamplingError("pair references a frame outside video " + id);
      rows.emplace_back(v->second, pos);
    }
    return it->second;
  };
  for (std::size_t i = begin; i < end; ++i) {
    b.index_a.push_back(row(pairs[i].video_id, pairs[i].frame_a));
    b.index_b.push_back(row(pairs[i].video_id, pairs[i].frame_b));
    b.labels.push_back(pairs[i].label);
  }
  const Shape& fs = rows.front().first->frames.shape();
  const std::size_t per = fs[1] * fs[2] * fs[3];
  b.frames = Tensor({rows.size(), fs[1], fs[2], fs[3]});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = rows[r].first->frames.data().subspan(rows[r].second * per, per);
    std::copy(src.begin(), src.end(), b.frames.data().begin() + r * per);
  }
  return b;
}

std::map<std::string, const PreparedVideo*> index_videos(const std::vector<PreparedVideo>& videos) {
  std::map<std::string, const PreparedVideo*> by_id;
  for (const PreparedVideo& v : videos) by_id[v.video_id] = &v;
  return by_id;
}

std::size_t count_correct(const Tensor& probs, const std::vector<int>& labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax_row(probs, i) == std::size_t(labels[i]);
  return correct;
}

}  // namespace

TrainResult pretrain(const TrainConfig& cfg, const VideoDataset& data, Network& net,
                     const std::optional<Checkpoint>& resume, const EpochHook& hook) {
  cfg.validate();
  if (net.kind() != NetKind::kTcl) throw ConfigError("pretrain needs the order-prediction network");
  if (data.videos.empty()) throw SamplingError("pretraining needs at least one video");
  const std::vector<PreparedVideo> videos =
      prepare_dataset(data, net.arch().input_height, net.arch().input_width);
  const auto by_id = index_videos(videos);

  OptimizerState state = initial_state(net, cfg.base_lr, resume);
  TrainResult result;
  const ParamList& params = net.parameters();
  const std::size_t batch = std::size_t(cfg.batch_size);

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const std::vector<Tensor> last_good = snapshot(params);
    Rng sample_rng(derive_seed(cfg.seed, "pretrain.sample", epoch));
    std::vector<InequationSample> pairs = sample_inequations(data, cfg.batch_size, sample_rng);
    Rng shuffle_rng(derive_seed(cfg.seed, "pretrain.shuffle", epoch));
    std::shuffle(pairs.begin(), pairs.end(), shuffle_rng.engine());

    double loss_sum = 0.0;
    std::size_t correct = 0;
    try {
      for (std::size_t begin = 0, step = 0; begin < pairs.size(); begin += batch, ++step) {
        const std::size_t end = std::min(pairs.size(), begin + batch);
        PairBatch b = gather_pairs(by_id, pairs, begin, end);
        Rng dropout_rng(derive_seed(cfg.seed, "pretrain.dropout",
                                    (std::uint64_t(epoch) << 20) + step));
        Tape<float> tape;
        net.zero_grad();
        Var<float> frames = tape.constant(std::move(b.frames));
        NetOutput<float> out = net.order_forward_indexed(tape, frames, b.index_a, b.index_b,
                                                         ops::Mode::kTrain, dropout_rng);
        Var<float> loss = ops::categorical_cross_entropy(out.probs, std::span<const int>(b.labels));
        const double l = loss.value()[0];
        check_finite_loss(l, epoch);
        loss_sum += l * double(end - begin);
        correct += count_correct(out.probs.value(), b.labels);
        tape.backward(loss);
        sgd_nesterov_step(params, state, state.lr, cfg.momentum);
      }
    } catch (const DivergedError&) {
      restore(params, last_good);
      throw;
    }

    EpochRecord rec{epoch, state.lr, loss_sum / double(pairs.size()), double(correct) / double(pairs.size())};
    result.log.records.push_back(rec);
    state.epoch = epoch + 1;
    if (hook && !hook(rec, net, state)) break;
  }
  result.state = std::move(state);
  return result;
}

double pair_accuracy(Network& net, const std::vector<PreparedVideo>& videos,
                     const std::vector<InequationSample>& pairs, std::size_t batch_pairs) {
  if (pairs.empty()) throw ConfigError("pair_accuracy needs at least one pair");
  if (batch_pairs < 1) throw ConfigError("batch_pairs must be >= 1");
  const auto by_id = index_videos(videos);
  std::size_t correct = 0;
  Rng unused(0);
  for (std::size_t begin = 0; begin < pairs.size(); begin += batch_pairs) {
    const std::size_t end = std::min(pairs.size(), begin + batch_pairs);
    PairBatch b = gather_pairs(by_id, pairs, begin, end);
    Tape<float> tape;
    Var<float> frames = tape.constant(std::move(b.frames));
    NetOutput<float> out =
        net.order_forward_indexed(tape, frames, b.index_a, b.index_b, ops::Mode::kEval, unused);
    correct += count_correct(out.probs.value(), b.labels);
  }
  return double(correct) / double(pairs.size());
}

// ------------------------------------------------------------ fine-tuning

TrainResult finetune(const TrainConfig& cfg, const std::vector<PreparedVideo>& videos, Network& net,
                     const std::optional<Checkpoint>& resume, const EpochHook& hook) {
  cfg.validate();
  if (net.kind() == NetKind::kTcl) throw ConfigError("finetune needs a phase network, not the order network");
  if (videos.empty()) throw ConfigError("finetune needs at least one video");
  for (const PreparedVideo& v : videos) {
    if (v.labels.size() != v.size()) throw DataError("video " + v.video_id + " has unlabeled frames");
    for (int l : v.labels) {
      if (l < 0 || l >= net.n_phases()) {
        throw InvalidLabelError("video " + v.video_id + " has label " + std::to_string(l + 1) +
                                " outside 1.." + std::to_string(net.n_phases()));
      }
    }
  }

  OptimizerState state = initial_state(net, cfg.base_lr, resume);
  TrainResult result;
  const ParamList& params = net.parameters();

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const std::vector<Tensor> last_good = snapshot(params);
    std::vector<std::size_t> order(videos.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(derive_seed(cfg.seed, "finetune.order", epoch));
    std::shuffle(order.begin(), order.end(), order_rng.engine());

    double loss_sum = 0.0;
    std::size_t correct = 0, total = 0, step = 0;
    try {
      for (std::size_t vi : order) {
        const PreparedVideo& video = videos[vi];
        net.reset_hidden_state();
        for (auto [begin, count] : batch_video_sequences(video.size(), std::size_t(cfg.batch_size))) {
          Rng dropout_rng(derive_seed(cfg.seed, "finetune.dropout", (std::uint64_t(epoch) << 24) + step++));
          const std::vector<int> labels(video.labels.begin() + begin, video.labels.begin() + begin + count);
          Tape<float> tape;
          net.zero_grad();
          Var<float> frames = tape.constant(video.slice(begin, count));
          NetOutput<float> out = net.phase_forward(tape, frames, ops::Mode::kTrain, dropout_rng);
          Var<float> loss = ops::categorical_cross_entropy(out.probs, std::span<const int>(labels));
          const double l = loss.value()[0];
          check_finite_loss(l, epoch);
          loss_sum += l * double(count);
          correct += count_correct(out.probs.value(), labels);
          total += count;
          tape.backward(loss);
          apply_regularization(params, cfg.l1_weight, cfg.l2_weight);
          sgd_nesterov_step(params, state, state.lr, cfg.momentum);
        }
      }
    } catch (const DivergedError&) {
      restore(params, last_good);
      net.reset_hidden_state();
      throw;
    }
    net.reset_hidden_state();

    EpochRecord rec{epoch, state.lr, loss_sum / double(total), double(correct) / double(total)};
    result.log.records.push_back(rec);
    decay_learning_rate(state, cfg.lr_decay_alpha);
    state.epoch = epoch + 1;
    if (hook && !hook(rec, net, state)) break;
  }
  result.state = std::move(state);
  return result;
}

double video_loss(Network& net, const PreparedVideo& video, std::size_t batch_size) {
  if (video.labels.size() != video.size()) throw DataError("video " + video.video_id + " has unlabeled frames");
  Rng unused(0);
  net.reset_hidden_state();
  double sum = 0.0;
  for (auto [begin, count] : batch_video_sequences(video.size(), batch_size)) {
    const std::vector<int> labels(video.labels.begin() + begin, video.labels.begin() + begin + count);
    Tape<float> tape;
    Var<float> frames = tape.constant(video.slice(begin, count));
    NetOutput<float> out = net.phase_forward(tape, frames, ops::Mode::kEval, unused);
    sum += double(ops::categorical_cross_entropy(out.probs, std::span<const int>(labels)).value()[0]) *
           double(count);
  }
  net.reset_hidden_state();
  return sum / double(video.size());
}

}  // namespace tcl
