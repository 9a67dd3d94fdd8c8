#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tcl/datapipe.hpp"
#include "tcl/netarch.hpp"
#include "tcl/trainer.hpp"

namespace tcl {

// counts[actual][predicted], phases 0-based internally.
struct ConfusionMatrix {
  int n_phases = 0;
  std::vector<std::vector<long long>> counts;

  long long total() const;
  long long trace() const;
};

// Labels are 1-based. Throws InvalidLabelError for out-of-range labels and
// ConfigError for length mismatches.
ConfusionMatrix confusion_matrix(const std::vector<int>& predicted, const std::vector<int>& truth,
                                 int n_phases);

// Undefined values (a zero denominator) are empty.
struct PhaseMetrics {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> accuracy;  // (TP + TN) / total
};

struct MetricsReport {
  std::string video_id;
  std::vector<PhaseMetrics> per_phase;
  std::optional<double> macro_precision;  // mean over phases with a defined value
  std::optional<double> macro_recall;
  std::optional<double> accuracy;         // correct / total
  ConfusionMatrix confusion;
};

MetricsReport compute_metrics(const std::vector<int>& predicted, const std::vector<int>& truth,
                              int n_phases, const std::string& video_id = "");

struct OnlinePrediction {
  std::vector<int> labels;  // 1-based
  Tensor logits;            // N x n_phases
};

// Causal prediction over one video: the recurrent state starts at zero and is
// carried from chunk to chunk; dropout is off.
OnlinePrediction predict_phases_online(Network& net, const PreparedVideo& video,
                                       std::size_t chunk_size = 256);

enum class Variant { kNaive, kTempCoNet };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct FoldResult {
  std::string held_out;
  MetricsReport report;
  std::vector<double> curve;  // held-out accuracy after every epoch
  TrainLog log;
  std::vector<int> predicted;  // 1-based, one per held-out frame
  std::vector<int> truth;
  std::vector<int> frames;     // frame indices of the held-out video
};

// Mean and sample standard deviation over the defined values. std is empty
// when fewer than two values exist; mean is empty when none do.
struct AggregateStat {
  std::optional<double> mean;
  std::optional<double> std;
  int count = 0;
};

AggregateStat aggregate(const std::vector<std::optional<double>>& values);

struct LosoSummary {
  std::vector<FoldResult> folds;  // sorted by held-out video id
  AggregateStat precision, recall, accuracy;
};

struct LosoOptions {
  Variant variant = Variant::kTempCoNet;
  ArchConfig arch;
  TrainConfig train = TrainConfig::finetune_defaults();
  std::optional<Checkpoint> pretrained;
  double transfer_multiplier = 0.1;
  std::uint64_t init_seed = 0;
  int threads = 1;
  bool track_curve = true;
  std::function<void(const FoldResult&)> on_fold;  // called from the worker that finished the fold
};

// One fold per video. Every fold starts from the same initialisation; the
// training seed of a fold is derived from train.seed and the held-out id, so
// fold results do not depend on video order or thread count.
LosoSummary run_loso(const std::vector<PreparedVideo>& videos, int n_phases, const LosoOptions& opts);

// CSV reports. Undefined values are written as NA.
std::string format_metric(const std::optional<double>& v);
std::string folds_csv(const LosoSummary& s);      // video_id,precision,recall,accuracy
// video_id,phase,precision,recall,accuracy; one row per phase, then a macro
// row holding macro precision, macro recall and overall accuracy.
std::string fold_csv(const MetricsReport& r);
std::string curves_csv(const LosoSummary& s);  // video_id,epoch,accuracy
// One row: method,precision,precision_std,recall,recall_std,accuracy,accuracy_std,folds
std::string summary_csv(const LosoSummary& s, const std::string& method);
std::string predictions_csv(const LosoSummary& s);  // video_id,frame,truth,predicted

// Reads rows written by predictions_csv.
struct PredictionRow {
  std::string video_id;
  int frame = 0;
  int truth = 0;
  int predicted = 0;
};
std::vector<PredictionRow> parse_predictions_csv(const std::string& text);

}  // namespace tcl
