#include "tcl/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <thread>

#include "tcl/error.hpp"

namespace tcl {

// ----------------------------------------------------------------- metrics

long long ConfusionMatrix::total() const {
  long long t = 0;
  for (const auto& row : counts) for (long long c : row) t += c;
  return t;
}

long long ConfusionMatrix::trace() const {
  long long t = 0;
  for (int p = 0; p < n_phases; ++p) t += counts[p][p];
  return t;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& predicted, const std::vector<int>& truth,
                                 int n_phases) {
  if (n_phases < 1) throw ConfigError("n_phases must be >= 1");
  if (predicted.size() != truth.size()) {
    throw ConfigError("predicted and true label counts differ: " + std::to_string(predicted.size()) +
                      " vs " + std::to_string(truth.size()));
  }
  ConfusionMatrix cm;
  cm.n_phases = n_phases;
  cm.counts.assign(n_phases, std::vector<long long>(n_phases, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int label : {truth[i], predicted[i]}) {
      if (label < 1 || label > n_phases) {
        throw InvalidLabelError("label " + std::to_string(label) + " outside 1.." + std::to_string(n_phases));
      }
    }
    ++cm.counts[truth[i] - 1][predicted[i] - 1];
  }
  return cm;
}

MetricsReport compute_metrics(const std::vector<int>& predicted, const std::vector<int>& truth,
                              int n_phases, const std::string& video_id) {
  MetricsReport r;
  r.video_id = video_id;
  r.confusion = confusion_matrix(predicted, truth, n_phases);
  const ConfusionMatrix& cm = r.confusion;
  const long long total = cm.total();
  double p_sum = 0, r_sum = 0;
  int p_n = 0, r_n = 0;
  for (int p = 0; p < n_phases; ++p) {
    long long tp = cm.counts[p][p], fp = 0, fn = 0;
    for (int q = 0; q < n_phases; ++q) {
      if (q == p) continue;
      fp += cm.counts[q][p];
      fn += cm.counts[p][q];
    }
    PhaseMetrics m;
    if (tp + fp > 0) {
      m.precision = double(tp) / double(tp + fp);
      p_sum += *m.precision;
      ++p_n;
    }
    if (tp + fn > 0) {
      m.recall = double(tp) / double(tp + fn);
      r_sum += *m.recall;
      ++r_n;
    }
    if (total > 0) m.accuracy = double(total - fp - fn) / double(total);
    r.per_phase.push_back(m);
  }
  if (p_n > 0) r.macro_precision = p_sum / p_n;
  if (r_n > 0) r.macro_recall = r_sum / r_n;
  if (total > 0) r.accuracy = double(cm.trace()) / double(total);
  return r;
}

// -------------------------------------------------------------- prediction

OnlinePrediction predict_phases_online(Network& net, const PreparedVideo& video, std::size_t chunk_size) {
  if (net.kind() == NetKind::kTcl) throw ConfigError("phase prediction needs a phase network");
  if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
  const std::size_t k = std::size_t(net.n_phases());
  OnlinePrediction out;
  out.logits = Tensor({video.size(), k});
  Rng unused(0);
  net.reset_hidden_state();
  for (auto [begin, count] : batch_video_sequences(video.size(), chunk_size)) {
    Tape<float> tape;
    NetOutput<float> o = net.phase_forward(tape, tape.constant(video.slice(begin, count)), ops::Mode::kEval, unused);
    const Tensor& logits = o.logits.value();
    std::copy(logits.data().begin(), logits.data().end(), out.logits.data().begin() + begin * k);
  }
  net.reset_hidden_state();
  for (std::size_t i = 0; i < video.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (out.logits[i * k + c] > out.logits[i * k + best]) best = c;
    }
    out.labels.push_back(int(best) + 1);
  }
  return out;
}

// -------------------------------------------------------------------- LOSO

std::string to_string(Variant v) { return v == Variant::kNaive ? "naive" : "tempconet"; }

Variant variant_from_string(const std::string& s) {
  if (s == "naive") return Variant::kNaive;
  if (s == "tempconet") return Variant::kTempCoNet;
  throw ConfigError("unknown network variant '" + s + "' (expected naive or tempconet)");
}

AggregateStat aggregate(const std::vector<std::optional<double>>& values) {
  AggregateStat a;
  double sum = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++a.count;
    }
  }
  if (a.count == 0) return a;
  a.mean = sum / a.count;
  if (a.count < 2) return a;
  double ss = 0;
  for (const auto& v : values) {
    if (v) ss += (*v - *a.mean) * (*v - *a.mean);
  }
  a.std = std::sqrt(ss / (a.count - 1));
  return a;
}

namespace {

std::vector<int> one_based(const std::vector<int>& labels) {
  std::vector<int> out(labels);
  for (int& l : out) ++l;
  return out;
}

double held_out_accuracy(Network& net, const PreparedVideo& v) {
  const OnlinePrediction p = predict_phases_online(net, v);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < v.size(); ++i) ok += p.labels[i] == v.labels[i] + 1;
  return double(ok) / double(v.size());
}

FoldResult run_fold(const std::vector<const PreparedVideo*>& sorted, std::size_t held, int n_phases,
                    const LosoOptions& opts) {
  const PreparedVideo& test = *sorted[held];
  std::vector<PreparedVideo> train;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i != held) train.push_back(*sorted[i]);
  }
  Network net = opts.variant == Variant::kNaive ? build_naive_lwfnet(opts.arch, n_phases, opts.init_seed)
                                                : build_tempconet(opts.arch, n_phases, opts.init_seed);
  if (opts.pretrained) transfer_pretrained(*opts.pretrained, net, opts.transfer_multiplier);

  TrainConfig cfg = opts.train;
  cfg.task = Task::kFinetune;
  cfg.seed = derive_seed(opts.train.seed, test.video_id);

  FoldResult fold;
  fold.held_out = test.video_id;
  EpochHook hook;
  if (opts.track_curve) {
    hook = [&](const EpochRecord&, Network& n, const OptimizerState&) {
      fold.curve.push_back(held_out_accuracy(n, test));
      return true;
    };
  }
  fold.log = finetune(cfg, train, net, std::nullopt, hook).log;
  fold.predicted = predict_phases_online(net, test).labels;
  fold.truth = one_based(test.labels);
  fold.frames = test.indices;
  fold.report = compute_metrics(fold.predicted, fold.truth, n_phases, test.video_id);
  return fold;
}

}  // namespace

LosoSummary run_loso(const std::vector<PreparedVideo>& videos, int n_phases, const LosoOptions& opts) {
  if (videos.size() < 2) throw ProtocolError("leave-one-surgery-out needs at least 2 videos");
  if (opts.threads < 1) throw ConfigError("threads must be >= 1");
  opts.train.validate();
  std::vector<const PreparedVideo*> sorted;
  for (const PreparedVideo& v : videos) {
    if (v.labels.size() != v.size()) throw DataError("video " + v.video_id + " has unlabeled frames");
    sorted.push_back(&v);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const PreparedVideo* a, const PreparedVideo* b) { return a->video_id < b->video_id; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->video_id == sorted[i - 1]->video_id) {
      throw ProtocolError("duplicate video id " + sorted[i]->video_id);
    }
  }

  LosoSummary summary;
  summary.folds.resize(sorted.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < sorted.size();) {
      try {
        summary.folds[i] = run_fold(sorted, i, n_phases, opts);
        if (opts.on_fold) {
          std::lock_guard lock(mu);
          opts.on_fold(summary.folds[i]);
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = sorted.size();
      }
    }
  };
  const int n_threads = std::min<int>(opts.threads, int(sorted.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<std::optional<double>> p, r, a;
  for (const FoldResult& f : summary.folds) {
    p.push_back(f.report.macro_precision);
    r.push_back(f.report.macro_recall);
    a.push_back(f.report.accuracy);
  }
  summary.precision = aggregate(p);
  summary.recall = aggregate(r);
  summary.accuracy = aggregate(a);
  return summary;
}

// ----------------------------------------------------------------- reports

std::string format_metric(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}

std::string folds_csv(const LosoSummary& s) {
  std::string out = "video_id,precision,recall,accuracy\n";
  for (const FoldResult& f : s.folds) {
    out += f.held_out + "," + format_metric(f.report.macro_precision) + "," +
           format_metric(f.report.macro_recall) + "," + format_metric(f.report.accuracy) + "\n";
  }
  return out;
}

std::string fold_csv(const MetricsReport& r) {
  std::string out = "video_id,phase,precision,recall,accuracy\n";
  for (std::size_t p = 0; p < r.per_phase.size(); ++p) {
    const PhaseMetrics& m = r.per_phase[p];
    out += r.video_id + "," + std::to_string(p + 1) + "," + format_metric(m.precision) + "," +
           format_metric(m.recall) + "," + format_metric(m.accuracy) + "\n";
  }
  out += r.video_id + ",macro," + format_metric(r.macro_precision) + "," + format_metric(r.macro_recall) +
         "," + format_metric(r.accuracy) + "\n";
  return out;
}

std::string curves_csv(const LosoSummary& s) {
  std::string out = "video_id,epoch,accuracy\n";
  for (const FoldResult& f : s.folds) {
    for (std::size_t e = 0; e < f.curve.size(); ++e) {
      out += f.held_out + "," + std::to_string(e) + "," + format_metric(f.curve[e]) + "\n";
    }
  }
  return out;
}

std::string summary_csv(const LosoSummary& s, const std::string& method) {
  std::string out = "method,precision,precision_std,recall,recall_std,accuracy,accuracy_std,folds\n";
  out += method;
  for (const AggregateStat* a : {&s.precision, &s.recall, &s.accuracy}) {
    out += "," + format_metric(a->mean) + "," + format_metric(a->std);
  }
  out += "," + std::to_string(s.folds.size()) + "\n";
  return out;
}

std::string predictions_csv(const LosoSummary& s) {
  std::string out = "video_id,frame,truth,predicted\n";
  for (const FoldResult& f : s.folds) {
    for (std::size_t i = 0; i < f.predicted.size(); ++i) {
      out += f.held_out + "," + std::to_string(i < f.frames.size() ? f.frames[i] : int(i)) + "," +
             std::to_string(f.truth[i]) + "," + std::to_string(f.predicted[i]) + "\n";
    }
  }
  return out;
}

std::vector<PredictionRow> parse_predictions_csv(const std::string& text) {
  std::vector<PredictionRow> rows;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("video_id,", 0) == 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 4) {
      throw IngestionError("predictions line " + std::to_string(line_no) + ": expected 4 columns");
    }
    try {
      std::size_t used = 0;
      PredictionRow r;
      r.video_id = cells[0];
      for (auto [cell, dst] : {std::pair{&cells[1], &r.frame}, {&cells[2], &r.truth}, {&cells[3], &r.predicted}}) {
        *dst = std::stoi(*cell, &used);
        if (used != cell->size()) throw std::invalid_argument(*cell);
      }
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw IngestionError("predictions line " + std::to_string(line_no) + ": malformed integer");
    }
  }
  return rows;
}

}  // namespace tcl
