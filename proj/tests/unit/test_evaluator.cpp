#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tcl/evaluator.hpp"

using namespace tcl;

namespace {

// Counts straight from the definitions, one (frame, phase) pair at a time.
struct Brute {
  std::vector<std::optional<double>> precision, recall, phase_acc;
  std::optional<double> macro_p, macro_r, accuracy;
};

Brute brute_force(const std::vector<int>& pred, const std::vector<int>& truth, int k) {
  Brute b;
  double ps = 0, rs = 0;
  int pn = 0, rn = 0;
  const std::size_t n = truth.size();
  for (int p = 1; p <= k; ++p) {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool t = truth[i] == p, q = pred[i] == p;
      tp += t && q;
      fp += !t && q;
      fn += t && !q;
      tn += !t && !q;
    }
    b.precision.push_back(tp + fp ? std::optional<double>(double(tp) / (tp + fp)) : std::nullopt);
    b.recall.push_back(tp + fn ? std::optional<double>(double(tp) / (tp + fn)) : std::nullopt);
    b.phase_acc.push_back(n ? std::optional<double>(double(tp + tn) / n) : std::nullopt);
    if (b.precision.back()) ps += *b.precision.back(), ++pn;
    if (b.recall.back()) rs += *b.recall.back(), ++rn;
  }
  if (pn) b.macro_p = ps / pn;
  if (rn) b.macro_r = rs / rn;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) ok += pred[i] == truth[i];
  if (n) b.accuracy = double(ok) / n;
  return b;
}

SynthConfig tiny_synth() {
  SynthConfig c;
  c.n_frames = 16;
  c.n_phases = 3;
  return c;
}

std::vector<PreparedVideo> tiny_videos(int n, std::uint64_t seed) {
  const ArchConfig a = ArchConfig::desk();
  return prepare_dataset(generate_synthetic_dataset(seed, n, tiny_synth()), a.input_height, a.input_width);
}

LosoOptions quick_loso(Variant v) {
  LosoOptions o;
  o.variant = v;
  o.arch = ArchConfig::desk();
  o.train.epochs = 2;
  o.train.batch_size = 8;
  o.train.seed = 3;
  o.init_seed = 4;
  return o;
}

}  // namespace

TEST_CASE("metrics: worked example") {
  const MetricsReport r = compute_metrics({1, 2, 2, 2}, {1, 1, 2, 2}, 2);
  CHECK(*r.macro_precision == doctest::Approx((1.0 + 2.0 / 3.0) / 2));
  CHECK(*r.macro_precision == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(*r.macro_recall == doctest::Approx(0.75));
  CHECK(*r.accuracy == 0.75);
  CHECK(r.confusion.counts[0][1] == 1);
  CHECK(r.confusion.total() == 4);
}

TEST_CASE("metrics: perfect prediction") {
  const std::vector<int> y{1, 2, 3, 3, 2, 1};
  const MetricsReport r = compute_metrics(y, y, 3);
  CHECK(*r.macro_precision == 1.0);
  CHECK(*r.macro_recall == 1.0);
  CHECK(*r.accuracy == 1.0);
  for (const PhaseMetrics& m : r.per_phase) {
    CHECK(*m.precision == 1.0);
    CHECK(*m.recall == 1.0);
    CHECK(*m.accuracy == 1.0);
  }
}

TEST_CASE("metrics: absent phase is left out of the macro averages") {
  const MetricsReport r = compute_metrics({1, 2, 2, 2}, {1, 1, 2, 2}, 3);
  CHECK_FALSE(r.per_phase[2].precision);
  CHECK_FALSE(r.per_phase[2].recall);
  CHECK(*r.per_phase[2].accuracy == 1.0);
  CHECK(*r.macro_precision == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(*r.macro_recall == doctest::Approx(0.75));
  CHECK(*r.accuracy == 0.75);
  // Predicted but never true: precision 0, recall undefined.
  const MetricsReport q = compute_metrics({3, 1}, {1, 1}, 3);
  CHECK(*q.per_phase[2].precision == 0.0);
  CHECK_FALSE(q.per_phase[2].recall);
}

TEST_CASE("metrics: constant predictor scores the class proportion") {
  std::vector<int> truth(40, 2);
  std::fill(truth.begin(), truth.begin() + 10, 1);
  const MetricsReport r = compute_metrics(std::vector<int>(40, 2), truth, 2);
  CHECK(*r.accuracy == 0.75);
}

TEST_CASE("metrics: errors") {
  CHECK_THROWS_AS(compute_metrics({1, 2}, {1}, 2), ConfigError);
  CHECK_THROWS_AS(compute_metrics({1, 3}, {1, 2}, 2), InvalidLabelError);
  CHECK_THROWS_AS(compute_metrics({1, 2}, {0, 2}, 2), InvalidLabelError);
}

TEST_CASE("metrics: brute-force oracle on random cases") {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const int k = 1 + int(rng.below(10));
    const std::size_t n = 1 + rng.below(trial < 10 ? 10000 : 200);
    std::vector<int> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = 1 + int(rng.below(k));
      pred[i] = rng.uniform() < 0.6 ? truth[i] : 1 + int(rng.below(k));
    }
    const MetricsReport r = compute_metrics(pred, truth, k);
    const Brute b = brute_force(pred, truth, k);
    CHECK(r.macro_precision == b.macro_p);
    CHECK(r.macro_recall == b.macro_r);
    CHECK(r.accuracy == b.accuracy);
    for (int p = 0; p < k; ++p) {
      CHECK(r.per_phase[p].precision == b.precision[p]);
      CHECK(r.per_phase[p].recall == b.recall[p]);
      CHECK(r.per_phase[p].accuracy == b.phase_acc[p]);
    }
  }
}

TEST_CASE("metrics: invariant under relabelling") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + int(rng.below(8));
    std::vector<int> truth(300), pred(300), perm(k);
    for (std::size_t i = 0; i < truth.size(); ++i) {
      truth[i] = 1 + int(rng.below(k));
      pred[i] = 1 + int(rng.below(k));
    }
    std::iota(perm.begin(), perm.end(), 1);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    std::vector<int> pt(truth.size()), pp(pred.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
      pt[i] = perm[truth[i] - 1];
      pp[i] = perm[pred[i] - 1];
    }
    const MetricsReport a = compute_metrics(pred, truth, k), b = compute_metrics(pp, pt, k);
    CHECK(*a.accuracy == *b.accuracy);
    CHECK(*a.macro_precision == doctest::Approx(*b.macro_precision).epsilon(1e-12));
    CHECK(*a.macro_recall == doctest::Approx(*b.macro_recall).epsilon(1e-12));
  }
}

TEST_CASE("online prediction is causal") {
  PreparedVideo v = tiny_videos(1, 1)[0];
  for (Variant variant : {Variant::kTempCoNet, Variant::kNaive}) {
    Network net = variant == Variant::kNaive ? build_naive_lwfnet(ArchConfig::desk(), 3, 2)
                                             : build_tempconet(ArchConfig::desk(), 3, 2);
    const OnlinePrediction base = predict_phases_online(net, v, 5);
    PreparedVideo changed = v;
    const std::size_t cut = 9, per = v.frames.size() / v.size();
    Rng rng(3);
    for (std::size_t i = cut * per; i < changed.frames.size(); ++i) {
      changed.frames[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
    }
    const OnlinePrediction after = predict_phases_online(net, changed, 5);
    const std::size_t k = 3;
    for (std::size_t i = 0; i < cut * k; ++i) CHECK(after.logits[i] == base.logits[i]);
    bool suffix_moved = false;
    for (std::size_t i = cut * k; i < v.size() * k; ++i) suffix_moved |= after.logits[i] != base.logits[i];
    CHECK(suffix_moved);
  }
}

TEST_CASE("online prediction: chunk size does not change the logits") {
  const PreparedVideo v = tiny_videos(1, 2)[0];
  Network net = build_tempconet(ArchConfig::desk(), 3, 5);
  const OnlinePrediction one = predict_phases_online(net, v, 1);
  const OnlinePrediction all = predict_phases_online(net, v, 256);
  double worst = 0;
  for (std::size_t i = 0; i < one.logits.size(); ++i) worst = std::max(worst, double(std::abs(one.logits[i] - all.logits[i])));
  CHECK(worst < 1e-5);
  CHECK(one.labels == all.labels);
  for (float h : net.hidden_state().data()) CHECK(h == 0.0f);
}

TEST_CASE("online prediction rejects the order net and wrong resolutions") {
  const PreparedVideo v = tiny_videos(1, 3)[0];
  Network order = build_tcl_net(ArchConfig::desk(), 1);
  CHECK_THROWS_AS(predict_phases_online(order, v), ConfigError);
  ArchConfig other = ArchConfig::desk();
  other.input_height = 48;
  other.input_width = 64;
  Network big = build_tempconet(other, 3, 1);
  CHECK_THROWS_AS(predict_phases_online(big, v), InvalidShapeError);
}

TEST_CASE("aggregate: mean and sample std") {
  const AggregateStat a = aggregate({0.5, 0.7, std::nullopt, 0.9});
  CHECK(a.count == 3);
  CHECK(*a.mean == doctest::Approx(0.7));
  CHECK(*a.std == doctest::Approx(0.2));
  const AggregateStat one = aggregate({0.4});
  CHECK(*one.mean == 0.4);
  CHECK_FALSE(one.std);
  CHECK_FALSE(aggregate({std::nullopt}).mean);
}

TEST_CASE("loso: one fold per video, aggregate recomputed independently") {
  const auto videos = tiny_videos(3, 4);
  const LosoSummary s = run_loso(videos, 3, quick_loso(Variant::kTempCoNet));
  REQUIRE(s.folds.size() == 3);
  double sum = 0;
  for (const FoldResult& f : s.folds) {
    CHECK(f.curve.size() == 2);
    CHECK(f.log.records.size() == 2);
    CHECK(f.predicted.size() == 16);
    sum += *f.report.accuracy;
  }
  const double mean = sum / 3;
  double ss = 0;
  for (const FoldResult& f : s.folds) ss += (*f.report.accuracy - mean) * (*f.report.accuracy - mean);
  CHECK(std::abs(*s.accuracy.mean - mean) < 1e-12);
  CHECK(std::abs(*s.accuracy.std - std::sqrt(ss / 2)) < 1e-12);
  CHECK(s.folds[0].held_out == "vid000");
  CHECK(s.folds[2].held_out == "vid002");
}

TEST_CASE("loso: video order and thread count do not change fold reports") {
  auto videos = tiny_videos(3, 5);
  LosoOptions opts = quick_loso(Variant::kNaive);
  const LosoSummary a = run_loso(videos, 3, opts);
  std::reverse(videos.begin(), videos.end());
  opts.threads = 2;
  const LosoSummary b = run_loso(videos, 3, opts);
  for (std::size_t i = 0; i < a.folds.size(); ++i) {
    CHECK(a.folds[i].held_out == b.folds[i].held_out);
    CHECK(a.folds[i].predicted == b.folds[i].predicted);
    CHECK(a.folds[i].curve == b.folds[i].curve);
    CHECK(a.folds[i].log.to_csv() == b.folds[i].log.to_csv());
  }
  CHECK(folds_csv(a) == folds_csv(b));
}

TEST_CASE("loso: protocol errors") {
  const auto videos = tiny_videos(2, 6);
  CHECK_THROWS_AS(run_loso({videos[0]}, 3, quick_loso(Variant::kNaive)), ProtocolError);
  CHECK_THROWS_AS(run_loso({videos[0], videos[0]}, 3, quick_loso(Variant::kNaive)), ProtocolError);
}

TEST_CASE("loso: pretrained transfer is applied to every fold") {
  const auto videos = tiny_videos(2, 7);
  LosoOptions opts = quick_loso(Variant::kTempCoNet);
  opts.train.epochs = 0;
  opts.track_curve = false;
  opts.pretrained = make_checkpoint(build_tcl_net(ArchConfig::desk(), 99));
  const LosoSummary s = run_loso(videos, 3, opts);
  CHECK(s.folds[0].curve.empty());
  // With zero epochs each fold predicts with the transferred initial network.
  Network expected = build_tempconet(ArchConfig::desk(), 3, opts.init_seed);
  transfer_pretrained(*opts.pretrained, expected);
  Network plain = build_tempconet(ArchConfig::desk(), 3, opts.init_seed);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(s.folds[i].predicted == predict_phases_online(expected, videos[i]).labels);
  }
  CHECK(predict_phases_online(expected, videos[0]).logits.data()[0] !=
        predict_phases_online(plain, videos[0]).logits.data()[0]);
}

TEST_CASE("reports: csv layout, NA and prediction round trip") {
  const auto videos = tiny_videos(2, 8);
  LosoOptions opts = quick_loso(Variant::kNaive);
  opts.train.epochs = 1;
  const LosoSummary s = run_loso(videos, 3, opts);
  CHECK(folds_csv(s).rfind("video_id,precision,recall,accuracy\nvid000,", 0) == 0);
  CHECK(summary_csv(s, "naive").rfind(
            "method,precision,precision_std,recall,recall_std,accuracy,accuracy_std,folds\nnaive,", 0) == 0);
  CHECK(summary_csv(s, "naive").find(",2\n") != std::string::npos);
  CHECK(curves_csv(s).find("vid001,0,") != std::string::npos);
  const std::string fold = fold_csv(s.folds[0].report);
  CHECK(fold.find("vid000,3,") != std::string::npos);
  CHECK(fold.find("vid000,macro," + format_metric(s.folds[0].report.macro_precision)) != std::string::npos);
  CHECK(format_metric(std::nullopt) == "NA");
  CHECK(format_metric(0.25) == "0.250000");

  const auto rows = parse_predictions_csv(predictions_csv(s));
  REQUIRE(rows.size() == 32);
  CHECK(rows[0].video_id == "vid000");
  CHECK(rows[17].frame == videos[1].indices[1]);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(rows[i].truth == s.folds[0].truth[i]);
    CHECK(rows[i].predicted == s.folds[0].predicted[i]);
  }
  CHECK_THROWS_AS(parse_predictions_csv("vid,1,2\n"), IngestionError);
  CHECK_THROWS_AS(parse_predictions_csv("vid,1,x,2\n"), IngestionError);
}
