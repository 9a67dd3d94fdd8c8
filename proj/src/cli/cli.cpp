#include "tcl/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "tcl/error.hpp"
#include "tcl/evaluator.hpp"
#include "tcl/gradcheck.hpp"
#include "tcl/net_gradcheck.hpp"

namespace tcl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kCommands = {"synth", "pretrain", "finetune", "loso", "evaluate", "gradcheck"};

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

void read_seed(const json& j, const char* key, std::optional<std::uint64_t>& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  std::uint64_t v = 0;
  read(j, key, v, "seeds");
  out = v;
}

json optional_json(const std::optional<std::uint64_t>& v) { return v ? json(*v) : json(nullptr); }

ArchConfig preset(const std::string& name) {
  if (name == "desk") return ArchConfig::desk();
  if (name == "full") return ArchConfig{};
  throw ConfigError("arch.preset must be desk or full, got '" + name + "'");
}

Task task_for(const std::string& command) { return command == "pretrain" ? Task::kPretrain : Task::kFinetune; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out) throw Error("write failed for " + p.string());
}

}  // namespace

// ------------------------------------------------------------------ config

std::uint64_t RunConfig::resolved_data_seed() const { return data_seed.value_or(derive_seed(seed, "data")); }
std::uint64_t RunConfig::resolved_init_seed() const { return init_seed.value_or(derive_seed(seed, "init")); }
std::uint64_t RunConfig::resolved_train_seed() const { return train_seed.value_or(derive_seed(seed, "train")); }

json RunConfig::to_json() const {
  json arch_j = arch.to_json();
  arch_j["preset"] = arch_preset;
  json train_j = train.to_json();
  train_j.erase("task");
  train_j.erase("seed");
  return {
      {"command", command},
      {"out", out_dir},
      {"threads", threads},
      {"seed", seed},
      {"seeds", {{"data", optional_json(data_seed)}, {"init", optional_json(init_seed)}, {"train", optional_json(train_seed)}}},
      {"arch", arch_j},
      {"train", train_j},
      {"data", {{"manifest", manifest}, {"filter_threshold", filter_threshold ? json(*filter_threshold) : json(nullptr)}}},
      {"synth",
       {{"videos", synth_videos},
        {"frames", synth.n_frames},
        {"phases", synth.n_phases},
        {"height", synth.height},
        {"width", synth.width},
        {"ambiguity", synth.ambiguity},
        {"onset_frames", synth.onset_frames},
        {"noise_sigma", synth.noise_sigma},
        {"brightness_jitter", synth.brightness_jitter}}},
      {"checkpointing", {{"resume", resume}, {"every", checkpoint_every}}},
      {"phase_net", {{"net", net}, {"pretrained", pretrained}, {"transfer_multiplier", transfer_multiplier}}},
      {"evaluate", {{"predictions", predictions}, {"checkpoint", checkpoint}, {"phases", phases}}},
      {"gradcheck", {{"inject_fault", inject_fault}}},
  };
}

RunConfig RunConfig::from_json(const json& j, const std::string& command) {
  if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end()) {
    throw ConfigError("unknown command '" + command + "'");
  }
  reject_unknown(j, {"command", "out", "threads", "seed", "seeds", "arch", "train", "data", "synth",
                     "checkpointing", "phase_net", "evaluate", "gradcheck"},
                 "config");
  RunConfig c;
  c.command = command;
  if (j.contains("command") && j.at("command") != command) {
    throw ConfigError("config file is for '" + j.at("command").dump() + "', not '" + command + "'");
  }
  read(j, "out", c.out_dir, "config");
  read(j, "threads", c.threads, "config");
  read(j, "seed", c.seed, "config");
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    reject_unknown(s, {"data", "init", "train"}, "seeds");
    read_seed(s, "data", c.data_seed);
    read_seed(s, "init", c.init_seed);
    read_seed(s, "train", c.train_seed);
  }

  json arch_j = json::object();
  if (j.contains("arch")) {
    arch_j = j.at("arch");
    if (!arch_j.is_object()) throw ConfigError("arch: expected an object");
    read(arch_j, "preset", c.arch_preset, "arch");
    arch_j.erase("preset");
  }
  json merged = preset(c.arch_preset).to_json();
  merged.update(arch_j);
  c.arch = ArchConfig::from_json(merged);
  c.arch.validate();

  json train_j = j.value("train", json::object());
  if (train_j.is_object()) {
    if (train_j.contains("task")) throw ConfigError("train.task is set by the command");
    if (train_j.contains("seed")) throw ConfigError("train.seed: use seeds.train instead");
  }
  c.train = TrainConfig::from_json(train_j, task_for(command));

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"manifest", "filter_threshold"}, "data");
    read(d, "manifest", c.manifest, "data");
    if (d.contains("filter_threshold") && !d.at("filter_threshold").is_null()) {
      double t = 0;
      read(d, "filter_threshold", t, "data");
      c.filter_threshold = t;
    }
  }
  if (j.contains("synth")) {
    const json& s = j.at("synth");
    reject_unknown(s, {"videos", "frames", "phases", "height", "width", "ambiguity", "onset_frames", "noise_sigma",
                       "brightness_jitter"},
                   "synth");
    read(s, "videos", c.synth_videos, "synth");
    read(s, "frames", c.synth.n_frames, "synth");
    read(s, "phases", c.synth.n_phases, "synth");
    read(s, "height", c.synth.height, "synth");
    read(s, "width", c.synth.width, "synth");
    read(s, "ambiguity", c.synth.ambiguity, "synth");
    read(s, "onset_frames", c.synth.onset_frames, "synth");
    read(s, "noise_sigma", c.synth.noise_sigma, "synth");
    read(s, "brightness_jitter", c.synth.brightness_jitter, "synth");
  }
  if (j.contains("checkpointing")) {
    const json& k = j.at("checkpointing");
    reject_unknown(k, {"resume", "every"}, "checkpointing");
    read(k, "resume", c.resume, "checkpointing");
    read(k, "every", c.checkpoint_every, "checkpointing");
  }
  if (j.contains("phase_net")) {
    const json& p = j.at("phase_net");
    reject_unknown(p, {"net", "pretrained", "transfer_multiplier"}, "phase_net");
    read(p, "net", c.net, "phase_net");
    read(p, "pretrained", c.pretrained, "phase_net");
    read(p, "transfer_multiplier", c.transfer_multiplier, "phase_net");
  }
  if (j.contains("evaluate")) {
    const json& e = j.at("evaluate");
    reject_unknown(e, {"predictions", "checkpoint", "phases"}, "evaluate");
    read(e, "predictions", c.predictions, "evaluate");
    read(e, "checkpoint", c.checkpoint, "evaluate");
    read(e, "phases", c.phases, "evaluate");
  }
  if (j.contains("gradcheck")) {
    const json& g = j.at("gradcheck");
    reject_unknown(g, {"inject_fault"}, "gradcheck");
    read(g, "inject_fault", c.inject_fault, "gradcheck");
  }

  if (c.threads < 1) throw ConfigError("threads must be >= 1");
  if (c.synth_videos < 1) throw ConfigError("synth.videos must be >= 1");
  c.synth.validate();
  if (c.checkpoint_every < 1) throw ConfigError("checkpointing.every must be >= 1");
  variant_from_string(c.net);
  if (!(c.transfer_multiplier >= 0.0)) throw ConfigError("phase_net.transfer_multiplier must be >= 0");
  if (c.filter_threshold && !(*c.filter_threshold >= 0.0)) throw ConfigError("data.filter_threshold must be >= 0");
  if (c.phases < 0) throw ConfigError("evaluate.phases must be >= 0");
  c.train.seed = c.resolved_train_seed();
  return c;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DivergedError*>(&e)) return kExitDiverged;
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  return kExitFailure;
}

// ---------------------------------------------------------------- commands

namespace {

struct Context {
  const RunConfig& cfg;
  std::ostream& out;
  fs::path dir;  // empty when the command writes nowhere
};

void prepare_output(Context& ctx, bool force, bool required) {
  if (ctx.cfg.out_dir.empty()) {
    if (required) throw ConfigError(ctx.cfg.command + " needs an output directory (--out)");
    return;
  }
  ctx.dir = ctx.cfg.out_dir;
  std::error_code ec;
  if (fs::exists(ctx.dir) && !fs::is_directory(ctx.dir)) {
    throw ConfigError("output path " + ctx.dir.string() + " exists and is not a directory");
  }
  const bool non_empty = fs::exists(ctx.dir) && !fs::is_empty(ctx.dir);
  if (non_empty && !force && ctx.cfg.resume.empty()) {
    throw ConfigError("output directory " + ctx.dir.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(ctx.dir, ec);
  if (ec) throw ConfigError("cannot create " + ctx.dir.string() + ": " + ec.message());
  write_file(ctx.dir / "config.json", ctx.cfg.to_json().dump(2) + "\n");
}

VideoDataset load_manifest(const RunConfig& c) {
  if (c.manifest.empty()) throw ConfigError(c.command + " needs a manifest (--manifest)");
  return ingest_frames(c.manifest);
}

// Checkpoint and network disagree: name the layer and show both fingerprints.
[[noreturn]] void rethrow_incompatible(const IncompatibleCheckpointError& e, const Checkpoint& ckpt,
                                       const Network& net) {
  throw IncompatibleCheckpointError(std::string(e.what()) + "\n  checkpoint: " + ckpt.fingerprint() +
                                        "\n  expected:   " + make_checkpoint(net).fingerprint(),
                                    e.layer());
}

void check_resume_target(const Checkpoint& ckpt, const Network& fresh) {
  if (ckpt.kind != fresh.kind() || ckpt.n_phases != fresh.n_phases() || !(ckpt.arch == fresh.arch())) {
    const std::string layer = ckpt.kind != fresh.kind() ? "kind" : ckpt.n_phases != fresh.n_phases() ? "cls" : "arch";
    rethrow_incompatible(IncompatibleCheckpointError("resume checkpoint does not match the configured network", layer),
                         ckpt, fresh);
  }
}

// Opens log.csv for appending. A resumed run keeps the rows before its epoch.
std::ofstream open_log(const fs::path& path, std::optional<std::uint64_t> resume_epoch) {
  std::vector<std::string> kept;
  if (resume_epoch && fs::exists(path)) {
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) < *resume_epoch) kept.push_back(line);
    }
  }
  std::ofstream log(path, std::ios::trunc);
  if (!log) throw Error("cannot write " + path.string());
  log << TrainLog::kHeader << "\n";
  for (const std::string& l : kept) log << l << "\n";
  log.flush();
  return log;
}

int progress_stride(int epochs) { return std::max(1, epochs / 20); }

EpochHook logging_hook(Context& ctx, std::ofstream& log, const fs::path& ckpt_path, int epochs) {
  return [&ctx, &log, ckpt_path, epochs](const EpochRecord& r, Network& net, const OptimizerState& s) {
    log << TrainLog::csv_line(r) << "\n";
    log.flush();
    if ((r.epoch + 1) % ctx.cfg.checkpoint_every == 0 || r.epoch + 1 == epochs) {
      save_checkpoint(make_checkpoint(net, std::uint64_t(s.epoch), s.lr, s.velocity), ckpt_path);
    }
    if ((r.epoch + 1) % progress_stride(epochs) == 0 || r.epoch + 1 == epochs) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "epoch %d  lr %.6g  loss %.5f  accuracy %.4f\n", r.epoch, r.lr, r.loss,
                    r.accuracy);
      ctx.out << buf << std::flush;
    }
    return true;
  };
}

template <typename Fn>
TrainResult guard_divergence(Context& ctx, Network& net, Fn&& train) {
  try {
    return train();
  } catch (const DivergedError& e) {
    // The trainer rolled the parameters back to the start of the failing epoch.
    const fs::path p = ctx.dir / "checkpoint.last_good.tcl";
    save_checkpoint(make_checkpoint(net, std::uint64_t(e.epoch()), 0.0), p);
    ctx.out << "diverged; last good parameters written to " << p.string() << "\n";
    throw;
  }
}

int cmd_synth(Context& ctx) {
  const RunConfig& c = ctx.cfg;
  const VideoDataset ds = generate_synthetic_dataset(c.resolved_data_seed(), c.synth_videos, c.synth);
  export_dataset(ds, ctx.dir);
  ctx.out << "synth: " << ds.videos.size() << " videos, " << ds.frame_count() << " frames, " << c.synth.n_phases
          << " phases, ambiguity " << c.synth.ambiguity << " -> " << (ctx.dir / "manifest.txt").string() << "\n";
  return kExitOk;
}

int cmd_pretrain(Context& ctx) {
  const RunConfig& c = ctx.cfg;
  VideoDataset ds = load_manifest(c);
  if (ds.videos.empty()) throw ManifestError("manifest lists no videos");
  std::size_t raw = ds.frame_count();
  const Tensor& first = ds.videos.begin()->second.at(0).pixels;
  const double threshold =
      c.filter_threshold.value_or(scaled_filter_threshold(int(first.shape()[1]), int(first.shape()[2])));
  if (threshold > 0) {
    for (auto& [id, frames] : ds.videos) frames = filter_static_frames(frames, threshold);
  }

  Network net = build_tcl_net(c.arch, c.resolved_init_seed());
  std::optional<Checkpoint> resume;
  if (!c.resume.empty()) {
    resume = load_checkpoint(c.resume);
    check_resume_target(*resume, net);
    net = network_from_checkpoint(*resume);
  }
  char header[256];
  std::snprintf(header, sizeof(header),
                "pretrain: lr %g momentum %g epochs %d batch %d pairs/epoch %d videos %zu frames %zu (of %zu, "
                "threshold %g)\n",
                c.train.base_lr, c.train.momentum, c.train.epochs, c.train.batch_size, 6 * c.train.batch_size,
                ds.videos.size(), ds.frame_count(), raw, threshold);
  ctx.out << header;
  if (resume) ctx.out << "resuming at epoch " << resume->epoch << "\n";

  std::ofstream log = open_log(ctx.dir / "log.csv", resume ? std::optional(resume->epoch) : std::nullopt);
  const fs::path ckpt = ctx.dir / "checkpoint.tcl";
  const EpochHook hook = logging_hook(ctx, log, ckpt, c.train.epochs);
  const TrainResult r = guard_divergence(ctx, net, [&] { return pretrain(c.train, ds, net, resume, hook); });
  save_checkpoint(make_checkpoint(net, std::uint64_t(r.state.epoch), r.state.lr, r.state.velocity), ckpt);
  ctx.out << "checkpoint: " << ckpt.string() << "\n";
  return kExitOk;
}

Network build_phase_net(const RunConfig& c, int n_phases) {
  return variant_from_string(c.net) == Variant::kNaive ? build_naive_lwfnet(c.arch, n_phases, c.resolved_init_seed())
                                                       : build_tempconet(c.arch, n_phases, c.resolved_init_seed());
}

std::optional<Checkpoint> load_pretrained(const RunConfig& c, const Network& target) {
  if (c.pretrained.empty()) return std::nullopt;
  Checkpoint ckpt = load_checkpoint(c.pretrained);
  if (ckpt.kind != NetKind::kTcl) {
    rethrow_incompatible(IncompatibleCheckpointError("--pretrained expects an order-network checkpoint", "kind"), ckpt,
                         build_tcl_net(c.arch, 0));
  }
  Network probe = target.clone();
  try {
    transfer_pretrained(ckpt, probe, c.transfer_multiplier);
  } catch (const IncompatibleCheckpointError& e) {
    rethrow_incompatible(e, ckpt, build_tcl_net(c.arch, 0));
  }
  return ckpt;
}

int labeled_phase_count(const VideoDataset& ds) {
  ds.validate();
  if (!ds.phase_set) throw DataError("the manifest provides no phase labels");
  for (const auto& [id, frames] : ds.videos) {
    for (const FrameRecord& f : frames) {
      if (!f.phase_label) throw DataError("video " + id + " frame " + std::to_string(f.index) + " has no label");
    }
  }
  return ds.phase_set->n_phases;
}

int cmd_finetune(Context& ctx) {
  const RunConfig& c = ctx.cfg;
  const VideoDataset ds = load_manifest(c);
  const int n_phases = labeled_phase_count(ds);
  const std::vector<PreparedVideo> videos = prepare_dataset(ds, c.arch.input_height, c.arch.input_width);

  Network net = build_phase_net(c, n_phases);
  std::optional<Checkpoint> resume;
  if (!c.resume.empty()) {
    resume = load_checkpoint(c.resume);
    check_resume_target(*resume, net);
    net = network_from_checkpoint(*resume);
  } else if (const auto pre = load_pretrained(c, net)) {
    transfer_pretrained(*pre, net, c.transfer_multiplier);
  }
  ctx.out << "finetune: net " << c.net << (c.pretrained.empty() ? "" : " (pretrained)") << " lr " << c.train.base_lr
          << " momentum " << c.train.momentum << " decay " << c.train.lr_decay_alpha << " epochs " << c.train.epochs
          << " batch " << c.train.batch_size << " videos " << videos.size() << " phases " << n_phases << "\n";

  std::ofstream log = open_log(ctx.dir / "log.csv", resume ? std::optional(resume->epoch) : std::nullopt);
  const fs::path ckpt = ctx.dir / "checkpoint.tcl";
  const EpochHook hook = logging_hook(ctx, log, ckpt, c.train.epochs);
  const TrainResult r = guard_divergence(ctx, net, [&] { return finetune(c.train, videos, net, resume, hook); });
  save_checkpoint(make_checkpoint(net, std::uint64_t(r.state.epoch), r.state.lr, r.state.velocity), ckpt);
  ctx.out << "checkpoint: " << ckpt.string() << "\n";
  return kExitOk;
}

std::string method_label(const RunConfig& c) { return c.net + (c.pretrained.empty() ? "" : "+pretrained"); }

void print_summary(std::ostream& out, const std::string& label, const LosoSummary& s) {
  out << label << ": precision " << format_metric(s.precision.mean) << " +- " << format_metric(s.precision.std)
      << "  recall " << format_metric(s.recall.mean) << " +- " << format_metric(s.recall.std) << "  accuracy "
      << format_metric(s.accuracy.mean) << " +- " << format_metric(s.accuracy.std) << "  (" << s.folds.size()
      << " videos)\n";
}

int cmd_loso(Context& ctx) {
  const RunConfig& c = ctx.cfg;
  const VideoDataset ds = load_manifest(c);
  const int n_phases = labeled_phase_count(ds);
  const std::vector<PreparedVideo> videos = prepare_dataset(ds, c.arch.input_height, c.arch.input_width);

  LosoOptions opts;
  opts.variant = variant_from_string(c.net);
  opts.arch = c.arch;
  opts.train = c.train;
  opts.init_seed = c.resolved_init_seed();
  opts.threads = c.threads;
  opts.transfer_multiplier = c.transfer_multiplier;
  opts.pretrained = load_pretrained(c, build_phase_net(c, n_phases));
  opts.on_fold = [&](const FoldResult& f) {
    ctx.out << "fold " << f.held_out << ": accuracy " << format_metric(f.report.accuracy) << "\n" << std::flush;
  };
  ctx.out << "loso: net " << method_label(c) << " videos " << videos.size() << " epochs " << c.train.epochs
          << " lr " << c.train.base_lr << " threads " << c.threads << "\n";

  const LosoSummary s = run_loso(videos, n_phases, opts);
  fs::create_directories(ctx.dir / "folds");
  fs::create_directories(ctx.dir / "logs");
  for (const FoldResult& f : s.folds) {
    write_file(ctx.dir / "folds" / (f.held_out + ".csv"), fold_csv(f.report));
    write_file(ctx.dir / "logs" / (f.held_out + ".csv"), f.log.to_csv());
  }
  write_file(ctx.dir / "curves.csv", curves_csv(s));
  write_file(ctx.dir / "predictions.csv", predictions_csv(s));
  write_file(ctx.dir / "summary.csv", summary_csv(s, method_label(c)));
  print_summary(ctx.out, method_label(c), s);
  return kExitOk;
}

int cmd_evaluate(Context& ctx) {
  const RunConfig& c = ctx.cfg;
  LosoSummary s;
  int n_phases = c.phases;
  if (!c.predictions.empty()) {
    const auto rows = parse_predictions_csv(read_file(c.predictions));
    if (rows.empty()) throw IngestionError("no predictions in " + c.predictions);
    std::map<std::string, FoldResult> by_video;
    for (const PredictionRow& r : rows) {
      FoldResult& f = by_video[r.video_id];
      f.held_out = r.video_id;
      f.frames.push_back(r.frame);
      f.truth.push_back(r.truth);
      f.predicted.push_back(r.predicted);
      if (c.phases == 0) n_phases = std::max({n_phases, r.truth, r.predicted});
    }
    for (auto& [id, f] : by_video) s.folds.push_back(std::move(f));
  } else {
    if (c.checkpoint.empty()) throw ConfigError("evaluate needs --predictions or --checkpoint with --manifest");
    const Checkpoint ckpt = load_checkpoint(c.checkpoint);
    Network net = network_from_checkpoint(ckpt);
    if (net.kind() == NetKind::kTcl) throw ConfigError("evaluate needs a phase-network checkpoint");
    const VideoDataset ds = load_manifest(c);
    if (labeled_phase_count(ds) != net.n_phases()) {
      throw IncompatibleCheckpointError("checkpoint predicts " + std::to_string(net.n_phases()) +
                                            " phases but the data has " + std::to_string(ds.phase_set->n_phases),
                                        "cls");
    }
    n_phases = net.n_phases();
    for (const PreparedVideo& v : prepare_dataset(ds, net.arch().input_height, net.arch().input_width)) {
      FoldResult f;
      f.held_out = v.video_id;
      f.frames = v.indices;
      f.predicted = predict_phases_online(net, v).labels;
      for (int l : v.labels) f.truth.push_back(l + 1);
      s.folds.push_back(std::move(f));
    }
  }
  std::vector<std::optional<double>> p, r, a;
  for (FoldResult& f : s.folds) {
    f.report = compute_metrics(f.predicted, f.truth, n_phases, f.held_out);
    p.push_back(f.report.macro_precision);
    r.push_back(f.report.macro_recall);
    a.push_back(f.report.accuracy);
  }
  s.precision = aggregate(p);
  s.recall = aggregate(r);
  s.accuracy = aggregate(a);
  if (!ctx.dir.empty()) {
    fs::create_directories(ctx.dir / "folds");
    for (const FoldResult& f : s.folds) write_file(ctx.dir / "folds" / (f.held_out + ".csv"), fold_csv(f.report));
    write_file(ctx.dir / "summary.csv", summary_csv(s, "evaluate"));
    if (c.predictions.empty()) write_file(ctx.dir / "predictions.csv", predictions_csv(s));
  }
  ctx.out << folds_csv(s);
  print_summary(ctx.out, "evaluate", s);
  return kExitOk;
}

int cmd_gradcheck(Context& ctx) {
  const RunConfig& c = ctx.cfg;
  std::optional<testing::ScopedBackwardFault> fault;
  if (!c.inject_fault.empty()) {
    const auto names = gradcheck::op_names();
    if (std::find(names.begin(), names.end(), c.inject_fault) == names.end()) {
      throw ConfigError("unknown op '" + c.inject_fault + "' for --inject-fault");
    }
    fault.emplace(c.inject_fault);
    ctx.out << "injecting a sign flip into the backward pass of " << c.inject_fault << "\n";
  }
  std::vector<gradcheck::CheckResult> results = gradcheck::check_all_ops(c.seed ? c.seed : 7);
  for (auto& r : gradcheck::check_networks(c.seed ? c.seed : 11)) results.push_back(std::move(r));
  for (auto& r : gradcheck::check_networks(c.seed ? c.seed : 13, ArchConfig::desk(), gradcheck::kDeskCoordinates,
                                                gradcheck::kDeskEpsilon)) {
    r.name += "_desk";
    results.push_back(std::move(r));
  }

  std::string report = "name,max_relative_error,tolerance,coordinates,kinks,status\n";
  const gradcheck::CheckResult* first_failure = nullptr;
  for (const auto& r : results) {
    char line[200];
    std::snprintf(line, sizeof(line), "%s,%.3e,%.1e,%zu,%zu,%s\n", r.name.c_str(), r.max_relative_error, r.tolerance,
                  r.coordinates, r.kinks, r.passed ? "pass" : "FAIL");
    report += line;
    if (!r.passed && !first_failure) first_failure = &r;
  }
  ctx.out << report;
  if (!ctx.dir.empty()) write_file(ctx.dir / "gradcheck.csv", report);
  if (first_failure) {
    ctx.out << "first failure: " << first_failure->name << " max relative error " << first_failure->max_relative_error
            << " (tolerance " << first_failure->tolerance << ")\n";
    return kExitFailure;
  }
  ctx.out << "all " << results.size() << " checks passed\n";
  return kExitOk;
}

// A flag that, when given, writes its value to a JSON path of the overrides.
struct Flag {
  CLI::Option* option;
  std::function<void(json&)> apply;
};

template <typename T>
void add_flag(CLI::App* app, std::vector<Flag>& flags, const std::string& name, const std::string& pointer,
              const std::string& help) {
  auto value = std::make_shared<T>();
  CLI::Option* opt = app->add_option(name, *value, help);
  flags.push_back({opt, [value, pointer](json& j) { j[json::json_pointer(pointer)] = *value; }});
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Temporal-context pretraining and surgical phase detection"};
  app.require_subcommand(1);
  std::map<std::string, std::vector<Flag>> flags;
  std::string config_path;
  bool force = false;

  auto common = [&](CLI::App* sub) {
    auto& f = flags[sub->get_name()];
    sub->add_option("--config", config_path, "JSON config file; flags override its values");
    sub->add_flag("--force", force, "Write into a non-empty output directory");
    add_flag<std::string>(sub, f, "--out", "/out", "Output directory");
    add_flag<std::uint64_t>(sub, f, "--seed", "/seed", "Root seed");
    add_flag<int>(sub, f, "--threads", "/threads", "Worker threads (LOSO folds)");
  };
  auto arch_flags = [&](CLI::App* sub) {
    auto& f = flags[sub->get_name()];
    add_flag<std::string>(sub, f, "--arch", "/arch/preset", "Architecture preset: desk or full");
    add_flag<int>(sub, f, "--scale-factor", "/arch/scale_factor", "Divide every width by this factor");
  };
  auto train_flags = [&](CLI::App* sub) {
    auto& f = flags[sub->get_name()];
    add_flag<std::string>(sub, f, "--manifest", "/data/manifest", "Dataset manifest");
    add_flag<int>(sub, f, "--epochs", "/train/epochs", "Training epochs");
    add_flag<double>(sub, f, "--lr", "/train/base_lr", "Base learning rate");
    add_flag<double>(sub, f, "--momentum", "/train/momentum", "Nesterov momentum");
    add_flag<int>(sub, f, "--batch-size", "/train/batch_size", "Batch size");
  };
  auto phase_flags = [&](CLI::App* sub) {
    auto& f = flags[sub->get_name()];
    add_flag<std::string>(sub, f, "--net", "/phase_net/net", "Phase network: naive or tempconet");
    add_flag<std::string>(sub, f, "--pretrained", "/phase_net/pretrained", "Order-network checkpoint to transfer");
    add_flag<double>(sub, f, "--decay", "/train/lr_decay_alpha", "Per-epoch learning-rate decay");
    add_flag<double>(sub, f, "--l1", "/train/l1_weight", "L1 penalty weight");
    add_flag<double>(sub, f, "--l2", "/train/l2_weight", "L2 penalty weight");
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic labeled video dataset");
  common(synth);
  {
    auto& f = flags["synth"];
    add_flag<int>(synth, f, "--videos", "/synth/videos", "Number of videos");
    add_flag<int>(synth, f, "--frames", "/synth/frames", "Frames per video");
    add_flag<int>(synth, f, "--phases", "/synth/phases", "Phases per video");
    add_flag<int>(synth, f, "--height", "/synth/height", "Frame height");
    add_flag<int>(synth, f, "--width", "/synth/width", "Frame width");
    add_flag<double>(synth, f, "--ambiguity", "/synth/ambiguity", "0: every frame shows its phase, 1: only onsets");
    add_flag<int>(synth, f, "--onset-frames", "/synth/onset_frames", "Full-strength marker frames per phase");
  }

  CLI::App* pre = app.add_subcommand("pretrain", "Train the order-prediction network");
  common(pre);
  arch_flags(pre);
  train_flags(pre);
  add_flag<double>(pre, flags["pretrain"], "--filter-threshold", "/data/filter_threshold",
                   "Static-frame threshold (0 keeps every frame)");

  CLI::App* fine = app.add_subcommand("finetune", "Train a phase network on all labeled videos");
  common(fine);
  arch_flags(fine);
  train_flags(fine);
  phase_flags(fine);

  CLI::App* loso = app.add_subcommand("loso", "Leave-one-surgery-out evaluation");
  common(loso);
  arch_flags(loso);
  train_flags(loso);
  phase_flags(loso);

  for (CLI::App* sub : {pre, fine}) {
    add_flag<std::string>(sub, flags[sub->get_name()], "--resume", "/checkpointing/resume", "Checkpoint to resume");
    add_flag<int>(sub, flags[sub->get_name()], "--checkpoint-every", "/checkpointing/every",
                  "Epochs between checkpoints");
  }

  CLI::App* eval = app.add_subcommand("evaluate", "Metrics from stored predictions or a checkpoint");
  common(eval);
  {
    auto& f = flags["evaluate"];
    add_flag<std::string>(eval, f, "--predictions", "/evaluate/predictions", "Predictions CSV");
    add_flag<std::string>(eval, f, "--checkpoint", "/evaluate/checkpoint", "Phase-network checkpoint");
    add_flag<std::string>(eval, f, "--manifest", "/data/manifest", "Dataset manifest");
    add_flag<int>(eval, f, "--phases", "/evaluate/phases", "Number of phases (default: largest label)");
  }

  CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and network");
  common(grad);
  add_flag<std::string>(grad, flags["gradcheck"], "--inject-fault", "/gradcheck/inject_fault",
                        "Flip the backward sign of one op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    json j = json::object();
    if (!config_path.empty()) {
      try {
        j = json::parse(read_file(config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError("config " + config_path + ": " + e.what());
      }
      if (!j.is_object()) throw ConfigError("config " + config_path + ": expected a JSON object");
    }
    json overrides = json::object();
    for (const Flag& f : flags[command]) {
      if (f.option->count() > 0) f.apply(overrides);
    }
    j.merge_patch(overrides);
    const RunConfig cfg = RunConfig::from_json(j, command);

    Context ctx{cfg, out, {}};
    const bool needs_dir = command == "synth" || command == "pretrain" || command == "finetune" || command == "loso";
    prepare_output(ctx, force, needs_dir);
    if (command == "synth") return cmd_synth(ctx);
    if (command == "pretrain") return cmd_pretrain(ctx);
    if (command == "finetune") return cmd_finetune(ctx);
    if (command == "loso") return cmd_loso(ctx);
    if (command == "evaluate") return cmd_evaluate(ctx);
    return cmd_gradcheck(ctx);
  } catch (const IncompatibleCheckpointError& e) {
    err << "error: incompatible checkpoint (layer " << e.layer() << "): " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const DivergedError& e) {
    err << "error: " << e.what() << " (parameter " << e.parameter() << ", epoch " << e.epoch() << ")\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace tcl::cli
