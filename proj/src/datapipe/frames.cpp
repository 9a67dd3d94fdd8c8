#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "tcl/datapipe.hpp"
#include "tcl/error.hpp"

namespace tcl {

namespace fs = std::filesystem;

PhaseLabelSet PhaseLabelSet::numbered(int n_phases) {
  PhaseLabelSet s;
  s.n_phases = n_phases;
  for (int p = 1; p <= n_phases; ++p) s.names.push_back("phase" + std::to_string(p));
  return s;
}

std::size_t VideoDataset::frame_count() const {
  std::size_t n = 0;
  for (const auto& [_, frames] : videos) n += frames.size();
  return n;
}

std::vector<std::string> VideoDataset::video_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : videos) ids.push_back(id);
  return ids;
}

void VideoDataset::validate() const {
  if (phase_set && static_cast<int>(phase_set->names.size()) != phase_set->n_phases) {
    throw ManifestError("phase set lists " + std::to_string(phase_set->names.size()) +
                        " names for " + std::to_string(phase_set->n_phases) + " phases");
  }
  for (const auto& [id, frames] : videos) {
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (i > 0 && frames[i].index <= frames[i - 1].index) {
        throw ManifestError("video " + id + ": frame indices not strictly increasing at " +
                            std::to_string(frames[i].index));
      }
      if (frames[i].phase_label) {
        const int p = *frames[i].phase_label;
        if (!phase_set || p < 1 || p > phase_set->n_phases) {
          throw InvalidLabelError("video " + id + " frame " + std::to_string(frames[i].index) +
                                  ": phase " + std::to_string(p) + " outside the phase set");
        }
      }
    }
  }
}

// ---------------------------------------------------------------- PPM

Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open frame " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t.push_back(c);
      }
    }
    return t;
  };
  if (token() != "P6") throw InvalidImageError(path.string() + ": not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw InvalidImageError(path.string() + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0) throw InvalidImageError(path.string() + ": zero-size image");
  if (maxval != 255) throw InvalidImageError(path.string() + ": only maxval 255 is supported");
  std::vector<unsigned char> buf(std::size_t(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw InvalidImageError(path.string() + ": truncated pixel data");
  }
  Tensor t({3, std::size_t(h), std::size_t(w)});
  const std::size_t plane = std::size_t(h) * w;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + i] = buf[i * 3 + c];
  }
  return t;
}

void write_ppm(const Tensor& pixels, const fs::path& path) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    throw InvalidImageError("write_ppm expects 3 x H x W pixels, got " + shape_string(pixels.shape()));
  }
  const std::size_t h = pixels.dim(1), w = pixels.dim(2), plane = h * w;
  std::vector<unsigned char> buf(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(pixels[c * plane + i], 0.0f, 255.0f);
      buf[i * 3 + c] = static_cast<unsigned char>(std::lround(v));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot write frame " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

// ---------------------------------------------------------------- manifest

namespace {

std::vector<std::pair<int, fs::path>> list_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IngestionError("frame directory not found: " + dir.string());
  std::vector<std::pair<int, fs::path>> out;
  std::set<int> seen;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".ppm") continue;
    const std::string stem = entry.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), ::isdigit)) {
      throw ManifestError("frame file name is not an index: " + entry.path().string());
    }
    const int index = std::stoi(stem);
    if (!seen.insert(index).second) {
      throw ManifestError("duplicate frame index " + std::to_string(index) + " in " + dir.string());
    }
    out.emplace_back(index, entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::pair<int, int>> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("annotation file not found: " + path.string());
  std::vector<std::pair<int, int>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw ManifestError(path.string() + ":" + std::to_string(lineno) + ": expected index,phase_id");
    }
    const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
    int index = 0, phase = 0;
    try {
      std::size_t used_a = 0, used_b = 0;
      index = std::stoi(a, &used_a);
      phase = std::stoi(b, &used_b);
      if (used_a != a.size() || used_b != b.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      if (rows.empty() && lineno == 1) continue;  // header
      throw ManifestError(path.string() + ":" + std::to_string(lineno) + ": expected index,phase_id");
    }
    if (!rows.empty() && index <= rows.back().first) {
      throw ManifestError(path.string() + ":" + std::to_string(lineno) +
                          ": indices not strictly increasing");
    }
    rows.emplace_back(index, phase);
  }
  return rows;
}

}  // namespace

VideoDataset ingest_frames(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IngestionError("manifest not found: " + manifest_path.string());
  const fs::path base = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

  VideoDataset ds;
  bool any_labels = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string kind;
    if (!(ss >> kind) || kind[0] == '#') continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(lineno);
    if (kind == "phases") {
      PhaseLabelSet set;
      std::string name;
      while (ss >> name) set.names.push_back(name);
      set.n_phases = static_cast<int>(set.names.size());
      if (set.n_phases < 2) throw ManifestError(where + ": a phase set needs at least 2 names");
      ds.phase_set = set;
    } else if (kind == "video") {
      std::string id, dir, ann, extra;
      if (!(ss >> id >> dir)) throw ManifestError(where + ": expected 'video <id> <frame_dir> [annotations]'");
      ss >> ann;
      if (ss >> extra) throw ManifestError(where + ": unexpected field '" + extra + "'");
      if (ds.videos.count(id)) throw ManifestError(where + ": duplicate video id " + id);
      const auto files = list_frames(resolve(dir));
      std::vector<FrameRecord> frames;
      for (const auto& [index, path] : files) frames.push_back({id, index, read_ppm(path), std::nullopt});
      if (!ann.empty()) {
        const auto rows = read_annotations(resolve(ann));
        if (rows.size() != frames.size()) {
          throw ManifestError(where + ": " + std::to_string(rows.size()) + " annotation rows for " +
                              std::to_string(frames.size()) + " frames");
        }
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (rows[i].first != frames[i].index) {
            throw ManifestError(where + ": annotation index " + std::to_string(rows[i].first) +
                                " does not match frame index " + std::to_string(frames[i].index));
          }
          frames[i].phase_label = rows[i].second;
        }
        any_labels = true;
      }
      ds.videos.emplace(id, std::move(frames));
    } else {
      throw ManifestError(where + ": unknown record '" + kind + "'");
    }
  }
  if (any_labels && !ds.phase_set) {
    int max_label = 0;
    for (const auto& [_, frames] : ds.videos) {
      for (const auto& f : frames) max_label = std::max(max_label, f.phase_label.value_or(0));
    }
    ds.phase_set = PhaseLabelSet::numbered(std::max(2, max_label));
  }
  ds.validate();
  return ds;
}

void export_dataset(const VideoDataset& dataset, const fs::path& dir) {
  dataset.validate();
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw IngestionError("cannot write manifest in " + dir.string());
  if (dataset.phase_set) {
    manifest << "phases";
    for (const auto& n : dataset.phase_set->names) manifest << ' ' << n;
    manifest << '\n';
  }
  for (const auto& [id, frames] : dataset.videos) {
    fs::create_directories(dir / id);
    bool labeled = !frames.empty();
    for (const auto& f : frames) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06d.ppm", f.index);
      write_ppm(f.pixels, dir / id / name);
      labeled = labeled && f.phase_label.has_value();
    }
    manifest << "video " << id << ' ' << id;
    if (labeled) {
      std::ofstream ann(dir / id / "labels.csv", std::ios::trunc);
      ann << "index,phase_id\n";
      for (const auto& f : frames) ann << f.index << ',' << *f.phase_label << '\n';
      manifest << ' ' << id << "/labels.csv";
    }
    manifest << '\n';
  }
}

// ---------------------------------------------------------------- filtering

double scaled_filter_threshold(int height, int width) {
  return kStaticFrameThreshold * std::sqrt(3.0 * height * width / (3.0 * 240 * 320));
}

std::vector<FrameRecord> filter_static_frames(const std::vector<FrameRecord>& frames, double threshold) {
  std::vector<FrameRecord> kept;
  for (const FrameRecord& f : frames) {
    if (kept.empty()) {
      kept.push_back(f);
      continue;
    }
    const Tensor& g = kept.back().pixels;
    if (g.shape() != f.pixels.shape()) {
      throw InvalidImageError("video " + f.video_id + ": frame sizes differ within the video");
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = static_cast<double>(f.pixels[i]) - g[i];
      sq += d * d;
    }
    if (std::sqrt(sq) >= threshold) kept.push_back(f);
  }
  return kept;
}

// ---------------------------------------------------------------- preprocessing

CropBox center_crop_4_3(int height, int width) {
  if (height <= 0 || width <= 0) throw InvalidImageError("zero-size image");
  CropBox box{0, 0, height, width};
  if (std::int64_t(width) * 3 > std::int64_t(height) * 4) {
    box.width = static_cast<int>(std::int64_t(height) * 4 / 3);
    box.left = (width - box.width) / 2;
  } else if (std::int64_t(width) * 3 < std::int64_t(height) * 4) {
    box.height = static_cast<int>(std::int64_t(width) * 3 / 4);
    box.top = (height - box.height) / 2;
  }
  if (box.width <= 0 || box.height <= 0) throw InvalidImageError("image too small to crop to 4:3");
  return box;
}

Tensor preprocess_frame(const Tensor& raw, int height, int width) {
  if (raw.rank() != 3 || raw.dim(0) != 3) {
    throw InvalidImageError("expected 3 x H x W pixels, got " + shape_string(raw.shape()));
  }
  if (raw.dim(1) == 0 || raw.dim(2) == 0) throw InvalidImageError("zero-size image");
  if (height < 1 || width < 1) throw ConfigError("target size must be positive");
  const int in_h = static_cast<int>(raw.dim(1)), in_w = static_cast<int>(raw.dim(2));
  const CropBox box = center_crop_4_3(in_h, in_w);
  Tensor out({3, std::size_t(height), std::size_t(width)});
  const double sy = double(box.height) / height, sx = double(box.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(box.height - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, box.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(box.width - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, box.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto at = [&](int yy, int xx) {
          return double(raw[(std::size_t(c) * in_h + box.top + yy) * in_w + box.left + xx]);
        };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                         wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out[(std::size_t(c) * height + y) * width + x] = static_cast<float>(v / 255.0 - 0.5);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- sampling

std::vector<InequationSample> sample_inequations(const VideoDataset& dataset, int n_ops, Rng& rng) {
  if (n_ops < 0) throw ConfigError("n_ops must be nonnegative");
  if (dataset.videos.empty()) throw SamplingError("cannot sample from an empty dataset");
  std::vector<const std::pair<const std::string, std::vector<FrameRecord>>*> videos;
  for (const auto& entry : dataset.videos) {
    if (entry.second.size() < 3) {
      throw SamplingError("video " + entry.first + " has " + std::to_string(entry.second.size()) +
                          " frames; sampling needs at least 3");
    }
    videos.push_back(&entry);
  }
  std::vector<InequationSample> out;
  out.reserve(std::size_t(n_ops) * 6);
  for (int op = 0; op < n_ops; ++op) {
    const auto& [id, frames] = *videos[rng.below(videos.size())];
    std::size_t p[3];
    p[0] = rng.below(frames.size());
    do {
      p[1] = rng.below(frames.size());
    } while (p[1] == p[0]);
    do {
      p[2] = rng.below(frames.size());
    } while (p[2] == p[0] || p[2] == p[1]);
    std::sort(p, p + 3, [&](std::size_t a, std::size_t b) { return frames[a].index < frames[b].index; });
    const std::size_t i1 = p[0], i2 = p[1], i3 = p[2];
    for (auto [a, b, label] : {std::tuple{i1, i2, 0}, {i1, i3, 0}, {i2, i3, 0},
                               {i2, i1, 1}, {i3, i1, 1}, {i3, i2, 1}}) {
      out.push_back({id, a, b, label});
    }
  }
  return out;
}

// ---------------------------------------------------------------- batching

std::vector<std::pair<std::size_t, std::size_t>> batch_video_sequences(std::size_t n_frames,
                                                                       std::size_t batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t begin = 0; begin < n_frames; begin += batch_size) {
    chunks.emplace_back(begin, std::min(batch_size, n_frames - begin));
  }
  return chunks;
}

Tensor PreparedVideo::slice(std::size_t begin, std::size_t count) const {
  Shape s = frames.shape();
  if (begin + count > s[0]) throw InvalidShapeError("slice past the end of video " + video_id);
  const std::size_t per = frames.size() / s[0];
  s[0] = count;
  Tensor out(s);
  std::copy(frames.raw() + begin * per, frames.raw() + (begin + count) * per, out.raw());
  return out;
}

Tensor PreparedVideo::gather(const std::vector<std::size_t>& rows) const {
  Shape s = frames.shape();
  const std::size_t per = frames.size() / s[0];
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw InvalidShapeError("frame row out of range in video " + video_id);
    std::copy(frames.raw() + rows[i] * per, frames.raw() + (rows[i] + 1) * per, out.raw() + i * per);
  }
  return out;
}

PreparedVideo prepare_video(const std::vector<FrameRecord>& frames, int height, int width) {
  PreparedVideo v;
  v.video_id = frames.empty() ? std::string() : frames.front().video_id;
  v.frames = Tensor({frames.size(), 3, std::size_t(height), std::size_t(width)});
  const std::size_t per = 3 * std::size_t(height) * width;
  bool labeled = !frames.empty();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Tensor p = preprocess_frame(frames[i].pixels, height, width);
    std::copy(p.raw(), p.raw() + per, v.frames.raw() + i * per);
    v.indices.push_back(frames[i].index);
    labeled = labeled && frames[i].phase_label.has_value();
  }
  if (labeled) {
    for (const auto& f : frames) v.labels.push_back(*f.phase_label - 1);
  }
  return v;
}

std::vector<PreparedVideo> prepare_dataset(const VideoDataset& dataset, int height, int width) {
  std::vector<PreparedVideo> out;
  for (const auto& [id, frames] : dataset.videos) {
    out.push_back(prepare_video(frames, height, width));
    out.back().video_id = id;
  }
  return out;
}

}  // namespace tcl
