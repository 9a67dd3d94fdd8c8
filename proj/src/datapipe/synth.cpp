#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "tcl/datapipe.hpp"
#include "tcl/error.hpp"

namespace tcl {

namespace {

using Rgb = std::array<double, 3>;

constexpr std::array<Rgb, 8> kMarkerPalette = {{{220, 40, 40},
                                                {40, 200, 60},
                                                {50, 70, 230},
                                                {210, 50, 210},
                                                {40, 210, 210},
                                                {240, 140, 20},
                                                {245, 245, 245},
                                                {15, 15, 15}}};
constexpr Rgb kCommonBackground = {140, 140, 140};
constexpr Rgb kDiskColor = {235, 215, 70};

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(h);
  const double f = h - sector, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  Rgb c;
  switch (sector) {
    case 0: c = {v, t, p}; break;
    case 1: c = {q, v, p}; break;
    case 2: c = {p, v, t}; break;
    case 3: c = {p, q, v}; break;
    case 4: c = {t, p, v}; break;
    default: c = {v, p, q}; break;
  }
  for (double& x : c) x *= 255.0;
  return c;
}

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

// Splits n frames into k nonempty contiguous segments with random weights.
std::vector<int> phase_lengths(int n, int k, Rng& rng) {
  std::vector<double> w(k);
  double total = 0;
  for (double& x : w) total += (x = rng.uniform(0.6, 1.4));
  std::vector<int> len(k, 1);
  const int spare = n - k;
  std::vector<std::pair<double, int>> remainders;
  int used = 0;
  for (int p = 0; p < k; ++p) {
    const double share = spare * w[p] / total;
    const int whole = static_cast<int>(share);
    len[p] += whole;
    used += whole;
    remainders.emplace_back(share - whole, p);
  }
  std::sort(remainders.begin(), remainders.end(), std::greater<>());
  for (int i = 0; i < spare - used; ++i) ++len[remainders[i].second];
  return len;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_phases < 2) throw ConfigError("synth: n_phases must be >= 2");
  if (n_frames < n_phases) throw ConfigError("synth: n_frames must be >= n_phases");
  if (height < 4 || width < 4) throw ConfigError("synth: frames must be at least 4x4");
  if (!(ambiguity >= 0.0 && ambiguity <= 1.0)) throw ConfigError("synth: ambiguity must lie in [0, 1]");
  if (onset_frames < 0) throw ConfigError("synth: onset_frames must be >= 0");
  if (!(noise_sigma >= 0.0) || !(brightness_jitter >= 0.0)) {
    throw ConfigError("synth: noise_sigma and brightness_jitter must be >= 0");
  }
}

SyntheticVideo generate_synthetic_video(std::uint64_t seed, const SynthConfig& cfg,
                                        const std::string& video_id) {
  cfg.validate();
  Rng rng(seed);
  const int n = cfg.n_frames, k = cfg.n_phases, h = cfg.height, w = cfg.width;
  const double a = cfg.ambiguity;
  const std::vector<int> lengths = phase_lengths(n, k, rng);
  const double brightness = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);

  const double radius = std::max(1.5, h / 6.0);
  const int marker = std::max(2, h / 6);
  const int margin = std::max(1, h / 12);

  SyntheticVideo video;
  int t = 0;
  for (int p = 0; p < k; ++p) {
    const Rgb& marker_color = kMarkerPalette[p % kMarkerPalette.size()];
    // Marker slots run along the top edge, then the bottom edge.
    const int slot = p % 8;
    const int mx = margin + (slot % 4) * (w - 2 * margin - marker) / 3;
    const int my = slot < 4 ? margin : h - margin - marker;
    for (int j = 0; j < lengths[p]; ++j, ++t) {
      const double u = (p + (j + 0.5) / lengths[p]) / k;
      const Rgb bg = mix(hsv(0.7 * u, 0.55, 0.8), kCommonBackground, a);
      const double cx = (1 - a) * w * (0.15 + 0.7 * u) + a * w * 0.5;
      const double cy = (1 - a) * h * (0.5 + 0.25 * std::sin(2 * std::numbers::pi * u)) + a * h * 0.5;
      const double strength = j < cfg.onset_frames ? 1.0 : 1.0 - a;

      Tensor px({3, std::size_t(h), std::size_t(w)});
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double dist = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
          Rgb c = mix(bg, kDiskColor, std::clamp(radius + 0.5 - dist, 0.0, 1.0));
          if (x >= mx && x < mx + marker && y >= my && y < my + marker) c = mix(c, marker_color, strength);
          for (int ch = 0; ch < 3; ++ch) {
            const double v = c[ch] + brightness + cfg.noise_sigma * rng.normal();
            px[(std::size_t(ch) * h + y) * w + x] = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
          }
        }
      }
      video.frames.push_back({video_id, t, std::move(px), p + 1});
      video.progress.push_back(u);
    }
  }
  return video;
}

VideoDataset generate_synthetic_dataset(std::uint64_t seed, int n_videos, const SynthConfig& cfg,
                                        const std::string& prefix) {
  if (n_videos < 1) throw ConfigError("synth: need at least one video");
  VideoDataset ds;
  ds.phase_set = PhaseLabelSet::numbered(cfg.n_phases);
  for (int i = 0; i < n_videos; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s%03d", prefix.c_str(), i);
    ds.videos[id] = generate_synthetic_video(derive_seed(seed, id), cfg, id).frames;
  }
  return ds;
}

}  // namespace tcl
