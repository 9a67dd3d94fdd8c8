#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tcl/rng.hpp"
#include "tcl/tensor.hpp"

namespace tcl {

// One extracted frame. Pixels are raw 0..255 values, 3 x H x W.
struct FrameRecord {
  std::string video_id;
  int index = 0;                    // seconds since video start
  Tensor pixels;
  std::optional<int> phase_label;  // 1-based
};

struct PhaseLabelSet {
  int n_phases = 0;
  std::vector<std::string> names;

  static PhaseLabelSet numbered(int n_phases);
};

struct VideoDataset {
  std::map<std::string, std::vector<FrameRecord>> videos;
  std::optional<PhaseLabelSet> phase_set;

  std::size_t frame_count() const;
  std::vector<std::string> video_ids() const;
  // Throws InvalidLabelError/ManifestError if an invariant is broken.
  void validate() const;
};

// Ordered frame pair from one video. label 0: a is earlier, 1: b is earlier.
struct InequationSample {
  std::string video_id;
  std::size_t frame_a = 0;  // positions in the video's frame list
  std::size_t frame_b = 0;
  int label = 0;
};

// Binary PPM (P6, maxval 255).
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const Tensor& pixels, const std::filesystem::path& path);

// Manifest lines (blank lines and '#' comments ignored):
//   phases <name_1> ... <name_n>
//   video <id> <frame_dir> [<annotation_csv>]
// Frame files are <frame_dir>/<index>.ppm; annotation rows are index,phase_id
// with an optional header. Relative paths resolve against the manifest's
// directory.
VideoDataset ingest_frames(const std::filesystem::path& manifest_path);

// Writes the dataset in the layout ingest_frames reads.
void export_dataset(const VideoDataset& dataset, const std::filesystem::path& dir);

inline constexpr double kStaticFrameThreshold = 8000.0;

// The 8000 threshold is defined for 320x240 RGB frames. The norm grows with
// the square root of the pixel count, so smaller frames use a scaled value.
double scaled_filter_threshold(int height, int width);

// Keeps the first frame and every frame whose Euclidean pixel distance to the
// last kept frame is at least `threshold`.
std::vector<FrameRecord> filter_static_frames(const std::vector<FrameRecord>& frames,
                                              double threshold = kStaticFrameThreshold);

struct CropBox {
  int top = 0, left = 0, height = 0, width = 0;
};

// Largest centered 4:3 region of an image.
CropBox center_crop_4_3(int height, int width);

// Center-crop to 4:3, bilinear resample to height x width, then v / 255 - 0.5.
Tensor preprocess_frame(const Tensor& raw, int height = 240, int width = 320);

// Draws n_ops videos with replacement and three distinct frames from each;
// every triple yields its six ordered pairs.
std::vector<InequationSample> sample_inequations(const VideoDataset& dataset, int n_ops, Rng& rng);

struct SynthConfig {
  int n_frames = 300;
  int n_phases = 7;
  int height = 24;
  int width = 32;
  double ambiguity = 0.0;   // 0: every frame shows its phase, 1: only onsets do
  int onset_frames = 2;     // frames at each phase start with a full-strength marker
  double noise_sigma = 3.0;
  double brightness_jitter = 8.0;

  void validate() const;
};

struct SyntheticVideo {
  std::vector<FrameRecord> frames;
  std::vector<double> progress;  // latent u(t), strictly increasing in [0, 1)
};

SyntheticVideo generate_synthetic_video(std::uint64_t seed, const SynthConfig& cfg,
                                        const std::string& video_id = "synthetic");

// n videos named <prefix>000, <prefix>001, ... each seeded from (seed, id).
VideoDataset generate_synthetic_dataset(std::uint64_t seed, int n_videos, const SynthConfig& cfg,
                                        const std::string& prefix = "vid");

// Consecutive [begin, begin + length) ranges covering n_frames in order.
std::vector<std::pair<std::size_t, std::size_t>> batch_video_sequences(std::size_t n_frames,
                                                                       std::size_t batch_size = 256);

// A video ready for the networks: normalised frames stacked as N x 3 x H x W
// and 0-based labels (empty when unlabeled).
struct PreparedVideo {
  std::string video_id;
  Tensor frames;
  std::vector<int> labels;
  std::vector<int> indices;

  std::size_t size() const { return frames.shape()[0]; }
  // Rows [begin, begin + count) as a new tensor.
  Tensor slice(std::size_t begin, std::size_t count) const;
  Tensor gather(const std::vector<std::size_t>& rows) const;
};

PreparedVideo prepare_video(const std::vector<FrameRecord>& frames, int height, int width);
std::vector<PreparedVideo> prepare_dataset(const VideoDataset& dataset, int height, int width);

}  // namespace tcl
