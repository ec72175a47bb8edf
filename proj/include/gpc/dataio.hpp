#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "gpc/error.hpp"
#include "gpc/zones.hpp"

namespace gpc {

inline constexpr int kModelInputSize = 256;
inline constexpr int kSynthCanvas = 256;

struct Point {
  double x = 0.0;
  double y = 0.0;

  bool operator==(const Point&) const = default;
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

// One manifest row.
struct SampleRecord {
  std::filesystem::path image_path;
  std::string subject_id;
  GazeZone zone = GazeZone::Forward;
  CaptureCondition condition;
  std::vector<Point> landmarks;
};

// Preprocessed model input. Pixels are a float tensor laid out C x H x W with
// values in [-1, 1].
struct EyeImage {
  torch::Tensor pixels;
  Domain domain = Domain::X_WithoutGlasses;
  GazeZone zone = GazeZone::Forward;
  std::string subject_id;
  Lighting lighting = Lighting::Day;
  std::optional<Point> pupil_center;  // synthetic data only, in 256x256 canvas pixels

  CaptureCondition condition() const {
    return {lighting, domain == Domain::Y_WithGlasses ? Eyewear::WithGlasses : Eyewear::WithoutGlasses};
  }
};

using Dataset = std::vector<EyeImage>;

// ---- manifests ------------------------------------------------------------

// Tab-separated with a header row:
//   image_path  subject_id  zone_code  lighting  eyewear  [landmarks]
// lighting is day|night, eyewear wg|ng, landmarks "x,y;x,y;...".
// Relative image paths are resolved against the manifest's directory.
std::vector<SampleRecord> load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const SampleRecord> records);

enum class Split : std::uint8_t { Train, Val, Test };

struct SplitRecords {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> val;
  std::vector<SampleRecord> test;
};

SplitRecords split_by_subject(std::span<const SampleRecord> records,
                              const std::map<std::string, Split>& assignment);

// ---- preprocessing --------------------------------------------------------

struct CropMargins {
  double fraction = 0.25;
};

// Landmark bounding box grown by `margin.fraction` of its extent on each side
// and clipped to the frame. Integer pixel box, end-exclusive.
cv::Rect eye_crop_box(cv::Size frame, std::span<const Point> landmarks, CropMargins margin = {});

// Crop of eye_crop_box, padded (edge replicate) to a centred square.
cv::Mat crop_eye_region(const cv::Mat& frame, std::span<const Point> landmarks, CropMargins margin = {});

struct ClaheParams {
  double clip_limit = 2.0;
  int tiles = 8;
};

// Contrast-limited adaptive histogram equalization. 8-bit or [0,1] float
// input; 3-channel input is equalized on the Lab lightness channel only.
cv::Mat equalize_adaptive(const cv::Mat& crop, ClaheParams params = {});

// Resize to size x size (area averaging when shrinking, bilinear otherwise),
// channel coercion and linear rescale of the dtype range ([0,255] for 8-bit,
// [0,1] for float) onto [-1, 1].
torch::Tensor to_model_input(const cv::Mat& img, int channels, int size = kModelInputSize);

// Inverse mapping of model pixels to an 8-bit image (C x H x W -> H x W x C).
cv::Mat to_image8(const torch::Tensor& pixels);

// Reads an image file as 8-bit grayscale or BGR. Throws BadImage.
cv::Mat read_image(const std::filesystem::path& path);

struct PreprocessOptions {
  int channels = 1;
  int size = kModelInputSize;
  bool equalize = true;
  ClaheParams clahe;
};

// Full chain for one record: read, optional landmark crop, CLAHE, model input.
EyeImage preprocess_record(const SampleRecord& record, const PreprocessOptions& opts);

// Same chain for an in-memory canvas image (e.g. a synthetic rendering). The
// 8-bit quantization step matches what a PNG round trip would produce.
EyeImage preprocess_eye(const EyeImage& raw, const PreprocessOptions& opts);

// ---- synthetic eyes -------------------------------------------------------

struct SyntheticSpec {
  // Canonical pupil centres in 256x256 canvas coordinates, indexed by zone code.
  std::array<Point, kNumZones> pupil_center_by_zone = {{
      {128.0, 170.0},  // EyesClosedOrLap: low, mostly under the lower lid
      {128.0, 124.0},  // Forward
      {74.0, 122.0},   // LeftMirror
      {126.0, 148.0},  // Speedometer
      {160.0, 152.0},  // Radio
      {168.0, 110.0},  // Rearview
      {186.0, 126.0},  // RightMirror
  }};
  double jitter_px = 2.0;
  std::pair<int, int> glasses_frame_thickness_px = {4, 14};
  double glare_probability = 0.6;
  std::pair<double, double> glare_intensity = {0.5, 0.95};
  std::uint64_t rng_seed = 7;

  // Throws BadConfig when the separability invariant does not hold.
  void validate() const;
  double min_center_separation() const;
};

// Per-subject and per-lighting rendering style. Shared by both images of a pair.
struct SynthAppearance {
  double eye_scale = 1.0;
  double skin_level = 0.15;
  double sclera_level = 0.75;
  double iris_level = -0.2;
  double pupil_level = -0.85;
  double brow_level = -0.3;
  double brow_offset = 0.0;
  double shading = 0.0;       // horizontal illumination gradient amplitude
  double noise_sigma = 0.02;
  Lighting lighting = Lighting::Day;
  // Glasses style worn by the subject.
  double frame_level = -0.55;
  double frame_width_scale = 1.0;
  double frame_height_scale = 1.0;
  double lens_gain = 0.85;
  double lens_offset = 0.1;
};

// Deterministic appearance for subject index `subject` under `lighting`.
SynthAppearance appearance_for(int subject, Lighting lighting);

struct SyntheticPair {
  EyeImage without_glasses;
  EyeImage with_glasses;
  Point pupil_center;
  cv::Mat overlay_mask;  // 8-bit, nonzero where the glasses/glare overlay touched
};

SyntheticPair synth_pair(const SyntheticSpec& spec, GazeZone zone, std::mt19937_64& rng,
                         const SynthAppearance& look = {});

// Renders only the bare eye with the pupil at an explicit position (used for
// calibration of the pupil estimator). Values in [-1, 1], 256x256, CV_32F.
cv::Mat render_eye(Point pupil_center, const SynthAppearance& look, std::uint64_t noise_seed);

// Nearest canonical centre; the oracle classifier for synthetic data.
GazeZone nearest_zone(const SyntheticSpec& spec, Point pupil_center);

// ---- batching -------------------------------------------------------------

// Deterministic Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

// Yields index batches over a seeded permutation; the last batch may be short.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed, bool shuffle = true);

  std::optional<std::span<const std::size_t>> next();
  std::size_t num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
};

template <class T>
std::vector<std::vector<T>> batch_iter(std::span<const T> records, std::size_t batch_size,
                                       std::uint64_t shuffle_seed) {
  BatchIterator it(records.size(), batch_size, shuffle_seed);
  std::vector<std::vector<T>> out;
  while (auto idx = it.next()) {
    auto& batch = out.emplace_back();
    for (std::size_t i : *idx) batch.push_back(records[i]);
  }
  return out;
}

struct Batch {
  torch::Tensor images;  // B x C x H x W
  torch::Tensor labels;  // B, int64 zone codes
};

Batch stack_batch(const Dataset& data, std::span<const std::size_t> indices);

// ---- synthetic dataset writer ----------------------------------------------

struct SynthPlan {
  int images_per_zone = 100;
  std::vector<int> subjects = {0};
  std::vector<Lighting> lightings = {Lighting::Day, Lighting::Night};
  bool write_with_glasses = true;
  bool write_without_glasses = true;
};

// Writes PNGs, manifest.tsv (standard manifest schema) and pupil_truth.tsv
// (image_path, x, y). Byte-identical output for identical inputs.
std::vector<SampleRecord> write_synthetic_dataset(const SyntheticSpec& spec, const SynthPlan& plan,
                                                  const std::filesystem::path& out_dir);

std::map<std::string, Point> load_pupil_truth(const std::filesystem::path& path);

}  // namespace gpc
