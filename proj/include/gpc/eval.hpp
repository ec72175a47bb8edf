#pragma once

#include <torch/torch.h>

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "gpc/checkpoint.hpp"
#include "gpc/dataio.hpp"
#include "gpc/metrics.hpp"
#include "gpc/nets.hpp"

namespace gpc {

// Inference chain: optional glasses-removal generator, then the classifier.
struct Pipeline {
  GazeClassifier classifier{nullptr};
  std::optional<ResnetGenerator> remover;

  static Pipeline from_checkpoints(const Checkpoint& classifier, const Checkpoint* generator_ng = nullptr);
};

struct StageTimes {
  double removal_seconds = 0.0;
  double classifier_seconds = 0.0;
};

// Predicted zone codes for every item. Throws ChannelMismatch when the data's
// channel count differs from the classifier's.
std::vector<int> predict(Pipeline& pipeline, const Dataset& data, int batch_size = 64, StageTimes* times = nullptr);

// Probabilities (B x 7) for a preprocessed batch.
torch::Tensor predict_probs(Pipeline& pipeline, const torch::Tensor& batch);

struct EvalReport {
  double micro = 0.0;
  double macro = 0.0;
  ConfusionMatrix confusion;
  std::map<std::string, std::pair<double, double>> per_condition;  // condition -> (micro, macro)
  std::map<std::string, double> latency_ms;                        // stage -> mean ms per image
  std::vector<int> predictions;

  nlohmann::json to_json() const;
};

EvalReport evaluate_pipeline(Pipeline& pipeline, const Dataset& data, int batch_size = 64);
EvalReport evaluate_model(const Checkpoint& classifier, const Checkpoint* generator_ng, const Dataset& data,
                          int batch_size = 64);

// Macro accuracy of a pipeline on a dataset.
double macro_accuracy_of(Pipeline& pipeline, const Dataset& data, int batch_size = 64);

// ---- capture-condition grid -------------------------------------------------

Dataset filter_condition(const Dataset& data, ConditionSet set);

// Trains a classifier on `train` (early stopping against `val`).
using ClassifierTrainFn = std::function<Checkpoint(const Dataset& train, const Dataset& val)>;

struct ConditionGrid {
  // macro[r][c]: model trained on set r, evaluated on validation set c.
  std::array<std::array<double, kNumConditionSets>, kNumConditionSets> macro{};

  // 9 x 9 table in percent with row/column labels.
  std::string to_tsv() const;
};

// Throws EmptyConditionSet when any of the nine train or validation subsets is empty.
ConditionGrid condition_grid(const ClassifierTrainFn& train_fn, const Dataset& train, const Dataset& val);

// ---- gaze drift ---------------------------------------------------------------

// Intensity-weighted centroid of the darkest blob in the eye region of a
// single-channel image with values in [-1, 1]. Returned in 256x256 canvas
// coordinates regardless of the input resolution.
std::optional<Point> estimate_pupil(const torch::Tensor& pixels);

struct DriftStats {
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
  int evaluated = 0;
  int not_found = 0;
  double estimator_error_mean = 0.0;  // |estimate(original) - ground truth|, diagnostics only
  std::vector<double> drifts;         // per evaluated sample; NaN where the pupil was not found

  nlohmann::json to_json() const;
};

// Drift between the pupil estimated on each original and on its counterpart
// in `reconstructions`, in canvas pixels. Samples where either estimate fails
// are counted as not found and excluded from the statistics.
DriftStats drift_statistics(const Dataset& originals, std::span<const torch::Tensor> reconstructions);

// Full cycle G_ng(G_wg(x)) for every without-glasses image, then drift.
DriftStats gaze_drift(ResnetGenerator& generator_wg, ResnetGenerator& generator_ng, const Dataset& synthetic_x,
                      int batch_size = 32);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap interval for the mean of `values`.
Interval bootstrap_mean_ci(std::span<const double> values, int resamples, double confidence, std::uint64_t seed);

// ---- CAM overlay ----------------------------------------------------------------

struct CamOverlay {
  cv::Mat image;  // 256 x 256 BGR
  cv::Mat heat;   // 256 x 256 CV_32F, min-max normalized CAM of the chosen zone
};

CamOverlay render_cam_overlay(const EyeImage& image, const torch::Tensor& cams, GazeZone zone, double alpha = 0.5);

// ---- latency --------------------------------------------------------------------

struct StageLatency {
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

inline constexpr int kLatencyWarmup = 10;

// Per-image wall-clock timings per stage after kLatencyWarmup warm-up
// iterations. The "landmarks" stage is reported only when a provider is given.
std::map<std::string, StageLatency> latency_benchmark(Pipeline& pipeline, const Dataset& samples, int n_images,
                                                      int batch_size = 1,
                                                      const std::function<void(const EyeImage&)>& landmark_stage = {});

}  // namespace gpc
