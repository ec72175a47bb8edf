#include "gpc/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "gpc/error.hpp"
#include "gpc/losses.hpp"

namespace gpc {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void check_channels(const Pipeline& p, const Dataset& data) {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "nothing to evaluate");
  const auto c = data.front().pixels.size(0);
  if (c != p.classifier->config.channels) {
    throw Error(ErrorKind::ChannelMismatch,
                fmt::format("data has {} channels, classifier expects {}", c, p.classifier->config.channels));
  }
  if (p.remover && (*p.remover)->config.channels != p.classifier->config.channels) {
    throw Error(ErrorKind::ChannelMismatch, "generator and classifier disagree on channels");
  }
}

}  // namespace

Pipeline Pipeline::from_checkpoints(const Checkpoint& classifier, const Checkpoint* generator_ng) {
  Pipeline p;
  p.classifier = classifier_from(classifier);
  if (generator_ng) {
    if (generator_ng->role != Role::GeneratorNg) {
      throw Error(ErrorKind::ConfigMismatch, "glasses removal needs a generator_ng checkpoint");
    }
    p.remover = generator_from(*generator_ng);
  }
  return p;
}

torch::Tensor predict_probs(Pipeline& pipeline, const torch::Tensor& batch) {
  torch::NoGradGuard guard;
  pipeline.classifier->eval();
  auto x = batch;
  if (pipeline.remover) {
    (*pipeline.remover)->eval();
    x = generator_forward(*pipeline.remover, x);
  }
  return classifier_forward(pipeline.classifier, x).probs;
}

std::vector<int> predict(Pipeline& pipeline, const Dataset& data, int batch_size, StageTimes* times) {
  check_channels(pipeline, data);
  torch::NoGradGuard guard;
  pipeline.classifier->eval();
  if (pipeline.remover) (*pipeline.remover)->eval();

  std::vector<int> preds;
  preds.reserve(data.size());
  BatchIterator it(data.size(), static_cast<std::size_t>(batch_size), 0, /*shuffle=*/false);
  while (auto idx = it.next()) {
    auto x = stack_batch(data, *idx).images;
    if (pipeline.remover) {
      const auto t0 = Clock::now();
      x = generator_forward(*pipeline.remover, x);
      if (times) times->removal_seconds += seconds_since(t0);
    }
    const auto t1 = Clock::now();
    auto probs = classifier_forward(pipeline.classifier, x).probs;
    if (times) times->classifier_seconds += seconds_since(t1);
    auto am = losses::argmax_lowest(probs);
    for (std::int64_t i = 0; i < am.size(0); ++i) preds.push_back(static_cast<int>(am[i].item<std::int64_t>()));
  }
  return preds;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cm = nlohmann::json::array();
  for (int t = 0; t < confusion.num_classes(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (int p = 0; p < confusion.num_classes(); ++p) row.push_back(confusion.at(t, p));
    cm.push_back(row);
  }
  nlohmann::json cond = nlohmann::json::object();
  for (const auto& [k, v] : per_condition) cond[k] = {{"micro", v.first}, {"macro", v.second}};
  return {{"micro", micro},         {"macro", macro},
          {"confusion", cm},        {"per_condition", cond},
          {"latency_ms", latency_ms}, {"n", static_cast<std::int64_t>(predictions.size())}};
}

EvalReport evaluate_pipeline(Pipeline& pipeline, const Dataset& data, int batch_size) {
  StageTimes times;
  EvalReport r;
  r.predictions = predict(pipeline, data, batch_size, &times);

  std::vector<int> labels(data.size());
  std::map<std::string, std::pair<std::vector<int>, std::vector<int>>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) {
    labels[i] = zone_code(data[i].zone);
    auto& g = groups[condition_name(data[i].condition())];
    g.first.push_back(r.predictions[i]);
    g.second.push_back(labels[i]);
  }
  r.confusion = confusion_matrix(r.predictions, labels, kNumZones);
  r.micro = micro_accuracy(r.confusion);
  r.macro = macro_accuracy(r.confusion);
  for (const auto& [name, g] : groups) {
    auto cm = confusion_matrix(g.first, g.second, kNumZones);
    r.per_condition[name] = {micro_accuracy(cm), macro_accuracy(cm)};
  }
  const double n = static_cast<double>(data.size());
  if (pipeline.remover) r.latency_ms["removal"] = 1000.0 * times.removal_seconds / n;
  r.latency_ms["classifier"] = 1000.0 * times.classifier_seconds / n;
  return r;
}

EvalReport evaluate_model(const Checkpoint& classifier, const Checkpoint* generator_ng, const Dataset& data,
                          int batch_size) {
  auto p = Pipeline::from_checkpoints(classifier, generator_ng);
  return evaluate_pipeline(p, data, batch_size);
}

double macro_accuracy_of(Pipeline& pipeline, const Dataset& data, int batch_size) {
  auto preds = predict(pipeline, data, batch_size);
  std::vector<int> labels(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = zone_code(data[i].zone);
  return macro_accuracy(confusion_matrix(preds, labels, kNumZones));
}

// ---- capture-condition grid -------------------------------------------------

Dataset filter_condition(const Dataset& data, ConditionSet set) {
  Dataset out;
  for (const auto& item : data) {
    if (contains(set, item.condition())) out.push_back(item);
  }
  return out;
}

std::string ConditionGrid::to_tsv() const {
  std::ostringstream out;
  out << "model\\val";
  for (int c = 0; c < kNumConditionSets; ++c) out << '\t' << condition_set_label(condition_set_at(c));
  out << '\n';
  for (int r = 0; r < kNumConditionSets; ++r) {
    out << condition_set_label(condition_set_at(r));
    for (int c = 0; c < kNumConditionSets; ++c) out << '\t' << fmt::format("{:.4f}", 100.0 * macro[r][c]);
    out << '\n';
  }
  return out.str();
}

ConditionGrid condition_grid(const ClassifierTrainFn& train_fn, const Dataset& train, const Dataset& val) {
  std::array<Dataset, kNumConditionSets> val_sets;
  for (int c = 0; c < kNumConditionSets; ++c) {
    val_sets[c] = filter_condition(val, condition_set_at(c));
    if (val_sets[c].empty()) {
      throw Error(ErrorKind::EmptyConditionSet,
                  fmt::format("no validation data for {}", condition_set_label(condition_set_at(c))));
    }
  }
  ConditionGrid grid;
  for (int r = 0; r < kNumConditionSets; ++r) {
    auto tr = filter_condition(train, condition_set_at(r));
    if (tr.empty()) {
      throw Error(ErrorKind::EmptyConditionSet,
                  fmt::format("no training data for {}", condition_set_label(condition_set_at(r))));
    }
    auto pipeline = Pipeline::from_checkpoints(train_fn(tr, val_sets[r]));
    for (int c = 0; c < kNumConditionSets; ++c) grid.macro[r][c] = macro_accuracy_of(pipeline, val_sets[c]);
  }
  return grid;
}

// ---- gaze drift ---------------------------------------------------------------

constexpr int kPupilWorkingSize = 1;

std::optional<Point> estimate_pupil(const torch::Tensor& pixels) {
  auto t = pixels.detach().to(torch::kFloat32);
  if (t.dim() == 3) t = t.mean(0);
  t = t.contiguous();
  cv::Mat img(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32F, t.data_ptr<float>());
  // Small inputs are resampled so the centroid can resolve sub-pixel motion.
  if (img.cols < kPupilWorkingSize) {
    cv::Mat up;
    cv::resize(img, up, cv::Size(kPupilWorkingSize, kPupilWorkingSize * img.rows / img.cols), 0, 0, cv::INTER_CUBIC);
    img = up;
  }
  const int h = img.rows, w = img.cols;

  cv::Mat blurred;
  const double sigma = std::max(0.5, w / 128.0);
  cv::GaussianBlur(img, blurred, cv::Size(0, 0), sigma);

  const cv::Rect region(static_cast<int>(0.18 * w), static_cast<int>(0.28 * h), static_cast<int>(0.64 * w),
                        static_cast<int>(0.50 * h));
  cv::Mat roi = blurred(region);

  double vmin = 0, vmax = 0;
  cv::Point at_min;
  cv::minMaxLoc(roi, &vmin, &vmax, &at_min);
  std::vector<float> values(roi.begin<float>(), roi.end<float>());
  std::nth_element(values.begin(), values.begin() + values.size() / 2, values.end());
  const double med = values[values.size() / 2];
  if (med - vmin < 0.2) return std::nullopt;
  const double thr = vmin + 0.3 * (med - vmin);

  cv::Mat mask = roi < thr;
  cv::Mat labels;
  cv::connectedComponents(mask, labels, 8, CV_32S);
  const int target = labels.at<int>(at_min);
  double sw = 0, sx = 0, sy = 0;
  int area = 0;
  for (int y = 0; y < roi.rows; ++y) {
    const int* lab = labels.ptr<int>(y);
    const float* v = roi.ptr<float>(y);
    for (int x = 0; x < roi.cols; ++x) {
      if (lab[x] != target) continue;
      const double wgt = thr - v[x];
      sw += wgt;
      sx += wgt * x;
      sy += wgt * y;
      ++area;
    }
  }
  if (sw <= 0 || area > roi.rows * roi.cols / 10) return std::nullopt;
  const double cx = region.x + sx / sw;
  const double cy = region.y + sy / sw;
  const double scale = static_cast<double>(kSynthCanvas) / w;
  return Point{(cx + 0.5) * scale - 0.5, (cy + 0.5) * scale - 0.5};
}

nlohmann::json DriftStats::to_json() const {
  return {{"mean", mean},
          {"median", median},
          {"p95", p95},
          {"evaluated", evaluated},
          {"not_found", not_found},
          {"estimator_error_mean", estimator_error_mean}};
}

DriftStats drift_statistics(const Dataset& originals, std::span<const torch::Tensor> reconstructions) {
  if (originals.size() != reconstructions.size()) {
    throw Error(ErrorKind::LengthMismatch, "originals and reconstructions differ in count");
  }
  DriftStats s;
  std::vector<double> found;
  double err_sum = 0.0;
  int err_n = 0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    const auto ref = estimate_pupil(originals[i].pixels);
    const auto rec = estimate_pupil(reconstructions[i]);
    if (ref && originals[i].pupil_center) {
      err_sum += distance(*ref, *originals[i].pupil_center);
      ++err_n;
    }
    if (!ref || !rec) {
      ++s.not_found;
      s.drifts.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double d = distance(*ref, *rec);
    s.drifts.push_back(d);
    found.push_back(d);
  }
  s.evaluated = static_cast<int>(found.size());
  s.estimator_error_mean = err_n ? err_sum / err_n : std::numeric_limits<double>::quiet_NaN();
  if (found.empty()) {
    s.mean = s.median = s.p95 = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = std::accumulate(found.begin(), found.end(), 0.0) / static_cast<double>(found.size());
  s.median = median(found);
  s.p95 = percentile(found, 0.95);
  return s;
}

DriftStats gaze_drift(ResnetGenerator& generator_wg, ResnetGenerator& generator_ng, const Dataset& synthetic_x,
                      int batch_size) {
  if (synthetic_x.empty()) throw Error(ErrorKind::EmptyDataset, "no synthetic samples for drift");
  torch::NoGradGuard guard;
  generator_wg->eval();
  generator_ng->eval();
  std::vector<torch::Tensor> recs;
  recs.reserve(synthetic_x.size());
  BatchIterator it(synthetic_x.size(), static_cast<std::size_t>(batch_size), 0, false);
  while (auto idx = it.next()) {
    auto x = stack_batch(synthetic_x, *idx).images;
    auto rec = generator_forward(generator_ng, generator_forward(generator_wg, x));
    for (std::int64_t i = 0; i < rec.size(0); ++i) recs.push_back(rec[i]);
  }
  return drift_statistics(synthetic_x, recs);
}

Interval bootstrap_mean_ci(std::span<const double> values, int resamples, double confidence, std::uint64_t seed) {
  if (values.empty()) throw Error(ErrorKind::Empty, "bootstrap of an empty sample");
  std::mt19937_64 rng(seed);
  const std::size_t n = values.size();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng() % n];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - confidence) / 2.0;
  auto at = [&](double q) {
    const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(means.size() - 1)));
    return means[k];
  };
  return {at(tail), at(1.0 - tail)};
}

// ---- CAM overlay ----------------------------------------------------------------

CamOverlay render_cam_overlay(const EyeImage& image, const torch::Tensor& cams, GazeZone zone, double alpha) {
  auto maps = cams.detach().to(torch::kFloat32);
  if (maps.dim() == 4) maps = maps[0];
  if (maps.dim() != 3 || maps.size(0) != kNumZones) throw Error(ErrorKind::ShapeMismatch, "CAMs must be 7 x h x w");
  auto cam = maps[zone_code(zone)].contiguous();

  cv::Mat small(static_cast<int>(cam.size(0)), static_cast<int>(cam.size(1)), CV_32F, cam.data_ptr<float>());
  CamOverlay out;
  cv::resize(small, out.heat, cv::Size(kModelInputSize, kModelInputSize), 0, 0, cv::INTER_LINEAR);
  double lo = 0, hi = 0;
  cv::minMaxLoc(out.heat, &lo, &hi);
  if (hi > lo) out.heat = (out.heat - lo) / (hi - lo);
  else out.heat = cv::Mat::zeros(out.heat.size(), CV_32F);

  cv::Mat heat8, color;
  out.heat.convertTo(heat8, CV_8U, 255.0);
  cv::applyColorMap(heat8, color, cv::COLORMAP_VIRIDIS);

  cv::Mat gray = to_image8(image.pixels);
  if (gray.channels() == 3) cv::cvtColor(gray, gray, cv::COLOR_BGR2GRAY);
  if (gray.rows != kModelInputSize) cv::resize(gray, gray, cv::Size(kModelInputSize, kModelInputSize), 0, 0, cv::INTER_LINEAR);
  cv::cvtColor(gray, gray, cv::COLOR_GRAY2BGR);
  cv::addWeighted(color, alpha, gray, 1.0 - alpha, 0.0, out.image);
  return out;
}

// ---- latency --------------------------------------------------------------------

std::map<std::string, StageLatency> latency_benchmark(Pipeline& pipeline, const Dataset& samples, int n_images,
                                                      int batch_size,
                                                      const std::function<void(const EyeImage&)>& landmark_stage) {
  if (n_images < 100) throw Error(ErrorKind::BadConfig, "latency benchmark needs at least 100 images");
  if (batch_size < 1) throw Error(ErrorKind::BadConfig, "batch_size must be >= 1");
  check_channels(pipeline, samples);
  torch::NoGradGuard guard;
  pipeline.classifier->eval();
  if (pipeline.remover) (*pipeline.remover)->eval();

  std::map<std::string, std::vector<double>> per_image;
  const int iterations = kLatencyWarmup + (n_images + batch_size - 1) / batch_size;
  std::size_t cursor = 0;
  for (int it = 0; it < iterations; ++it) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
    for (auto& i : idx) i = cursor++ % samples.size();
    auto x = stack_batch(samples, idx).images;
    const bool timed = it >= kLatencyWarmup;

    if (landmark_stage) {
      const auto t0 = Clock::now();
      for (auto i : idx) landmark_stage(samples[i]);
      if (timed) per_image["landmarks"].push_back(1000.0 * seconds_since(t0) / batch_size);
    }
    double total = 0.0;
    if (pipeline.remover) {
      const auto t0 = Clock::now();
      x = generator_forward(*pipeline.remover, x);
      const double ms = 1000.0 * seconds_since(t0) / batch_size;
      total += ms;
      if (timed) per_image["removal"].push_back(ms);
    }
    const auto t1 = Clock::now();
    auto probs = classifier_forward(pipeline.classifier, x).probs;
    (void)probs.sum().item<float>();
    const double ms = 1000.0 * seconds_since(t1) / batch_size;
    total += ms;
    if (timed) {
      per_image["classifier"].push_back(ms);
      per_image["total"].push_back(total);
    }
  }

  std::map<std::string, StageLatency> out;
  for (const auto& [stage, v] : per_image) {
    out[stage] = {std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()), percentile(v, 0.95)};
  }
  return out;
}

}  // namespace gpc
