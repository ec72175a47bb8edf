#include "support/doctest_torch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "gpc/eval.hpp"
#include "gpc/training.hpp"
#include "support/errors.hpp"
#include "support/synth_corpus.hpp"

using namespace gpc;
using gpc::testing::kind_of;

namespace {

NetConfig small_net(int size = 32) {
  NetConfig c;
  c.image_size = size;
  c.cls_stem = 16;
  c.cls_squeeze = 8;
  c.cls_expand = 16;
  c.gen_filters = 8;
  c.gen_blocks = 2;
  c.disc_filters = 8;
  return c;
}

CheckpointMeta meta_for(const NetConfig& net) {
  TrainConfig cfg;
  cfg.net = net;
  CheckpointMeta m;
  m.config = cfg.to_json();
  m.config_hash = cfg.hash();
  return m;
}

const gpc::testing::Corpus& corpus() {
  static const auto c = [] {
    gpc::testing::CorpusPlan plan;
    plan.per_zone = 3;
    plan.x_train_subjects = {0, 1};
    plan.y_train_subjects = {0, 1};
    plan.val_subjects = {2};
    plan.test_subjects = {3, 4};
    return gpc::testing::make_corpus(plan);
  }();
  return c;
}

// Renders the bare eye with the pupil at p and runs it through the standard
// preprocessing at the given model size.
EyeImage eye_at(Point p, int size, std::uint64_t noise_seed, const SynthAppearance& look = {}) {
  cv::Mat m = render_eye(p, look, noise_seed);
  EyeImage raw;
  raw.pixels = torch::from_blob(m.data, {1, m.rows, m.cols}, torch::kFloat32).clone();
  raw.pupil_center = p;
  PreprocessOptions po;
  po.size = size;
  return preprocess_eye(raw, po);
}

}  // namespace

TEST_CASE("pipeline without a remover is the bare classifier") {
  auto net = small_net();
  auto cls = build_classifier(net, 3);
  auto ckpt = capture(*cls, Role::Classifier, meta_for(net));
  const auto& data = corpus().x_test;

  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto batch = stack_batch(data, idx);
  cls->eval();
  torch::Tensor expected;
  {
    torch::NoGradGuard ng;
    expected = classifier_forward(cls, batch.images).logits.argmax(1);
  }
  auto report = evaluate_model(ckpt, nullptr, data, 7);
  REQUIRE(report.predictions.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(report.predictions[i] == expected[i].item<int>());

  auto again = evaluate_model(ckpt, nullptr, data, 64);
  CHECK(again.predictions == report.predictions);
  CHECK(again.confusion == report.confusion);
  CHECK(again.micro == report.micro);
  CHECK(again.macro == report.macro);
  CHECK(report.latency_ms.count("classifier") == 1);
  CHECK(report.latency_ms.count("removal") == 0);
}

TEST_CASE("pipeline with a remover classifies the generated images") {
  auto net = small_net();
  auto cls = build_classifier(net, 3);
  auto gen = build_generator(net, 4);
  auto c_ckpt = capture(*cls, Role::Classifier, meta_for(net));
  auto g_ckpt = capture(*gen, Role::GeneratorNg, meta_for(net));
  const auto& data = corpus().y_test;

  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto batch = stack_batch(data, idx);
  cls->eval();
  gen->eval();
  torch::Tensor expected;
  {
    torch::NoGradGuard ng;
    expected = classifier_forward(cls, generator_forward(gen, batch.images)).logits.argmax(1);
  }
  auto report = evaluate_model(c_ckpt, &g_ckpt, data);
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(report.predictions[i] == expected[i].item<int>());
  CHECK(report.latency_ms.at("removal") > 0.0);
  CHECK(report.latency_ms.at("classifier") > 0.0);

  auto wrong_role = g_ckpt;
  wrong_role.role = Role::GeneratorWg;
  CHECK(kind_of([&] { Pipeline::from_checkpoints(c_ckpt, &wrong_role); }) == ErrorKind::ConfigMismatch);
}

TEST_CASE("report contents") {
  auto net = small_net();
  auto ckpt = capture(*build_classifier(net, 8), Role::Classifier, meta_for(net));
  Dataset mixed = corpus().x_test;
  mixed.insert(mixed.end(), corpus().y_test.begin(), corpus().y_test.end());
  auto report = evaluate_model(ckpt, nullptr, mixed);
  CHECK(report.confusion.total() == static_cast<std::int64_t>(mixed.size()));
  CHECK(report.micro >= 0.0);
  CHECK(report.micro <= 1.0);
  CHECK(report.macro >= 0.0);
  CHECK(report.macro <= 1.0);

  std::vector<std::string> names;
  for (auto c : kAllConditions) names.push_back(condition_name(c));
  CHECK(report.per_condition.size() == 4);
  for (const auto& [k, v] : report.per_condition) {
    CHECK(std::find(names.begin(), names.end(), k) != names.end());
    CHECK(v.first >= 0.0);
    CHECK(v.first <= 1.0);
  }

  auto j = report.to_json();
  for (const char* key : {"micro", "macro", "confusion", "per_condition", "latency_ms", "n"}) CHECK(j.contains(key));
  CHECK(j["confusion"].size() == kNumZones);
  CHECK(j["n"] == mixed.size());

  Dataset rgb = corpus().x_test;
  for (auto& e : rgb) e.pixels = e.pixels.repeat({3, 1, 1});
  CHECK(kind_of([&] { evaluate_model(ckpt, nullptr, rgb); }) == ErrorKind::ChannelMismatch);
  CHECK(kind_of([&] { evaluate_model(ckpt, nullptr, {}); }) == ErrorKind::EmptyDataset);
}

TEST_CASE("pupil estimator locates rendered pupils") {
  for (int size : {32, 64, 256}) {
    double err = 0;
    int n = 0;
    for (const auto& p : SyntheticSpec{}.pupil_center_by_zone) {
      if (p.y > 160) continue;  // under the lid
      auto e = eye_at(p, size, 5);
      auto est = estimate_pupil(e.pixels);
      REQUIRE(est.has_value());
      err += std::hypot(est->x - p.x, est->y - p.y);
      ++n;
    }
    MESSAGE("size " << size << " mean error " << err / n);
    CHECK(err / n < 3.0);
  }
  CHECK_FALSE(estimate_pupil(torch::zeros({1, 32, 32})).has_value());
}

TEST_CASE("drift: unchanged reconstructions give zero") {
  const auto& data = corpus().x_test;
  std::vector<torch::Tensor> rec;
  for (const auto& e : data) rec.push_back(e.pixels.clone());
  auto stats = drift_statistics(data, rec);
  CHECK(stats.evaluated + stats.not_found == static_cast<int>(data.size()));
  CHECK(stats.evaluated > 0);
  CHECK(stats.mean == 0.0);
  CHECK(stats.p95 == 0.0);
  for (double d : stats.drifts) {
    if (std::isfinite(d)) CHECK(d == 0.0);
  }
  CHECK(stats.estimator_error_mean > 0.0);
}

TEST_CASE("drift: degraded reconstructions are counted as not found") {
  const auto& data = corpus().x_test;
  std::vector<torch::Tensor> rec;
  for (const auto& e : data) rec.push_back(torch::zeros_like(e.pixels));
  auto stats = drift_statistics(data, rec);
  CHECK(stats.not_found == static_cast<int>(data.size()));
  CHECK(stats.evaluated == 0);
  std::vector<torch::Tensor> short_rec(rec.begin(), rec.end() - 1);
  CHECK(kind_of([&] { drift_statistics(data, short_rec); }) == ErrorKind::LengthMismatch);
}

TEST_CASE("drift: injected horizontal shifts are recovered") {
  const std::vector<Point> bases = {{128, 124}, {100, 120}, {150, 130}, {126, 140}, {160, 118}, {110, 132}};
  // The estimator is calibrated for model inputs of 64 px and up.
  for (int size : {64, 128}) {
    for (double k : {1.0, 3.0, 5.0}) {
      Dataset originals;
      std::vector<torch::Tensor> shifted;
      for (std::size_t i = 0; i < bases.size(); ++i) {
        for (int s = 0; s < 6; ++s) {
          SynthAppearance look = appearance_for(s, s % 2 ? Lighting::Night : Lighting::Day);
          const Point p = bases[i];
          originals.push_back(eye_at(p, size, 100 + i * 10 + s, look));
          shifted.push_back(eye_at({p.x + k, p.y}, size, 100 + i * 10 + s, look).pixels);
        }
      }
      auto stats = drift_statistics(originals, shifted);
      REQUIRE(stats.evaluated == static_cast<int>(originals.size()));
      double mae = 0;
      for (double d : stats.drifts) mae += std::abs(d - k);
      mae /= stats.drifts.size();
      MESSAGE("size " << size << " shift " << k << " mean " << stats.mean << " mae " << mae);
      CHECK(mae < 0.5);
      if (k == 3.0) CHECK(std::abs(stats.mean - 3.0) <= 0.1);
    }
  }
}

TEST_CASE("bootstrap interval") {
  std::vector<double> v(200);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(1.0, 0.5);
  for (auto& x : v) x = n(rng);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  auto ci = bootstrap_mean_ci(v, 2000, 0.95, 1);
  CHECK(ci.lo < mean);
  CHECK(ci.hi > mean);
  // Normal-theory half-width is 1.96 * 0.5 / sqrt(200) = 0.069.
  CHECK((ci.hi - ci.lo) / 2 == doctest::Approx(0.069).epsilon(0.2));
  auto same = bootstrap_mean_ci(v, 2000, 0.95, 1);
  CHECK(same.lo == ci.lo);
  CHECK(same.hi == ci.hi);
  std::vector<double> flat(50, 2.5);
  auto degenerate = bootstrap_mean_ci(flat, 500, 0.95, 2);
  CHECK(degenerate.lo == 2.5);
  CHECK(degenerate.hi == 2.5);
}

TEST_CASE("CAM overlay") {
  const auto& img = corpus().x_test.front();
  SUBCASE("always 256 x 256") {
    for (int s : {1, 2, 4, 7, 16}) {
      auto o = render_cam_overlay(img, torch::randn({kNumZones, s, s}), GazeZone::Radio);
      CHECK(o.image.rows == 256);
      CHECK(o.image.cols == 256);
      CHECK(o.image.type() == CV_8UC3);
      CHECK(o.heat.rows == 256);
    }
  }
  SUBCASE("hottest pixel is the argmax of the upsampled CAM") {
    for (int trial = 0; trial < 10; ++trial) {
      auto cams = torch::randn({kNumZones, 4, 4});
      const int zone = trial % kNumZones;
      auto o = render_cam_overlay(img, cams, zone_from_code(zone));
      cv::Mat small(4, 4, CV_32F);
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) small.at<float>(y, x) = cams[zone][y][x].item<float>();
      cv::Mat up;
      cv::resize(small, up, {256, 256}, 0, 0, cv::INTER_LINEAR);
      // Bilinear upsampling produces exact ties at the peak, so compare values.
      double peak = 0;
      cv::Point b;
      cv::minMaxLoc(up, nullptr, &peak);
      cv::minMaxLoc(o.heat, nullptr, nullptr, nullptr, &b);
      CHECK(up.at<float>(b) == doctest::Approx(peak).epsilon(1e-6));
    }
  }
  SUBCASE("constant CAM tints uniformly") {
    auto o = render_cam_overlay(img, torch::full({kNumZones, 4, 4}, 3.0), GazeZone::Forward, 0.5);
    cv::Mat gray = to_image8(img.pixels);
    cv::Mat gray256, bgr;
    cv::resize(gray, gray256, {256, 256}, 0, 0, cv::INTER_LINEAR);
    cv::cvtColor(gray256, bgr, cv::COLOR_GRAY2BGR);
    cv::Mat tint;
    cv::subtract(o.image, bgr * 0.5, tint, cv::noArray(), CV_32FC3);
    double lo[3], hi[3];
    std::vector<cv::Mat> ch;
    cv::split(tint, ch);
    for (int i = 0; i < 3; ++i) {
      cv::minMaxLoc(ch[i], &lo[i], &hi[i]);
      CHECK(hi[i] - lo[i] <= 1.01);
    }
  }
}

TEST_CASE("latency benchmark") {
  auto net = small_net(64);
  net.gen_filters = 16;
  net.gen_blocks = 3;
  Pipeline p;
  p.classifier = build_classifier(net, 1);
  p.remover = build_generator(net, 2);
  gpc::testing::CorpusPlan plan;
  plan.image_size = 64;
  plan.per_zone = 1;
  plan.test_subjects = {0};
  auto data = gpc::testing::make_corpus(plan).y_test;

  CHECK(kind_of([&] { latency_benchmark(p, data, 99); }) == ErrorKind::BadConfig);
  int landmark_calls = 0;
  auto one = latency_benchmark(p, data, 100, 1, [&](const EyeImage&) { ++landmark_calls; });
  CHECK(landmark_calls == 100 + kLatencyWarmup);
  for (const char* k : {"landmarks", "removal", "classifier", "total"}) {
    REQUIRE(one.count(k) == 1);
    CHECK(one.at(k).mean_ms > 0.0);
    CHECK(one.at(k).p95_ms > 0.0);
  }
  CHECK(one.at("removal").mean_ms >= one.at("classifier").mean_ms);

  auto two = latency_benchmark(p, data, 100, 2);
  CHECK(two.count("landmarks") == 0);
  CHECK(two.at("total").mean_ms <= 2.0 * one.at("total").mean_ms);
}

TEST_CASE("condition grid") {
  auto net = small_net();
  auto ckpt = capture(*build_classifier(net, 8), Role::Classifier, meta_for(net));
  const auto& c = corpus();
  Dataset all = c.x_val;
  all.insert(all.end(), c.y_val.begin(), c.y_val.end());

  int calls = 0;
  auto fixed = [&](const Dataset& train, const Dataset&) {
    ++calls;
    CHECK_FALSE(train.empty());
    return ckpt;
  };
  auto grid = condition_grid(fixed, all, all);
  CHECK(calls == kNumConditionSets);
  Pipeline p = Pipeline::from_checkpoints(ckpt);
  for (int col = 0; col < kNumConditionSets; ++col) {
    const double expected = macro_accuracy_of(p, filter_condition(all, condition_set_at(col)));
    for (int row = 0; row < kNumConditionSets; ++row) CHECK(grid.macro[row][col] == expected);
  }
  auto tsv = grid.to_tsv();
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == kNumConditionSets + 1);

  CHECK(kind_of([&] { condition_grid(fixed, c.x_val, all); }) == ErrorKind::EmptyConditionSet);
  CHECK(filter_condition(all, ConditionSet::All).size() == all.size());
  CHECK(filter_condition(all, ConditionSet::Glasses).size() == c.y_val.size());
}
