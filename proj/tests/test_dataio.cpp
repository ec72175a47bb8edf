#include "support/doctest_torch.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "gpc/dataio.hpp"
#include "gpc/error.hpp"
#include "support/tempdir.hpp"
#include "support/errors.hpp"

using namespace gpc;
using gpc::testing::TempDir;
using gpc::testing::kind_of;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

double stddev(const cv::Mat& m) {
  cv::Scalar mean, sd;
  cv::meanStdDev(m, mean, sd);
  return sd[0];
}

}  // namespace

TEST_CASE("gaze zones have stable codes") {
  CHECK(kNumZones == 7);
  CHECK(kAllZones.size() == 7);
  for (int c = 0; c < 7; ++c) CHECK(zone_code(zone_from_code(c)) == c);
  CHECK(zone_from_code(1) == GazeZone::Forward);
  CHECK(zone_from_code(6) == GazeZone::RightMirror);
  CHECK(kind_of([] { zone_from_code(7); }) == ErrorKind::UnknownZoneCode);
  CHECK(kind_of([] { zone_from_code(-1); }) == ErrorKind::UnknownZoneCode);
}

TEST_CASE("condition sets cover the four capture conditions") {
  CHECK(kAllConditions.size() == 4);
  CHECK(kNumConditionSets == 9);
  for (auto c : kAllConditions) {
    int singles = 0;
    for (int s = 0; s < 4; ++s) singles += contains(condition_set_at(s), c);
    CHECK(singles == 1);
    CHECK(contains(ConditionSet::All, c));
    CHECK(contains(ConditionSet::Day, c) != contains(ConditionSet::Night, c));
    CHECK(contains(ConditionSet::NoGlasses, c) != contains(ConditionSet::Glasses, c));
  }
}

TEST_CASE("manifest parsing") {
  TempDir dir;
  const auto path = dir / "m.tsv";
  write_text(path,
             "image_path\tsubject_id\tzone_code\tlighting\teyewear\tlandmarks\n"
             "a.png\ts1\t0\tday\tng\t\n"
             "b.png\ts1\t3\tnight\twg\t10,20;30,40\n"
             "/abs/c.png\ts2\t6\tday\twg\n");
  auto recs = load_manifest(path);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].image_path == dir.path() / "a.png");
  CHECK(recs[2].image_path == std::filesystem::path("/abs/c.png"));
  CHECK(recs[1].zone == GazeZone::Speedometer);
  CHECK(recs[1].condition == CaptureCondition{Lighting::Night, Eyewear::WithGlasses});
  REQUIRE(recs[1].landmarks.size() == 2);
  CHECK(recs[1].landmarks[1] == Point{30, 40});

  SUBCASE("round trip through write_manifest") {
    const auto out = dir / "m2.tsv";
    write_manifest(out, recs);
    auto again = load_manifest(out);
    REQUIRE(again.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(again[i].zone == recs[i].zone);
      CHECK(again[i].subject_id == recs[i].subject_id);
      CHECK(again[i].condition == recs[i].condition);
      CHECK((again[i].landmarks == recs[i].landmarks));
    }
  }
  SUBCASE("errors") {
    write_text(dir / "bad_zone.tsv", "image_path\tsubject_id\tzone_code\tlighting\teyewear\nx.png\ts\t7\tday\tng\n");
    CHECK(kind_of([&] { load_manifest(dir / "bad_zone.tsv"); }) == ErrorKind::UnknownZoneCode);
    write_text(dir / "bad_row.tsv",
               "image_path\tsubject_id\tzone_code\tlighting\teyewear\nx.png\ts\t1\tday\tng\ny.png\ts\t1\tdusk\tng\n");
    try {
      load_manifest(dir / "bad_row.tsv");
      FAIL("expected MalformedRow");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::MalformedRow);
      CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }
    CHECK(kind_of([&] { load_manifest(dir / "missing.tsv"); }) == ErrorKind::MissingFile);
  }
}

TEST_CASE("published split sizes survive manifest load and subject split") {
  struct Cell {
    CaptureCondition cond;
    int train, val, test;
  };
  const std::vector<Cell> cells = {
      {{Lighting::Day, Eyewear::WithoutGlasses}, 67151, 9908, 2758},
      {{Lighting::Night, Eyewear::WithoutGlasses}, 59352, 8510, 2768},
      {{Lighting::Day, Eyewear::WithGlasses}, 43432, 9062, 3294},
      {{Lighting::Night, Eyewear::WithGlasses}, 33189, 8103, 2897},
  };
  std::vector<SampleRecord> recs;
  std::map<std::string, Split> assign;
  auto emit = [&](const CaptureCondition& cond, int count, int subjects, const std::string& prefix) {
    for (int i = 0; i < count; ++i) {
      SampleRecord r;
      r.subject_id = fmt::format("{}{}", prefix, i % subjects);
      r.image_path = fmt::format("img/{}_{}.png", r.subject_id, recs.size());
      r.zone = kAllZones[i % 7];
      r.condition = cond;
      recs.push_back(r);
    }
  };
  for (const auto& c : cells) {
    const bool glasses = c.cond.eyewear == Eyewear::WithGlasses;
    emit(c.cond, c.train, glasses ? 5 : 9, "train");
    emit(c.cond, c.val, 1, "val");
    emit(c.cond, c.test, 4, "test");
  }
  for (int i = 0; i < 9; ++i) assign[fmt::format("train{}", i)] = Split::Train;
  assign["val0"] = Split::Val;
  for (int i = 0; i < 4; ++i) assign[fmt::format("test{}", i)] = Split::Test;

  TempDir dir;
  write_manifest(dir / "table.tsv", recs);
  auto loaded = load_manifest(dir / "table.tsv");
  auto split = split_by_subject(loaded, assign);

  auto subjects = [](const std::vector<SampleRecord>& v) {
    std::set<std::string> s;
    for (const auto& r : v) s.insert(r.subject_id);
    return s.size();
  };
  CHECK(split.train.size() == 203124);
  CHECK(split.val.size() == 35583);
  CHECK(split.test.size() == 11717);
  CHECK(subjects(split.train) == 9);
  CHECK(subjects(split.val) == 1);
  CHECK(subjects(split.test) == 4);
  for (const auto& c : cells) {
    auto count = [&](const std::vector<SampleRecord>& v) {
      return std::count_if(v.begin(), v.end(), [&](const SampleRecord& r) { return r.condition == c.cond; });
    };
    CHECK(count(split.train) == c.train);
    CHECK(count(split.val) == c.val);
    CHECK(count(split.test) == c.test);
  }
}

TEST_CASE("subject split") {
  std::vector<SampleRecord> recs(4);
  recs[0].subject_id = recs[1].subject_id = "a";
  recs[2].subject_id = recs[3].subject_id = "b";
  auto s = split_by_subject(recs, {{"a", Split::Train}, {"b", Split::Test}});
  CHECK(s.train.size() == 2);
  CHECK(s.val.empty());
  CHECK(s.test.size() == 2);
  for (const auto& r : s.train) CHECK(r.subject_id == "a");
  CHECK(kind_of([&] { split_by_subject(recs, {{"a", Split::Train}}); }) == ErrorKind::UnassignedSubject);

  SUBCASE("13 subjects split 9/1/3 stay disjoint under random order") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<SampleRecord> many;
      for (int i = 0; i < 13 * 20; ++i) {
        SampleRecord r;
        r.subject_id = fmt::format("s{}", i % 13);
        many.push_back(r);
      }
      std::shuffle(many.begin(), many.end(), rng);
      std::vector<int> ids(13);
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);
      std::map<std::string, Split> a;
      for (int k = 0; k < 13; ++k) a[fmt::format("s{}", ids[k])] = k < 9 ? Split::Train : k < 10 ? Split::Val : Split::Test;
      auto out = split_by_subject(many, a);
      std::set<std::string> tr, va, te;
      for (const auto& r : out.train) tr.insert(r.subject_id);
      for (const auto& r : out.val) va.insert(r.subject_id);
      for (const auto& r : out.test) te.insert(r.subject_id);
      for (const auto& s1 : tr) {
        CHECK(!va.count(s1));
        CHECK(!te.count(s1));
      }
      for (const auto& s1 : va) CHECK(!te.count(s1));
      CHECK(out.train.size() + out.val.size() + out.test.size() == many.size());
    }
  }
}

TEST_CASE("eye crop box follows the 25 percent margin rule") {
  std::vector<Point> lm = {{100, 100}, {200, 120}};
  auto box = eye_crop_box({640, 480}, lm);
  CHECK(box.x == 75);
  CHECK(box.x + box.width == 225);
  CHECK(box.y == 95);
  CHECK(box.y + box.height == 125);

  cv::Mat frame(480, 640, CV_8UC1, cv::Scalar(90));
  auto crop = crop_eye_region(frame, lm);
  CHECK(crop.rows == 150);
  CHECK(crop.cols == 150);

  std::vector<Point> same = {{50, 50}, {50, 50}};
  CHECK(kind_of([&] { eye_crop_box({640, 480}, same); }) == ErrorKind::DegenerateLandmarks);
  std::vector<Point> outside = {{50, 50}, {700, 50}};
  CHECK(kind_of([&] { eye_crop_box({640, 480}, outside); }) == ErrorKind::OutOfBounds);

  SUBCASE("never exceeds the frame") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> ux(0, 639.999), uy(0, 479.999);
    for (int t = 0; t < 1000; ++t) {
      std::vector<Point> pts(2 + rng() % 6);
      for (auto& p : pts) p = {ux(rng), uy(rng)};
      auto b = eye_crop_box({640, 480}, pts);
      CHECK(b.x >= 0);
      CHECK(b.y >= 0);
      CHECK(b.x + b.width <= 640);
      CHECK(b.y + b.height <= 480);
      CHECK(b.width > 0);
      CHECK(b.height > 0);
    }
  }
}

TEST_CASE("adaptive equalization") {
  cv::Mat flat(64, 64, CV_8UC1, cv::Scalar(120));
  cv::Mat eq = equalize_adaptive(flat);
  double lo, hi;
  cv::minMaxLoc(eq, &lo, &hi);
  CHECK(lo == hi);

  cv::Mat grad(64, 64, CV_8UC1);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) grad.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(100 + (x * 11) / 64);
  cv::Mat g2 = equalize_adaptive(grad);
  CHECK(stddev(g2) > stddev(grad));
  CHECK(g2.type() == CV_8UC1);

  cv::Mat f(32, 32, CV_32FC1);
  cv::randu(f, 0.0, 1.0);
  cv::Mat fe = equalize_adaptive(f);
  cv::minMaxLoc(fe, &lo, &hi);
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);

  cv::Mat color(32, 32, CV_8UC3, cv::Scalar(20, 120, 200));
  CHECK(equalize_adaptive(color).channels() == 3);
  CHECK(kind_of([] { equalize_adaptive(cv::Mat()); }) == ErrorKind::EmptyImage);
}

TEST_CASE("model input conversion") {
  cv::Mat full(256, 256, CV_8UC1);
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x) full.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(x);
  auto t = to_model_input(full, 1);
  CHECK(t.sizes().vec() == std::vector<std::int64_t>{1, 256, 256});
  CHECK(t.min().item<float>() == -1.0f);
  CHECK(t.max().item<float>() == 1.0f);

  cv::Mat frame(480, 640, CV_8UC3, cv::Scalar(10, 20, 30));
  CHECK(to_model_input(frame, 3).sizes().vec() == std::vector<std::int64_t>{3, 256, 256});
  CHECK(to_model_input(frame, 1).sizes().vec() == std::vector<std::int64_t>{1, 256, 256});

  cv::Mat gray(100, 100, CV_32FC1, cv::Scalar(0.5));
  CHECK(to_model_input(gray, 1).abs().max().item<float>() == 0.0f);

  CHECK(kind_of([&] { to_model_input(full, 2); }) == ErrorKind::BadChannelRequest);

  SUBCASE("idempotent on its own output within one quantization step") {
    cv::Mat noise(256, 256, CV_8UC1);
    cv::randu(noise, 0, 256);
    auto a = to_model_input(noise, 1);
    auto b = to_model_input(to_image8(a), 1);
    CHECK((a - b).abs().max().item<float>() <= 2.0f / 255.0f + 1e-6f);
  }
}

TEST_CASE("image files round trip through preprocess_record") {
  TempDir dir;
  cv::Mat img(480, 640, CV_8UC1);
  cv::randu(img, 0, 256);
  cv::imwrite((dir / "f.png").string(), img);
  SampleRecord r;
  r.image_path = dir / "f.png";
  r.subject_id = "s";
  r.zone = GazeZone::Radio;
  r.condition = {Lighting::Night, Eyewear::WithGlasses};
  r.landmarks = {{100, 100}, {200, 120}};
  auto e = preprocess_record(r, {});
  CHECK(e.pixels.sizes().vec() == std::vector<std::int64_t>{1, 256, 256});
  CHECK(e.domain == Domain::Y_WithGlasses);
  CHECK(e.lighting == Lighting::Night);
  r.image_path = dir / "none.png";
  CHECK(kind_of([&] { preprocess_record(r, {}); }) == ErrorKind::MissingFile);
  write_text(dir / "junk.png", "not an image");
  r.image_path = dir / "junk.png";
  CHECK(kind_of([&] { preprocess_record(r, {}); }) == ErrorKind::BadImage);
}

TEST_CASE("synthetic pairs") {
  SyntheticSpec spec;
  spec.validate();
  CHECK(spec.min_center_separation() >= 4.0 * spec.jitter_px);

  SUBCASE("zero jitter hits the canonical centre") {
    SyntheticSpec s0 = spec;
    s0.jitter_px = 0.0;
    std::mt19937_64 rng(1);
    auto p = synth_pair(s0, GazeZone::Forward, rng);
    CHECK(p.pupil_center == s0.pupil_center_by_zone[zone_code(GazeZone::Forward)]);
  }
  SUBCASE("same seed gives bit-identical images") {
    std::mt19937_64 r1(spec.rng_seed), r2(spec.rng_seed);
    for (int i = 0; i < 5; ++i) {
      auto a = synth_pair(spec, kAllZones[i], r1, appearance_for(i, Lighting::Night));
      auto b = synth_pair(spec, kAllZones[i], r2, appearance_for(i, Lighting::Night));
      CHECK(torch::equal(a.with_glasses.pixels, b.with_glasses.pixels));
      CHECK(torch::equal(a.without_glasses.pixels, b.without_glasses.pixels));
    }
  }
  SUBCASE("nearest canonical centre classifies 700 samples perfectly") {
    std::mt19937_64 rng(3);
    int correct = 0;
    for (GazeZone z : kAllZones) {
      for (int k = 0; k < 100; ++k) {
        auto p = synth_pair(spec, z, rng, appearance_for(k % 9, k % 2 ? Lighting::Day : Lighting::Night));
        correct += nearest_zone(spec, p.pupil_center) == z;
        CHECK(distance(p.pupil_center, spec.pupil_center_by_zone[zone_code(z)]) <= spec.jitter_px + 1e-12);
      }
    }
    CHECK(correct == 700);
  }
  SUBCASE("pairs differ only inside the overlay mask") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 30; ++i) {
      auto p = synth_pair(spec, kAllZones[i % 7], rng, appearance_for(i, Lighting::Day));
      CHECK(p.with_glasses.pupil_center == p.without_glasses.pupil_center);
      auto diff = (p.with_glasses.pixels[0] != p.without_glasses.pixels[0]).to(torch::kUInt8).contiguous();
      cv::Mat d(256, 256, CV_8U, diff.data_ptr<std::uint8_t>());
      cv::Mat outside;
      cv::bitwise_and(d, p.overlay_mask == 0, outside);
      CHECK(cv::countNonZero(outside) == 0);
      CHECK(p.with_glasses.pixels.min().item<float>() >= -1.0f);
      CHECK(p.with_glasses.pixels.max().item<float>() <= 1.0f);
    }
  }
  SUBCASE("separability invariant is enforced") {
    SyntheticSpec bad = spec;
    bad.jitter_px = spec.min_center_separation();
    CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::BadConfig);
  }
}

TEST_CASE("batching") {
  std::vector<int> recs(10);
  std::iota(recs.begin(), recs.end(), 0);
  auto batches = batch_iter<int>(recs, 4, 7);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);
  CHECK(batch_iter<int>(recs, 4, 7) == batches);
  CHECK(batch_iter<int>(recs, 4, 8) != batches);

  std::multiset<int> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen == std::multiset<int>(recs.begin(), recs.end()));

  std::vector<int> none;
  CHECK(kind_of([&] { batch_iter<int>(none, 4, 1); }) == ErrorKind::EmptyDataset);
  CHECK_THROWS_AS(batch_iter<int>(recs, 0, 1), Error);
}

TEST_CASE("synthetic dataset writer") {
  TempDir a, b;
  SynthPlan plan;
  plan.images_per_zone = 4;
  plan.subjects = {0, 1};
  SyntheticSpec spec;
  auto recs = write_synthetic_dataset(spec, plan, a.path());
  write_synthetic_dataset(spec, plan, b.path());
  CHECK(recs.size() == 7 * 4 * 2);

  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(a / "manifest.tsv") == slurp(b / "manifest.tsv"));
  CHECK(slurp(a / "pupil_truth.tsv") == slurp(b / "pupil_truth.tsv"));

  auto loaded = load_manifest(a / "manifest.tsv");
  CHECK(loaded.size() == recs.size());
  std::map<GazeZone, int> per_zone;
  for (const auto& r : loaded) per_zone[r.zone]++;
  for (auto z : kAllZones) CHECK(per_zone[z] == 8);

  auto truth = load_pupil_truth(a / "pupil_truth.tsv");
  CHECK(truth.size() == recs.size());
  PreprocessOptions po;
  po.size = 64;
  for (const auto& r : loaded) {
    auto e = preprocess_record(r, po);
    CHECK(e.pixels.size(1) == 64);
  }
}
