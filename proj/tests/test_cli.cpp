#include "support/doctest_torch.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "gpc/checkpoint.hpp"
#include "gpc/cli.hpp"
#include "gpc/eval.hpp"
#include "support/tempdir.hpp"

using namespace gpc;
using gpc::testing::TempDir;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result gpc_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json tiny_config_doc(int images_per_zone = 6) {
  return {
      {"train",
       {{"epochs_classifier", 2},
        {"epochs_gan", 1},
        {"batch_size", 8},
        {"early_stop_patience", 5},
        {"seed", 3},
        {"net",
         {{"image_size", 32},
          {"cls_stem", 8},
          {"cls_squeeze", 4},
          {"cls_expand", 8},
          {"gen_filters", 4},
          {"gen_blocks", 1},
          {"disc_filters", 4}}}}},
      {"synthetic", {{"rng_seed", 11}, {"images_per_zone", images_per_zone}, {"subjects", {0, 1, 2}}}},
      {"data", {{"dir", "data"}, {"split", {{"train", {"s00"}}, {"val", {"s01"}}, {"test", {"s02"}}}}}},
      {"out_dir", "run"},
  };
}

fs::path write_config(const fs::path& dir, const json& doc) {
  fs::create_directories(dir);
  const auto p = dir / "cfg.json";
  std::ofstream(p) << doc.dump(2);
  return p;
}

// One synthesized dataset with every training step completed, shared by the
// slower cases.
struct TrainedRun {
  TempDir dir{"gpc_cli"};
  fs::path config;
  cli::Layout layout;

  TrainedRun() {
    config = write_config(dir.path(), tiny_config_doc());
    layout.root = dir / "run";
    const std::string c = config.string();
    for (const auto& args : std::vector<std::vector<std::string>>{
             {"synth-data", "--config", c},
             {"train", "--step", "1", "--config", c},
             {"train", "--step", "1", "--all-data", "--config", c},
             {"train", "--step", "2", "--config", c},
             {"train", "--step", "3", "--config", c},
             {"train", "--step", "2", "--variant", "cyclegan", "--config", c},
             {"train", "--step", "3", "--variant", "cyclegan", "--config", c}}) {
      auto r = gpc_run(args);
      INFO(r.err);
      REQUIRE(r.code == cli::kOk);
    }
  }
};

TrainedRun& trained() {
  static TrainedRun run;
  return run;
}

std::vector<fs::path> images_in(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
  TempDir dir;
  const auto cfg = write_config(dir.path(), tiny_config_doc()).string();
  CHECK(gpc_run({}).code == cli::kUsageError);
  CHECK(gpc_run({"frobnicate"}).code == cli::kUsageError);
  CHECK(gpc_run({"train", "--config", cfg}).code == cli::kUsageError);
  CHECK(gpc_run({"train", "--step", "4", "--config", cfg}).code == cli::kUsageError);
  CHECK(gpc_run({"train", "--step", "1", "--variant", "pix2pix", "--config", cfg}).code == cli::kUsageError);
  CHECK(gpc_run({"synth-data", "--config", (dir / "absent.json").string()}).code == cli::kUsageError);
  CHECK(gpc_run({"synth-data", "--config", cfg, "--train.lr_gan=0"}).code == cli::kUsageError);
  CHECK(gpc_run({"synth-data", "--config", cfg, "stray"}).code == cli::kUsageError);
  CHECK(gpc_run({"evaluate", "--config", cfg, "--model", "resnet"}).code == cli::kUsageError);
  auto help = gpc_run({"--help"});
  CHECK(help.code == cli::kOk);
  CHECK(help.out.find("synth-data") != std::string::npos);
}

TEST_CASE("later steps refuse to run without their prerequisites") {
  TempDir dir;
  const auto cfg = write_config(dir.path(), tiny_config_doc()).string();
  REQUIRE(gpc_run({"synth-data", "--config", cfg}).code == cli::kOk);
  auto r = gpc_run({"train", "--step", "2", "--config", cfg});
  CHECK(r.code == cli::kRuntimeError);
  CHECK(r.err.find("MissingPrerequisiteCheckpoint") != std::string::npos);
  CHECK(r.err.find("step 1") != std::string::npos);
  REQUIRE(gpc_run({"train", "--step", "1", "--config", cfg}).code == cli::kOk);
  r = gpc_run({"train", "--step", "3", "--config", cfg});
  CHECK(r.code == cli::kRuntimeError);
  CHECK(r.err.find("MissingPrerequisiteCheckpoint") != std::string::npos);
  CHECK(r.err.find("step 2") != std::string::npos);

  r = gpc_run({"evaluate", "--model", "gpcyclegan", "--config", cfg});
  CHECK(r.code == cli::kRuntimeError);
  CHECK(r.err.find("MissingCheckpoint") != std::string::npos);
  CHECK(gpc_run({"infer", "--config", cfg, (dir / "nothing.png").string()}).code == cli::kRuntimeError);
}

TEST_CASE("synth-data is deterministic and balanced") {
  TempDir a, b;
  auto doc = tiny_config_doc(100);
  doc["synthetic"]["write_with_glasses"] = false;
  REQUIRE(gpc_run({"synth-data", "--config", write_config(a.path(), doc).string()}).code == cli::kOk);
  REQUIRE(gpc_run({"synth-data", "--config", write_config(b.path(), doc).string()}).code == cli::kOk);

  const auto records = load_manifest(a / "data/manifest.tsv");
  CHECK(records.size() == 700);
  std::map<GazeZone, int> per_zone;
  for (const auto& r : records) {
    per_zone[r.zone]++;
    CHECK(r.condition.eyewear == Eyewear::WithoutGlasses);
  }
  for (auto z : kAllZones) CHECK(per_zone[z] == 100);
  CHECK(load_pupil_truth(a / "data/pupil_truth.tsv").size() == 700);

  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a / "data")) {
    if (!e.is_regular_file()) continue;
    const auto twin = b / "data" / fs::relative(e.path(), a / "data").string();
    REQUIRE(fs::exists(twin));
    CHECK(slurp(e.path()) == slurp(twin));
    ++files;
  }
  CHECK(files == 702);

  TempDir c;
  doc["synthetic"]["rng_seed"] = 12;
  const auto other = write_config(c.path(), doc).string();
  REQUIRE(gpc_run({"synth-data", "--config", other}).code == cli::kOk);
  CHECK(slurp(a / "data/pupil_truth.tsv") != slurp(c / "data/pupil_truth.tsv"));
  // --seed overrides the synthetic seed.
  TempDir d;
  REQUIRE(gpc_run({"synth-data", "--config", write_config(d.path(), tiny_config_doc(100)).string(), "--seed", "12",
                   "--synthetic.write_with_glasses=false"})
              .code == cli::kOk);
  CHECK(slurp(d / "data/pupil_truth.tsv") == slurp(c / "data/pupil_truth.tsv"));
}

TEST_CASE("split loading follows the subject assignment") {
  TempDir dir;
  const auto cfg_path = write_config(dir.path(), tiny_config_doc());
  REQUIRE(gpc_run({"synth-data", "--config", cfg_path.string()}).code == cli::kOk);
  const auto cfg = load_run_config(cfg_path);
  const auto d = cli::load_split_data(cfg);
  const auto manifest = load_manifest(cfg.manifest);
  std::size_t expected_train = 0;
  for (const auto& r : manifest) expected_train += r.subject_id == "s00";
  CHECK(d.train_x.size() + d.train_y.size() == expected_train);
  CHECK(d.train_x.size() + d.train_y.size() + d.val_x.size() + d.val_y.size() + d.test_x.size() + d.test_y.size() ==
        manifest.size());
  for (const auto& e : d.train_x) {
    CHECK(e.subject_id == "s00");
    CHECK(e.domain == Domain::X_WithoutGlasses);
    CHECK(e.pupil_center.has_value());
    CHECK(e.pixels.sizes() == torch::IntArrayRef({1, 32, 32}));
  }
  for (const auto& e : d.val_y) {
    CHECK(e.subject_id == "s01");
    CHECK(e.domain == Domain::Y_WithGlasses);
  }
  for (const auto& e : d.test_all()) CHECK(e.subject_id == "s02");

  // Pupil truth matches the synthetic renderer's nearest-zone oracle.
  for (const auto& e : d.train_x) CHECK(nearest_zone(cfg.synthetic, *e.pupil_center) == e.zone);
}

TEST_CASE("the three training steps produce every checkpoint") {
  auto& t = trained();
  const auto& L = t.layout;
  CHECK(fs::exists(L.step1_classifier()));
  CHECK(fs::exists(L.all_data_classifier()));
  for (Variant v : {Variant::CycleGan, Variant::GpCycleGan}) {
    for (Role r : {Role::GeneratorWg, Role::GeneratorNg, Role::DiscriminatorWg, Role::DiscriminatorNg}) {
      CHECK(load_checkpoint(L.checkpoint(v, r)).role == r);
    }
    CHECK(load_checkpoint(L.finetuned_classifier(v)).role == Role::Classifier);
    auto summary = json::parse(slurp(L.step2_dir(v) / "summary.json"));
    CHECK(summary["classifier_hash_before"] == summary["classifier_hash_after"]);
    CHECK(read_epoch_log(L.step2_dir(v) / "log.tsv").size() == 1);
  }
  const auto gp = load_checkpoint(L.checkpoint(Variant::GpCycleGan, Role::GeneratorNg));
  const auto plain = load_checkpoint(L.checkpoint(Variant::CycleGan, Role::GeneratorNg));
  CHECK_FALSE(gp.same_parameters(plain));
  CHECK(load_checkpoint(L.step1_classifier()).meta.config["variant"] == "gpcyclegan");
}

TEST_CASE("an interrupted step resumes to the same result") {
  TempDir a, b;
  auto doc = tiny_config_doc();
  doc["train"]["epochs_classifier"] = 3;
  const auto ca = write_config(a.path(), doc).string();
  const auto cb = write_config(b.path(), doc).string();
  REQUIRE(gpc_run({"synth-data", "--config", ca}).code == cli::kOk);
  REQUIRE(gpc_run({"synth-data", "--config", cb}).code == cli::kOk);

  REQUIRE(gpc_run({"train", "--step", "1", "--config", ca}).code == cli::kOk);
  auto part = gpc_run({"train", "--step", "1", "--config", cb, "--max-new-epochs", "1"});
  REQUIRE(part.code == cli::kOk);
  CHECK(part.out.find("resume") != std::string::npos);
  CHECK_FALSE(fs::exists(b / "run/step1/classifier.ckpt"));
  REQUIRE(gpc_run({"train", "--step", "1", "--config", cb}).code == cli::kOk);

  auto la = read_epoch_log(a / "run/step1/log.tsv");
  auto lb = read_epoch_log(b / "run/step1/log.tsv");
  REQUIRE(la.size() == 3);
  REQUIRE(lb.size() == la.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    la[i].seconds = lb[i].seconds = 0;
    CHECK(la[i] == lb[i]);
  }
  CHECK(load_checkpoint(a / "run/step1/classifier.ckpt").parameter_hash() ==
        load_checkpoint(b / "run/step1/classifier.ckpt").parameter_hash());

  // A changed config does not silently continue old progress.
  auto changed = gpc_run({"train", "--step", "1", "--config", cb, "--train.lr_classifier=0.001"});
  CHECK(changed.code == cli::kRuntimeError);
  CHECK(changed.err.find("ConfigMismatch") != std::string::npos);
  CHECK(gpc_run({"train", "--step", "1", "--config", cb, "--train.lr_classifier=0.001", "--restart"}).code ==
        cli::kOk);
}

TEST_CASE("evaluate writes one report per model and a summary table") {
  auto& t = trained();
  auto r = gpc_run({"evaluate", "--config", t.config.string()});
  INFO(r.err);
  REQUIRE(r.code == cli::kOk);
  std::istringstream table(slurp(t.layout.eval_dir() / "summary.tsv"));
  std::string line;
  std::getline(table, line);
  CHECK(line.rfind("model\tmicro\tmacro", 0) == 0);
  int rows = 0;
  while (std::getline(table, line)) {
    const auto name = line.substr(0, line.find('\t'));
    CHECK(name == cli::kModelNames[rows]);
    auto report = json::parse(slurp(t.layout.eval_dir() / (name + ".json")));
    for (const char* k : {"micro", "macro", "confusion", "per_condition", "latency_ms"}) {
      CHECK_MESSAGE(report.contains(k), k);
    }
    CHECK(report["split"] == "test");
    CHECK(line.find(fmt::format("\t{:.4f}\t{:.4f}", report["micro"].get<double>(), report["macro"].get<double>())) !=
          std::string::npos);
    const bool removal = name.find("cyclegan") != std::string::npos;
    CHECK(report["latency_ms"].contains("removal") == removal);
    ++rows;
  }
  CHECK(rows == 6);

  // Cross-check one model against a direct evaluation.
  const auto cfg = load_run_config(t.config);
  const auto d = cli::load_split_data(cfg);
  const auto cls = load_checkpoint(t.layout.finetuned_classifier(Variant::GpCycleGan));
  const auto gen = load_checkpoint(t.layout.checkpoint(Variant::GpCycleGan, Role::GeneratorNg));
  auto direct = evaluate_model(cls, &gen, d.test_all());
  auto saved = json::parse(slurp(t.layout.eval_dir() / "gpcyclegan+ft.json"));
  CHECK(saved["micro"].get<double>() == direct.micro);
  CHECK(saved["macro"].get<double>() == direct.macro);

  auto one = gpc_run({"evaluate", "--config", t.config.string(), "--model", "x-only", "--split", "val"});
  REQUIRE(one.code == cli::kOk);
  CHECK(json::parse(slurp(t.layout.eval_dir() / "x-only.json"))["split"] == "val");
}

TEST_CASE("infer reports a probability row per image") {
  auto& t = trained();
  const auto cfg = load_run_config(t.config);
  const auto imgs = images_in(cfg.data_dir / "ng");
  TempDir scratch;
  const auto table_path = scratch / "out.tsv";
  auto r = gpc_run({"infer", "--config", t.config.string(), imgs[0].string(), imgs[1].string(), "--output",
                    table_path.string()});
  INFO(r.err);
  REQUIRE(r.code == cli::kOk);
  CHECK(slurp(table_path) == r.out);

  std::istringstream lines(r.out);
  std::string line;
  std::getline(lines, line);
  auto classifier = classifier_from(load_checkpoint(t.layout.step1_classifier()));
  classifier->eval();
  for (int i = 0; i < 2; ++i) {
    REQUIRE(std::getline(lines, line));
    std::istringstream cols(line);
    std::string path, zone, cell;
    std::getline(cols, path, '\t');
    std::getline(cols, zone, '\t');
    std::vector<double> p;
    while (std::getline(cols, cell, '\t')) p.push_back(std::stod(cell));
    REQUIRE(p.size() == kNumZones);
    double sum = 0;
    for (double v : p) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

    SampleRecord rec;
    rec.image_path = imgs[i];
    torch::NoGradGuard ng;
    auto expect = classifier_forward(classifier, preprocess_record(rec, cfg.preprocess).pixels.unsqueeze(0)).probs[0];
    for (int z = 0; z < kNumZones; ++z) CHECK(p[z] == doctest::Approx(expect[z].item<double>()).epsilon(1e-8));
    CHECK(zone == zone_name(zone_from_code(static_cast<int>(expect.argmax().item<std::int64_t>()))));
  }

  auto removed = gpc_run({"infer", "--config", t.config.string(), "--remove-glasses", "--save-intermediate",
                          (scratch / "inter").string(), images_in(cfg.data_dir / "wg")[0].string()});
  INFO(removed.err);
  REQUIRE(removed.code == cli::kOk);
  const auto inter = images_in(scratch / "inter");
  REQUIRE(inter.size() == 1);
  CHECK(cv::imread(inter[0].string(), cv::IMREAD_UNCHANGED).size() == cv::Size(32, 32));
}

TEST_CASE("visualize renders side-by-side CAM composites") {
  auto& t = trained();
  const auto cfg = load_run_config(t.config);
  const auto ng = images_in(cfg.data_dir / "ng");
  const auto wg = images_in(cfg.data_dir / "wg");
  auto r = gpc_run({"visualize", "--config", t.config.string(), wg[0].string(), ng[0].string()});
  INFO(r.err);
  REQUIRE(r.code == cli::kOk);
  const auto composite = cv::imread((t.layout.visualize_dir() / (wg[0].stem().string() + "_cam.png")).string());
  REQUIRE_FALSE(composite.empty());
  CHECK(composite.cols == 2 * kModelInputSize);
  CHECK(composite.rows == kModelInputSize);
  const cv::Mat left = composite.colRange(0, kModelInputSize);
  const cv::Mat right = composite.colRange(kModelInputSize, 2 * kModelInputSize);
  CHECK(cv::norm(left, right, cv::NORM_L1) > 0);
  auto drift = json::parse(slurp(t.layout.visualize_dir() / "drift.json"));
  CHECK(drift["evaluated"].get<int>() + drift["not_found"].get<int>() == 1);
}
