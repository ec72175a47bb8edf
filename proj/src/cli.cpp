#include "gpc/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <map>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "gpc/checkpoint.hpp"
#include "gpc/error.hpp"
#include "gpc/eval.hpp"

namespace gpc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path Layout::step2_dir(Variant v) const { return root / std::string(variant_name(v)) / "step2"; }
fs::path Layout::step3_dir(Variant v) const { return root / std::string(variant_name(v)) / "step3"; }
fs::path Layout::checkpoint(Variant v, Role role) const {
  return step2_dir(v) / (std::string(role_name(role)) + ".ckpt");
}

ModelFiles model_files(const Layout& layout, std::string_view name) {
  if (name == "x-only") return {layout.step1_classifier(), {}};
  if (name == "all-data") return {layout.all_data_classifier(), {}};
  for (Variant v : {Variant::CycleGan, Variant::GpCycleGan}) {
    const auto g = layout.checkpoint(v, Role::GeneratorNg);
    if (name == variant_name(v)) return {layout.step1_classifier(), g};
    if (name == fmt::format("{}+ft", variant_name(v))) return {layout.finetuned_classifier(v), g};
  }
  throw Error(ErrorKind::BadConfig, fmt::format("unknown model '{}'", name));
}

namespace {

Dataset concat(const Dataset& a, const Dataset& b) {
  Dataset out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace

Dataset SplitData::train_all() const { return concat(train_x, train_y); }
Dataset SplitData::val_all() const { return concat(val_x, val_y); }
Dataset SplitData::test_all() const { return concat(test_x, test_y); }

SplitData load_split_data(const RunConfig& cfg) {
  if (cfg.split.empty()) throw Error(ErrorKind::BadConfig, "data.split assigns no subjects");
  const auto records = load_manifest(cfg.manifest);
  const auto parts = split_by_subject(records, cfg.split);
  std::map<std::string, Point> truth;
  if (fs::exists(cfg.pupil_truth)) truth = load_pupil_truth(cfg.pupil_truth);
  const fs::path base = cfg.manifest.parent_path();

  SplitData d;
  auto fill = [&](const std::vector<SampleRecord>& recs, Dataset& x, Dataset& y) {
    for (const auto& r : recs) {
      EyeImage e = preprocess_record(r, cfg.preprocess);
      if (auto it = truth.find(r.image_path.lexically_relative(base).generic_string()); it != truth.end()) {
        e.pupil_center = it->second;
      }
      (e.domain == Domain::X_WithoutGlasses ? x : y).push_back(std::move(e));
    }
  };
  fill(parts.train, d.train_x, d.train_y);
  fill(parts.val, d.val_x, d.val_y);
  fill(parts.test, d.test_x, d.test_y);
  return d;
}

namespace {

struct Options {
  std::string config = "gpc.json";
  std::string out;
  std::string variant;
  std::int64_t seed = -1;
  std::vector<std::string> overrides;
};

RunConfig load_config(const Options& o, bool seed_is_synthetic) {
  std::vector<std::string> ov = o.overrides;
  if (!o.out.empty()) ov.push_back("out_dir=" + json(fs::absolute(o.out).string()).dump());
  if (!o.variant.empty()) ov.push_back("train.variant=" + json(o.variant).dump());
  if (o.seed >= 0) ov.push_back(fmt::format("{}={}", seed_is_synthetic ? "synthetic.rng_seed" : "train.seed", o.seed));
  return load_run_config(o.config, ov);
}

Checkpoint require_checkpoint(const fs::path& p, ErrorKind kind, std::string_view what) {
  if (!fs::exists(p)) throw Error(kind, fmt::format("{} not found at {}", what, p.string()));
  return load_checkpoint(p);
}

// Keys that only affect steps 2 and 3.
bool later_step_key(const std::string& k) {
  for (const char* prefix : {"variant", "weights/", "lr_gan", "lr_finetune", "epochs_gan", "image_pool_size",
                             "adversarial_form", "net/gen_", "net/disc_"}) {
    if (k.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

void warn_mismatch(const Checkpoint& ckpt, const TrainConfig& cfg, std::string_view what, std::ostream& err) {
  auto keys = config_mismatch(ckpt, cfg);
  std::erase_if(keys, later_step_key);
  if (!keys.empty()) {
    err << fmt::format("warning: {} was trained under a different config ({})\n", what, fmt::join(keys, ", "));
  }
}

RunHooks hooks_for(const fs::path& dir, int max_new_epochs, bool restart, std::ostream& out) {
  RunHooks h;
  h.state_dir = dir / "state";
  h.log_path = dir / "log.tsv";
  h.max_new_epochs = max_new_epochs;
  fs::create_directories(dir);
  if (restart) fs::remove_all(h.state_dir);
  if (!fs::exists(h.state_dir / "state.json")) fs::remove(h.log_path);
  h.on_epoch = [&out](const EpochRow& r) {
    out << fmt::format("step {} epoch {}: val {:.4f} ({:.1f}s)\n", r.step, r.epoch, r.val_metric, r.seconds);
    out.flush();
  };
  return h;
}

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p);
  f << j.dump(2) << '\n';
  if (!f) throw Error(ErrorKind::IoError, p.string());
}

int report_interrupted(bool finished, std::ostream& out) {
  if (!finished) out << "stopped before completion; run the same command again to resume\n";
  return kOk;
}

// ---- commands -------------------------------------------------------------------

int cmd_synth_data(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o, true);
  const auto records = write_synthetic_dataset(cfg.synthetic, cfg.plan, cfg.data_dir);
  std::map<GazeZone, int> per_zone;
  for (const auto& r : records) per_zone[r.zone]++;
  out << fmt::format("wrote {} images to {}\n", records.size(), cfg.data_dir.string());
  for (const auto& [z, n] : per_zone) out << fmt::format("  {}\t{}\n", zone_name(z), n);
  return kOk;
}

int cmd_train(const Options& o, int step, bool all_data, int max_new_epochs, bool restart, std::ostream& out, std::ostream& err) {
  const auto cfg = load_config(o, false);
  const Layout L{cfg.out_dir};
  const Variant v = cfg.train.variant;

  // Prerequisites are checked before any data is loaded.
  std::optional<Checkpoint> cls, gen;
  if (step >= 2) {
    cls = require_checkpoint(L.step1_classifier(), ErrorKind::MissingPrerequisiteCheckpoint, "step 1 classifier");
    warn_mismatch(*cls, cfg.train, "step 1 classifier", err);
  }
  if (step == 3) {
    gen = require_checkpoint(L.checkpoint(v, Role::GeneratorNg), ErrorKind::MissingPrerequisiteCheckpoint,
                             fmt::format("step 2 ({}) generator", variant_name(v)));
  }
  const auto d = load_split_data(cfg);

  if (step == 1) {
    const fs::path dir = all_data ? L.all_data_dir() : L.step1_dir();
    auto hooks = hooks_for(dir, max_new_epochs, restart, out);
    auto run = all_data ? train_classifier(d.train_all(), d.val_all(), cfg.train, cfg.train.lr_classifier,
                                           cfg.train.epochs_classifier, 1, std::nullopt, hooks)
                        : train_classifier_step1(d.train_x, d.val_x, cfg.train, hooks);
    if (!run.finished) return report_interrupted(false, out);
    save_checkpoint(run.best, all_data ? L.all_data_classifier() : L.step1_classifier());
    out << fmt::format("best epoch {} val macro {:.4f}\n", run.best.meta.epoch, run.best.meta.val_metric);
    return kOk;
  }
  if (step == 2) {
    auto hooks = hooks_for(L.step2_dir(v), max_new_epochs, restart, out);
    auto run = train_gan_step2(d.train_x, d.train_y, d.val_x, d.val_y, *cls, cfg.train, hooks);
    if (!run.finished) return report_interrupted(false, out);
    save_checkpoint(run.generator_wg, L.checkpoint(v, Role::GeneratorWg));
    save_checkpoint(run.generator_ng, L.checkpoint(v, Role::GeneratorNg));
    save_checkpoint(run.discriminator_wg, L.checkpoint(v, Role::DiscriminatorWg));
    save_checkpoint(run.discriminator_ng, L.checkpoint(v, Role::DiscriminatorNg));
    write_json(L.step2_dir(v) / "summary.json", {{"best_epoch", run.generator_ng.meta.epoch},
                                                  {"val_metric", run.generator_ng.meta.val_metric},
                                                  {"cycle_error_epoch0", run.cycle_error_epoch0},
                                                  {"cycle_error", run.cycle_error},
                                                  {"classifier_hash_before", run.classifier_hash_before},
                                                  {"classifier_hash_after", run.classifier_hash_after}});
    out << fmt::format("best epoch {} val macro {:.4f}\n", run.generator_ng.meta.epoch,
                       run.generator_ng.meta.val_metric);
    return kOk;
  }
  auto hooks = hooks_for(L.step3_dir(v), max_new_epochs, restart, out);
  auto run = finetune_step3(*cls, *gen, d.train_x, d.train_y, d.val_all(), cfg.train, hooks);
  if (!run.finished) return report_interrupted(false, out);
  save_checkpoint(run.best, L.finetuned_classifier(v));
  write_json(L.step3_dir(v) / "summary.json", {{"best_epoch", run.best.meta.epoch},
                                                {"val_metric", run.best.meta.val_metric},
                                                {"pre_metric", run.pre_metric},
                                                {"generator_hash_before", run.generator_hash_before},
                                                {"generator_hash_after", run.generator_hash_after}});
  out << fmt::format("val macro {:.4f} -> {:.4f}\n", run.pre_metric, run.best.meta.val_metric);
  return kOk;
}

int cmd_evaluate(const Options& o, std::vector<std::string> models, const std::string& split, std::ostream& out) {
  const auto cfg = load_config(o, false);
  const Layout L{cfg.out_dir};
  const bool explicit_models = !models.empty();
  if (!explicit_models) models.assign(std::begin(kModelNames), std::end(kModelNames));
  for (const auto& m : models) model_files(L, m);
  if (split != "test" && split != "val") throw Error(ErrorKind::BadConfig, "--split must be test or val");

  std::vector<std::pair<std::string, ModelFiles>> todo;
  for (const auto& m : models) {
    auto f = model_files(L, m);
    const bool present = fs::exists(f.classifier) && (f.generator_ng.empty() || fs::exists(f.generator_ng));
    if (present) todo.emplace_back(m, f);
    else if (explicit_models) {
      throw Error(ErrorKind::MissingCheckpoint,
                  fmt::format("model '{}' needs {}{}", m, f.classifier.string(),
                              f.generator_ng.empty() ? "" : " and " + f.generator_ng.string()));
    }
  }
  if (todo.empty()) throw Error(ErrorKind::MissingCheckpoint, "no trained model found under " + L.root.string());

  const auto d = load_split_data(cfg);
  const Dataset data = split == "test" ? d.test_all() : d.val_all();

  std::string table = "model\tmicro\tmacro";
  for (auto c : kAllConditions) table += "\tmacro_" + condition_name(c);
  table += "\tremoval_ms\tclassifier_ms\n";
  for (const auto& [name, f] : todo) {
    const auto cls = load_checkpoint(f.classifier);
    std::optional<Checkpoint> gen;
    if (!f.generator_ng.empty()) gen = load_checkpoint(f.generator_ng);
    auto report = evaluate_model(cls, gen ? &*gen : nullptr, data);
    auto j = report.to_json();
    j["model"] = name;
    j["split"] = split;
    write_json(L.eval_dir() / (name + ".json"), j);
    table += fmt::format("{}\t{:.4f}\t{:.4f}", name, report.micro, report.macro);
    for (auto c : kAllConditions) {
      auto it = report.per_condition.find(condition_name(c));
      table += it == report.per_condition.end() ? "\t-" : fmt::format("\t{:.4f}", it->second.second);
    }
    auto ms = [&](const char* k) {
      auto it = report.latency_ms.find(k);
      return it == report.latency_ms.end() ? std::string("-") : fmt::format("{:.3f}", it->second);
    };
    table += fmt::format("\t{}\t{}\n", ms("removal"), ms("classifier"));
  }
  {
    fs::create_directories(L.eval_dir());
    std::ofstream f(L.eval_dir() / "summary.tsv");
    f << table;
  }
  out << table;
  return kOk;
}

int cmd_grid(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o, false);
  const Layout L{cfg.out_dir};
  const auto d = load_split_data(cfg);
  int row = 0;
  auto train_fn = [&](const Dataset& train, const Dataset& val) {
    out << fmt::format("training row {} of {} ({} images)\n", ++row, kNumConditionSets, train.size());
    out.flush();
    return train_classifier(train, val, cfg.train, cfg.train.lr_classifier, cfg.train.epochs_classifier, 1).best;
  };
  auto grid = condition_grid(train_fn, d.train_all(), d.val_all());
  fs::create_directories(L.grid_dir());
  std::ofstream f(L.grid_dir() / "grid.tsv");
  f << grid.to_tsv();
  out << grid.to_tsv();
  return kOk;
}

EyeImage load_eye(const fs::path& p, const RunConfig& cfg) {
  SampleRecord r;
  r.image_path = p;
  return preprocess_record(r, cfg.preprocess);
}

int cmd_infer(const Options& o, const std::vector<std::string>& images, bool remove_glasses,
              const std::string& save_intermediate, std::string classifier_path, std::string generator_path,
              const std::string& output, std::ostream& out) {
  const auto cfg = load_config(o, false);
  const Layout L{cfg.out_dir};
  const Variant v = cfg.train.variant;
  if (classifier_path.empty()) {
    classifier_path = (remove_glasses ? L.finetuned_classifier(v) : L.step1_classifier()).string();
  }
  if (remove_glasses && generator_path.empty()) generator_path = L.checkpoint(v, Role::GeneratorNg).string();
  const auto cls = require_checkpoint(classifier_path, ErrorKind::MissingCheckpoint, "classifier");
  std::optional<Checkpoint> gen;
  if (remove_glasses) gen = require_checkpoint(generator_path, ErrorKind::MissingCheckpoint, "glasses-removal generator");
  Pipeline p = Pipeline::from_checkpoints(cls, gen ? &*gen : nullptr);

  std::string table = "image\tzone";
  for (auto z : kAllZones) table += fmt::format("\tp_{}", zone_name(z));
  table += '\n';
  for (const auto& path : images) {
    const EyeImage e = load_eye(path, cfg);
    auto x = e.pixels.unsqueeze(0);
    auto probs = predict_probs(p, x)[0];
    const int best = static_cast<int>(probs.argmax().item<std::int64_t>());
    table += fmt::format("{}\t{}", path, zone_name(zone_from_code(best)));
    for (int z = 0; z < kNumZones; ++z) table += fmt::format("\t{:.9f}", probs[z].item<double>());
    table += '\n';
    if (remove_glasses && !save_intermediate.empty()) {
      torch::NoGradGuard ng;
      (*p.remover)->eval();
      auto removed = generator_forward(*p.remover, x)[0];
      fs::create_directories(save_intermediate);
      const auto dst = fs::path(save_intermediate) / (fs::path(path).stem().string() + "_removed.png");
      if (!cv::imwrite(dst.string(), to_image8(removed))) throw Error(ErrorKind::IoError, dst.string());
    }
  }
  out << table;
  if (!output.empty()) {
    std::ofstream f(output);
    f << table;
    if (!f) throw Error(ErrorKind::IoError, output);
  }
  return kOk;
}

int cmd_visualize(const Options& o, const std::vector<std::string>& images, std::ostream& out) {
  const auto cfg = load_config(o, false);
  const Layout L{cfg.out_dir};
  const Variant v = cfg.train.variant;
  const auto base_cls = require_checkpoint(L.step1_classifier(), ErrorKind::MissingCheckpoint, "step 1 classifier");
  const auto ft_cls = require_checkpoint(L.finetuned_classifier(v), ErrorKind::MissingCheckpoint,
                                         fmt::format("fine-tuned {} classifier", variant_name(v)));
  const auto g_ng = require_checkpoint(L.checkpoint(v, Role::GeneratorNg), ErrorKind::MissingCheckpoint,
                                       "glasses-removal generator");
  const auto g_wg = require_checkpoint(L.checkpoint(v, Role::GeneratorWg), ErrorKind::MissingCheckpoint,
                                       "glasses-adding generator");
  auto baseline = classifier_from(base_cls);
  auto finetuned = classifier_from(ft_cls);
  auto remover = generator_from(g_ng);
  auto adder = generator_from(g_wg);
  baseline->eval();
  finetuned->eval();
  remover->eval();

  // Ground-truth zones for images listed in the manifest.
  struct Known {
    GazeZone zone;
    Domain domain;
    std::optional<Point> pupil;
  };
  std::map<std::string, Known> known;
  if (fs::exists(cfg.manifest)) {
    std::map<std::string, Point> truth;
    if (fs::exists(cfg.pupil_truth)) truth = load_pupil_truth(cfg.pupil_truth);
    for (const auto& r : load_manifest(cfg.manifest)) {
      std::optional<Point> pc;
      auto it = truth.find(r.image_path.lexically_relative(cfg.manifest.parent_path()).generic_string());
      if (it != truth.end()) pc = it->second;
      known[fs::weakly_canonical(r.image_path).string()] = {r.zone, domain_of(r.condition.eyewear), pc};
    }
  }

  fs::create_directories(L.visualize_dir());
  Dataset bare;  // manifest images without glasses, for the cycle drift
  torch::NoGradGuard ng;
  for (const auto& path : images) {
    EyeImage e = load_eye(path, cfg);
    auto x = e.pixels.unsqueeze(0);
    auto base_out = classifier_forward(baseline, x);
    GazeZone zone = zone_from_code(static_cast<int>(base_out.logits.argmax(1).item<std::int64_t>()));
    const auto it = known.find(fs::weakly_canonical(path).string());
    if (it != known.end()) {
      zone = it->second.zone;
      e.domain = it->second.domain;
      e.pupil_center = it->second.pupil;
    }
    EyeImage removed = e;
    removed.pixels = generator_forward(remover, x)[0];
    auto ft_out = classifier_forward(finetuned, removed.pixels.unsqueeze(0));
    auto left = render_cam_overlay(e, base_out.cams[0], zone);
    auto right = render_cam_overlay(removed, ft_out.cams[0], zone);
    cv::Mat composite;
    cv::hconcat(left.image, right.image, composite);
    const auto dst = L.visualize_dir() / (fs::path(path).stem().string() + "_cam.png");
    if (!cv::imwrite(dst.string(), composite)) throw Error(ErrorKind::IoError, dst.string());
    out << dst.string() << '\n';
    if (it != known.end() && e.domain == Domain::X_WithoutGlasses) bare.push_back(std::move(e));
  }
  if (bare.empty()) return kOk;
  auto drift = gaze_drift(adder, remover, bare);
  auto dj = drift.to_json();
  dj["variant"] = variant_name(v);
  write_json(L.visualize_dir() / "drift.json", dj);
  out << fmt::format("cycle drift over {} no-glasses images: mean {:.3f} canvas px ({} without a detectable pupil)\n",
                     drift.evaluated, drift.mean, drift.not_found);
  return kOk;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON run configuration")->capture_default_str();
  sub->add_option("--out", o.out, "output directory (overrides out_dir)");
  sub->add_option("--seed", o.seed, "seed (synthetic data seed for synth-data, training seed otherwise)");
  sub->add_option("--variant", o.variant, "cyclegan or gpcyclegan")->check(CLI::IsMember({"cyclegan", "gpcyclegan"}));
  sub->allow_extras();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gaze zone estimation with gaze-preserving eyeglass removal"};
  app.name("gpc");
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth-data", "render the synthetic eye dataset");
  add_common(synth, o);

  int step = 0;
  bool all_data = false;
  int max_new_epochs = -1;
  bool restart = false;
  auto* train = app.add_subcommand("train", "run one training step");
  add_common(train, o);
  train->add_option("--step", step, "1, 2 or 3")->required()->check(CLI::Range(1, 3));
  train->add_flag("--all-data", all_data, "step 1 only: train on both domains (the no-removal baseline)");
  train->add_flag("--restart", restart, "discard saved progress for this step");
  train->add_option("--max-new-epochs", max_new_epochs, "stop after this many epochs; rerun to resume");

  std::vector<std::string> models;
  std::string split = "test";
  auto* evaluate = app.add_subcommand("evaluate", "evaluate trained models on a split");
  add_common(evaluate, o);
  evaluate->add_option("--model", models, "x-only, all-data, cyclegan, cyclegan+ft, gpcyclegan, gpcyclegan+ft");
  evaluate->add_option("--split", split, "test or val")->capture_default_str();

  auto* grid = app.add_subcommand("grid", "capture-condition grid of classifiers");
  add_common(grid, o);

  std::vector<std::string> images;
  bool remove_glasses = false;
  std::string save_intermediate, classifier_path, generator_path, output;
  auto* infer = app.add_subcommand("infer", "classify eye crops");
  add_common(infer, o);
  infer->add_option("images", images, "eye crop images")->required();
  infer->add_flag("--remove-glasses", remove_glasses, "run the glasses-removal generator first");
  infer->add_option("--save-intermediate", save_intermediate, "directory for glasses-removed images");
  infer->add_option("--classifier", classifier_path, "classifier checkpoint");
  infer->add_option("--generator", generator_path, "generator checkpoint");
  infer->add_option("--output", output, "also write the table to this file");

  auto* visualize = app.add_subcommand("visualize", "CAM overlays before and after glasses removal");
  add_common(visualize, o);
  visualize->add_option("images", images, "eye crop images")->required();

  std::vector<std::string> argv_store = {"gpc"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  for (auto* sub : app.get_subcommands()) {
    for (const auto& extra : sub->remaining()) {
      if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos) {
        err << "error: unexpected argument '" << extra << "'\n";
        return kUsageError;
      }
      o.overrides.push_back(extra);
    }
  }

  try {
    if (synth->parsed()) return cmd_synth_data(o, out);
    if (train->parsed()) return cmd_train(o, step, all_data, max_new_epochs, restart, out, err);
    if (evaluate->parsed()) return cmd_evaluate(o, models, split, out);
    if (grid->parsed()) return cmd_grid(o, out);
    if (infer->parsed()) {
      return cmd_infer(o, images, remove_glasses, save_intermediate, classifier_path, generator_path, output, out);
    }
    if (visualize->parsed()) return cmd_visualize(o, images, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    const bool config_problem = e.kind() == ErrorKind::BadConfig ||
                                (e.kind() == ErrorKind::MissingFile && !fs::exists(o.config));
    return config_problem ? kUsageError : kRuntimeError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace gpc::cli
