#include "gpc/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "gpc/error.hpp"
#include "gpc/eval.hpp"

namespace gpc {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view variant_name(Variant v) { return v == Variant::CycleGan ? "cyclegan" : "gpcyclegan"; }

Variant variant_from_name(std::string_view name) {
  if (name == "cyclegan") return Variant::CycleGan;
  if (name == "gpcyclegan") return Variant::GpCycleGan;
  throw Error(ErrorKind::BadConfig, fmt::format("unknown variant '{}'", name));
}

void TrainConfig::validate() const {
  weights.validate();
  net.validate();
  if (!(lr_classifier > 0 && lr_gan > 0 && lr_finetune > 0)) throw Error(ErrorKind::BadConfig, "learning rates must be positive");
  if (epochs_classifier < 1 || epochs_gan < 1) throw Error(ErrorKind::BadConfig, "epochs must be >= 1");
  if (early_stop_patience < 1) throw Error(ErrorKind::BadConfig, "early_stop_patience must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::BadConfig, "batch_size must be >= 1");
  if (image_pool_size < 0) throw Error(ErrorKind::BadConfig, "image_pool_size must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"variant", variant_name(variant)},
          {"weights", weights},
          {"lr_classifier", lr_classifier},
          {"lr_gan", lr_gan},
          {"lr_finetune", lr_finetune},
          {"epochs_classifier", epochs_classifier},
          {"epochs_gan", epochs_gan},
          {"batch_size", batch_size},
          {"early_stop_patience", early_stop_patience},
          {"image_pool_size", image_pool_size},
          {"adversarial_form", adversarial_form == losses::AdversarialForm::Log ? "log" : "least_squares"},
          {"seed", seed},
          {"net", net}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
    if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
    if (j.contains("lr_classifier")) c.lr_classifier = j.at("lr_classifier").get<double>();
    if (j.contains("lr_gan")) c.lr_gan = j.at("lr_gan").get<double>();
    if (j.contains("lr_finetune")) c.lr_finetune = j.at("lr_finetune").get<double>();
    if (j.contains("epochs_classifier")) c.epochs_classifier = j.at("epochs_classifier").get<int>();
    if (j.contains("epochs_gan")) c.epochs_gan = j.at("epochs_gan").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("early_stop_patience")) c.early_stop_patience = j.at("early_stop_patience").get<int>();
    if (j.contains("image_pool_size")) c.image_pool_size = j.at("image_pool_size").get<int>();
    if (j.contains("adversarial_form")) {
      const auto f = j.at("adversarial_form").get<std::string>();
      if (f == "log") c.adversarial_form = losses::AdversarialForm::Log;
      else if (f == "least_squares") c.adversarial_form = losses::AdversarialForm::LeastSquares;
      else throw Error(ErrorKind::BadConfig, fmt::format("unknown adversarial_form '{}'", f));
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("net")) c.net = j.at("net").get<NetConfig>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadConfig, e.what());
  }
  c.validate();
  return c;
}

std::uint64_t TrainConfig::hash() const { return fnv1a(to_json().dump()); }

std::vector<std::string> config_mismatch(const Checkpoint& ckpt, const TrainConfig& cfg) {
  if (ckpt.meta.config_hash == cfg.hash()) return {};
  auto keys = json_diff_keys(ckpt.meta.config, cfg.to_json());
  if (keys.empty()) keys.push_back("config_hash");
  return keys;
}

void use_deterministic_backend() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

// ---- image pool ----------------------------------------------------------------

ImagePool::ImagePool(int capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
  if (capacity < 0) throw Error(ErrorKind::BadConfig, "pool capacity must be >= 0");
}

torch::Tensor ImagePool::query(const torch::Tensor& images) {
  if (capacity_ == 0) return images;
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(images.size(0)));
  for (std::int64_t i = 0; i < images.size(0); ++i) {
    auto img = images[i].detach().clone();
    if (size() < capacity_) {
      buffer_.push_back(img);
      out.push_back(img);
    } else if (rng_() % 2 == 0) {
      const auto k = static_cast<std::size_t>(rng_() % buffer_.size());
      out.push_back(buffer_[k]);
      buffer_[k] = img;
    } else {
      out.push_back(img);
    }
  }
  return torch::stack(out);
}

void ImagePool::set_buffer(std::vector<torch::Tensor> images) {
  if (static_cast<int>(images.size()) > capacity_) throw Error(ErrorKind::BadConfig, "pool buffer exceeds capacity");
  buffer_ = std::move(images);
}

// ---- early stopping ------------------------------------------------------------

namespace {
constexpr double kImprovement = 1e-4;
}

StopDecision early_stop_check(std::span<const double> history, int patience) {
  if (history.empty()) return StopDecision::Continue;
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > history[best] + kImprovement) best = i;
  }
  const auto since = history.size() - 1 - best;
  return static_cast<int>(since) >= patience ? StopDecision::Stop : StopDecision::Continue;
}

std::size_t best_index(std::span<const double> history) {
  if (history.empty()) throw Error(ErrorKind::Empty, "empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > history[best]) best = i;
  }
  return best;
}

// ---- epoch log -----------------------------------------------------------------

std::string epoch_log_header() { return "step\tepoch\tadv\tcyc\tidentity\tgaze\tce\tval_metric\tseconds"; }

std::string epoch_log_line(const EpochRow& r) {
  return fmt::format("{}\t{}\t{:.9g}\t{:.9g}\t{:.9g}\t{:.9g}\t{:.9g}\t{:.9g}\t{:.3f}", r.step, r.epoch, r.adv, r.cyc,
                     r.identity, r.gaze, r.ce, r.val_metric, r.seconds);
}

std::vector<EpochRow> read_epoch_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, path.string());
  std::vector<EpochRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.rfind("step", 0) == 0) continue;
    std::istringstream ls(line);
    EpochRow r;
    if (!(ls >> r.step >> r.epoch >> r.adv >> r.cyc >> r.identity >> r.gaze >> r.ce >> r.val_metric >> r.seconds)) {
      throw Error(ErrorKind::MalformedRow, fmt::format("{}:{}", path.string(), lineno));
    }
    rows.push_back(r);
  }
  return rows;
}

namespace {

using Clock = std::chrono::steady_clock;

json row_to_json(const EpochRow& r) {
  return {r.step, r.epoch, r.adv, r.cyc, r.identity, r.gaze, r.ce, r.val_metric, r.seconds};
}

EpochRow row_from_json(const json& j) {
  return {j[0].get<int>(),    j[1].get<int>(),    j[2].get<double>(), j[3].get<double>(), j[4].get<double>(),
          j[5].get<double>(), j[6].get<double>(), j[7].get<double>(), j[8].get<double>()};
}

void append_log(const RunHooks& hooks, const EpochRow& row) {
  if (!hooks.log_path.empty()) {
    const bool fresh = !fs::exists(hooks.log_path);
    if (hooks.log_path.has_parent_path()) fs::create_directories(hooks.log_path.parent_path());
    std::ofstream out(hooks.log_path, std::ios::app);
    if (!out) throw Error(ErrorKind::IoError, hooks.log_path.string());
    if (fresh) out << epoch_log_header() << '\n';
    out << epoch_log_line(row) << '\n';
  }
  if (hooks.on_epoch) hooks.on_epoch(row);
}

void check_finite(const torch::Tensor& loss, std::string_view what) {
  if (!std::isfinite(loss.item<double>())) throw Error(ErrorKind::Divergence, fmt::format("{} is not finite", what));
}

void check_channels(const Dataset& data, int channels, std::string_view what) {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, fmt::format("{} is empty", what));
  if (data.front().pixels.size(0) != channels) {
    throw Error(ErrorKind::ChannelMismatch, fmt::format("{} has {} channels, networks expect {}", what,
                                                        data.front().pixels.size(0), channels));
  }
}

CheckpointMeta meta_for(const TrainConfig& cfg, int epoch, double metric) {
  return {epoch, metric, cfg.hash(), cfg.seed, cfg.to_json()};
}

std::uint64_t epoch_seed(const TrainConfig& cfg, int step, int epoch, int stream = 0) {
  return cfg.seed * 1000003ULL + static_cast<std::uint64_t>(step) * 10007ULL + static_cast<std::uint64_t>(epoch) * 101ULL +
         static_cast<std::uint64_t>(stream);
}

// Everything needed to continue a step after an interruption.
struct Resumable {
  std::vector<std::pair<std::string, torch::nn::Module*>> modules;
  std::vector<std::pair<std::string, torch::optim::Optimizer*>> optimizers;
  std::vector<std::pair<std::string, Checkpoint*>> bests;
  std::vector<std::pair<std::string, ImagePool*>> pools;
};

void replace_file(const fs::path& tmp, const fs::path& dst) { fs::rename(tmp, dst); }

void save_resume(const fs::path& dir, const Resumable& r, const json& progress) {
  fs::create_directories(dir);
  for (const auto& [name, m] : r.modules) {
    torch::serialize::OutputArchive ar;
    m->save(ar);
    ar.save_to((dir / (name + ".module.tmp")).string());
    replace_file(dir / (name + ".module.tmp"), dir / (name + ".module"));
  }
  for (const auto& [name, opt] : r.optimizers) {
    torch::serialize::OutputArchive ar;
    opt->save(ar);
    ar.save_to((dir / (name + ".optim.tmp")).string());
    replace_file(dir / (name + ".optim.tmp"), dir / (name + ".optim"));
  }
  for (const auto& [name, ckpt] : r.bests) save_checkpoint(*ckpt, dir / (name + ".best.ckpt"));
  for (const auto& [name, pool] : r.pools) {
    auto buf = pool->buffer();
    torch::save(buf, (dir / (name + ".pool.tmp")).string());
    replace_file(dir / (name + ".pool.tmp"), dir / (name + ".pool"));
  }
  {
    std::ofstream out(dir / "state.json.tmp");
    out << progress.dump(1);
    if (!out) throw Error(ErrorKind::IoError, (dir / "state.json").string());
  }
  replace_file(dir / "state.json.tmp", dir / "state.json");
}

std::optional<json> load_resume(const fs::path& dir, const Resumable& r, std::uint64_t config_hash) {
  if (dir.empty() || !fs::exists(dir / "state.json")) return std::nullopt;
  std::ifstream in(dir / "state.json");
  json progress = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (progress.is_discarded()) throw Error(ErrorKind::CorruptCheckpoint, (dir / "state.json").string());
  if (progress.value("config_hash", std::uint64_t{0}) != config_hash) {
    throw Error(ErrorKind::ConfigMismatch, fmt::format("resume state in {} was written under another config", dir.string()));
  }
  for (const auto& [name, m] : r.modules) {
    torch::serialize::InputArchive ar;
    ar.load_from((dir / (name + ".module")).string());
    m->load(ar);
  }
  for (const auto& [name, opt] : r.optimizers) {
    torch::serialize::InputArchive ar;
    ar.load_from((dir / (name + ".optim")).string());
    opt->load(ar);
  }
  for (const auto& [name, ckpt] : r.bests) *ckpt = load_checkpoint(dir / (name + ".best.ckpt"));
  for (const auto& [name, pool] : r.pools) {
    std::vector<torch::Tensor> buf;
    torch::load(buf, (dir / (name + ".pool")).string());
    pool->set_buffer(std::move(buf));
  }
  return progress;
}

struct Progress {
  std::vector<EpochRow> log;
  std::vector<double> metrics;
  json extra = json::object();

  json to_json(std::uint64_t config_hash) const {
    json rows = json::array();
    for (const auto& r : log) rows.push_back(row_to_json(r));
    return {{"config_hash", config_hash}, {"log", rows}, {"metrics", metrics}, {"extra", extra}};
  }
  static Progress from_json(const json& j) {
    Progress p;
    for (const auto& r : j.at("log")) p.log.push_back(row_from_json(r));
    p.metrics = j.at("metrics").get<std::vector<double>>();
    p.extra = j.at("extra");
    return p;
  }
};

void require_all_zones(const Dataset& train) {
  std::set<GazeZone> seen;
  for (const auto& item : train) seen.insert(item.zone);
  std::vector<std::string_view> missing;
  for (auto z : kAllZones) {
    if (!seen.count(z)) missing.push_back(zone_name(z));
  }
  if (!missing.empty()) {
    throw Error(ErrorKind::MissingClass, fmt::format("training data lacks zones: {}", fmt::join(missing, ", ")));
  }
}

}  // namespace

// ---- classifier training -------------------------------------------------------

ClassifierRun train_classifier(const Dataset& train, const Dataset& val, const TrainConfig& cfg, double lr, int epochs,
                               int step, const std::optional<Checkpoint>& init, const RunHooks& hooks) {
  cfg.validate();
  check_channels(train, cfg.net.channels, "training data");
  check_channels(val, cfg.net.channels, "validation data");
  require_all_zones(train);

  GazeClassifier net = init ? classifier_from(*init) : build_classifier(cfg.net, cfg.seed);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(lr).betas({0.9, 0.999}));
  ClassifierRun run;
  Progress prog;
  Resumable res{{{"classifier", net.ptr().get()}}, {{"adam", &opt}}, {{"classifier", &run.best}}, {}};
  if (!hooks.state_dir.empty()) {
    if (auto j = load_resume(hooks.state_dir, res, cfg.hash())) prog = Progress::from_json(*j);
  }

  Pipeline pipeline;
  pipeline.classifier = net;
  int new_epochs = 0;
  while (static_cast<int>(prog.metrics.size()) < epochs &&
         early_stop_check(prog.metrics, cfg.early_stop_patience) == StopDecision::Continue) {
    if (hooks.max_new_epochs >= 0 && new_epochs >= hooks.max_new_epochs) {
      run.finished = false;
      break;
    }
    const auto t0 = Clock::now();
    const int epoch = static_cast<int>(prog.metrics.size()) + 1;
    net->train();
    BatchIterator it(train.size(), static_cast<std::size_t>(cfg.batch_size), epoch_seed(cfg, step, epoch));
    double ce_sum = 0.0;
    int batches = 0;
    while (auto idx = it.next()) {
      auto batch = stack_batch(train, *idx);
      opt.zero_grad();
      auto out = classifier_forward(net, batch.images);
      auto loss = losses::cross_entropy(out.probs, batch.labels);
      check_finite(loss, "classifier loss");
      loss.backward();
      opt.step();
      ce_sum += loss.item<double>();
      ++batches;
    }
    EpochRow row{step, epoch};
    row.ce = ce_sum / batches;
    row.val_metric = macro_accuracy_of(pipeline, val);
    row.seconds = std::chrono::duration<double>(Clock::now() - t0).count();

    const bool improved = prog.metrics.empty() || row.val_metric > prog.metrics[best_index(prog.metrics)];
    if (improved) run.best = capture(*net, Role::Classifier, meta_for(cfg, epoch, row.val_metric));
    prog.metrics.push_back(row.val_metric);
    prog.log.push_back(row);
    if (!hooks.state_dir.empty()) save_resume(hooks.state_dir, res, prog.to_json(cfg.hash()));
    append_log(hooks, row);
    ++new_epochs;
  }
  run.log = prog.log;
  return run;
}

ClassifierRun train_classifier_step1(const Dataset& train_x, const Dataset& val, const TrainConfig& cfg,
                                     const RunHooks& hooks) {
  for (const auto& item : train_x) {
    if (item.domain != Domain::X_WithoutGlasses) {
      throw Error(ErrorKind::DomainError, "step-1 training data must be without-glasses images only");
    }
  }
  return train_classifier(train_x, val, cfg, cfg.lr_classifier, cfg.epochs_classifier, 1, std::nullopt, hooks);
}

// ---- step 2 --------------------------------------------------------------------

CycleGanTrainer::CycleGanTrainer(const Checkpoint& frozen_classifier, const TrainConfig& c)
    : pool_wg(c.image_pool_size, c.seed + 11), pool_ng(c.image_pool_size, c.seed + 12), cfg(c) {
  cfg.validate();
  if (frozen_classifier.net_config().channels != cfg.net.channels) {
    throw Error(ErrorKind::ChannelMismatch, "classifier checkpoint and config disagree on channels");
  }
  classifier = classifier_from(frozen_classifier);
  for (auto& p : classifier->parameters()) p.set_requires_grad(false);
  classifier->eval();

  g_wg = build_generator(cfg.net, cfg.seed + 1);
  g_ng = build_generator(cfg.net, cfg.seed + 2);
  d_wg = build_discriminator(cfg.net, cfg.seed + 3);
  d_ng = build_discriminator(cfg.net, cfg.seed + 4);

  auto gp = g_wg->parameters();
  for (auto& p : g_ng->parameters()) gp.push_back(p);
  auto dp = d_wg->parameters();
  for (auto& p : d_ng->parameters()) dp.push_back(p);
  opt_g = std::make_unique<torch::optim::Adam>(gp, torch::optim::AdamOptions(cfg.lr_gan).betas({0.5, 0.999}));
  opt_d = std::make_unique<torch::optim::Adam>(dp, torch::optim::AdamOptions(cfg.lr_gan).betas({0.5, 0.999}));
}

CycleGanTrainer::StepLosses CycleGanTrainer::step(const torch::Tensor& x, const torch::Tensor& y) {
  g_wg->train();
  g_ng->train();
  d_wg->train();
  d_ng->train();
  const auto form = cfg.adversarial_form;

  opt_g->zero_grad();
  auto fake_y = g_wg->forward(x);
  auto rec_x = g_ng->forward(fake_y);
  auto fake_x = g_ng->forward(y);
  auto rec_y = g_wg->forward(fake_x);
  auto idt_y = g_wg->forward(y);
  auto idt_x = g_ng->forward(x);
  auto s_fake_wg = d_wg->forward(fake_y);
  auto s_fake_ng = d_ng->forward(fake_x);

  losses::GanLossParts parts;
  parts.adversarial = losses::generator_adversarial(s_fake_wg, s_fake_ng, form);
  parts.cycle = losses::cycle_consistency(x, rec_x, y, rec_y);
  parts.identity = losses::identity(y, idt_y, x, idt_x);
  torch::Tensor total;
  if (cfg.variant == Variant::GpCycleGan) {
    auto cams_real = classifier->forward(x).cams;
    auto cams_rec = classifier->forward(rec_x).cams;
    parts.gaze = losses::gaze_consistency(cams_real, cams_rec, cfg.weights.tau);
    total = losses::total_gpcyclegan(parts, cfg.weights);
  } else {
    total = losses::total_cyclegan(parts, cfg.weights);
  }
  check_finite(total, "generator loss");
  total.backward();
  opt_g->step();

  opt_d->zero_grad();
  auto pooled_y = pool_wg.query(fake_y.detach());
  auto pooled_x = pool_ng.query(fake_x.detach());
  auto r_wg = d_wg->forward(y);
  auto f_wg = d_wg->forward(pooled_y);
  auto r_ng = d_ng->forward(x);
  auto f_ng = d_ng->forward(pooled_x);
  auto d_total = losses::discriminator_loss(r_wg, f_wg, form) + losses::discriminator_loss(r_ng, f_ng, form);
  check_finite(d_total, "discriminator loss");
  d_total.backward();
  opt_d->step();

  StepLosses out;
  {
    torch::NoGradGuard guard;
    out.adv = losses::adversarial(r_wg, s_fake_wg.detach(), r_ng, s_fake_ng.detach()).item<double>();
  }
  out.cyc = parts.cycle.item<double>();
  out.identity = parts.identity.item<double>();
  out.gaze = parts.gaze.defined() ? parts.gaze.item<double>() : 0.0;
  out.gen_total = total.item<double>();
  out.disc_total = d_total.item<double>();
  return out;
}

namespace {

double cycle_error(ResnetGenerator& g_wg, ResnetGenerator& g_ng, const Dataset& val_x, int batch_size) {
  torch::NoGradGuard guard;
  g_wg->eval();
  g_ng->eval();
  double sum = 0.0;
  BatchIterator it(val_x.size(), static_cast<std::size_t>(batch_size), 0, false);
  while (auto idx = it.next()) {
    auto x = stack_batch(val_x, *idx).images;
    auto rec = g_ng->forward(g_wg->forward(x));
    sum += losses::l1_mean(rec, x).item<double>() * static_cast<double>(idx->size());
  }
  return sum / static_cast<double>(val_x.size());
}

std::vector<std::size_t> cyclic_indices(const std::vector<std::size_t>& order, std::size_t start, std::size_t count) {
  std::vector<std::size_t> out(count);
  for (std::size_t k = 0; k < count; ++k) out[k] = order[(start + k) % order.size()];
  return out;
}

}  // namespace

GanRun train_gan_step2(const Dataset& train_x, const Dataset& train_y, const Dataset& val_x, const Dataset& val_y,
                       const Checkpoint& frozen_classifier, const TrainConfig& cfg, const RunHooks& hooks) {
  cfg.validate();
  check_channels(train_x, cfg.net.channels, "train_x");
  check_channels(train_y, cfg.net.channels, "train_y");
  check_channels(val_x, cfg.net.channels, "val_x");
  check_channels(val_y, cfg.net.channels, "val_y");

  CycleGanTrainer t(frozen_classifier, cfg);
  GanRun run;
  run.classifier_hash_before = module_hash(*t.classifier);

  Progress prog;
  Resumable res{{{"g_wg", t.g_wg.ptr().get()},
                 {"g_ng", t.g_ng.ptr().get()},
                 {"d_wg", t.d_wg.ptr().get()},
                 {"d_ng", t.d_ng.ptr().get()}},
                {{"adam_g", t.opt_g.get()}, {"adam_d", t.opt_d.get()}},
                {{"generator_wg", &run.generator_wg},
                 {"generator_ng", &run.generator_ng},
                 {"discriminator_wg", &run.discriminator_wg},
                 {"discriminator_ng", &run.discriminator_ng}},
                {{"pool_wg", &t.pool_wg}, {"pool_ng", &t.pool_ng}}};
  if (!hooks.state_dir.empty()) {
    if (auto j = load_resume(hooks.state_dir, res, cfg.hash())) prog = Progress::from_json(*j);
  }
  if (prog.extra.contains("cycle_error_epoch0")) {
    run.cycle_error_epoch0 = prog.extra["cycle_error_epoch0"].get<double>();
    run.cycle_error = prog.extra["cycle_error"].get<std::vector<double>>();
  } else {
    run.cycle_error_epoch0 = cycle_error(t.g_wg, t.g_ng, val_x, cfg.batch_size);
  }

  Pipeline pipeline;
  pipeline.classifier = t.classifier;
  pipeline.remover = t.g_ng;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps = (std::max(train_x.size(), train_y.size()) + bs - 1) / bs;

  int new_epochs = 0;
  while (static_cast<int>(prog.metrics.size()) < cfg.epochs_gan &&
         early_stop_check(prog.metrics, cfg.early_stop_patience) == StopDecision::Continue) {
    if (hooks.max_new_epochs >= 0 && new_epochs >= hooks.max_new_epochs) {
      run.finished = false;
      break;
    }
    const auto t0 = Clock::now();
    const int epoch = static_cast<int>(prog.metrics.size()) + 1;
    t.pool_wg.reseed(epoch_seed(cfg, 2, epoch, 1));
    t.pool_ng.reseed(epoch_seed(cfg, 2, epoch, 2));
    const auto order_x = shuffled_indices(train_x.size(), epoch_seed(cfg, 2, epoch, 3));
    const auto order_y = shuffled_indices(train_y.size(), epoch_seed(cfg, 2, epoch, 4));

    EpochRow row{2, epoch};
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t n = std::min(bs, std::max(train_x.size(), train_y.size()) - s * bs);
      auto x = stack_batch(train_x, cyclic_indices(order_x, s * bs, n)).images;
      auto y = stack_batch(train_y, cyclic_indices(order_y, s * bs, n)).images;
      const auto l = t.step(x, y);
      row.adv += l.adv;
      row.cyc += l.cyc;
      row.identity += l.identity;
      row.gaze += l.gaze;
    }
    const double ns = static_cast<double>(steps);
    row.adv /= ns;
    row.cyc /= ns;
    row.identity /= ns;
    row.gaze /= ns;
    row.val_metric = macro_accuracy_of(pipeline, val_y);
    run.cycle_error.push_back(cycle_error(t.g_wg, t.g_ng, val_x, cfg.batch_size));
    row.seconds = std::chrono::duration<double>(Clock::now() - t0).count();

    const bool improved = prog.metrics.empty() || row.val_metric > prog.metrics[best_index(prog.metrics)];
    if (improved) {
      const auto meta = meta_for(cfg, epoch, row.val_metric);
      run.generator_wg = capture(*t.g_wg, Role::GeneratorWg, meta);
      run.generator_ng = capture(*t.g_ng, Role::GeneratorNg, meta);
      run.discriminator_wg = capture(*t.d_wg, Role::DiscriminatorWg, meta);
      run.discriminator_ng = capture(*t.d_ng, Role::DiscriminatorNg, meta);
    }
    prog.metrics.push_back(row.val_metric);
    prog.log.push_back(row);
    prog.extra = {{"cycle_error_epoch0", run.cycle_error_epoch0}, {"cycle_error", run.cycle_error}};
    if (!hooks.state_dir.empty()) save_resume(hooks.state_dir, res, prog.to_json(cfg.hash()));
    append_log(hooks, row);
    ++new_epochs;
  }
  run.log = prog.log;
  run.classifier_hash_after = module_hash(*t.classifier);
  return run;
}

// ---- step 3 --------------------------------------------------------------------

FinetuneRun finetune_step3(const Checkpoint& classifier, const Checkpoint& generator_ng, const Dataset& train_x,
                           const Dataset& train_y, const Dataset& val, const TrainConfig& cfg, const RunHooks& hooks) {
  cfg.validate();
  check_channels(train_x, cfg.net.channels, "train_x");
  check_channels(train_y, cfg.net.channels, "train_y");
  check_channels(val, cfg.net.channels, "validation data");

  GazeClassifier net = classifier_from(classifier);
  ResnetGenerator gen = generator_from(generator_ng);
  for (auto& p : gen->parameters()) p.set_requires_grad(false);
  FinetuneRun run;
  run.generator_hash_before = module_hash(*gen);

  // The generator is frozen, so its outputs are computed once.
  Dataset fakes = train_y;
  {
    torch::NoGradGuard guard;
    gen->eval();
    BatchIterator it(train_y.size(), static_cast<std::size_t>(cfg.batch_size), 0, false);
    while (auto idx = it.next()) {
      auto out = gen->forward(stack_batch(train_y, *idx).images);
      for (std::size_t k = 0; k < idx->size(); ++k) {
        auto& f = fakes[(*idx)[k]];
        f.pixels = out[static_cast<std::int64_t>(k)].clone();
        f.domain = Domain::X_WithoutGlasses;
      }
    }
  }

  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr_finetune).betas({0.9, 0.999}));
  Pipeline pipeline;
  pipeline.classifier = net;
  pipeline.remover = gen;

  Progress prog;
  Resumable res{{{"classifier", net.ptr().get()}}, {{"adam", &opt}}, {{"classifier", &run.best}}, {}};
  if (!hooks.state_dir.empty()) {
    if (auto j = load_resume(hooks.state_dir, res, cfg.hash())) prog = Progress::from_json(*j);
  }
  if (prog.metrics.empty()) {
    EpochRow row{3, 0};
    row.val_metric = macro_accuracy_of(pipeline, val);
    run.best = capture(*net, Role::Classifier, meta_for(cfg, 0, row.val_metric));
    prog.metrics.push_back(row.val_metric);
    prog.log.push_back(row);
    append_log(hooks, row);
  }
  run.pre_metric = prog.metrics.front();

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  int new_epochs = 0;
  while (static_cast<int>(prog.metrics.size()) <= cfg.epochs_classifier &&
         early_stop_check(prog.metrics, cfg.early_stop_patience) == StopDecision::Continue) {
    if (hooks.max_new_epochs >= 0 && new_epochs >= hooks.max_new_epochs) {
      run.finished = false;
      break;
    }
    const auto t0 = Clock::now();
    const int epoch = static_cast<int>(prog.metrics.size());
    net->train();
    const auto order_r = shuffled_indices(train_x.size(), epoch_seed(cfg, 3, epoch, 1));
    const auto order_f = shuffled_indices(fakes.size(), epoch_seed(cfg, 3, epoch, 2));
    const std::size_t nr = (train_x.size() + bs - 1) / bs;
    const std::size_t nf = (fakes.size() + bs - 1) / bs;
    const std::size_t steps = std::max(nr, nf);

    double ce_sum = 0.0;
    int updates = 0;
    auto update = [&](const Dataset& data, const std::vector<std::size_t>& order, std::size_t b) {
      const std::size_t start = (b % ((order.size() + bs - 1) / bs)) * bs;
      const std::size_t n = std::min(bs, order.size() - start);
      auto batch = stack_batch(data, std::span<const std::size_t>(order).subspan(start, n));
      opt.zero_grad();
      auto out = classifier_forward(net, batch.images);
      auto loss = losses::selective_cross_entropy(out.probs, batch.labels);
      check_finite(loss, "fine-tuning loss");
      loss.backward();
      opt.step();
      ce_sum += loss.item<double>();
      ++updates;
    };
    for (std::size_t s = 0; s < steps; ++s) {
      update(train_x, order_r, s);
      update(fakes, order_f, s);
    }

    EpochRow row{3, epoch};
    row.ce = ce_sum / updates;
    row.val_metric = macro_accuracy_of(pipeline, val);
    row.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (row.val_metric > prog.metrics[best_index(prog.metrics)]) {
      run.best = capture(*net, Role::Classifier, meta_for(cfg, epoch, row.val_metric));
    }
    prog.metrics.push_back(row.val_metric);
    prog.log.push_back(row);
    if (!hooks.state_dir.empty()) save_resume(hooks.state_dir, res, prog.to_json(cfg.hash()));
    append_log(hooks, row);
    ++new_epochs;
  }
  run.log = prog.log;
  run.generator_hash_after = module_hash(*gen);
  return run;
}

}  // namespace gpc
