#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpc/checkpoint.hpp"
#include "gpc/dataio.hpp"
#include "gpc/losses.hpp"
#include "gpc/nets.hpp"

namespace gpc {

enum class Variant { CycleGan, GpCycleGan };

std::string_view variant_name(Variant v);
Variant variant_from_name(std::string_view name);

struct TrainConfig {
  Variant variant = Variant::GpCycleGan;
  LossWeights weights;
  double lr_classifier = 4e-4;
  double lr_gan = 2e-4;
  double lr_finetune = 1e-4;
  int epochs_classifier = 50;
  int epochs_gan = 15;
  int batch_size = 32;
  int early_stop_patience = 5;
  int image_pool_size = 50;
  losses::AdversarialForm adversarial_form = losses::AdversarialForm::Log;
  std::uint64_t seed = 0;
  NetConfig net;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
};

// Keys of `cfg` that differ from the configuration recorded in a checkpoint.
// Empty when the hashes agree.
std::vector<std::string> config_mismatch(const Checkpoint& ckpt, const TrainConfig& cfg);

// Single-threaded, deterministic kernels.
void use_deterministic_backend();

// Replay buffer of generated images for discriminator updates.
class ImagePool {
 public:
  ImagePool(int capacity, std::uint64_t seed);

  // Per image: stored and returned while filling; once full, with
  // probability 1/2 a uniformly chosen buffered image is returned and
  // replaced by the fresh one.
  torch::Tensor query(const torch::Tensor& images);

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(buffer_.size()); }
  void reseed(std::uint64_t seed) { rng_.seed(seed); }
  const std::vector<torch::Tensor>& buffer() const { return buffer_; }
  void set_buffer(std::vector<torch::Tensor> images);

 private:
  int capacity_;
  std::mt19937_64 rng_;
  std::vector<torch::Tensor> buffer_;
};

enum class StopDecision { Continue, Stop };

// Stop iff the best value has not been improved upon by more than 1e-4 for
// `patience` consecutive entries.
StopDecision early_stop_check(std::span<const double> history, int patience);

// Index of the first strict maximum.
std::size_t best_index(std::span<const double> history);

// One training-log row.
struct EpochRow {
  int step = 0;
  int epoch = 0;
  double adv = 0.0;
  double cyc = 0.0;
  double identity = 0.0;
  double gaze = 0.0;
  double ce = 0.0;
  double val_metric = 0.0;
  double seconds = 0.0;

  bool operator==(const EpochRow&) const = default;
};

std::string epoch_log_header();
std::string epoch_log_line(const EpochRow& r);
std::vector<EpochRow> read_epoch_log(const std::filesystem::path& path);

struct RunHooks {
  std::filesystem::path log_path;   // rows appended when set
  std::filesystem::path state_dir;  // resume state written after every epoch when set
  int max_new_epochs = -1;          // stop after this many epochs in one call; simulates an interruption
  std::function<void(const EpochRow&)> on_epoch;
};

struct ClassifierRun {
  Checkpoint best;
  std::vector<EpochRow> log;
  bool finished = true;
};

// Adam on cross-entropy with per-epoch validation macro accuracy and early
// stopping. `init` starts from existing weights instead of a fresh network.
// Throws MissingClass, Divergence, EmptyDataset.
ClassifierRun train_classifier(const Dataset& train, const Dataset& val, const TrainConfig& cfg, double lr, int epochs,
                               int step, const std::optional<Checkpoint>& init = std::nullopt,
                               const RunHooks& hooks = {});

// Step 1: classifier on without-glasses images only (DomainError otherwise).
ClassifierRun train_classifier_step1(const Dataset& train_x, const Dataset& val, const TrainConfig& cfg,
                                     const RunHooks& hooks = {});

struct GanRun {
  Checkpoint generator_wg;  // X -> Y, adds glasses
  Checkpoint generator_ng;  // Y -> X, removes glasses
  Checkpoint discriminator_wg;
  Checkpoint discriminator_ng;
  std::vector<EpochRow> log;
  double cycle_error_epoch0 = 0.0;  // mean L1 of G_ng(G_wg(val_x)) - val_x before training
  std::vector<double> cycle_error;  // per completed epoch
  std::uint64_t classifier_hash_before = 0;
  std::uint64_t classifier_hash_after = 0;
  bool finished = true;
};

// Networks and optimizers of step 2, exposed for step-level tests.
class CycleGanTrainer {
 public:
  CycleGanTrainer(const Checkpoint& frozen_classifier, const TrainConfig& cfg);

  struct StepLosses {
    double adv = 0.0;  // four-term log objective on the current scores
    double cyc = 0.0;
    double identity = 0.0;
    double gaze = 0.0;
    double gen_total = 0.0;
    double disc_total = 0.0;
  };

  // One generator update followed by one discriminator update.
  StepLosses step(const torch::Tensor& x, const torch::Tensor& y);

  ResnetGenerator g_wg{nullptr};
  ResnetGenerator g_ng{nullptr};
  PatchDiscriminator d_wg{nullptr};
  PatchDiscriminator d_ng{nullptr};
  GazeClassifier classifier{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g;
  std::unique_ptr<torch::optim::Adam> opt_d;
  ImagePool pool_wg;
  ImagePool pool_ng;
  TrainConfig cfg;
};

// Step 2. Validation metric is the frozen classifier's macro accuracy on
// G_ng(val_y); val_x feeds the cycle-error record. Throws ChannelMismatch,
// Divergence, EmptyDataset.
GanRun train_gan_step2(const Dataset& train_x, const Dataset& train_y, const Dataset& val_x, const Dataset& val_y,
                       const Checkpoint& frozen_classifier, const TrainConfig& cfg, const RunHooks& hooks = {});

struct FinetuneRun {
  Checkpoint best;
  std::vector<EpochRow> log;  // epoch 0 is the starting classifier
  double pre_metric = 0.0;
  std::uint64_t generator_hash_before = 0;
  std::uint64_t generator_hash_after = 0;
  bool finished = true;
};

// Step 3: selective cross-entropy on alternating real X and G_ng(Y) batches.
// Validation runs the full removal + classification pipeline on `val`.
FinetuneRun finetune_step3(const Checkpoint& classifier, const Checkpoint& generator_ng, const Dataset& train_x,
                           const Dataset& train_y, const Dataset& val, const TrainConfig& cfg,
                           const RunHooks& hooks = {});

}  // namespace gpc
