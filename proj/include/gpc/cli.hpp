#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "gpc/config.hpp"
#include "gpc/dataio.hpp"
#include "gpc/training.hpp"

namespace gpc::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsageError = 1;
inline constexpr int kRuntimeError = 2;

// Where each command reads and writes its artifacts under RunConfig::out_dir.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path step1_dir() const { return root / "step1"; }
  std::filesystem::path step1_classifier() const { return step1_dir() / "classifier.ckpt"; }
  std::filesystem::path all_data_dir() const { return root / "all_data"; }
  std::filesystem::path all_data_classifier() const { return all_data_dir() / "classifier.ckpt"; }
  std::filesystem::path step2_dir(Variant v) const;
  std::filesystem::path step3_dir(Variant v) const;
  std::filesystem::path checkpoint(Variant v, Role role) const;  // step-2 networks
  std::filesystem::path finetuned_classifier(Variant v) const { return step3_dir(v) / "classifier.ckpt"; }
  std::filesystem::path eval_dir() const { return root / "eval"; }
  std::filesystem::path grid_dir() const { return root / "grid"; }
  std::filesystem::path visualize_dir() const { return root / "visualize"; }
};

// Model variants understood by `evaluate`, in table order.
inline constexpr std::string_view kModelNames[] = {"x-only",    "all-data",     "cyclegan",
                                                   "cyclegan+ft", "gpcyclegan", "gpcyclegan+ft"};

struct ModelFiles {
  std::filesystem::path classifier;
  std::filesystem::path generator_ng;  // empty for classifier-only models
};

// Throws BadConfig for an unknown name.
ModelFiles model_files(const Layout& layout, std::string_view name);

struct SplitData {
  Dataset train_x, train_y, val_x, val_y, test_x, test_y;

  Dataset train_all() const;
  Dataset val_all() const;
  Dataset test_all() const;
};

// Reads the manifest named by the config, assigns subjects to splits,
// preprocesses every image and attaches pupil ground truth when available.
SplitData load_split_data(const RunConfig& cfg);

// Entry point; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gpc::cli
