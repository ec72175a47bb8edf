#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpc/dataio.hpp"
#include "gpc/training.hpp"

namespace gpc {

// Everything one CLI invocation needs, loaded from a JSON document.
struct RunConfig {
  TrainConfig train;
  SyntheticSpec synthetic;
  SynthPlan plan;
  PreprocessOptions preprocess;  // channels and size follow train.net

  std::filesystem::path data_dir = "data";       // synth-data output, default manifest location
  std::filesystem::path manifest;                // defaults to data_dir/manifest.tsv
  std::filesystem::path pupil_truth;             // defaults to data_dir/pupil_truth.tsv when present
  std::map<std::string, Split> split;            // subject id -> split
  std::filesystem::path out_dir = "runs/default";
  std::string device = "cpu";

  nlohmann::json to_json() const;
};

// Sets a dotted key ("train.lr_gan") inside a JSON document. The value is
// parsed as JSON when possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& key, const std::string& value);

// Parses "key=value" (optionally prefixed by "--").
std::pair<std::string, std::string> split_override(const std::string& arg);

// Relative paths resolve against the config file's directory. GPC_DEVICE
// overrides the device. Throws BadConfig or MissingFile.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
RunConfig run_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".");

}  // namespace gpc
