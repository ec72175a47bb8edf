#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpc/nets.hpp"

namespace gpc {

enum class Role : std::uint8_t { Classifier, GeneratorWg, GeneratorNg, DiscriminatorWg, DiscriminatorNg };

std::string_view role_name(Role r);
Role role_from_name(std::string_view name);

struct NamedArray {
  std::string name;
  torch::Tensor data;  // float32, contiguous, CPU
};

struct CheckpointMeta {
  int epoch = 0;
  double val_metric = 0.0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;  // the TrainConfig the parameters were produced under

  bool operator==(const CheckpointMeta&) const = default;
};

// Immutable parameter snapshot of one network plus training metadata.
struct Checkpoint {
  Role role = Role::Classifier;
  std::vector<NamedArray> arrays;
  CheckpointMeta meta;

  // FNV-1a over names, shapes and raw bytes; the freeze certificate.
  std::uint64_t parameter_hash() const;
  NetConfig net_config() const;
  bool same_parameters(const Checkpoint& other) const;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Hash of a live module's parameters and buffers, matching Checkpoint::parameter_hash.
std::uint64_t module_hash(const torch::nn::Module& m);

Checkpoint capture(const torch::nn::Module& m, Role role, CheckpointMeta meta);
// Copies arrays into a module with the same architecture; ShapeMismatch on
// missing names or differing shapes.
void restore(torch::nn::Module& m, const Checkpoint& ckpt);

// Role-checked rebuild from the architecture recorded in the metadata.
GazeClassifier classifier_from(const Checkpoint& ckpt);
ResnetGenerator generator_from(const Checkpoint& ckpt);
PatchDiscriminator discriminator_from(const Checkpoint& ckpt);

// Binary container: magic, version, role, config hash, JSON metadata block,
// then (name, dtype, shape, little-endian bytes) per array and a trailing
// FNV-1a of everything before it. Written to a temp file then renamed.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws MissingFile, IoError or CorruptCheckpoint.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Flattened keys ("a/b") whose values differ between two JSON documents.
std::vector<std::string> json_diff_keys(const nlohmann::json& a, const nlohmann::json& b);

}  // namespace gpc
