#pragma once

#include <torch/torch.h>

#include <cstdint>

#include <nlohmann/json.hpp>

namespace gpc {

// Architecture knobs shared by the three networks. Defaults are the full-size
// configuration; desk-scale experiments shrink widths and image size.
struct NetConfig {
  int channels = 1;
  int image_size = 256;

  // Gaze classifier: stem conv, then two stages of two fire modules each.
  int cls_stem = 32;
  int cls_squeeze = 16;
  int cls_expand = 32;  // per branch (1x1 and 3x3), so a fire module emits 2x this

  int gen_filters = 64;
  int gen_blocks = 9;

  int disc_filters = 64;

  void validate() const;
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

// ---- classifier ------------------------------------------------------------

struct ClassifierOutput {
  torch::Tensor cams;    // B x 7 x h x w, pre-softmax class activation maps
  torch::Tensor logits;  // B x 7, spatial mean of cams
  torch::Tensor probs;   // B x 7, softmax of logits
};

struct FireModuleImpl : torch::nn::Module {
  FireModuleImpl(int in, int squeeze, int expand);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d squeeze{nullptr}, expand1{nullptr}, expand3{nullptr};
};
TORCH_MODULE(FireModule);

// SqueezeNet-style feature extractor with a bias-free 1x1 conv head and global
// average pooling, so every logit is exactly the mean of its CAM.
struct GazeClassifierImpl : torch::nn::Module {
  explicit GazeClassifierImpl(const NetConfig& cfg);

  ClassifierOutput forward(const torch::Tensor& x);
  torch::Tensor features(const torch::Tensor& x);

  NetConfig config;
  torch::nn::Sequential body{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(GazeClassifier);

// ---- generator --------------------------------------------------------------

struct ResidualBlockImpl : torch::nn::Module {
  explicit ResidualBlockImpl(int dim);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Sequential block{nullptr};
};
TORCH_MODULE(ResidualBlock);

// c7s1-k, two stride-2 downsamplers, `gen_blocks` residual blocks, two
// transposed-conv upsamplers, c7s1 back to the input channels, tanh.
struct ResnetGeneratorImpl : torch::nn::Module {
  explicit ResnetGeneratorImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  NetConfig config;
  torch::nn::Sequential model{nullptr};
};
TORCH_MODULE(ResnetGenerator);

// ---- discriminator ----------------------------------------------------------

// 70x70 PatchGAN: C64-C128-C256 (stride 2), C512 (stride 1), 1-channel conv,
// sigmoid. No normalization layers, so each output unit depends only on its
// receptive field.
struct PatchDiscriminatorImpl : torch::nn::Module {
  explicit PatchDiscriminatorImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  NetConfig config;
  torch::nn::Sequential model{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

inline constexpr int kPatchReceptiveField = 70;
inline constexpr int kPatchStride = 8;
inline constexpr int kPatchOffset = -23;  // input row of the first pixel seen by output unit 0

// Output map side for a given input side.
int patch_map_size(int input_size);

// ---- construction ------------------------------------------------------------

// Deterministic per seed. Throws BadChannelRequest for channels outside {1,3}.
GazeClassifier build_classifier(const NetConfig& cfg, std::uint64_t seed);
ResnetGenerator build_generator(const NetConfig& cfg, std::uint64_t seed);
PatchDiscriminator build_discriminator(const NetConfig& cfg, std::uint64_t seed);

std::int64_t parameter_count(const torch::nn::Module& m);

// Throws ShapeMismatch unless x is B x channels x size x size.
void check_input(const torch::Tensor& x, const NetConfig& cfg, const char* who);

ClassifierOutput classifier_forward(GazeClassifier& net, const torch::Tensor& batch);
torch::Tensor generator_forward(ResnetGenerator& net, const torch::Tensor& batch);
torch::Tensor discriminator_forward(PatchDiscriminator& net, const torch::Tensor& batch);

}  // namespace gpc
