#include "gpc/nets.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "gpc/error.hpp"
#include "gpc/zones.hpp"

namespace gpc {

namespace nn = torch::nn;

void NetConfig::validate() const {
  if (channels != 1 && channels != 3) {
    throw Error(ErrorKind::BadChannelRequest, fmt::format("channels must be 1 or 3, got {}", channels));
  }
  if (image_size < 24 || image_size % 8 != 0) {
    throw Error(ErrorKind::BadConfig, fmt::format("image_size must be a multiple of 8 and >= 24, got {}", image_size));
  }
  if (cls_stem < 1 || cls_squeeze < 1 || cls_expand < 1 || gen_filters < 1 || gen_blocks < 0 || disc_filters < 1) {
    throw Error(ErrorKind::BadConfig, "network widths must be positive");
  }
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"channels", c.channels},       {"image_size", c.image_size},   {"cls_stem", c.cls_stem},
                     {"cls_squeeze", c.cls_squeeze}, {"cls_expand", c.cls_expand},   {"gen_filters", c.gen_filters},
                     {"gen_blocks", c.gen_blocks},   {"disc_filters", c.disc_filters}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  c.channels = j.value("channels", c.channels);
  c.image_size = j.value("image_size", c.image_size);
  c.cls_stem = j.value("cls_stem", c.cls_stem);
  c.cls_squeeze = j.value("cls_squeeze", c.cls_squeeze);
  c.cls_expand = j.value("cls_expand", c.cls_expand);
  c.gen_filters = j.value("gen_filters", c.gen_filters);
  c.gen_blocks = j.value("gen_blocks", c.gen_blocks);
  c.disc_filters = j.value("disc_filters", c.disc_filters);
}

// ---- classifier ------------------------------------------------------------

FireModuleImpl::FireModuleImpl(int in, int sq, int ex) {
  squeeze = register_module("squeeze", nn::Conv2d(nn::Conv2dOptions(in, sq, 1)));
  expand1 = register_module("expand1", nn::Conv2d(nn::Conv2dOptions(sq, ex, 1)));
  expand3 = register_module("expand3", nn::Conv2d(nn::Conv2dOptions(sq, ex, 3).padding(1)));
}

torch::Tensor FireModuleImpl::forward(const torch::Tensor& x) {
  auto s = torch::relu(squeeze(x));
  return torch::cat({torch::relu(expand1(s)), torch::relu(expand3(s))}, 1);
}

GazeClassifierImpl::GazeClassifierImpl(const NetConfig& cfg) : config(cfg) {
  const int e = cfg.cls_expand, sq = cfg.cls_squeeze;
  body = register_module(
      "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(cfg.channels, cfg.cls_stem, 3).stride(2).padding(1)),
                             nn::ReLU(),
                             nn::MaxPool2d(nn::MaxPool2dOptions(2).stride(2)),
                             FireModule(cfg.cls_stem, sq, e),
                             FireModule(2 * e, sq, e),
                             nn::MaxPool2d(nn::MaxPool2dOptions(2).stride(2)),
                             FireModule(2 * e, 2 * sq, 2 * e),
                             FireModule(4 * e, 2 * sq, 2 * e)));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(4 * e, kNumZones, 1).bias(false)));
}

torch::Tensor GazeClassifierImpl::features(const torch::Tensor& x) { return body->forward(x); }

ClassifierOutput GazeClassifierImpl::forward(const torch::Tensor& x) {
  ClassifierOutput out;
  out.cams = head(body->forward(x));
  out.logits = out.cams.mean({2, 3});
  out.probs = torch::softmax(out.logits, 1);
  return out;
}

// ---- generator --------------------------------------------------------------

ResidualBlockImpl::ResidualBlockImpl(int dim) {
  block = register_module(
      "block", nn::Sequential(nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(dim, dim, 3)),
                              nn::InstanceNorm2d(nn::InstanceNorm2dOptions(dim)), nn::ReLU(), nn::ReflectionPad2d(1),
                              nn::Conv2d(nn::Conv2dOptions(dim, dim, 3)),
                              nn::InstanceNorm2d(nn::InstanceNorm2dOptions(dim))));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + block->forward(x); }

ResnetGeneratorImpl::ResnetGeneratorImpl(const NetConfig& cfg) : config(cfg) {
  const int f = cfg.gen_filters;
  nn::Sequential seq(nn::ReflectionPad2d(3), nn::Conv2d(nn::Conv2dOptions(cfg.channels, f, 7)),
                     nn::InstanceNorm2d(nn::InstanceNorm2dOptions(f)), nn::ReLU());
  for (int i = 0, mult = 1; i < 2; ++i, mult *= 2) {
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(f * mult, f * mult * 2, 3).stride(2).padding(1)));
    seq->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(f * mult * 2)));
    seq->push_back(nn::ReLU());
  }
  for (int i = 0; i < cfg.gen_blocks; ++i) seq->push_back(ResidualBlock(4 * f));
  for (int i = 0, mult = 4; i < 2; ++i, mult /= 2) {
    seq->push_back(nn::ConvTranspose2d(
        nn::ConvTranspose2dOptions(f * mult, f * mult / 2, 3).stride(2).padding(1).output_padding(1)));
    seq->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(f * mult / 2)));
    seq->push_back(nn::ReLU());
  }
  seq->push_back(nn::ReflectionPad2d(3));
  seq->push_back(nn::Conv2d(nn::Conv2dOptions(f, cfg.channels, 7)));
  seq->push_back(nn::Tanh());
  model = register_module("model", seq);
}

torch::Tensor ResnetGeneratorImpl::forward(const torch::Tensor& x) { return model->forward(x); }

// ---- discriminator ----------------------------------------------------------

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const NetConfig& cfg) : config(cfg) {
  const int f = cfg.disc_filters;
  auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
  model = register_module(
      "model", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(cfg.channels, f, 4).stride(2).padding(1)), lrelu(),
                              nn::Conv2d(nn::Conv2dOptions(f, 2 * f, 4).stride(2).padding(1)), lrelu(),
                              nn::Conv2d(nn::Conv2dOptions(2 * f, 4 * f, 4).stride(2).padding(1)), lrelu(),
                              nn::Conv2d(nn::Conv2dOptions(4 * f, 8 * f, 4).stride(1).padding(1)), lrelu(),
                              nn::Conv2d(nn::Conv2dOptions(8 * f, 1, 4).stride(1).padding(1)), nn::Sigmoid()));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return model->forward(x); }

int patch_map_size(int input_size) { return input_size / 8 - 2; }

// ---- construction ------------------------------------------------------------

namespace {

void init_gan_weights(nn::Module& m) {
  torch::NoGradGuard guard;
  for (auto& p : m.named_parameters(true)) {
    if (p.key().ends_with("weight")) p.value().normal_(0.0, 0.02);
    else if (p.key().ends_with("bias")) p.value().zero_();
  }
}

}  // namespace

GazeClassifier build_classifier(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  GazeClassifier net(cfg);
  {
    torch::NoGradGuard guard;
    for (auto& p : net->body->named_parameters(true)) {
      if (p.key().ends_with("weight")) nn::init::kaiming_normal_(p.value(), 0.0, torch::kFanIn, torch::kReLU);
      else if (p.key().ends_with("bias")) p.value().zero_();
    }
    net->head->weight.normal_(0.0, 0.01);
  }
  return net;
}

ResnetGenerator build_generator(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  ResnetGenerator net(cfg);
  init_gan_weights(*net);
  return net;
}

PatchDiscriminator build_discriminator(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  PatchDiscriminator net(cfg);
  init_gan_weights(*net);
  return net;
}

std::int64_t parameter_count(const nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

void check_input(const torch::Tensor& x, const NetConfig& cfg, const char* who) {
  if (x.dim() != 4 || x.size(1) != cfg.channels || x.size(2) != cfg.image_size || x.size(3) != cfg.image_size) {
    throw Error(ErrorKind::ShapeMismatch, fmt::format("{} expects B x {} x {} x {}, got {}", who, cfg.channels,
                                                      cfg.image_size, cfg.image_size, fmt::join(x.sizes(), " x ")));
  }
}

ClassifierOutput classifier_forward(GazeClassifier& net, const torch::Tensor& batch) {
  check_input(batch, net->config, "classifier");
  return net->forward(batch);
}

torch::Tensor generator_forward(ResnetGenerator& net, const torch::Tensor& batch) {
  check_input(batch, net->config, "generator");
  return net->forward(batch);
}

torch::Tensor discriminator_forward(PatchDiscriminator& net, const torch::Tensor& batch) {
  check_input(batch, net->config, "discriminator");
  return net->forward(batch);
}

}  // namespace gpc
