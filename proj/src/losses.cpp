#include "gpc/losses.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "gpc/error.hpp"

namespace gpc {

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw Error(ErrorKind::BadConfig, "loss weights must be non-negative");
  if (!(tau > 0)) throw Error(ErrorKind::BadConfig, "tau must be positive");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"tau", w.tau}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.lambda1 = j.value("lambda1", w.lambda1);
  w.lambda2 = j.value("lambda2", w.lambda2);
  w.lambda3 = j.value("lambda3", w.lambda3);
  w.tau = j.value("tau", w.tau);
}

namespace losses {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw Error(ErrorKind::ShapeMismatch,
                fmt::format("{}: [{}] vs [{}]", what, fmt::join(a.sizes(), ","), fmt::join(b.sizes(), ",")));
  }
}

torch::Tensor as_rows(const torch::Tensor& t) { return t.dim() == 1 ? t.unsqueeze(0) : t; }

void require_scores(const torch::Tensor& s, const char* what) {
  const bool ok = ((s >= 0) & (s <= 1)).all().item<bool>();
  if (!ok) throw Error(ErrorKind::DomainError, fmt::format("{} has scores outside [0, 1]", what));
}

torch::Tensor clamp_scores(const torch::Tensor& s) { return s.clamp(kScoreClamp, 1.0 - kScoreClamp); }

}  // namespace

torch::Tensor as_one_hot(const torch::Tensor& labels, std::int64_t num_classes, torch::TensorOptions opts) {
  if (labels.scalar_type() == torch::kInt64) {
    auto idx = labels.dim() == 0 ? labels.unsqueeze(0) : labels;
    return torch::one_hot(idx, num_classes).to(opts);
  }
  auto z = as_rows(labels);
  if (z.size(1) != num_classes) throw Error(ErrorKind::ShapeMismatch, "one-hot width differs from class count");
  return z.to(opts);
}

torch::Tensor cross_entropy_per_sample(const torch::Tensor& probs, const torch::Tensor& labels) {
  auto p = as_rows(probs);
  auto z = as_one_hot(labels, p.size(1), p.options());
  require_same_shape(p, z, "cross_entropy");
  return -(z * torch::log(p.clamp_min(kProbClamp))).sum(1);
}

torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& labels) {
  return cross_entropy_per_sample(probs, labels).mean();
}

torch::Tensor argmax_lowest(const torch::Tensor& rows) {
  auto r = as_rows(rows).detach();
  auto top = std::get<0>(r.max(1, /*keepdim=*/true));
  auto idx = torch::arange(r.size(1), torch::TensorOptions().dtype(torch::kInt64)).expand_as(r);
  auto masked = torch::where(r == top, idx, torch::full_like(idx, r.size(1)));
  return std::get<0>(masked.min(1));
}

torch::Tensor selective_cross_entropy_per_sample(const torch::Tensor& probs, const torch::Tensor& labels) {
  auto p = as_rows(probs);
  auto z = as_one_hot(labels, p.size(1), p.options());
  auto ce = cross_entropy_per_sample(p, z);
  auto correct = argmax_lowest(p) == argmax_lowest(z);
  return torch::where(correct, ce, torch::zeros_like(ce));
}

torch::Tensor selective_cross_entropy(const torch::Tensor& probs, const torch::Tensor& labels) {
  return selective_cross_entropy_per_sample(probs, labels).mean();
}

torch::Tensor l1_mean(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "l1");
  return (a - b).abs().mean();
}

torch::Tensor cycle_consistency(const torch::Tensor& x, const torch::Tensor& x_reconstructed, const torch::Tensor& y,
                                const torch::Tensor& y_reconstructed) {
  return l1_mean(x_reconstructed, x) + l1_mean(y_reconstructed, y);
}

torch::Tensor adversarial(const torch::Tensor& d_real_wg, const torch::Tensor& d_fake_wg,
                          const torch::Tensor& d_real_ng, const torch::Tensor& d_fake_ng) {
  require_scores(d_real_wg, "D_wg(Y)");
  require_scores(d_fake_wg, "D_wg(G_wg(X))");
  require_scores(d_real_ng, "D_ng(X)");
  require_scores(d_fake_ng, "D_ng(G_ng(Y))");
  return torch::log(clamp_scores(d_real_wg)).mean() + torch::log(1.0 - clamp_scores(d_fake_wg)).mean() +
         torch::log(clamp_scores(d_real_ng)).mean() + torch::log(1.0 - clamp_scores(d_fake_ng)).mean();
}

torch::Tensor identity(const torch::Tensor& y, const torch::Tensor& g_wg_of_y, const torch::Tensor& x,
                       const torch::Tensor& g_ng_of_x) {
  return l1_mean(g_wg_of_y, y) + l1_mean(g_ng_of_x, x);
}

torch::Tensor cam_transform(const torch::Tensor& cams, double tau) { return torch::sigmoid(cams * tau); }

torch::Tensor gaze_consistency(const torch::Tensor& cams_real, const torch::Tensor& cams_reconstructed, double tau,
                               std::int64_t expected_classes) {
  if (cams_real.dim() != 3 && cams_real.dim() != 4) {
    throw Error(ErrorKind::ShapeMismatch, "CAM stacks must be N x h x w or B x N x h x w");
  }
  require_same_shape(cams_real, cams_reconstructed, "gaze_consistency");
  if (cams_real.size(-3) != expected_classes) {
    throw Error(ErrorKind::NMismatch,
                fmt::format("expected {} class maps, got {}", expected_classes, cams_real.size(-3)));
  }
  auto diff = cam_transform(cams_real, tau) - cam_transform(cams_reconstructed, tau);
  auto per_class = torch::linalg_vector_norm(diff, 2, std::vector<std::int64_t>{-2, -1}, false, std::nullopt);
  return per_class.mean();
}

torch::Tensor total_cyclegan(const GanLossParts& parts, const LossWeights& w) {
  return parts.adversarial + w.lambda1 * parts.cycle + w.lambda2 * parts.identity;
}

torch::Tensor total_gpcyclegan(const GanLossParts& parts, const LossWeights& w) {
  return total_cyclegan(parts, w) + w.lambda3 * parts.gaze;
}

torch::Tensor generator_adversarial(const torch::Tensor& d_fake_wg, const torch::Tensor& d_fake_ng,
                                    AdversarialForm form) {
  if (form == AdversarialForm::LeastSquares) {
    return (d_fake_wg - 1.0).pow(2).mean() + (d_fake_ng - 1.0).pow(2).mean();
  }
  return -(torch::log(clamp_scores(d_fake_wg)).mean() + torch::log(clamp_scores(d_fake_ng)).mean());
}

torch::Tensor discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake, AdversarialForm form) {
  if (form == AdversarialForm::LeastSquares) {
    return 0.5 * ((d_real - 1.0).pow(2).mean() + d_fake.pow(2).mean());
  }
  return -0.5 * (torch::log(clamp_scores(d_real)).mean() + torch::log(1.0 - clamp_scores(d_fake)).mean());
}

}  // namespace losses
}  // namespace gpc
