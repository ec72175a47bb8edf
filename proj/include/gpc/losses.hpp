#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

namespace gpc {

struct LossWeights {
  double lambda1 = 10.0;  // cycle
  double lambda2 = 5.0;   // identity
  double lambda3 = 1.0;   // gaze consistency
  double tau = 0.01;      // CAM sigmoid temperature

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

namespace losses {

inline constexpr double kProbClamp = 1e-12;
inline constexpr double kScoreClamp = 1e-7;

// Labels are either int64 class indices (B) or one-hot rows (B x N); both
// forms are accepted everywhere a label is taken.
torch::Tensor as_one_hot(const torch::Tensor& labels, std::int64_t num_classes, torch::TensorOptions opts);

// -sum_i z_i log p_i per sample (B), probabilities clamped at 1e-12.
torch::Tensor cross_entropy_per_sample(const torch::Tensor& probs, const torch::Tensor& labels);
// Batch mean of cross_entropy_per_sample.
torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& labels);

// First index of the maximum in each row.
torch::Tensor argmax_lowest(const torch::Tensor& rows);

// Cross-entropy where argmax p == argmax z, otherwise exactly zero (value and
// gradient). Ties resolve to the lowest class index.
torch::Tensor selective_cross_entropy_per_sample(const torch::Tensor& probs, const torch::Tensor& labels);
// Sum of the gated terms divided by the full batch size.
torch::Tensor selective_cross_entropy(const torch::Tensor& probs, const torch::Tensor& labels);

// Mean absolute error per pixel; throws ShapeMismatch.
torch::Tensor l1_mean(const torch::Tensor& a, const torch::Tensor& b);

// mean|x_rec - x| + mean|y_rec - y|
torch::Tensor cycle_consistency(const torch::Tensor& x, const torch::Tensor& x_reconstructed, const torch::Tensor& y,
                                const torch::Tensor& y_reconstructed);

// E[log D_wg(Y)] + E[log(1 - D_wg(G_wg(X)))] + E[log D_ng(X)] + E[log(1 - D_ng(G_ng(Y)))]
// averaged over patch units. Scores must lie in [0, 1] (DomainError
// otherwise) and are clamped to [1e-7, 1 - 1e-7] before the log.
torch::Tensor adversarial(const torch::Tensor& d_real_wg, const torch::Tensor& d_fake_wg,
                          const torch::Tensor& d_real_ng, const torch::Tensor& d_fake_ng);

// mean|G_wg(Y) - Y| + mean|G_ng(X) - X|
torch::Tensor identity(const torch::Tensor& y, const torch::Tensor& g_wg_of_y, const torch::Tensor& x,
                       const torch::Tensor& g_ng_of_x);

// 1 / (1 + exp(-tau * A)), elementwise.
torch::Tensor cam_transform(const torch::Tensor& cams, double tau);

// (1/N) sum_i ||T(A_real^i) - T(A_rec^i)||_F over N x h x w stacks; for
// batched B x N x h x w input the per-sample values are averaged.
torch::Tensor gaze_consistency(const torch::Tensor& cams_real, const torch::Tensor& cams_reconstructed, double tau,
                               std::int64_t expected_classes = 7);

struct GanLossParts {
  torch::Tensor adversarial;
  torch::Tensor cycle;
  torch::Tensor identity;
  torch::Tensor gaze;  // may be undefined for the vanilla objective
};

// adv + lambda1 * cyc + lambda2 * identity
torch::Tensor total_cyclegan(const GanLossParts& parts, const LossWeights& w);
// adv + lambda1 * cyc + lambda2 * identity + lambda3 * gaze
torch::Tensor total_gpcyclegan(const GanLossParts& parts, const LossWeights& w);

enum class AdversarialForm { Log, LeastSquares };

// Generator side: non-saturating -E[log D(fake)] summed over both directions,
// or the least-squares E[(D(fake) - 1)^2].
torch::Tensor generator_adversarial(const torch::Tensor& d_fake_wg, const torch::Tensor& d_fake_ng,
                                    AdversarialForm form);

// Discriminator side for one domain, to be minimized:
// -(E[log D(real)] + E[log(1 - D(fake))]) / 2, or the least-squares analogue.
torch::Tensor discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake, AdversarialForm form);

}  // namespace losses
}  // namespace gpc
