#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <functional>

namespace gpc::testing {

// Relative error between the autograd gradient of f at x and the central
// finite-difference estimate with step h. Inputs are double precision.
inline double gradient_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                      const torch::Tensor& x0, double h = 1e-4) {
  auto x = x0.detach().clone().to(torch::kFloat64).set_requires_grad(true);
  auto y = f(x);
  y.backward();
  auto analytic = x.grad().detach().clone();

  auto base = x0.detach().clone().to(torch::kFloat64);
  auto numeric = torch::zeros_like(base);
  auto flat_base = base.view({-1});
  auto flat_num = numeric.view({-1});
  torch::NoGradGuard guard;
  for (std::int64_t i = 0; i < flat_base.numel(); ++i) {
    const double v = flat_base[i].item<double>();
    flat_base[i] = v + h;
    const double fp = f(base).item<double>();
    flat_base[i] = v - h;
    const double fm = f(base).item<double>();
    flat_base[i] = v;
    flat_num[i] = (fp - fm) / (2.0 * h);
  }
  const double diff = (analytic - numeric).norm().item<double>();
  const double scale = std::max({analytic.norm().item<double>(), numeric.norm().item<double>(), 1e-12});
  return diff / scale;
}

}  // namespace gpc::testing
