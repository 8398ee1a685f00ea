#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "mawm/dynamics.hpp"

namespace mawm::test {

/// Random tokens, actions, rewards and masks with a mix of terminal and
/// non-terminal steps; every mask row keeps at least one action.
inline SegmentBatch random_batch(std::int64_t B, std::int64_t H, const WorldModelShape& shape) {
  SegmentBatch batch;
  batch.tokens = torch::randint(shape.vocab_size, {B, H, shape.n_agents, shape.tokens_per_obs}, torch::kInt64);
  batch.actions = torch::randint(shape.n_actions, {B, H, shape.n_agents}, torch::kInt64);
  batch.rewards = torch::randn({B, H}) * 1.5;
  batch.continuation = (torch::rand({B, H}) > 0.3).to(torch::kFloat32) * 0.99F;
  batch.avail = (torch::rand({B, H, shape.n_agents, shape.n_actions}) > 0.4).to(torch::kFloat32);
  batch.avail.select(-1, 0).fill_(1.0F);
  batch.valid = torch::ones({B, H});
  return batch;
}

/// Relative L2 error between the autograd gradient and central finite
/// differences, over `per_tensor` random coordinates of every parameter.
/// The module must hold double-precision parameters.
inline double max_fd_relative_error(torch::nn::Module& module, const std::function<torch::Tensor()>& loss_fn,
                                    int per_tensor, double eps) {
  module.zero_grad();
  loss_fn().backward();
  std::vector<double> analytic;
  std::vector<double> numeric;
  for (auto& param : module.parameters()) {
    if (!param.grad().defined()) continue;
    auto flat = param.data().view(-1);
    auto grad = param.grad().view(-1);
    for (int s = 0; s < per_tensor; ++s) {
      auto idx = torch::randint(flat.size(0), {1}).item<std::int64_t>();
      const double original = flat[idx].item<double>();
      double plus = 0.0;
      double minus = 0.0;
      {
        torch::NoGradGuard guard;
        flat[idx] = original + eps;
        plus = loss_fn().item<double>();
        flat[idx] = original - eps;
        minus = loss_fn().item<double>();
        flat[idx] = original;
      }
      analytic.push_back(grad[idx].item<double>());
      numeric.push_back((plus - minus) / (2.0 * eps));
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

}  // namespace mawm::test
