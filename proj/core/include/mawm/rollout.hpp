#pragma once

#include <torch/torch.h>

namespace mawm {

/// A batch of imagined trajectories, R rollouts x H steps x n agents.
///
/// Step t holds the reconstructed observation the agents saw, the action they
/// took and the reward and discount predicted for that transition. A step is
/// alive until an earlier step predicted termination; dead steps are excluded
/// from every loss.
struct ImaginedRollout {
  torch::Tensor obs;             // [R, H, n, obs_dim] decoded from tokens
  torch::Tensor policy_inputs;   // [R, H, n, stack * obs_dim]
  torch::Tensor actions;         // [R, H, n] int64
  torch::Tensor log_probs;       // [R, H, n] under the acting policy
  torch::Tensor avail;           // [R, H, n, A] bool
  torch::Tensor rewards;         // [R, H, n]
  torch::Tensor discounts;       // [R, H, n], 0 at a predicted termination
  torch::Tensor discount_probs;  // [R, H, n], raw head output
  torch::Tensor alive;           // [R, H, n] float 0/1

  std::int64_t rollouts() const { return obs.size(0); }
  std::int64_t horizon() const { return obs.size(1); }
  std::int64_t n_agents() const { return obs.size(2); }
};

}  // namespace mawm
