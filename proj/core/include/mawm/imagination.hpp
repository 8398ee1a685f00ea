#pragma once

#include <torch/torch.h>

#include <functional>
#include <random>
#include <utility>

#include "mawm/behavior.hpp"
#include "mawm/dynamics.hpp"
#include "mawm/replay_buffer.hpp"
#include "mawm/rollout.hpp"
#include "mawm/tokenizer.hpp"

namespace mawm {

struct ImaginationOptions {
  int horizon = 15;
  int stack = 5;
  SamplingOptions sampling;
  double termination_threshold = 0.5;
  double avail_threshold = 0.5;
  double discount_label = 0.99;
};

/// Called before each policy decision with the step index, the exact policy
/// inputs [R, n, stack * obs_dim] and the reconstructed observations
/// [R, n, obs_dim] they were stacked from.
using PolicyObserver =
    std::function<void(int step, const torch::Tensor& policy_inputs, const torch::Tensor& reconstructed)>;

/// Thresholds predicted availability probabilities; a row with nothing above
/// the threshold gets its most probable action made available.
torch::Tensor repair_avail(const torch::Tensor& probs, double threshold);

/// Initial joint observations [R, n, obs_dim] and masks [R, n, A] drawn
/// uniformly from buffered steps.
std::pair<torch::Tensor, torch::Tensor> sample_initial_states(const ReplayBuffer& buffer, int count,
                                                              std::mt19937_64& rng);

/// Rolls R joint trajectories of `options.horizon` steps inside the world
/// model, all agents advanced together. The policy only sees observations
/// decoded from tokens. No environment is touched and no gradients are
/// recorded.
ImaginedRollout imagine(Actor& actor, WorldModel& model, ObservationTokenizer& tokenizer,
                        const torch::Tensor& initial_obs, const torch::Tensor& initial_avail,
                        const ImaginationOptions& options, at::Generator& generator,
                        const PolicyObserver& observer = {});

}  // namespace mawm
