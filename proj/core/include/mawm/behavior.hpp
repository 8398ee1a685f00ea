#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>

#include "mawm/nn.hpp"
#include "mawm/rollout.hpp"

namespace mawm {

struct BehaviorConfig {
  int hidden = 256;
  int stack = 5;
  double lambda = 0.95;
  double clip = 0.2;
  double entropy_coef = 0.001;
  int ppo_epochs = 5;
  double actor_lr = 5e-4;
  double critic_lr = 5e-4;
  double grad_clip = 100.0;
  bool normalize_advantages = false;
  int critic_heads = 4;
  int agent_id_dim = 8;
};

enum class ActMode { kSample, kGreedy };

/// Logits with unavailable actions set to -inf. Throws if any row has no
/// available action.
torch::Tensor masked_logits(const torch::Tensor& logits, const torch::Tensor& avail);

/// Entropy of the masked softmax; masked actions contribute exactly 0.
torch::Tensor masked_entropy(const torch::Tensor& masked);

struct ActionChoice {
  torch::Tensor actions;    // int64
  torch::Tensor log_probs;  // log pi(a) under the masked policy
};

ActionChoice select_actions(const torch::Tensor& logits, const torch::Tensor& avail, ActMode mode,
                            at::Generator& generator);

/// Shared 3-layer ReLU policy over stacked reconstructed observations.
class ActorImpl : public torch::nn::Module {
 public:
  ActorImpl(std::int64_t input_dim, std::int64_t n_actions, std::int64_t hidden);
  torch::Tensor forward(const torch::Tensor& inputs) { return net_->forward(inputs); }
  ActionChoice act(const torch::Tensor& inputs, const torch::Tensor& avail, ActMode mode, at::Generator& generator);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(Actor);

/// Centralized value function: a shared 3-layer MLP encodes each agent's
/// reconstructed observation together with a learned agent-id embedding, one
/// self-attention layer mixes the agents, and a linear head gives V^i.
class CriticImpl : public torch::nn::Module {
 public:
  CriticImpl(std::int64_t obs_dim, std::int64_t n_agents, const BehaviorConfig& config);

  /// obs [..., n, obs_dim] -> [..., n]. `agent_ids` (optional, [n]) relabels the
  /// agents, e.g. for a consistent permutation.
  torch::Tensor forward(const torch::Tensor& obs, const torch::Tensor& agent_ids = {});

 private:
  std::int64_t n_agents_;
  torch::nn::Embedding agent_embed_{nullptr};
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
  nn::Attention mix_{nullptr};
  torch::nn::Linear value_{nullptr};
};
TORCH_MODULE(Critic);

/// lambda-returns along the last dimension. rewards/discounts have T entries,
/// values T + 1; the result has T + 1 entries with out[T] = values[T] and
/// out[t] = r_t + g_t * ((1 - lambda) * values[t] + lambda * out[t + 1]).
torch::Tensor lambda_returns(const torch::Tensor& rewards, const torch::Tensor& discounts,
                             const torch::Tensor& values, double lambda);

/// min(r A, clip(r, 1 - eps, 1 + eps) A), elementwise.
torch::Tensor ppo_surrogate(const torch::Tensor& ratio, const torch::Tensor& advantages, double clip);

/// Mean squared error against gradient-stopped targets over mask entries.
torch::Tensor critic_loss(const torch::Tensor& values, const torch::Tensor& targets, const torch::Tensor& mask);

struct ActorLoss {
  torch::Tensor total;
  torch::Tensor surrogate;  // mean clipped surrogate
  torch::Tensor entropy;    // mean masked entropy
  double clip_fraction = 0.0;
};

/// -mean[min(r A, clip(r) A) + eta * H(pi)] over mask entries.
ActorLoss actor_loss(const torch::Tensor& masked, const torch::Tensor& actions, const torch::Tensor& old_log_probs,
                     const torch::Tensor& advantages, const torch::Tensor& mask, double clip, double entropy_coef);

/// Fixed-length history of observations per agent, oldest first. reset()
/// fills every slot with the given observation.
class ObservationStack {
 public:
  explicit ObservationStack(int length) : length_(length) {}
  void reset(const torch::Tensor& obs);  // [..., obs_dim]
  void push(const torch::Tensor& obs);
  /// [..., length * obs_dim]
  torch::Tensor flat() const;
  int length() const { return length_; }
  const torch::Tensor& history() const { return history_; }
  void set_history(torch::Tensor history) { history_ = std::move(history); }

 private:
  int length_;
  torch::Tensor history_;  // [..., length, obs_dim]
};

struct BehaviorStats {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  double mean_return = 0.0;
  double clip_fraction = 0.0;
};

/// Actor, critic and their optimizers; trains on imagined rollouts only.
class AgentLearner {
 public:
  AgentLearner(std::int64_t obs_dim, std::int64_t n_agents, std::int64_t n_actions, const BehaviorConfig& config);

  const BehaviorConfig& config() const { return config_; }
  Actor& actor() { return actor_; }
  Critic& critic() { return critic_; }
  std::int64_t obs_dim() const { return obs_dim_; }
  std::int64_t n_actions() const { return n_actions_; }

  /// One policy update: lambda-returns from the current critic, then
  /// `ppo_epochs` full-batch actor and critic steps.
  BehaviorStats update(const ImaginedRollout& rollout);

  void save(torch::serialize::OutputArchive& archive) const;
  void load(torch::serialize::InputArchive& archive);

 private:
  BehaviorConfig config_;
  std::int64_t obs_dim_;
  std::int64_t n_agents_;
  std::int64_t n_actions_;
  Actor actor_{nullptr};
  Critic critic_{nullptr};
  std::unique_ptr<torch::optim::Adam> actor_opt_;
  std::unique_ptr<torch::optim::Adam> critic_opt_;
};

}  // namespace mawm
