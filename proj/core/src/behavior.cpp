#include "mawm/behavior.hpp"

#include <limits>
#include <stdexcept>

#include "mawm/serialization.hpp"

namespace mawm {

namespace {

torch::Tensor masked_mean(const torch::Tensor& values, const torch::Tensor& mask) {
  return (values * mask).sum() / mask.sum().clamp_min(1.0);
}

}  // namespace

torch::Tensor masked_logits(const torch::Tensor& logits, const torch::Tensor& avail) {
  auto keep = avail.to(torch::kBool);
  if (!keep.any(-1).all().item<bool>()) throw std::invalid_argument("availability mask with no available action");
  return logits.masked_fill(keep.logical_not(), -std::numeric_limits<double>::infinity());
}

torch::Tensor masked_entropy(const torch::Tensor& masked) {
  auto logp = torch::log_softmax(masked, -1);
  auto safe_logp = torch::where(torch::isfinite(masked), logp, torch::zeros_like(logp));
  return -(torch::softmax(masked, -1) * safe_logp).sum(-1);
}

ActionChoice select_actions(const torch::Tensor& logits, const torch::Tensor& avail, ActMode mode,
                            at::Generator& generator) {
  auto masked = masked_logits(logits, avail);
  ActionChoice out;
  if (mode == ActMode::kGreedy) {
    out.actions = masked.argmax(-1);
  } else {
    auto probs = torch::softmax(masked, -1);
    auto flat = probs.reshape({-1, probs.size(-1)});
    out.actions = torch::multinomial(flat, 1, false, generator).view(probs.sizes().slice(0, probs.dim() - 1));
  }
  out.log_probs = torch::log_softmax(masked, -1).gather(-1, out.actions.unsqueeze(-1)).squeeze(-1);
  return out;
}

ActorImpl::ActorImpl(std::int64_t input_dim, std::int64_t n_actions, std::int64_t hidden) {
  net_ = register_module("net", nn::make_mlp(input_dim, hidden, n_actions, 3, nn::Activation::kReLU));
}

ActionChoice ActorImpl::act(const torch::Tensor& inputs, const torch::Tensor& avail, ActMode mode,
                            at::Generator& generator) {
  torch::NoGradGuard guard;
  return select_actions(forward(inputs), avail, mode, generator);
}

CriticImpl::CriticImpl(std::int64_t obs_dim, std::int64_t n_agents, const BehaviorConfig& config)
    : n_agents_(n_agents) {
  const std::int64_t hidden = config.hidden;
  if (hidden % config.critic_heads != 0) throw std::invalid_argument("critic hidden size must divide into heads");
  agent_embed_ = register_module("agent_embed", torch::nn::Embedding(n_agents, config.agent_id_dim));
  encoder_ = register_module(
      "encoder", nn::make_mlp(obs_dim + config.agent_id_dim, hidden, hidden, 3, nn::Activation::kReLU));
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({hidden})));
  mix_ = register_module("mix", nn::Attention(nn::AttentionOptions{hidden, hidden, config.critic_heads,
                                                                    hidden / config.critic_heads, 0.0}));
  value_ = register_module("value", torch::nn::Linear(hidden, 1));
}

torch::Tensor CriticImpl::forward(const torch::Tensor& obs, const torch::Tensor& agent_ids) {
  const auto n = obs.size(-2);
  if (n != n_agents_) throw std::invalid_argument("critic built for a different number of agents");
  auto lead = obs.sizes().slice(0, obs.dim() - 1).vec();
  auto flat = obs.reshape({-1, n, obs.size(-1)});
  auto ids = agent_ids.defined() ? agent_ids
                                 : torch::arange(n, torch::TensorOptions().dtype(torch::kInt64).device(obs.device()));
  auto id_embed = agent_embed_->forward(ids).unsqueeze(0).expand({flat.size(0), n, -1}).to(flat.dtype());
  auto h = torch::relu(encoder_->forward(torch::cat({flat, id_embed}, -1)));
  auto normed = norm_->forward(h);
  h = h + mix_->forward(normed, normed);
  return value_->forward(h).squeeze(-1).reshape(lead);
}

torch::Tensor lambda_returns(const torch::Tensor& rewards, const torch::Tensor& discounts,
                             const torch::Tensor& values, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must lie in [0, 1]");
  const auto T = rewards.size(-1);
  if (discounts.size(-1) != T || values.size(-1) != T + 1) {
    throw std::invalid_argument("lambda_returns: expected T rewards/discounts and T + 1 values");
  }
  std::vector<torch::Tensor> out(static_cast<std::size_t>(T + 1));
  out[static_cast<std::size_t>(T)] = values.select(-1, T);
  for (std::int64_t t = T - 1; t >= 0; --t) {
    out[static_cast<std::size_t>(t)] =
        rewards.select(-1, t) +
        discounts.select(-1, t) * ((1.0 - lambda) * values.select(-1, t) + lambda * out[static_cast<std::size_t>(t + 1)]);
  }
  return torch::stack(out, -1);
}

torch::Tensor ppo_surrogate(const torch::Tensor& ratio, const torch::Tensor& advantages, double clip) {
  return torch::min(ratio * advantages, torch::clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages);
}

torch::Tensor critic_loss(const torch::Tensor& values, const torch::Tensor& targets, const torch::Tensor& mask) {
  return masked_mean((values - targets.detach()).pow(2), mask);
}

ActorLoss actor_loss(const torch::Tensor& masked, const torch::Tensor& actions, const torch::Tensor& old_log_probs,
                     const torch::Tensor& advantages, const torch::Tensor& mask, double clip, double entropy_coef) {
  auto log_probs = torch::log_softmax(masked, -1).gather(-1, actions.unsqueeze(-1)).squeeze(-1);
  auto ratio = torch::exp(log_probs - old_log_probs.detach());
  auto surrogate = ppo_surrogate(ratio, advantages.detach(), clip);
  auto entropy = masked_entropy(masked);
  ActorLoss out;
  out.surrogate = masked_mean(surrogate, mask);
  out.entropy = masked_mean(entropy, mask);
  out.total = -masked_mean(surrogate + entropy_coef * entropy, mask);
  torch::NoGradGuard guard;
  out.clip_fraction = masked_mean(((ratio - 1.0).abs() > clip).to(mask.dtype()), mask).item<double>();
  return out;
}

void ObservationStack::reset(const torch::Tensor& obs) {
  auto sizes = obs.sizes().vec();
  sizes.insert(sizes.end() - 1, length_);
  history_ = obs.unsqueeze(-2).expand(sizes).clone();
}

void ObservationStack::push(const torch::Tensor& obs) {
  if (!history_.defined()) throw std::logic_error("ObservationStack::push before reset");
  history_ = torch::cat({history_.slice(-2, 1), obs.unsqueeze(-2)}, -2);
}

torch::Tensor ObservationStack::flat() const { return history_.flatten(-2); }

AgentLearner::AgentLearner(std::int64_t obs_dim, std::int64_t n_agents, std::int64_t n_actions,
                           const BehaviorConfig& config)
    : config_(config), obs_dim_(obs_dim), n_agents_(n_agents), n_actions_(n_actions) {
  actor_ = Actor(obs_dim * config.stack, n_actions, config.hidden);
  critic_ = Critic(obs_dim, n_agents, config);
  actor_opt_ = std::make_unique<torch::optim::Adam>(actor_->parameters(), torch::optim::AdamOptions(config.actor_lr));
  critic_opt_ =
      std::make_unique<torch::optim::Adam>(critic_->parameters(), torch::optim::AdamOptions(config.critic_lr));
}

BehaviorStats AgentLearner::update(const ImaginedRollout& rollout) {
  const auto H = rollout.horizon();
  auto alive = rollout.alive;
  torch::Tensor returns;
  torch::Tensor advantages;
  {
    torch::NoGradGuard guard;
    auto values = critic_->forward(rollout.obs).permute({0, 2, 1});  // [R, n, H]
    auto rewards = rollout.rewards.permute({0, 2, 1}).slice(-1, 0, H - 1);
    auto discounts = rollout.discounts.permute({0, 2, 1}).slice(-1, 0, H - 1);
    returns = lambda_returns(rewards, discounts, values, config_.lambda).permute({0, 2, 1});
    advantages = returns - values.permute({0, 2, 1});
    if (config_.normalize_advantages) {
      auto mean = masked_mean(advantages, alive);
      auto var = masked_mean((advantages - mean).pow(2), alive);
      advantages = (advantages - mean) / (var.sqrt() + 1e-8);
    }
  }

  BehaviorStats stats;
  actor_->train();
  critic_->train();
  for (int epoch = 0; epoch < config_.ppo_epochs; ++epoch) {
    auto masked = masked_logits(actor_->forward(rollout.policy_inputs), rollout.avail);
    auto a_loss = actor_loss(masked, rollout.actions, rollout.log_probs, advantages, alive, config_.clip,
                             config_.entropy_coef);
    actor_opt_->zero_grad();
    a_loss.total.backward();
    torch::nn::utils::clip_grad_norm_(actor_->parameters(), config_.grad_clip);
    actor_opt_->step();
    stats.actor_loss = a_loss.total.item<double>();
    stats.entropy = a_loss.entropy.item<double>();
    stats.clip_fraction = a_loss.clip_fraction;

    if (H > 1) {
      auto values = critic_->forward(rollout.obs);
      auto c_loss = critic_loss(values.slice(1, 0, H - 1), returns.slice(1, 0, H - 1), alive.slice(1, 0, H - 1));
      critic_opt_->zero_grad();
      c_loss.backward();
      torch::nn::utils::clip_grad_norm_(critic_->parameters(), config_.grad_clip);
      critic_opt_->step();
      stats.critic_loss = c_loss.item<double>();
    }
  }
  actor_->eval();
  critic_->eval();
  stats.mean_return = returns.select(1, 0).mean().item<double>();
  return stats;
}

void AgentLearner::save(torch::serialize::OutputArchive& archive) const {
  write_header(archive, "behavior");
  auto put = [&](const char* key, const auto& object) {
    torch::serialize::OutputArchive sub;
    object.save(sub);
    archive.write(key, sub);
  };
  put("actor", *actor_);
  put("critic", *critic_);
  put("actor_optimizer", *actor_opt_);
  put("critic_optimizer", *critic_opt_);
}

void AgentLearner::load(torch::serialize::InputArchive& archive) {
  check_header(archive, "behavior");
  auto get = [&](const char* key, auto& object) {
    torch::serialize::InputArchive sub;
    archive.read(key, sub);
    object.load(sub);
  };
  get("actor", *actor_);
  get("critic", *critic_);
  get("actor_optimizer", *actor_opt_);
  get("critic_optimizer", *critic_opt_);
}

}  // namespace mawm
