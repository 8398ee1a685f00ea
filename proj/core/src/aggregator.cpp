#include "mawm/aggregator.hpp"

#include <stdexcept>

namespace mawm {

std::string to_string(AggregatorKind kind) {
  switch (kind) {
    case AggregatorKind::kPerceiver:
      return "perceiver";
    case AggregatorKind::kSelfAttention:
      return "self_attention";
    case AggregatorKind::kNone:
      return "none";
  }
  return "unknown";
}

AggregatorKind parse_aggregator_kind(const std::string& name) {
  if (name == "perceiver") return AggregatorKind::kPerceiver;
  if (name == "self_attention") return AggregatorKind::kSelfAttention;
  if (name == "none") return AggregatorKind::kNone;
  throw std::invalid_argument("unknown aggregator kind: " + name);
}

namespace {

torch::Tensor add_agent_embedding(const torch::Tensor& joint, torch::nn::Embedding& embed) {
  TORCH_CHECK(joint.dim() == 4, "aggregator expects [B, n, S, D] input");
  const auto n = joint.size(1);
  auto ids = torch::arange(n, torch::TensorOptions().dtype(torch::kInt64).device(joint.device()));
  return joint + embed->forward(ids).view({1, n, 1, joint.size(3)});
}

torch::Tensor split_flat(const torch::Tensor& joint, std::int64_t n_agents) {
  TORCH_CHECK(joint.dim() == 3, "flat aggregator input must be [B, L, D]");
  if (joint.size(1) % n_agents != 0 || joint.size(1) == 0) {
    throw std::invalid_argument("joint sequence length " + std::to_string(joint.size(1)) +
                                " is not divisible into " + std::to_string(n_agents) + " agent blocks");
  }
  return joint.view({joint.size(0), n_agents, joint.size(1) / n_agents, joint.size(2)});
}

}  // namespace

PerceiverAggregatorImpl::PerceiverAggregatorImpl(std::int64_t n_agents, std::int64_t dim,
                                                 const AggregatorConfig& config)
    : n_agents_(n_agents), dim_(dim) {
  if (n_agents < 1) throw std::invalid_argument("aggregator needs at least one agent");
  latents_ = register_parameter("latents", torch::randn({n_agents, dim}) * 0.02);
  agent_embed_ = register_module("agent_embed", torch::nn::Embedding(n_agents, dim));
  embed_dropout_ = register_module("embed_dropout", torch::nn::Dropout(config.dropout));
  norm_latents_ = register_module("norm_latents", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm_context_ = register_module("norm_context", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  cross_attn_ = register_module(
      "cross_attn", nn::Attention(nn::AttentionOptions{dim, dim, config.cross_heads, config.head_dim, config.dropout}));
  norm_cross_ff_ = register_module("norm_cross_ff", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  cross_ff_ = register_module("cross_ff", nn::GegluFeedForward(dim, config.ff_mult, config.dropout));
  resid_dropout_ = register_module("resid_dropout", torch::nn::Dropout(config.dropout));
  inner_ = register_module("inner", torch::nn::ModuleList());
  for (int l = 0; l < config.inner_layers; ++l) {
    inner_->push_back(nn::SelfAttentionBlock(dim, config.inner_heads, config.head_dim, config.ff_mult, config.dropout));
  }
  norm_out_ = register_module("norm_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

void PerceiverAggregatorImpl::set_capture(bool on) { cross_attn_->set_capture(on); }

torch::Tensor PerceiverAggregatorImpl::forward(const torch::Tensor& joint) {
  if (joint.size(1) != n_agents_) {
    throw std::invalid_argument("perceiver built for " + std::to_string(n_agents_) + " agents, got " +
                                std::to_string(joint.size(1)));
  }
  const auto B = joint.size(0);
  auto context = add_agent_embedding(joint, agent_embed_).reshape({B, -1, dim_});
  context = embed_dropout_->forward(context);

  auto latents = latents_.unsqueeze(0).expand({B, n_agents_, dim_});
  auto x = latents + resid_dropout_->forward(
                         cross_attn_->forward(norm_latents_->forward(latents), norm_context_->forward(context)));
  x = x + resid_dropout_->forward(cross_ff_->forward(norm_cross_ff_->forward(x)));
  for (auto& block : *inner_) x = block->as<nn::SelfAttentionBlock>()->forward(x);
  return norm_out_->forward(x);
}

torch::Tensor PerceiverAggregatorImpl::forward_flat(const torch::Tensor& joint) {
  return forward(split_flat(joint, n_agents_));
}

SelfAttentionAggregatorImpl::SelfAttentionAggregatorImpl(std::int64_t n_agents, std::int64_t dim,
                                                         const AggregatorConfig& config)
    : n_agents_(n_agents) {
  if (n_agents < 1) throw std::invalid_argument("aggregator needs at least one agent");
  agent_embed_ = register_module("agent_embed", torch::nn::Embedding(n_agents, dim));
  embed_dropout_ = register_module("embed_dropout", torch::nn::Dropout(config.dropout));
  layers_ = register_module("layers", torch::nn::ModuleList());
  for (int l = 0; l < config.self_attention_layers; ++l) {
    layers_->push_back(nn::SelfAttentionBlock(dim, config.inner_heads, config.head_dim, config.ff_mult, config.dropout));
  }
  norm_out_ = register_module("norm_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor SelfAttentionAggregatorImpl::forward(const torch::Tensor& joint) {
  if (joint.size(1) != n_agents_) throw std::invalid_argument("self-attention aggregator: agent count mismatch");
  const auto B = joint.size(0);
  auto x = embed_dropout_->forward(add_agent_embedding(joint, agent_embed_).reshape({B, -1, joint.size(3)}));
  for (auto& block : *layers_) x = block->as<nn::SelfAttentionBlock>()->forward(x);
  return norm_out_->forward(x);
}

torch::Tensor SelfAttentionAggregatorImpl::forward_flat(const torch::Tensor& joint) {
  return forward(split_flat(joint, n_agents_));
}

torch::Tensor SelfAttentionAggregatorImpl::pooled(const torch::Tensor& joint) {
  auto out = forward(joint);
  return out.view({joint.size(0), joint.size(1), joint.size(2), joint.size(3)}).mean(2);
}

// ---------------------------------------------------------------------------

FlopBreakdown flops_estimate(AggregatorKind kind, std::int64_t n_agents, const FlopConfig& config) {
  if (n_agents < 1) throw std::invalid_argument("flops_estimate: n_agents must be >= 1");
  const auto& agg = config.aggregator;
  const double D = static_cast<double>(config.dim);
  const double n = static_cast<double>(n_agents);
  const double seq = n * static_cast<double>(config.tokens_per_obs + 1);
  const double mult = agg.ff_mult;
  const double head_dim = agg.head_dim;

  FlopBreakdown out;
  auto attention = [&](double queries, double keys, double heads) {
    const double inner = heads * head_dim;
    out.projections += queries * D * inner + keys * D * 2.0 * inner + queries * inner * D;
    out.attention += 2.0 * queries * keys * inner;
  };
  auto feed_forward = [&](double rows) { out.feed_forward += rows * (D * 2.0 * mult * D + mult * D * D); };

  switch (kind) {
    case AggregatorKind::kPerceiver:
      attention(n, seq, agg.cross_heads);
      feed_forward(n);
      for (int l = 0; l < agg.inner_layers; ++l) {
        attention(n, n, agg.inner_heads);
        feed_forward(n);
      }
      break;
    case AggregatorKind::kSelfAttention:
      for (int l = 0; l < agg.self_attention_layers; ++l) {
        attention(seq, seq, agg.inner_heads);
        feed_forward(seq);
      }
      break;
    case AggregatorKind::kNone:
      break;
  }
  return out;
}

}  // namespace mawm
