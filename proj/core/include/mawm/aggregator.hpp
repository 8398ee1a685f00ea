#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "mawm/nn.hpp"

namespace mawm {

enum class AggregatorKind { kPerceiver, kSelfAttention, kNone };

std::string to_string(AggregatorKind kind);
AggregatorKind parse_aggregator_kind(const std::string& name);

struct AggregatorConfig {
  AggregatorKind kind = AggregatorKind::kPerceiver;
  int cross_heads = 8;
  int inner_layers = 2;
  int inner_heads = 8;
  int head_dim = 64;
  int self_attention_layers = 3;
  int ff_mult = 4;
  double dropout = 0.1;
};

/// Perceiver aggregation of one timestep's joint token embeddings.
///
/// Input is [B, n, S, D]: for every agent its S = K + 1 observation-token and
/// action embeddings. A learned agent-index embedding is added to each agent's
/// block, then n learned latent queries (one per agent) cross-attend to the
/// flattened n*S sequence and pass through a small bidirectional Transformer.
/// Output row i is agent i's global feature.
class PerceiverAggregatorImpl : public torch::nn::Module {
 public:
  PerceiverAggregatorImpl(std::int64_t n_agents, std::int64_t dim, const AggregatorConfig& config);

  torch::Tensor forward(const torch::Tensor& joint);

  /// Flat variant: [B, L, D] with L = n * S; throws if L is not a multiple of n.
  torch::Tensor forward_flat(const torch::Tensor& joint);

  std::int64_t n_agents() const { return n_agents_; }
  void set_capture(bool on);
  /// Cross-attention weights of the last forward, [B, heads, n, n*S].
  const torch::Tensor& cross_attention() const { return cross_attn_->last_attention(); }

 private:
  std::int64_t n_agents_;
  std::int64_t dim_;
  torch::Tensor latents_;
  torch::nn::Embedding agent_embed_{nullptr};
  torch::nn::Dropout embed_dropout_{nullptr};
  torch::nn::LayerNorm norm_latents_{nullptr};
  torch::nn::LayerNorm norm_context_{nullptr};
  nn::Attention cross_attn_{nullptr};
  torch::nn::LayerNorm norm_cross_ff_{nullptr};
  nn::GegluFeedForward cross_ff_{nullptr};
  torch::nn::Dropout resid_dropout_{nullptr};
  torch::nn::ModuleList inner_{nullptr};
  torch::nn::LayerNorm norm_out_{nullptr};
};
TORCH_MODULE(PerceiverAggregator);

/// Baseline: bidirectional self-attention over the whole n*S joint sequence,
/// producing a same-length output.
class SelfAttentionAggregatorImpl : public torch::nn::Module {
 public:
  SelfAttentionAggregatorImpl(std::int64_t n_agents, std::int64_t dim, const AggregatorConfig& config);

  /// [B, n, S, D] -> [B, n*S, D].
  torch::Tensor forward(const torch::Tensor& joint);
  torch::Tensor forward_flat(const torch::Tensor& joint);
  /// Mean over each agent's S outputs, [B, n, D]; used when the features must
  /// fit a single slot per agent.
  torch::Tensor pooled(const torch::Tensor& joint);

  std::int64_t n_agents() const { return n_agents_; }

 private:
  std::int64_t n_agents_;
  torch::nn::Embedding agent_embed_{nullptr};
  torch::nn::Dropout embed_dropout_{nullptr};
  torch::nn::ModuleList layers_{nullptr};
  torch::nn::LayerNorm norm_out_{nullptr};
};
TORCH_MODULE(SelfAttentionAggregator);

/// Analytic cost of one aggregation call, counted as multiply-accumulates
/// (one FLOP per MAC). Layer norms, softmax, biases and activations are
/// ignored.
struct FlopBreakdown {
  double projections = 0.0;      // Q/K/V and output projections
  double attention = 0.0;        // score and weighted-value matmuls
  double feed_forward = 0.0;
  double total() const { return projections + attention + feed_forward; }
};

struct FlopConfig {
  std::int64_t dim = 256;
  std::int64_t tokens_per_obs = 16;
  AggregatorConfig aggregator;
};

FlopBreakdown flops_estimate(AggregatorKind kind, std::int64_t n_agents, const FlopConfig& config);

}  // namespace mawm
