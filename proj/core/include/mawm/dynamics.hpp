#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mawm/aggregator.hpp"
#include "mawm/replay_buffer.hpp"
#include "mawm/tokenizer.hpp"

namespace mawm {

struct DynamicsConfig {
  int embed_dim = 256;
  int layers = 10;
  int heads = 4;
  double dropout = 0.1;
  int horizon = 15;
  /// Joint-sequence variant: all agents in one sequence, no aggregation.
  bool centralized = false;
  AggregatorConfig aggregator;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double grad_clip = 10.0;
  int batch_size = 30;
};

/// Problem dimensions the world model is built for.
struct WorldModelShape {
  int n_agents = 2;
  int tokens_per_obs = 16;
  int vocab_size = 512;
  int n_actions = 5;
};

/// Token layout of one timestep block.
///
/// Decentralized: one sequence per agent, block [x_1..x_K, a, e] of length
/// K + 2, where e is the aggregated-feature slot. Centralized: one sequence for
/// all agents, block [x^1_1..x^1_K, ..., x^n_1..x^n_K, a^1..a^n]. Agent `a` of
/// sequence `s` is global agent s * agents_per_sequence + a.
struct SequenceLayout {
  int sequences = 1;
  int agents_per_sequence = 1;
  int tokens_per_obs = 1;
  bool has_feature = false;

  int obs_slots() const { return agents_per_sequence * tokens_per_obs; }
  int block() const { return obs_slots() + agents_per_sequence + (has_feature ? 1 : 0); }
  int obs_slot(int agent, int k) const { return agent * tokens_per_obs + k; }
  int act_slot(int agent) const { return obs_slots() + agent; }
  int last_slot() const { return block() - 1; }
};

SequenceLayout make_layout(const WorldModelShape& shape, bool centralized);

/// Tokenized, batched trajectory segments.
struct SegmentBatch {
  torch::Tensor tokens;        // [B, H, n, K] int64
  torch::Tensor actions;       // [B, H, n] int64
  torch::Tensor rewards;       // [B, H]
  torch::Tensor continuation;  // [B, H]
  torch::Tensor avail;         // [B, H, n, A] float 0/1
  torch::Tensor valid;         // [B, H] float 0/1

  std::int64_t size() const { return tokens.size(0); }
  std::int64_t horizon() const { return tokens.size(1); }
  SegmentBatch to(torch::Dtype dtype) const;
};

SegmentBatch make_segment_batch(const std::vector<TrajectorySegment>& segments, ObservationTokenizer& tokenizer);

struct DynamicsLoss {
  torch::Tensor total;
  torch::Tensor tokens;    // mean cross-entropy per predicted observation token
  torch::Tensor reward;    // smooth L1
  torch::Tensor discount;  // binary cross-entropy on the continuation flag
  torch::Tensor avail;     // binary cross-entropy per action
  double token_accuracy = 0.0;

  /// Throws NonFiniteLossError naming the offending components.
  void check_finite() const;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContextOverflowError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct KvCache {
  torch::Tensor keys;    // [B, heads, L, head_dim]
  torch::Tensor values;
  std::int64_t length() const { return keys.defined() ? keys.size(2) : 0; }
};

/// Masked multi-head self-attention; position i attends to positions <= i.
class CausalSelfAttentionImpl : public torch::nn::Module {
 public:
  CausalSelfAttentionImpl(std::int64_t dim, std::int64_t heads, double dropout);

  /// x: [B, L, D]. With a cache the new rows are placed after the cached ones
  /// and the cache is extended.
  torch::Tensor forward(const torch::Tensor& x, KvCache* cache = nullptr);

  void set_capture(bool on) { capture_ = on; }
  const torch::Tensor& last_attention() const { return last_attention_; }

 private:
  std::int64_t heads_;
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear proj_{nullptr};
  torch::nn::Dropout attn_dropout_{nullptr};
  torch::nn::Dropout resid_dropout_{nullptr};
  bool capture_ = false;
  torch::Tensor last_attention_;
};
TORCH_MODULE(CausalSelfAttention);

class CausalBlockImpl : public torch::nn::Module {
 public:
  CausalBlockImpl(std::int64_t dim, std::int64_t heads, double dropout);
  torch::Tensor forward(const torch::Tensor& x, KvCache* cache = nullptr);
  CausalSelfAttention& attention() { return attn_; }

 private:
  torch::nn::LayerNorm ln1_{nullptr};
  CausalSelfAttention attn_{nullptr};
  torch::nn::LayerNorm ln2_{nullptr};
  torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(CausalBlock);

/// Shared autoregressive Transformer over per-agent token sequences, with the
/// aggregator, embedding tables and prediction heads.
class WorldModelImpl : public torch::nn::Module {
 public:
  WorldModelImpl(const WorldModelShape& shape, const DynamicsConfig& config);

  const WorldModelShape& shape() const { return shape_; }
  const DynamicsConfig& config() const { return config_; }
  const SequenceLayout& layout() const { return layout_; }
  std::int64_t max_positions() const { return static_cast<std::int64_t>(config_.horizon) * layout_.block(); }

  /// tokens [B, H, n, K], actions [B, H, n] -> [B * sequences, H * block, D]
  /// including positional embeddings.
  torch::Tensor embed(const torch::Tensor& tokens, const torch::Tensor& actions);

  /// Per-agent features of each timestep, [B, H, n, D]; the learned null
  /// feature when aggregation is disabled.
  torch::Tensor aggregate(const torch::Tensor& tokens, const torch::Tensor& actions);

  /// Causal Transformer over embedded sequences (positions already added).
  torch::Tensor forward(const torch::Tensor& embedded);

  torch::Tensor token_logits(const torch::Tensor& hidden) { return token_head_->forward(hidden); }
  torch::Tensor reward_pred(const torch::Tensor& hidden) { return reward_head_->forward(hidden).squeeze(-1); }
  torch::Tensor discount_logit(const torch::Tensor& hidden) { return discount_head_->forward(hidden).squeeze(-1); }
  torch::Tensor avail_logits(const torch::Tensor& hidden) { return avail_head_->forward(hidden); }

  /// Teacher-forced loss over a batch of segments; padded steps are excluded.
  DynamicsLoss loss(const SegmentBatch& batch);

  void set_capture(bool on);
  /// Causal attention of every layer from the last forward, [B*S, heads, Lq, Lk].
  std::vector<torch::Tensor> attention_maps() const;
  /// Perceiver cross-attention of the last aggregation, [B*H, heads, n, n(K+1)].
  torch::Tensor perceiver_attention() const;

  // Incremental decoding, used by WorldModelRollout.
  torch::Tensor embed_tokens(const torch::Tensor& tokens) { return obs_embed_->forward(tokens); }
  torch::Tensor embed_actions(const torch::Tensor& actions) { return act_embed_->forward(actions); }
  torch::Tensor features_step(const torch::Tensor& tokens, const torch::Tensor& actions);
  torch::Tensor forward_cached(const torch::Tensor& x, std::int64_t offset, std::vector<KvCache>& caches);

 private:
  torch::Tensor run_blocks(torch::Tensor x, std::vector<KvCache>* caches);

  WorldModelShape shape_;
  DynamicsConfig config_;
  SequenceLayout layout_;
  torch::nn::Embedding obs_embed_{nullptr};
  torch::nn::Embedding act_embed_{nullptr};
  torch::Tensor pos_embed_;
  torch::Tensor null_feature_;
  PerceiverAggregator perceiver_{nullptr};
  SelfAttentionAggregator self_attention_{nullptr};
  torch::nn::Dropout embed_dropout_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm ln_f_{nullptr};
  torch::nn::Sequential token_head_{nullptr};
  torch::nn::Sequential reward_head_{nullptr};
  torch::nn::Sequential discount_head_{nullptr};
  torch::nn::Sequential avail_head_{nullptr};
};
TORCH_MODULE(WorldModel);

struct SamplingOptions {
  bool greedy = false;
  double temperature = 1.0;
};

struct StepPrediction {
  torch::Tensor reward;         // [B, n]
  torch::Tensor discount_prob;  // [B, n], Bernoulli mean of continuation
};

struct ObservationPrediction {
  torch::Tensor tokens;      // [B, n, K]
  torch::Tensor avail_prob;  // [B, n, A]
};

/// Step-by-step decoding with a key/value cache. Call start() with the first
/// observation tokens, then alternate act() and next_observation(). The
/// context holds at most `horizon` timesteps. Runs without gradients.
class WorldModelRollout {
 public:
  WorldModelRollout(WorldModel model, SamplingOptions options, at::Generator generator);

  void start(const torch::Tensor& tokens);
  /// Appends the joint action (and feature) of the current step.
  StepPrediction act(const torch::Tensor& actions);
  /// Generates the next observation one token at a time.
  ObservationPrediction next_observation();

  int step() const { return step_; }
  const torch::Tensor& current_tokens() const { return tokens_; }

 private:
  torch::Tensor sample(const torch::Tensor& logits);
  torch::Tensor to_sequences(const torch::Tensor& per_agent) const;  // [B, n, ...] -> [B*S, A_s, ...]
  torch::Tensor to_agents(const torch::Tensor& per_sequence) const;  // inverse

  WorldModel model_;
  SamplingOptions options_;
  at::Generator generator_;
  std::vector<KvCache> caches_;
  std::int64_t batch_ = 0;
  std::int64_t offset_ = 0;
  int step_ = 0;
  bool acted_ = false;
  torch::Tensor tokens_;       // [B, n, K]
  torch::Tensor last_hidden_;  // [B*S, D]
};

}  // namespace mawm
