#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

namespace mawm::nn {

enum class Activation { kReLU, kGELU };

/// Feed-forward stack of `layers` linear layers with the activation between
/// them (none after the last).
torch::nn::Sequential make_mlp(std::int64_t in, std::int64_t hidden, std::int64_t out, int layers,
                               Activation activation);

/// Gated-GELU feed-forward: Linear(D, 2mD) -> a * gelu(b) -> Linear(mD, D).
class GegluFeedForwardImpl : public torch::nn::Module {
 public:
  GegluFeedForwardImpl(std::int64_t dim, std::int64_t mult, double dropout);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear in_{nullptr};
  torch::nn::Linear out_{nullptr};
  torch::nn::Dropout dropout_{nullptr};
};
TORCH_MODULE(GegluFeedForward);

struct AttentionOptions {
  std::int64_t query_dim = 0;
  std::int64_t context_dim = 0;
  std::int64_t heads = 8;
  std::int64_t head_dim = 64;
  double dropout = 0.0;
};

/// Multi-head attention from queries onto a context sequence (bidirectional).
/// With `capture` enabled the post-softmax weights of the last call are kept
/// as [B, heads, Lq, Lk].
class AttentionImpl : public torch::nn::Module {
 public:
  explicit AttentionImpl(const AttentionOptions& options);

  /// x: [B, Lq, query_dim], context: [B, Lk, context_dim].
  /// keep_mask (optional, bool, broadcastable to [B, heads, Lq, Lk]): true
  /// where attention is allowed.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context,
                        const torch::Tensor& keep_mask = {});

  void set_capture(bool on) { capture_ = on; }
  const torch::Tensor& last_attention() const { return last_attention_; }

  std::int64_t heads() const { return options_.heads; }

 private:
  AttentionOptions options_;
  torch::nn::Linear to_q_{nullptr};
  torch::nn::Linear to_kv_{nullptr};
  torch::nn::Linear to_out_{nullptr};
  torch::nn::Dropout attn_dropout_{nullptr};
  bool capture_ = false;
  torch::Tensor last_attention_;
};
TORCH_MODULE(Attention);

/// Pre-norm bidirectional self-attention block with a GEGLU feed-forward.
class SelfAttentionBlockImpl : public torch::nn::Module {
 public:
  SelfAttentionBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t head_dim, std::int64_t ff_mult,
                         double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& keep_mask = {});
  Attention& attention() { return attn_; }

 private:
  torch::nn::LayerNorm norm_attn_{nullptr};
  Attention attn_{nullptr};
  torch::nn::LayerNorm norm_ff_{nullptr};
  GegluFeedForward ff_{nullptr};
  torch::nn::Dropout resid_dropout_{nullptr};
};
TORCH_MODULE(SelfAttentionBlock);

/// Global L2 norm of all gradients of `module` (0 when no gradients exist).
double grad_norm(const torch::nn::Module& module);

/// Copies every parameter and buffer of `src` into `dst` (same structure).
void copy_state(const torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace mawm::nn
