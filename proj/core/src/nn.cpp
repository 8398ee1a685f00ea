#include "mawm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mawm::nn {

torch::nn::Sequential make_mlp(std::int64_t in, std::int64_t hidden, std::int64_t out, int layers,
                               Activation activation) {
  if (layers < 1) throw std::invalid_argument("make_mlp: layers must be >= 1");
  torch::nn::Sequential seq;
  std::int64_t width = in;
  for (int l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    seq->push_back(torch::nn::Linear(width, last ? out : hidden));
    width = hidden;
    if (last) break;
    if (activation == Activation::kReLU) {
      seq->push_back(torch::nn::ReLU());
    } else {
      seq->push_back(torch::nn::GELU());
    }
  }
  return seq;
}

GegluFeedForwardImpl::GegluFeedForwardImpl(std::int64_t dim, std::int64_t mult, double dropout)
    : in_(register_module("proj_in", torch::nn::Linear(dim, dim * mult * 2))),
      out_(register_module("proj_out", torch::nn::Linear(dim * mult, dim))),
      dropout_(register_module("dropout", torch::nn::Dropout(dropout))) {}

torch::Tensor GegluFeedForwardImpl::forward(const torch::Tensor& x) {
  auto parts = in_->forward(x).chunk(2, -1);
  return out_->forward(dropout_->forward(parts[0] * torch::gelu(parts[1])));
}

AttentionImpl::AttentionImpl(const AttentionOptions& options) : options_(options) {
  const auto inner = options.heads * options.head_dim;
  to_q_ = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(options.query_dim, inner).bias(false)));
  to_kv_ = register_module("to_kv",
                           torch::nn::Linear(torch::nn::LinearOptions(options.context_dim, 2 * inner).bias(false)));
  to_out_ = register_module("to_out", torch::nn::Linear(inner, options.query_dim));
  attn_dropout_ = register_module("attn_dropout", torch::nn::Dropout(options.dropout));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context,
                                     const torch::Tensor& keep_mask) {
  const auto B = x.size(0);
  const auto Lq = x.size(1);
  const auto Lk = context.size(1);
  const auto h = options_.heads;
  const auto dh = options_.head_dim;

  auto q = to_q_->forward(x).view({B, Lq, h, dh}).transpose(1, 2);
  auto kv = to_kv_->forward(context).chunk(2, -1);
  auto k = kv[0].reshape({B, Lk, h, dh}).transpose(1, 2);
  auto v = kv[1].reshape({B, Lk, h, dh}).transpose(1, 2);

  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  if (keep_mask.defined()) {
    scores = scores.masked_fill(keep_mask.logical_not(), -std::numeric_limits<double>::infinity());
  }
  auto weights = torch::softmax(scores, -1);
  if (capture_) last_attention_ = weights.detach();
  auto out = torch::matmul(attn_dropout_->forward(weights), v);
  out = out.transpose(1, 2).reshape({B, Lq, h * dh});
  return to_out_->forward(out);
}

SelfAttentionBlockImpl::SelfAttentionBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t head_dim,
                                               std::int64_t ff_mult, double dropout)
    : norm_attn_(register_module("norm_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})))),
      attn_(register_module("attn", Attention(AttentionOptions{dim, dim, heads, head_dim, dropout}))),
      norm_ff_(register_module("norm_ff", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})))),
      ff_(register_module("ff", GegluFeedForward(dim, ff_mult, dropout))),
      resid_dropout_(register_module("resid_dropout", torch::nn::Dropout(dropout))) {}

torch::Tensor SelfAttentionBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& keep_mask) {
  auto normed = norm_attn_->forward(x);
  auto y = x + resid_dropout_->forward(attn_->forward(normed, normed, keep_mask));
  return y + resid_dropout_->forward(ff_->forward(norm_ff_->forward(y)));
}

double grad_norm(const torch::nn::Module& module) {
  double total = 0.0;
  for (const auto& p : module.parameters()) {
    if (p.grad().defined()) total += p.grad().pow(2).sum().item<double>();
  }
  return std::sqrt(total);
}

void copy_state(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard guard;
  auto src_params = src.named_parameters(true);
  auto dst_params = dst.named_parameters(true);
  for (auto& item : src_params) {
    auto* target = dst_params.find(item.key());
    if (target == nullptr) throw std::runtime_error("copy_state: missing parameter " + item.key());
    target->copy_(item.value());
  }
  auto src_buffers = src.named_buffers(true);
  auto dst_buffers = dst.named_buffers(true);
  for (auto& item : src_buffers) {
    auto* target = dst_buffers.find(item.key());
    if (target == nullptr) throw std::runtime_error("copy_state: missing buffer " + item.key());
    target->copy_(item.value());
  }
}

}  // namespace mawm::nn
