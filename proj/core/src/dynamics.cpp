#include "mawm/dynamics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace mawm {

namespace F = torch::nn::functional;

SequenceLayout make_layout(const WorldModelShape& shape, bool centralized) {
  SequenceLayout layout;
  layout.tokens_per_obs = shape.tokens_per_obs;
  if (centralized) {
    layout.sequences = 1;
    layout.agents_per_sequence = shape.n_agents;
    layout.has_feature = false;
  } else {
    layout.sequences = shape.n_agents;
    layout.agents_per_sequence = 1;
    layout.has_feature = true;
  }
  return layout;
}

SegmentBatch SegmentBatch::to(torch::Dtype dtype) const {
  SegmentBatch out = *this;
  out.rewards = rewards.to(dtype);
  out.continuation = continuation.to(dtype);
  out.avail = avail.to(dtype);
  out.valid = valid.to(dtype);
  return out;
}

SegmentBatch make_segment_batch(const std::vector<TrajectorySegment>& segments, ObservationTokenizer& tokenizer) {
  if (segments.empty()) throw std::invalid_argument("make_segment_batch: no segments");
  const auto& first = segments.front();
  const std::int64_t B = static_cast<std::int64_t>(segments.size());
  const std::int64_t H = first.horizon, n = first.n_agents, d = first.obs_dim, A = first.n_actions;

  auto obs = torch::empty({B, H, n, d});
  auto actions = torch::empty({B, H, n}, torch::kInt64);
  auto rewards = torch::empty({B, H});
  auto cont = torch::empty({B, H});
  auto avail = torch::empty({B, H, n, A});
  auto valid = torch::empty({B, H});
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& s = segments[static_cast<std::size_t>(b)];
    if (s.horizon != H || s.n_agents != n || s.obs_dim != d || s.n_actions != A) {
      throw std::invalid_argument("make_segment_batch: segments disagree in shape");
    }
    std::copy(s.obs.begin(), s.obs.end(), obs[b].data_ptr<float>());
    std::copy(s.actions.begin(), s.actions.end(), actions[b].data_ptr<std::int64_t>());
    std::copy(s.rewards.begin(), s.rewards.end(), rewards[b].data_ptr<float>());
    std::copy(s.continuation.begin(), s.continuation.end(), cont[b].data_ptr<float>());
    std::copy(s.avail.begin(), s.avail.end(), avail[b].data_ptr<float>());
    std::copy(s.valid.begin(), s.valid.end(), valid[b].data_ptr<float>());
  }
  SegmentBatch batch;
  batch.tokens = tokenizer.encode(obs);
  batch.actions = actions;
  batch.rewards = rewards;
  batch.continuation = cont;
  batch.avail = avail;
  batch.valid = valid;
  return batch;
}

void DynamicsLoss::check_finite() const {
  std::ostringstream bad;
  auto probe = [&](const char* name, const torch::Tensor& t) {
    if (t.defined() && !std::isfinite(t.item<double>())) bad << ' ' << name << '=' << t.item<double>();
  };
  probe("tokens", tokens);
  probe("reward", reward);
  probe("discount", discount);
  probe("avail", avail);
  probe("total", total);
  if (!bad.str().empty()) throw NonFiniteLossError("non-finite dynamics loss:" + bad.str());
}

// ---------------------------------------------------------------------------

CausalSelfAttentionImpl::CausalSelfAttentionImpl(std::int64_t dim, std::int64_t heads, double dropout)
    : heads_(heads) {
  if (dim % heads != 0) throw std::invalid_argument("embedding dim must be divisible by the number of heads");
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
  attn_dropout_ = register_module("attn_dropout", torch::nn::Dropout(dropout));
  resid_dropout_ = register_module("resid_dropout", torch::nn::Dropout(dropout));
}

torch::Tensor CausalSelfAttentionImpl::forward(const torch::Tensor& x, KvCache* cache) {
  const auto B = x.size(0), L = x.size(1), D = x.size(2);
  const auto hd = D / heads_;
  auto qkv = qkv_->forward(x).view({B, L, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0];
  auto k = qkv[1];
  auto v = qkv[2];
  std::int64_t offset = 0;
  if (cache != nullptr) {
    offset = cache->length();
    if (offset > 0) {
      k = torch::cat({cache->keys, k}, 2);
      v = torch::cat({cache->values, v}, 2);
    }
    cache->keys = k;
    cache->values = v;
  }
  const auto Lk = k.size(2);
  auto att = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));
  if (L > 1) {
    auto opts = torch::TensorOptions().dtype(torch::kInt64).device(x.device());
    auto keep = torch::arange(Lk, opts).view({1, Lk}) <= (torch::arange(L, opts) + offset).view({L, 1});
    att = att.masked_fill(keep.logical_not(), -std::numeric_limits<double>::infinity());
  }
  att = torch::softmax(att, -1);
  if (capture_) last_attention_ = att.detach();
  auto y = torch::matmul(attn_dropout_->forward(att), v).transpose(1, 2).reshape({B, L, D});
  return resid_dropout_->forward(proj_->forward(y));
}

CausalBlockImpl::CausalBlockImpl(std::int64_t dim, std::int64_t heads, double dropout) {
  ln1_ = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", CausalSelfAttention(dim, heads, dropout));
  ln2_ = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  mlp_ = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(dim, 4 * dim), torch::nn::GELU(),
                                                      torch::nn::Linear(4 * dim, dim), torch::nn::Dropout(dropout)));
}

torch::Tensor CausalBlockImpl::forward(const torch::Tensor& x, KvCache* cache) {
  auto h = x + attn_->forward(ln1_->forward(x), cache);
  return h + mlp_->forward(ln2_->forward(h));
}

// ---------------------------------------------------------------------------

namespace {

torch::nn::Sequential head_mlp(std::int64_t dim, std::int64_t out) {
  return torch::nn::Sequential(torch::nn::Linear(dim, dim), torch::nn::ReLU(), torch::nn::Linear(dim, out));
}

torch::Tensor masked_mean(const torch::Tensor& values, const torch::Tensor& mask) {
  return (values * mask).sum() / mask.sum().clamp_min(1.0);
}

}  // namespace

WorldModelImpl::WorldModelImpl(const WorldModelShape& shape, const DynamicsConfig& config)
    : shape_(shape), config_(config), layout_(make_layout(shape, config.centralized)) {
  if (shape.n_agents < 1 || shape.tokens_per_obs < 1 || shape.vocab_size < 1 || shape.n_actions < 1) {
    throw std::invalid_argument("world model shape must be positive");
  }
  if (config.horizon < 1) throw std::invalid_argument("world model horizon must be >= 1");
  const std::int64_t D = config.embed_dim;
  obs_embed_ = register_module("obs_embed", torch::nn::Embedding(shape.vocab_size, D));
  act_embed_ = register_module("act_embed", torch::nn::Embedding(shape.n_actions, D));
  pos_embed_ = register_parameter("pos_embed", torch::randn({max_positions(), D}) * 0.02);
  if (layout_.has_feature) {
    switch (config.aggregator.kind) {
      case AggregatorKind::kPerceiver:
        perceiver_ = register_module("perceiver", PerceiverAggregator(shape.n_agents, D, config.aggregator));
        break;
      case AggregatorKind::kSelfAttention:
        self_attention_ =
            register_module("self_attention", SelfAttentionAggregator(shape.n_agents, D, config.aggregator));
        break;
      case AggregatorKind::kNone:
        null_feature_ = register_parameter("null_feature", torch::randn({D}) * 0.02);
        break;
    }
  }
  embed_dropout_ = register_module("embed_dropout", torch::nn::Dropout(config.dropout));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int l = 0; l < config.layers; ++l) blocks_->push_back(CausalBlock(D, config.heads, config.dropout));
  ln_f_ = register_module("ln_f", torch::nn::LayerNorm(torch::nn::LayerNormOptions({D})));
  token_head_ = register_module("token_head", head_mlp(D, shape.vocab_size));
  reward_head_ = register_module("reward_head", head_mlp(D, 1));
  discount_head_ = register_module("discount_head", head_mlp(D, 1));
  avail_head_ = register_module("avail_head", head_mlp(D, shape.n_actions));
}

torch::Tensor WorldModelImpl::aggregate(const torch::Tensor& tokens, const torch::Tensor& actions) {
  if (!layout_.has_feature) throw std::logic_error("the centralized world model has no aggregated features");
  const auto B = tokens.size(0), H = tokens.size(1), n = tokens.size(2), K = tokens.size(3);
  const std::int64_t D = config_.embed_dim;
  if (config_.aggregator.kind == AggregatorKind::kNone) return null_feature_.expand({B, H, n, D});
  auto joint = torch::cat({obs_embed_->forward(tokens), act_embed_->forward(actions).unsqueeze(3)}, 3)
                   .reshape({B * H, n, K + 1, D});
  auto features = config_.aggregator.kind == AggregatorKind::kPerceiver ? perceiver_->forward(joint)
                                                                        : self_attention_->pooled(joint);
  return features.view({B, H, n, D});
}

torch::Tensor WorldModelImpl::features_step(const torch::Tensor& tokens, const torch::Tensor& actions) {
  return aggregate(tokens.unsqueeze(1), actions.unsqueeze(1)).squeeze(1);
}

torch::Tensor WorldModelImpl::embed(const torch::Tensor& tokens, const torch::Tensor& actions) {
  if (tokens.dim() != 4 || actions.dim() != 3 || tokens.size(0) != actions.size(0) ||
      tokens.size(1) != actions.size(1) || tokens.size(2) != actions.size(2)) {
    throw std::invalid_argument("embed: tokens [B, H, n, K] and actions [B, H, n] are misaligned");
  }
  if (tokens.size(2) != shape_.n_agents || tokens.size(3) != shape_.tokens_per_obs) {
    throw std::invalid_argument("embed: expected " + std::to_string(shape_.n_agents) + " agents with " +
                                std::to_string(shape_.tokens_per_obs) + " tokens each");
  }
  if (tokens.size(1) > config_.horizon) {
    throw ContextOverflowError("embed: " + std::to_string(tokens.size(1)) + " timesteps exceed the context of " +
                               std::to_string(config_.horizon));
  }
  const auto B = tokens.size(0), H = tokens.size(1);
  const std::int64_t D = config_.embed_dim, S = layout_.sequences, As = layout_.agents_per_sequence;
  std::vector<torch::Tensor> parts{obs_embed_->forward(tokens).reshape({B, H, S, layout_.obs_slots(), D}),
                                   act_embed_->forward(actions).reshape({B, H, S, As, D})};
  if (layout_.has_feature) parts.push_back(aggregate(tokens, actions).reshape({B, H, S, 1, D}));
  auto x = torch::cat(parts, 3).permute({0, 2, 1, 3, 4}).reshape({B * S, H * layout_.block(), D});
  return x + pos_embed_.slice(0, 0, H * layout_.block());
}

torch::Tensor WorldModelImpl::run_blocks(torch::Tensor x, std::vector<KvCache>* caches) {
  x = embed_dropout_->forward(x);
  std::size_t l = 0;
  for (auto& block : *blocks_) {
    x = block->as<CausalBlock>()->forward(x, caches != nullptr ? &(*caches)[l] : nullptr);
    ++l;
  }
  return ln_f_->forward(x);
}

torch::Tensor WorldModelImpl::forward(const torch::Tensor& embedded) {
  if (embedded.size(1) > max_positions()) throw ContextOverflowError("forward: sequence longer than the context");
  return run_blocks(embedded, nullptr);
}

torch::Tensor WorldModelImpl::forward_cached(const torch::Tensor& x, std::int64_t offset,
                                             std::vector<KvCache>& caches) {
  if (offset + x.size(1) > max_positions()) {
    throw ContextOverflowError("world model context of " + std::to_string(config_.horizon) + " steps exhausted");
  }
  if (caches.size() != blocks_->size()) caches.assign(blocks_->size(), KvCache{});
  return run_blocks(x + pos_embed_.slice(0, offset, offset + x.size(1)), &caches);
}

DynamicsLoss WorldModelImpl::loss(const SegmentBatch& batch) {
  const auto B = batch.size(), H = batch.horizon();
  const std::int64_t S = layout_.sequences, As = layout_.agents_per_sequence, K = layout_.tokens_per_obs;
  const std::int64_t O = layout_.obs_slots(), block = layout_.block(), D = config_.embed_dim;
  const auto BS = B * S;

  auto hidden = forward(embed(batch.tokens, batch.actions));  // [BS, H*block, D]
  auto dtype = hidden.scalar_type();
  auto valid = batch.valid.to(dtype).unsqueeze(1).expand({B, S, H}).reshape({BS, H});

  DynamicsLoss out;
  if (H > 1) {
    // Token at slot j of block t is predicted from the position just before it.
    auto opts = torch::TensorOptions().dtype(torch::kInt64).device(hidden.device());
    auto src = (torch::arange(1, H, opts).unsqueeze(1) * block + torch::arange(O, opts).unsqueeze(0) - 1).reshape(-1);
    auto logits = token_logits(hidden.index_select(1, src)).reshape({-1, shape_.vocab_size});
    auto targets = batch.tokens.reshape({B, H, S, O})
                       .permute({0, 2, 1, 3})
                       .slice(2, 1, H)
                       .reshape({-1});
    auto mask = valid.slice(1, 1, H).unsqueeze(-1).expand({BS, H - 1, O}).reshape({-1});
    auto ce = F::cross_entropy(logits, targets, F::CrossEntropyFuncOptions().reduction(torch::kNone));
    out.tokens = masked_mean(ce, mask);
    torch::NoGradGuard guard;
    auto correct = (logits.argmax(-1) == targets).to(dtype);
    out.token_accuracy = masked_mean(correct, mask).item<double>();
  } else {
    out.tokens = torch::zeros({}, hidden.options());
  }

  auto blocks = hidden.view({BS, H, block, D});
  auto last = blocks.select(2, layout_.last_slot());
  auto reward_target = batch.rewards.to(dtype).unsqueeze(1).expand({B, S, H}).reshape({BS, H});
  auto cont_target = (batch.continuation > 0).to(dtype).unsqueeze(1).expand({B, S, H}).reshape({BS, H});
  out.reward = masked_mean(F::smooth_l1_loss(reward_pred(last), reward_target,
                                             F::SmoothL1LossFuncOptions().reduction(torch::kNone)),
                           valid);
  out.discount = masked_mean(
      F::binary_cross_entropy_with_logits(discount_logit(last), cont_target,
                                          F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone)),
      valid);

  auto last_obs = torch::arange(As, torch::TensorOptions().dtype(torch::kInt64).device(hidden.device())) * K + (K - 1);
  auto avail_logit = avail_logits(blocks.index_select(2, last_obs));  // [BS, H, As, A]
  auto avail_target = batch.avail.to(dtype)
                          .reshape({B, H, S, As, shape_.n_actions})
                          .permute({0, 2, 1, 3, 4})
                          .reshape({BS, H, As, shape_.n_actions});
  auto avail_mask = valid.view({BS, H, 1, 1}).expand_as(avail_target);
  out.avail = masked_mean(
      F::binary_cross_entropy_with_logits(avail_logit, avail_target,
                                          F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone)),
      avail_mask);

  out.total = out.tokens + out.reward + out.discount + out.avail;
  return out;
}

void WorldModelImpl::set_capture(bool on) {
  for (auto& block : *blocks_) block->as<CausalBlock>()->attention()->set_capture(on);
  if (perceiver_) perceiver_->set_capture(on);
}

std::vector<torch::Tensor> WorldModelImpl::attention_maps() const {
  std::vector<torch::Tensor> maps;
  for (const auto& block : *blocks_) maps.push_back(block->as<CausalBlock>()->attention()->last_attention());
  return maps;
}

torch::Tensor WorldModelImpl::perceiver_attention() const {
  return perceiver_ ? perceiver_->cross_attention() : torch::Tensor();
}

// ---------------------------------------------------------------------------

WorldModelRollout::WorldModelRollout(WorldModel model, SamplingOptions options, at::Generator generator)
    : model_(std::move(model)), options_(options), generator_(std::move(generator)) {}

torch::Tensor WorldModelRollout::to_sequences(const torch::Tensor& per_agent) const {
  const auto& layout = model_->layout();
  std::vector<std::int64_t> dims{batch_ * layout.sequences, layout.agents_per_sequence};
  for (std::int64_t d = 2; d < per_agent.dim(); ++d) dims.push_back(per_agent.size(d));
  return per_agent.reshape(dims);
}

torch::Tensor WorldModelRollout::to_agents(const torch::Tensor& per_sequence) const {
  std::vector<std::int64_t> dims{batch_, model_->shape().n_agents};
  for (std::int64_t d = 2; d < per_sequence.dim(); ++d) dims.push_back(per_sequence.size(d));
  return per_sequence.reshape(dims);
}

torch::Tensor WorldModelRollout::sample(const torch::Tensor& logits) {
  if (options_.greedy) return logits.argmax(-1);
  auto probs = torch::softmax(logits / options_.temperature, -1);
  return torch::multinomial(probs, 1, false, generator_).squeeze(-1);
}

void WorldModelRollout::start(const torch::Tensor& tokens) {
  torch::NoGradGuard guard;
  const auto& shape = model_->shape();
  if (tokens.dim() != 3 || tokens.size(1) != shape.n_agents || tokens.size(2) != shape.tokens_per_obs) {
    throw std::invalid_argument("rollout start expects tokens [B, n, K]");
  }
  batch_ = tokens.size(0);
  caches_.clear();
  offset_ = 0;
  step_ = 0;
  acted_ = false;
  tokens_ = tokens;
  auto seq = to_sequences(tokens).reshape({batch_ * model_->layout().sequences, -1});
  auto h = model_->forward_cached(model_->embed_tokens(seq), offset_, caches_);
  offset_ += seq.size(1);
  last_hidden_ = h.select(1, h.size(1) - 1);
}

StepPrediction WorldModelRollout::act(const torch::Tensor& actions) {
  torch::NoGradGuard guard;
  if (!tokens_.defined()) throw std::logic_error("rollout not started");
  if (acted_) throw std::logic_error("act() called twice for the same step");
  const auto& layout = model_->layout();
  std::vector<torch::Tensor> parts{model_->embed_actions(to_sequences(actions))};
  if (layout.has_feature) parts.push_back(to_sequences(model_->features_step(tokens_, actions)));
  auto x = torch::cat(parts, 1);
  auto h = model_->forward_cached(x, offset_, caches_);
  offset_ += x.size(1);
  last_hidden_ = h.select(1, h.size(1) - 1);
  acted_ = true;

  auto per_agent = [&](const torch::Tensor& per_seq) {
    return per_seq.view({batch_, layout.sequences, 1})
        .expand({batch_, layout.sequences, layout.agents_per_sequence})
        .reshape({batch_, model_->shape().n_agents});
  };
  StepPrediction out;
  out.reward = per_agent(model_->reward_pred(last_hidden_));
  out.discount_prob = per_agent(torch::sigmoid(model_->discount_logit(last_hidden_)));
  return out;
}

ObservationPrediction WorldModelRollout::next_observation() {
  torch::NoGradGuard guard;
  if (!acted_) throw std::logic_error("next_observation() requires act() for the current step");
  if (step_ + 1 >= model_->config().horizon) {
    throw ContextOverflowError("world model context of " + std::to_string(model_->config().horizon) +
                               " steps exhausted");
  }
  const auto& layout = model_->layout();
  const int K = layout.tokens_per_obs;
  std::vector<torch::Tensor> generated;
  std::vector<torch::Tensor> avail;
  for (int j = 0; j < layout.obs_slots(); ++j) {
    auto token = sample(model_->token_logits(last_hidden_));
    generated.push_back(token);
    auto h = model_->forward_cached(model_->embed_tokens(token).unsqueeze(1), offset_, caches_);
    offset_ += 1;
    last_hidden_ = h.select(1, 0);
    if (j % K == K - 1) avail.push_back(torch::sigmoid(model_->avail_logits(last_hidden_)));
  }
  ObservationPrediction out;
  out.tokens = to_agents(torch::stack(generated, 1).view({-1, layout.agents_per_sequence, K}));
  out.avail_prob = to_agents(torch::stack(avail, 1));
  tokens_ = out.tokens;
  ++step_;
  acted_ = false;
  return out;
}

}  // namespace mawm
