#include "mawm/tokenizer.hpp"

#include <stdexcept>

#include "mawm/serialization.hpp"

namespace mawm {

std::string to_string(TokenizerKind kind) { return kind == TokenizerKind::kVq ? "vq" : "bins"; }

TokenizerKind parse_tokenizer_kind(const std::string& name) {
  if (name == "vq") return TokenizerKind::kVq;
  if (name == "bins") return TokenizerKind::kBins;
  throw std::invalid_argument("unknown tokenizer kind: " + name);
}

namespace {

void check_finite(const torch::Tensor& x, const char* what) {
  if (!torch::isfinite(x).all().item<bool>()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace

// ---------------------------------------------------------------------------

CodebookImpl::CodebookImpl(std::int64_t size, std::int64_t dim, double decay, double eps)
    : decay_(decay), eps_(eps) {
  if (size < 1 || dim < 1) throw std::invalid_argument("codebook size and dim must be positive");
  codes_ = register_buffer("codes", torch::randn({size, dim}));
  ema_counts_ = register_buffer("ema_counts", torch::ones({size}));
  ema_sums_ = register_buffer("ema_sums", codes_.clone());
  initialized_ = register_buffer("initialized", torch::zeros({}, torch::kBool));
  recompute_codes();
}

void CodebookImpl::set_codes(const torch::Tensor& codes) {
  torch::NoGradGuard guard;
  if (codes.sizes() != codes_.sizes()) throw std::invalid_argument("set_codes: shape mismatch");
  ema_counts_.fill_(1.0);
  ema_sums_.copy_(codes);
  recompute_codes();
}

void CodebookImpl::init_from(const torch::Tensor& latents) {
  torch::NoGradGuard guard;
  auto rows = latents.reshape({-1, dim()}).to(codes_.dtype());
  TORCH_CHECK(rows.size(0) > 0, "init_from needs at least one latent");
  auto idx = rows.size(0) >= size() ? torch::randperm(rows.size(0)).slice(0, 0, size())
                                    : torch::randint(rows.size(0), {size()}, torch::kInt64);
  set_codes(rows.index_select(0, idx));
  initialized_.fill_(true);
}

void CodebookImpl::recompute_codes() {
  torch::NoGradGuard guard;
  const auto n = static_cast<double>(size());
  auto total = ema_counts_.sum();
  auto smoothed = (ema_counts_ + eps_) / (total + n * eps_) * total;
  codes_.copy_(ema_sums_ / smoothed.unsqueeze(1));
}

torch::Tensor CodebookImpl::nearest(const torch::Tensor& latents) const {
  torch::NoGradGuard guard;
  TORCH_CHECK(latents.dim() == 2 && latents.size(1) == dim(), "nearest: expected [M, dim] latents");
  constexpr std::int64_t kChunk = 512;
  std::vector<torch::Tensor> parts;
  const auto codes = codes_.to(latents.dtype());
  for (std::int64_t start = 0; start < latents.size(0); start += kChunk) {
    auto rows = latents.slice(0, start, std::min(start + kChunk, latents.size(0)));
    auto dist = (rows.unsqueeze(1) - codes.unsqueeze(0)).pow(2).sum(-1);
    parts.push_back(dist.argmin(1));
  }
  if (parts.empty()) return torch::empty({0}, torch::kInt64);
  return torch::cat(parts);
}

torch::Tensor CodebookImpl::lookup(const torch::Tensor& indices) const {
  return torch::embedding(codes_, indices);
}

void CodebookImpl::ema_update(const torch::Tensor& latents, const torch::Tensor& indices) {
  torch::NoGradGuard guard;
  auto flat = latents.reshape({-1, dim()}).to(codes_.dtype());
  auto onehot = torch::one_hot(indices.reshape({-1}), size()).to(codes_.dtype());
  auto counts = onehot.sum(0);
  auto sums = onehot.t().matmul(flat);
  ema_counts_.mul_(decay_).add_(counts, 1.0 - decay_);
  ema_sums_.mul_(decay_).add_(sums, 1.0 - decay_);
  recompute_codes();
}

// ---------------------------------------------------------------------------

VqVaeImpl::VqVaeImpl(std::int64_t obs_dim, const TokenizerConfig& config) : obs_dim_(obs_dim), config_(config) {
  const auto latent = static_cast<std::int64_t>(config.tokens) * config.code_dim;
  encoder_ = register_module("encoder", nn::make_mlp(obs_dim, config.hidden, latent, config.layers, nn::Activation::kGELU));
  decoder_ = register_module("decoder", nn::make_mlp(latent, config.hidden, obs_dim, config.layers, nn::Activation::kGELU));
  codebook_ = register_module("codebook", Codebook(config.codebook_size, config.code_dim, config.ema_decay, config.ema_eps));
}

torch::Tensor VqVaeImpl::encode_latents(const torch::Tensor& obs) {
  auto lead = obs.sizes().vec();
  lead.pop_back();
  auto z = encoder_->forward(obs.reshape({-1, obs_dim_}));
  lead.push_back(config_.tokens);
  lead.push_back(config_.code_dim);
  return z.reshape(lead);
}

torch::Tensor VqVaeImpl::quantize(const torch::Tensor& latents) const {
  auto lead = latents.sizes().vec();
  lead.pop_back();
  return codebook_->nearest(latents.reshape({-1, config_.code_dim})).reshape(lead);
}

torch::Tensor VqVaeImpl::decode_codes(const torch::Tensor& codes) {
  auto lead = codes.sizes().vec();
  lead.pop_back();
  lead.pop_back();
  auto flat = codes.reshape({-1, static_cast<std::int64_t>(config_.tokens) * config_.code_dim});
  lead.push_back(obs_dim_);
  return decoder_->forward(flat).reshape(lead);
}

torch::Tensor VqVaeImpl::decode_tokens(const torch::Tensor& tokens) {
  return decode_codes(codebook_->lookup(tokens).to(decoder_->parameters().front().dtype()));
}

TokenizedObservation VqVaeImpl::encode(const torch::Tensor& obs) {
  check_finite(obs, "encode");
  torch::NoGradGuard guard;
  TokenizedObservation out;
  out.tokens = quantize(encode_latents(obs));
  out.reconstruction = decode_tokens(out.tokens);
  return out;
}

VqLoss VqVaeImpl::loss(const torch::Tensor& obs) {
  check_finite(obs, "vq loss");
  VqLoss out;
  out.latents = encode_latents(obs);
  out.tokens = quantize(out.latents.detach());
  auto quantized = codebook_->lookup(out.tokens).to(out.latents.dtype());
  auto straight_through = out.latents + (quantized - out.latents).detach();
  out.reconstruction_obs = decode_codes(straight_through);
  out.reconstruction = torch::mse_loss(out.reconstruction_obs, obs);
  out.codebook = torch::mse_loss(quantized, out.latents.detach());
  out.commitment = config_.beta * torch::mse_loss(out.latents, quantized.detach());
  out.total = out.reconstruction + out.codebook + out.commitment;
  return out;
}

double codebook_utilization(const torch::Tensor& tokens, std::int64_t codebook_size) {
  if (tokens.numel() == 0) return 0.0;
  auto counts = torch::bincount(tokens.reshape({-1}), {}, codebook_size);
  return counts.gt(0).sum().item<double>() / static_cast<double>(codebook_size);
}

// ---------------------------------------------------------------------------

void BinsCodec::fit(const torch::Tensor& obs) {
  TORCH_CHECK(obs.dim() == 2 && obs.size(0) > 0, "BinsCodec::fit expects a non-empty [M, d] batch");
  check_finite(obs, "bins fit");
  auto low = std::get<0>(obs.min(0)).to(torch::kFloat32);
  auto high = std::get<0>(obs.max(0)).to(torch::kFloat32);
  set_ranges(low, high);
}

void BinsCodec::set_ranges(torch::Tensor low, torch::Tensor high) {
  // Degenerate dimensions get a tiny range so every bin index stays defined.
  high = torch::maximum(high, low + 1e-6);
  low_ = std::move(low);
  high_ = std::move(high);
}

torch::Tensor BinsCodec::tokenize(const torch::Tensor& obs) const {
  if (!fitted()) throw std::logic_error("bins tokenizer used before fit()");
  check_finite(obs, "bins tokenize");
  auto x = obs.to(low_.dtype());
  auto scaled = torch::floor((x - low_) / bin_width());
  return scaled.clamp(0, bins_ - 1).to(torch::kInt64);
}

torch::Tensor BinsCodec::detokenize(const torch::Tensor& tokens) const {
  if (!fitted()) throw std::logic_error("bins tokenizer used before fit()");
  return low_ + (tokens.to(low_.dtype()) + 0.5) * bin_width();
}

// ---------------------------------------------------------------------------

VqTokenizer::VqTokenizer(std::int64_t obs_dim, const TokenizerConfig& config)
    : config_(config), model_(obs_dim, config) {
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(), torch::optim::AdamWOptions(config.lr).weight_decay(config.weight_decay));
}

torch::Tensor VqTokenizer::encode(const torch::Tensor& obs) {
  check_finite(obs, "encode");
  torch::NoGradGuard guard;
  return model_->quantize(model_->encode_latents(obs));
}

torch::Tensor VqTokenizer::decode(const torch::Tensor& tokens) {
  torch::NoGradGuard guard;
  return model_->decode_tokens(tokens);
}

void VqTokenizer::fit(const torch::Tensor& obs) {
  check_finite(obs, "vq fit");
  torch::NoGradGuard guard;
  model_->codebook()->init_from(model_->encode_latents(obs.reshape({-1, model_->obs_dim()})));
}

TokenizerStats VqTokenizer::train_step(const torch::Tensor& obs) {
  model_->train();
  auto loss = model_->loss(obs);
  optimizer_->zero_grad();
  loss.total.backward();
  torch::nn::utils::clip_grad_norm_(model_->parameters(), config_.grad_clip);
  optimizer_->step();
  model_->codebook()->ema_update(loss.latents.detach(), loss.tokens);
  model_->eval();

  TokenizerStats stats;
  stats.total = loss.total.item<double>();
  stats.reconstruction = loss.reconstruction.item<double>();
  stats.codebook = loss.codebook.item<double>();
  stats.commitment = loss.commitment.item<double>();
  stats.utilization = codebook_utilization(loss.tokens, model_->codebook_size());
  return stats;
}

void VqTokenizer::save(torch::serialize::OutputArchive& archive) const {
  write_header(archive, "tokenizer.vq");
  torch::serialize::OutputArchive model_archive;
  model_->save(model_archive);
  archive.write("model", model_archive);
  torch::serialize::OutputArchive optim_archive;
  optimizer_->save(optim_archive);
  archive.write("optimizer", optim_archive);
}

void VqTokenizer::load(torch::serialize::InputArchive& archive) {
  check_header(archive, "tokenizer.vq");
  torch::serialize::InputArchive model_archive;
  archive.read("model", model_archive);
  model_->load(model_archive);
  torch::serialize::InputArchive optim_archive;
  archive.read("optimizer", optim_archive);
  optimizer_->load(optim_archive);
}

BinsTokenizer::BinsTokenizer(std::int64_t obs_dim, const TokenizerConfig& config)
    : obs_dim_(obs_dim), codec_(config.bins) {}

torch::Tensor BinsTokenizer::encode(const torch::Tensor& obs) { return codec_.tokenize(obs); }

torch::Tensor BinsTokenizer::decode(const torch::Tensor& tokens) { return codec_.detokenize(tokens); }

void BinsTokenizer::fit(const torch::Tensor& obs) {
  if (!codec_.fitted()) codec_.fit(obs.reshape({-1, obs_dim_}));
}

TokenizerStats BinsTokenizer::train_step(const torch::Tensor& obs) {
  fit(obs);
  TokenizerStats stats;
  auto recon = codec_.detokenize(codec_.tokenize(obs));
  stats.reconstruction = torch::mse_loss(recon, obs.to(recon.dtype())).item<double>();
  stats.total = stats.reconstruction;
  stats.utilization = 1.0;
  return stats;
}

void BinsTokenizer::save(torch::serialize::OutputArchive& archive) const {
  write_header(archive, "tokenizer.bins");
  write_scalar(archive, "bins", codec_.bins());
  write_scalar(archive, "fitted", codec_.fitted() ? 1.0 : 0.0);
  if (codec_.fitted()) {
    archive.write("low", codec_.low());
    archive.write("high", codec_.high());
  }
}

void BinsTokenizer::load(torch::serialize::InputArchive& archive) {
  check_header(archive, "tokenizer.bins");
  codec_ = BinsCodec(static_cast<int>(read_scalar(archive, "bins")));
  if (read_scalar(archive, "fitted") != 0.0) {
    torch::Tensor low;
    torch::Tensor high;
    archive.read("low", low);
    archive.read("high", high);
    codec_.set_ranges(low, high);
  }
}

std::unique_ptr<ObservationTokenizer> make_tokenizer(std::int64_t obs_dim, const TokenizerConfig& config) {
  if (config.kind == TokenizerKind::kVq) return std::make_unique<VqTokenizer>(obs_dim, config);
  return std::make_unique<BinsTokenizer>(obs_dim, config);
}

}  // namespace mawm
