#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <string>

#include "mawm/nn.hpp"

namespace mawm {

enum class TokenizerKind { kVq, kBins };

std::string to_string(TokenizerKind kind);
TokenizerKind parse_tokenizer_kind(const std::string& name);

struct TokenizerConfig {
  TokenizerKind kind = TokenizerKind::kVq;
  // VQ-VAE
  int hidden = 512;
  int layers = 3;
  int codebook_size = 512;
  int tokens = 16;
  int code_dim = 128;
  double beta = 10.0;
  double ema_decay = 0.99;
  double ema_eps = 1e-5;
  double lr = 3e-4;
  double grad_clip = 10.0;
  double weight_decay = 0.0;
  // fixed-width bins baseline
  int bins = 512;
  int fit_observations = 1000;
};

/// Learned code vectors with exponential-moving-average statistics. The codes
/// are buffers: they change only through ema_update(), never via gradients.
class CodebookImpl : public torch::nn::Module {
 public:
  CodebookImpl(std::int64_t size, std::int64_t dim, double decay, double eps);

  std::int64_t size() const { return codes_.size(0); }
  std::int64_t dim() const { return codes_.size(1); }
  const torch::Tensor& codes() const { return codes_; }
  const torch::Tensor& ema_counts() const { return ema_counts_; }
  const torch::Tensor& ema_sums() const { return ema_sums_; }

  /// Replaces the codes and resets the EMA state consistently with them.
  void set_codes(const torch::Tensor& codes);
  /// Codes drawn from rows of `latents` [M, dim] (with replacement when M is
  /// smaller than the codebook).
  void init_from(const torch::Tensor& latents);
  bool initialized() const { return initialized_.item<bool>(); }

  /// Index of the nearest code (squared Euclidean distance) for each row of
  /// `latents` [M, dim]. Ties resolve to the lowest index.
  torch::Tensor nearest(const torch::Tensor& latents) const;

  torch::Tensor lookup(const torch::Tensor& indices) const;

  /// counts <- decay*counts + (1-decay)*n_j; sums <- decay*sums + (1-decay)*sum_j;
  /// codes <- sums / laplace_smoothed(counts).
  void ema_update(const torch::Tensor& latents, const torch::Tensor& indices);

  double decay() const { return decay_; }
  void set_decay(double decay) { decay_ = decay; }

 private:
  void recompute_codes();

  double decay_;
  double eps_;
  torch::Tensor codes_;
  torch::Tensor ema_counts_;
  torch::Tensor ema_sums_;
  torch::Tensor initialized_;
};
TORCH_MODULE(Codebook);

struct VqLoss {
  torch::Tensor total;
  torch::Tensor reconstruction;  // mean squared error of the decoded observation
  torch::Tensor codebook;        // ||sg[E(o)] - z_q||^2 (mean)
  torch::Tensor commitment;      // beta * ||sg[z_q] - E(o)||^2 (mean), beta applied
  torch::Tensor latents;         // E(o), [B, K, n_z]
  torch::Tensor tokens;          // [B, K]
  torch::Tensor reconstruction_obs;
};

struct TokenizedObservation {
  torch::Tensor tokens;          // [..., K] int64 in [0, N)
  torch::Tensor reconstruction;  // [..., obs_dim]
};

/// Observation VQ-VAE: MLP encoder to K latents of size n_z, nearest-code
/// quantization, MLP decoder from the K quantized latents.
class VqVaeImpl : public torch::nn::Module {
 public:
  VqVaeImpl(std::int64_t obs_dim, const TokenizerConfig& config);

  std::int64_t obs_dim() const { return obs_dim_; }
  std::int64_t tokens_per_obs() const { return config_.tokens; }
  std::int64_t codebook_size() const { return config_.codebook_size; }
  std::int64_t code_dim() const { return config_.code_dim; }
  double beta() const { return config_.beta; }
  void set_beta(double beta) { config_.beta = beta; }

  /// [..., obs_dim] -> [..., K, n_z]; the single encoder head is split into K
  /// consecutive chunks of n_z.
  torch::Tensor encode_latents(const torch::Tensor& obs);
  torch::Tensor quantize(const torch::Tensor& latents) const;
  torch::Tensor decode_codes(const torch::Tensor& codes);
  torch::Tensor decode_tokens(const torch::Tensor& tokens);

  TokenizedObservation encode(const torch::Tensor& obs);

  /// Loss with the straight-through estimator: the decoder consumes
  /// E(o) + sg[z_q - E(o)].
  VqLoss loss(const torch::Tensor& obs);

  torch::nn::Sequential& encoder() { return encoder_; }
  torch::nn::Sequential& decoder() { return decoder_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

 private:
  std::int64_t obs_dim_;
  TokenizerConfig config_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Sequential decoder_{nullptr};
  Codebook codebook_{nullptr};
};
TORCH_MODULE(VqVae);

/// Fraction of codebook entries that appear in `tokens`.
double codebook_utilization(const torch::Tensor& tokens, std::int64_t codebook_size);

/// Independent per-dimension fixed-width binning of observations with ranges
/// fitted once and then frozen. One token per observation dimension.
class BinsCodec {
 public:
  explicit BinsCodec(int bins) : bins_(bins) {}

  int bins() const { return bins_; }
  bool fitted() const { return low_.defined(); }
  void fit(const torch::Tensor& obs);  // [M, obs_dim]
  void set_ranges(torch::Tensor low, torch::Tensor high);
  const torch::Tensor& low() const { return low_; }
  const torch::Tensor& high() const { return high_; }

  torch::Tensor tokenize(const torch::Tensor& obs) const;      // [..., d] -> [..., d] int64
  torch::Tensor detokenize(const torch::Tensor& tokens) const;  // bin centers
  torch::Tensor bin_width() const { return (high_ - low_) / bins_; }

 private:
  int bins_;
  torch::Tensor low_;
  torch::Tensor high_;
};

struct TokenizerStats {
  double total = 0.0;
  double reconstruction = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
  double utilization = 0.0;
};

/// Tokenizer seen by the world model: observation -> L tokens from a
/// vocabulary of V symbols and back.
class ObservationTokenizer {
 public:
  virtual ~ObservationTokenizer() = default;

  virtual TokenizerKind kind() const = 0;
  virtual std::int64_t obs_dim() const = 0;
  virtual std::int64_t tokens_per_obs() const = 0;
  virtual std::int64_t vocab_size() const = 0;

  /// [..., obs_dim] -> [..., L] int64. No gradients.
  virtual torch::Tensor encode(const torch::Tensor& obs) = 0;
  /// [..., L] -> [..., obs_dim]. No gradients.
  virtual torch::Tensor decode(const torch::Tensor& tokens) = 0;
  torch::Tensor reconstruct(const torch::Tensor& obs) { return decode(encode(obs)); }

  /// Called once with the earliest buffered observations before training.
  virtual void fit(const torch::Tensor& obs) = 0;
  virtual bool fitted() const = 0;
  /// Whether encode/decode are usable (possibly before fit()).
  virtual bool ready() const { return true; }
  virtual TokenizerStats train_step(const torch::Tensor& obs) = 0;

  virtual void save(torch::serialize::OutputArchive& archive) const = 0;
  virtual void load(torch::serialize::InputArchive& archive) = 0;
};

class VqTokenizer final : public ObservationTokenizer {
 public:
  VqTokenizer(std::int64_t obs_dim, const TokenizerConfig& config);

  TokenizerKind kind() const override { return TokenizerKind::kVq; }
  std::int64_t obs_dim() const override { return model_->obs_dim(); }
  std::int64_t tokens_per_obs() const override { return model_->tokens_per_obs(); }
  std::int64_t vocab_size() const override { return model_->codebook_size(); }

  torch::Tensor encode(const torch::Tensor& obs) override;
  torch::Tensor decode(const torch::Tensor& tokens) override;
  /// Seeds the codebook with encoder latents of `obs`.
  void fit(const torch::Tensor& obs) override;
  bool fitted() const override { return model_->codebook()->initialized(); }
  TokenizerStats train_step(const torch::Tensor& obs) override;

  void save(torch::serialize::OutputArchive& archive) const override;
  void load(torch::serialize::InputArchive& archive) override;

  VqVae& model() { return model_; }

 private:
  TokenizerConfig config_;
  VqVae model_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
};

class BinsTokenizer final : public ObservationTokenizer {
 public:
  BinsTokenizer(std::int64_t obs_dim, const TokenizerConfig& config);

  TokenizerKind kind() const override { return TokenizerKind::kBins; }
  std::int64_t obs_dim() const override { return obs_dim_; }
  std::int64_t tokens_per_obs() const override { return obs_dim_; }
  std::int64_t vocab_size() const override { return codec_.bins(); }

  torch::Tensor encode(const torch::Tensor& obs) override;
  torch::Tensor decode(const torch::Tensor& tokens) override;
  void fit(const torch::Tensor& obs) override;
  bool fitted() const override { return codec_.fitted(); }
  bool ready() const override { return codec_.fitted(); }
  TokenizerStats train_step(const torch::Tensor& obs) override;

  void save(torch::serialize::OutputArchive& archive) const override;
  void load(torch::serialize::InputArchive& archive) override;

  const BinsCodec& codec() const { return codec_; }

 private:
  std::int64_t obs_dim_;
  BinsCodec codec_;
};

std::unique_ptr<ObservationTokenizer> make_tokenizer(std::int64_t obs_dim, const TokenizerConfig& config);

}  // namespace mawm
