#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mawm/aggregator.hpp"
#include "mawm/behavior.hpp"
#include "mawm/dynamics.hpp"
#include "mawm/env.hpp"
#include "mawm/tokenizer.hpp"
#include "mawm/trainer.hpp"

namespace mawm {

// ---------------------------------------------------------------------------
// Artifact writers

/// NumPy .npy (format 1.0, C order) for float32, float64, int64 and bool.
void write_npy(const std::filesystem::path& path, const torch::Tensor& tensor);
torch::Tensor read_npy(const std::filesystem::path& path);

/// Heatmap of a 2-D tensor with per-map min/max normalization and a fixed
/// viridis-like colormap.
void write_heatmap_svg(const std::filesystem::path& path, const torch::Tensor& map, const std::string& title);

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> spread;  // optional +/- band
};
void write_line_plot_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                         const std::string& y_label, const std::vector<PlotSeries>& series);

// ---------------------------------------------------------------------------
// Compounding error

/// Open-loop predictor of future observations from a start state and recorded
/// actions.
class TrajectoryPredictor {
 public:
  virtual ~TrajectoryPredictor() = default;
  /// Largest number of steps predict() supports.
  virtual int max_steps() const = 0;
  /// obs0 [B, n, d], actions [B, h, n] (actions taken at steps 0..h-1) ->
  /// predicted observations of steps 1..h, [B, h, n, d].
  virtual torch::Tensor predict(const torch::Tensor& obs0, const torch::Tensor& actions) = 0;
};

/// Greedy decoding through the world model and the tokenizer decoder.
class WorldModelPredictor final : public TrajectoryPredictor {
 public:
  WorldModelPredictor(WorldModel model, ObservationTokenizer& tokenizer);
  int max_steps() const override { return model_->config().horizon - 1; }
  torch::Tensor predict(const torch::Tensor& obs0, const torch::Tensor& actions) override;

 private:
  WorldModel model_;
  ObservationTokenizer& tokenizer_;
};

struct CompoundingError {
  torch::Tensor mean;  // [h, n, d] mean |o_hat - o| over segments
  torch::Tensor std;   // [h, n, d]
  std::int64_t segments = 0;

  /// Mean over agents and dimensions for each prediction step.
  std::vector<double> per_step() const;
};

/// L1 error per observation dimension and agent against the recorded
/// observations, for `segments` windows drawn uniformly from all full-length
/// windows of the episodes. Throws if `horizon` exceeds the predictor.
CompoundingError compounding_error(TrajectoryPredictor& predictor,
                                   const std::vector<std::vector<StepRecord>>& episodes, int horizon,
                                   int segments, std::mt19937_64& rng, int batch_size = 100);

/// Plays `episodes` full episodes with the actor acting on reconstructed
/// observations.
std::vector<std::vector<StepRecord>> record_episodes(Environment& env, Actor& actor, ObservationTokenizer& tokenizer,
                                                     int stack, int episodes, ActMode mode,
                                                     at::Generator& generator);

void write_compounding_error(const std::filesystem::path& dir, const CompoundingError& error);

// ---------------------------------------------------------------------------
// Ablations

enum class AblationAxis { kCentralized, kAggregation, kTokenizer, kAggregator };

std::string to_string(AblationAxis axis);
/// centralized_vs_decentralized, aggregation_on_off, vq_vs_bins,
/// perceiver_vs_selfattn.
AblationAxis parse_ablation_axis(const std::string& name);

struct AblationVariant {
  std::string name;
  RunConfig config;
};

/// The two matched configurations for an axis. The first is the reference
/// (decentralized, aggregation on, VQ, Perceiver).
std::vector<AblationVariant> ablation_variants(AblationAxis axis, const RunConfig& base);

/// Throws std::invalid_argument unless the variants share the schedule and
/// every setting outside the ablated axis.
void check_matched_budgets(const std::vector<AblationVariant>& variants);

enum class AblationMode { kWorldModel, kFull };

struct AblationOptions {
  AblationMode mode = AblationMode::kWorldModel;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  /// World-model study: real steps collected by the initial policy, dynamics
  /// updates, and how often the held-out loss is measured.
  int collect_steps = 2000;
  int updates = 300;
  int eval_every = 25;
  int eval_batches = 4;
  /// Wall-clock to reach this held-out dynamics loss is reported (0 skips).
  double loss_threshold = 0.0;
  int error_horizon = 5;
  int error_segments = 200;
  int error_episodes = 20;
};

struct CurvePoint {
  int update = 0;
  double seconds = 0.0;
  double loss = 0.0;
};

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  std::int64_t tokens_per_obs = 0;
  std::int64_t sequence_length = 0;
  std::vector<CurvePoint> curve;
  double final_loss = 0.0;
  double tokenizer_seconds = 0.0;
  double seconds_per_update = 0.0;
  /// Seconds (tokenizer plus dynamics) until the held-out loss first reached
  /// the threshold; negative if never.
  double seconds_to_threshold = -1.0;
  std::vector<double> error_per_step;
  double success_rate = 0.0;
  std::int64_t env_steps = 0;
  double wall_seconds = 0.0;
};

struct VariantSummary {
  std::string variant;
  std::int64_t tokens_per_obs = 0;
  std::int64_t sequence_length = 0;
  double final_loss_mean = 0.0, final_loss_std = 0.0;
  double seconds_per_update_mean = 0.0, seconds_per_update_std = 0.0;
  double error_mean = 0.0, error_std = 0.0;  // last prediction step
  double seconds_to_threshold_mean = 0.0;    // over seeds that reached it
  int reached_threshold = 0;
  double success_mean = 0.0, success_std = 0.0;
};

struct AblationReport {
  AblationAxis axis = AblationAxis::kAggregation;
  AblationMode mode = AblationMode::kWorldModel;
  double loss_threshold = 0.0;
  std::vector<AblationRun> runs;
  std::vector<VariantSummary> summary;
};

using AblationProgress = std::function<void(const AblationRun& run)>;

/// Trains every variant for every seed and summarizes mean and standard
/// deviation across seeds.
AblationReport run_ablation(AblationAxis axis, const RunConfig& base, const AblationOptions& options,
                            const AblationProgress& progress = {});

std::vector<VariantSummary> summarize(const std::vector<AblationRun>& runs);

/// curves.csv, summary.csv, summary.md and curves.svg.
void write_ablation_report(const std::filesystem::path& dir, const AblationReport& report);

// ---------------------------------------------------------------------------
// Attention

struct AttentionDump {
  std::vector<torch::Tensor> causal;  // per layer [heads, L, L] of one sequence
  torch::Tensor perceiver;            // [steps, heads, n, n(K+1)], undefined without a Perceiver
};

/// Teacher-forced pass over one segment with attention capture enabled.
/// Writes causal_layer<l>.npy, perceiver.npy and one heatmap per layer and
/// head into `dir` when it is non-empty.
AttentionDump dump_attention(WorldModel& model, const SegmentBatch& segment, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// FLOPs

struct FlopRow {
  std::int64_t n_agents = 0;
  double perceiver = 0.0;
  double self_attention = 0.0;
};

std::vector<FlopRow> flops_report(const std::vector<std::int64_t>& n_agents, const FlopConfig& config = {});
/// Coefficient of determination of a least-squares line through (x, y).
double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y);
/// flops.csv and flops.md, values in GFLOPs.
void write_flops_report(const std::filesystem::path& dir, const std::vector<FlopRow>& rows);

}  // namespace mawm
