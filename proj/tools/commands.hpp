#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

// Command implementations for the mawm tool. This header is free of tensor
// library includes so the front end can use its own logging stack.
namespace mawm::cli {

enum class Level { kInfo, kWarn };
using Logger = std::function<void(Level, const std::string&)>;

struct EnvRolloutOptions {
  std::string env = "coop-switch";
  int agents = 2;
  int episodes = 10;
  int episode_limit = 50;
  int grid_size = 5;
  int state_dim = 4;
  int action_bins = 5;
  std::uint64_t seed = 0;
  std::string out = "logs";
};
int env_rollout(const EnvRolloutOptions& options, const Logger& log);

struct TokenizerTrainOptions {
  std::string data = "logs";
  std::string kind = "vq";
  int codebook = 512;
  int tokens = 16;
  int code_dim = 128;
  int hidden = 512;
  int epochs = 200;
  int batch = 256;
  std::uint64_t seed = 0;
  std::string out = "tokenizer.pt";
};
int tokenizer_train(const TokenizerTrainOptions& options, const Logger& log);

struct TrainOptions {
  std::string config;
  std::vector<std::string> overrides;  // key=value
  std::string out = "run";
  bool resume = false;
  bool print_config = false;
};
int train(const TrainOptions& options, const Logger& log);

struct ImagineOptions {
  std::string ckpt = "run";
  int horizon = 15;
  int rollouts = 64;
  std::uint64_t seed = 0;
  std::string dump = "rollouts";
};
int imagine(const ImagineOptions& options, const Logger& log);

struct EvalOptions {
  std::string ckpt = "run";
  int episodes = 10;
  bool greedy = true;
};
int eval(const EvalOptions& options, const Logger& log);

struct ErrorOptions {
  std::string ckpt = "run";
  int episodes = 20;
  int segments = 1000;
  int horizon = 5;
  std::uint64_t seed = 0;
  std::string out = "analysis/error";
};
int analyze_error(const ErrorOptions& options, const Logger& log);

struct AblateOptions {
  std::string axis;
  std::string config;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string mode = "world-model";  // world-model | full
  int collect_steps = 2000;
  int updates = 300;
  int eval_every = 25;
  double loss_threshold = 0.0;
  int horizon = 5;
  int segments = 200;
  std::string out = "analysis/ablate";
};
int analyze_ablate(const AblateOptions& options, const Logger& log);

struct AttentionOptions {
  std::string ckpt = "run";
  std::uint64_t seed = 0;
  std::string out = "analysis/attention";
};
int analyze_attention(const AttentionOptions& options, const Logger& log);

struct FlopsOptions {
  std::vector<int> agents = {2, 3, 5, 9};
  std::string out = "analysis/flops";
};
int analyze_flops(const FlopsOptions& options, const Logger& log);

}  // namespace mawm::cli
