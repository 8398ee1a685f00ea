#include "commands.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "mawm/analysis.hpp"
#include "mawm/episode_log.hpp"
#include "mawm/imagination.hpp"
#include "mawm/trainer.hpp"

namespace fs = std::filesystem;

namespace mawm::cli {

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

RunConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig config = path.empty() ? RunConfig{} : load_run_config(path);
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override must be key=value: " + item);
    set_config_value(config, item.substr(0, eq), item.substr(eq + 1));
  }
  return config;
}

/// Accepts either a run directory or its checkpoint directory.
fs::path checkpoint_path(const std::string& ckpt) {
  fs::path p(ckpt);
  if (fs::exists(p / "checkpoint" / "state.pt")) return p / "checkpoint";
  if (fs::exists(p / "state.pt")) return p;
  throw std::runtime_error("no checkpoint found in " + ckpt);
}

std::unique_ptr<Trainer> load_trainer(const std::string& ckpt) {
  const auto dir = checkpoint_path(ckpt);
  auto trainer = std::make_unique<Trainer>(load_run_config(dir / "config.txt"));
  trainer->load_checkpoint(dir);
  return trainer;
}

std::vector<std::int64_t> random_joint_action(const JointObservation& obs, int n, int A, std::mt19937_64& rng) {
  std::vector<std::int64_t> actions;
  for (int i = 0; i < n; ++i) {
    std::vector<std::int64_t> legal;
    for (int a = 0; a < A; ++a) {
      if (obs.avail[static_cast<std::size_t>(i * A + a)] != 0) legal.push_back(a);
    }
    actions.push_back(legal[std::uniform_int_distribution<std::size_t>(0, legal.size() - 1)(rng)]);
  }
  return actions;
}

}  // namespace

int env_rollout(const EnvRolloutOptions& options, const Logger& log) {
  EnvSpec spec;
  spec.kind = parse_env_kind(options.env);
  spec.n_agents = options.agents;
  spec.episode_limit = options.episode_limit;
  spec.grid_size = options.grid_size;
  spec.state_dim = options.state_dim;
  spec.action_bins = options.action_bins;
  spec.seed = options.seed;
  auto env = make_env(spec);
  std::mt19937_64 rng(options.seed);
  fs::create_directories(options.out);
  const auto path = fs::path(options.out) / ("episodes_seed" + std::to_string(options.seed) + ".jsonl");
  EpisodeLogWriter writer(path, {to_string(spec.kind), env->n_agents(), env->obs_dim(), env->n_actions()});
  double total_return = 0.0;
  int successes = 0;
  for (int e = 0; e < options.episodes; ++e) {
    env->reset();
    for (int t = 0;; ++t) {
      StepRecord rec;
      rec.obs = env->current().obs;
      rec.avail = env->current().avail;
      rec.actions = random_joint_action(env->current(), env->n_agents(), env->n_actions(), rng);
      auto out = env->step(rec.actions);
      rec.reward = out.reward;
      rec.continuation = out.continuation;
      writer.write(e, t, rec);
      total_return += out.reward;
      if (out.done) {
        successes += out.success ? 1 : 0;
        break;
      }
    }
  }
  writer.flush();
  log(Level::kInfo, "wrote " + std::to_string(options.episodes) + " episodes (" + std::to_string(env->total_steps()) +
                        " steps) to " + path.string() + "; mean return " +
                        fmt(total_return / std::max(1, options.episodes)) + ", successes " +
                        std::to_string(successes));
  return 0;
}

int tokenizer_train(const TokenizerTrainOptions& options, const Logger& log) {
  torch::manual_seed(options.seed);
  const auto data = read_episode_logs(options.data);
  const auto d = data.header.obs_dim;
  std::vector<float> flat;
  for (const auto& ep : data.episodes)
    for (const auto& step : ep) flat.insert(flat.end(), step.obs.begin(), step.obs.end());
  const auto rows = static_cast<std::int64_t>(flat.size()) / d;
  if (rows == 0) throw std::runtime_error("no observations in " + options.data);
  auto obs = torch::from_blob(flat.data(), {rows, d}, torch::kFloat32).clone();

  TokenizerConfig config;
  config.kind = parse_tokenizer_kind(options.kind);
  config.codebook_size = options.codebook;
  config.tokens = options.tokens;
  config.code_dim = options.code_dim;
  config.hidden = options.hidden;
  auto tokenizer = make_tokenizer(d, config);
  tokenizer->fit(obs.slice(0, 0, std::min<std::int64_t>(rows, config.fit_observations)));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  TokenizerStats stats;
  for (int e = 0; e < options.epochs; ++e) {
    auto idx = torch::randint(rows, {options.batch}, gen, torch::kInt64);
    stats = tokenizer->train_step(obs.index_select(0, idx));
    if ((e + 1) % 50 == 0 || e + 1 == options.epochs) {
      log(Level::kInfo, "epoch " + std::to_string(e + 1) + " reconstruction " + fmt(stats.reconstruction) +
                            " utilization " + fmt(stats.utilization));
    }
  }
  torch::serialize::OutputArchive archive;
  tokenizer->save(archive);
  if (fs::path(options.out).has_parent_path()) fs::create_directories(fs::path(options.out).parent_path());
  archive.save_to(options.out);
  auto recon = tokenizer->reconstruct(obs);
  log(Level::kInfo, "trained on " + std::to_string(rows) + " observations; full-data reconstruction MSE " +
                        fmt((recon - obs).square().mean().item<double>()) + "; saved " + options.out);
  return 0;
}

int train(const TrainOptions& options, const Logger& log) {
  const auto config = build_config(options.config, options.overrides);
  if (options.print_config) {
    log(Level::kInfo, "\n" + to_text(config));
    return 0;
  }
  fs::create_directories(options.out);
  std::ofstream(fs::path(options.out) / "config.txt") << to_text(config);
  Trainer trainer(config, options.out);
  trainer.set_progress([&](const std::string& m) { log(Level::kInfo, m); });
  if (options.resume) {
    if (trainer.resume()) {
      log(Level::kInfo, "resumed at " + std::to_string(trainer.env_steps()) + " env steps");
    } else {
      log(Level::kWarn, "no checkpoint in " + options.out + "; starting fresh");
    }
  }
  const auto summary = trainer.run();
  log(Level::kInfo, "finished: " + std::to_string(summary.env_steps) + " env steps, " +
                        std::to_string(summary.epochs) + " epochs, final success " +
                        fmt(summary.final_eval.success_rate) + " (best " + fmt(summary.best_success) + "), " +
                        fmt(summary.wall_seconds) + " s");
  return 0;
}

int imagine(const ImagineOptions& options, const Logger& log) {
  auto trainer = load_trainer(options.ckpt);
  const auto& config = trainer->config();
  ImaginationOptions io;
  io.horizon = options.horizon;
  io.stack = config.behavior.stack;
  io.sampling.temperature = config.schedule.imagination_temperature;
  std::mt19937_64 rng(options.seed);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  auto [obs, avail] = sample_initial_states(trainer->buffer(), options.rollouts, rng);
  auto rollout = mawm::imagine(trainer->learner().actor(), trainer->world_model(), trainer->tokenizer(), obs, avail,
                               io, gen);
  const fs::path dir(options.dump);
  fs::create_directories(dir);
  const std::vector<std::pair<std::string, torch::Tensor>> fields{
      {"obs", rollout.obs},           {"policy_inputs", rollout.policy_inputs},
      {"actions", rollout.actions},   {"log_probs", rollout.log_probs},
      {"avail", rollout.avail},       {"rewards", rollout.rewards},
      {"discounts", rollout.discounts}, {"discount_probs", rollout.discount_probs},
      {"alive", rollout.alive}};
  nlohmann::json meta{{"schema", "mawm.imagined_rollout"},
                      {"version", 1},
                      {"rollouts", rollout.rollouts()},
                      {"horizon", rollout.horizon()},
                      {"n_agents", rollout.n_agents()},
                      {"seed", options.seed}};
  for (const auto& [name, tensor] : fields) {
    write_npy(dir / (name + ".npy"), tensor);
    meta["fields"][name] = tensor.sizes().vec();
  }
  std::ofstream(dir / "rollout.json") << meta.dump(2) << '\n';
  log(Level::kInfo, "imagined " + std::to_string(rollout.rollouts()) + " x " + std::to_string(rollout.horizon()) +
                        " steps; mean reward " + fmt(rollout.rewards.mean().item<double>()) + "; alive fraction " +
                        fmt(rollout.alive.mean().item<double>()) + "; wrote " + dir.string());
  return 0;
}

int eval(const EvalOptions& options, const Logger& log) {
  auto trainer = load_trainer(options.ckpt);
  const auto result = trainer->evaluate(options.episodes, options.greedy ? ActMode::kGreedy : ActMode::kSample);
  log(Level::kInfo, "success rate " + fmt(result.success_rate) + " +/- " + fmt(result.success_std) + ", return " +
                        fmt(result.mean_return) + " +/- " + fmt(result.std_return) + ", mean length " +
                        fmt(result.mean_length) + " over " + std::to_string(result.episodes) + " episodes");
  return 0;
}

int analyze_error(const ErrorOptions& options, const Logger& log) {
  auto trainer = load_trainer(options.ckpt);
  EnvSpec spec = trainer->config().env;
  spec.seed = options.seed;
  auto env = make_env(spec);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  const auto episodes = record_episodes(*env, trainer->learner().actor(), trainer->tokenizer(),
                                        trainer->config().behavior.stack, options.episodes, ActMode::kSample, gen);
  WorldModelPredictor predictor(trainer->world_model(), trainer->tokenizer());
  std::mt19937_64 rng(options.seed);
  const auto error = compounding_error(predictor, episodes, options.horizon, options.segments, rng);
  write_compounding_error(options.out, error);
  std::string steps;
  for (double e : error.per_step()) steps += " " + fmt(e);
  log(Level::kInfo, "mean L1 per step:" + steps + "; wrote " + options.out);
  return 0;
}

int analyze_ablate(const AblateOptions& options, const Logger& log) {
  const auto base = build_config(options.config, options.overrides);
  AblationOptions ao;
  ao.mode = options.mode == "full" ? AblationMode::kFull : AblationMode::kWorldModel;
  if (options.mode != "full" && options.mode != "world-model") {
    throw std::invalid_argument("ablation mode must be world-model or full");
  }
  ao.seeds = options.seeds;
  ao.collect_steps = options.collect_steps;
  ao.updates = options.updates;
  ao.eval_every = options.eval_every;
  ao.loss_threshold = options.loss_threshold;
  ao.error_horizon = options.horizon;
  ao.error_segments = options.segments;
  const auto axis = parse_ablation_axis(options.axis);
  const auto report = run_ablation(axis, base, ao, [&](const AblationRun& run) {
    log(Level::kInfo, run.variant + " seed " + std::to_string(run.seed) + ": final loss " + fmt(run.final_loss) +
                          ", s/update " + fmt(run.seconds_per_update) + ", success " + fmt(run.success_rate) +
                          ", " + fmt(run.wall_seconds) + " s");
  });
  write_ablation_report(options.out, report);
  for (const auto& s : report.summary) {
    log(Level::kInfo, s.variant + " (" + std::to_string(s.tokens_per_obs) + " tokens/obs, sequence " +
                          std::to_string(s.sequence_length) + "): loss " + fmt(s.final_loss_mean) + ", s/update " +
                          fmt(s.seconds_per_update_mean) + ", last-step L1 " + fmt(s.error_mean) + ", success " +
                          fmt(s.success_mean));
  }
  log(Level::kInfo, "wrote " + options.out);
  return 0;
}

int analyze_attention(const AttentionOptions& options, const Logger& log) {
  auto trainer = load_trainer(options.ckpt);
  std::mt19937_64 rng(options.seed);
  auto segments = trainer->buffer().sample_segments(trainer->config().dynamics.horizon, 1, rng);
  auto batch = make_segment_batch(segments, trainer->tokenizer());
  const auto dump = dump_attention(trainer->world_model(), batch, options.out);
  log(Level::kInfo, "dumped " + std::to_string(dump.causal.size()) + " causal layers" +
                        (dump.perceiver.defined() ? " and Perceiver cross-attention" : "") + " to " + options.out);
  return 0;
}

int analyze_flops(const FlopsOptions& options, const Logger& log) {
  std::vector<std::int64_t> agents(options.agents.begin(), options.agents.end());
  const auto rows = flops_report(agents);
  write_flops_report(options.out, rows);
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    log(Level::kInfo, "n=" + std::to_string(r.n_agents) + ": Perceiver " + fmt(r.perceiver / 1e9) +
                          " GFLOPs, self-attention " + fmt(r.self_attention / 1e9) + " GFLOPs");
    xs.push_back(static_cast<double>(r.n_agents));
    ys.push_back(r.perceiver);
  }
  log(Level::kInfo, "Perceiver linear fit R^2 " + fmt(linear_fit_r2(xs, ys)) + "; wrote " + options.out);
  return 0;
}

}  // namespace mawm::cli
