#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <exception>

#include "commands.hpp"

namespace {

void log_line(mawm::cli::Level level, const std::string& message) {
  if (level == mawm::cli::Level::kWarn) {
    spdlog::warn("{}", message);
  } else {
    spdlog::info("{}", message);
  }
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("mawm"));
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

  CLI::App app{"Multi-agent world model: environments, training and analysis"};
  app.require_subcommand(1);
  std::function<int()> action;

  mawm::cli::EnvRolloutOptions rollout;
  auto* env_cmd = app.add_subcommand("env-rollout", "Record random-policy episodes as JSONL logs");
  env_cmd->add_option("--env", rollout.env, "coop-switch or coupled-chain")->capture_default_str();
  env_cmd->add_option("--agents", rollout.agents)->capture_default_str();
  env_cmd->add_option("--episodes", rollout.episodes)->capture_default_str();
  env_cmd->add_option("--episode-limit", rollout.episode_limit)->capture_default_str();
  env_cmd->add_option("--grid-size", rollout.grid_size)->capture_default_str();
  env_cmd->add_option("--state-dim", rollout.state_dim)->capture_default_str();
  env_cmd->add_option("--action-bins", rollout.action_bins)->capture_default_str();
  env_cmd->add_option("--seed", rollout.seed)->capture_default_str();
  env_cmd->add_option("--out", rollout.out, "Output directory")->capture_default_str();
  env_cmd->callback([&] { action = [&] { return mawm::cli::env_rollout(rollout, log_line); }; });

  mawm::cli::TokenizerTrainOptions tok;
  auto* tok_cmd = app.add_subcommand("tokenizer-train", "Train an observation tokenizer on episode logs");
  tok_cmd->add_option("--data", tok.data, "Directory of episode logs")->capture_default_str();
  tok_cmd->add_option("--kind", tok.kind, "vq or bins")->capture_default_str();
  tok_cmd->add_option("--codebook", tok.codebook)->capture_default_str();
  tok_cmd->add_option("--tokens", tok.tokens)->capture_default_str();
  tok_cmd->add_option("--code-dim", tok.code_dim)->capture_default_str();
  tok_cmd->add_option("--hidden", tok.hidden)->capture_default_str();
  tok_cmd->add_option("--epochs", tok.epochs)->capture_default_str();
  tok_cmd->add_option("--batch", tok.batch)->capture_default_str();
  tok_cmd->add_option("--seed", tok.seed)->capture_default_str();
  tok_cmd->add_option("--out", tok.out, "Checkpoint file")->capture_default_str();
  tok_cmd->callback([&] { action = [&] { return mawm::cli::tokenizer_train(tok, log_line); }; });

  mawm::cli::TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Run the full training loop");
  train_cmd->add_option("--config", train.config, "key = value config file");
  train_cmd->add_option("--set", train.overrides, "Override, e.g. --set dynamics.horizon=10");
  train_cmd->add_option("--out", train.out, "Run directory")->capture_default_str();
  train_cmd->add_flag("--resume", train.resume, "Continue from <out>/checkpoint when present");
  train_cmd->add_flag("--print-config", train.print_config, "Print the resolved config and exit");
  train_cmd->callback([&] { action = [&] { return mawm::cli::train(train, log_line); }; });

  mawm::cli::ImagineOptions imag;
  auto* imag_cmd = app.add_subcommand("imagine", "Dump imagined rollouts from a checkpoint");
  imag_cmd->add_option("--ckpt", imag.ckpt, "Run or checkpoint directory")->capture_default_str();
  imag_cmd->add_option("--horizon", imag.horizon)->capture_default_str();
  imag_cmd->add_option("--rollouts", imag.rollouts)->capture_default_str();
  imag_cmd->add_option("--seed", imag.seed)->capture_default_str();
  imag_cmd->add_option("--dump", imag.dump, "Output directory")->capture_default_str();
  imag_cmd->callback([&] { action = [&] { return mawm::cli::imagine(imag, log_line); }; });

  mawm::cli::EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate the policy of a checkpoint");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Run or checkpoint directory")->capture_default_str();
  eval_cmd->add_option("--episodes", ev.episodes)->capture_default_str();
  auto* greedy = eval_cmd->add_flag("--greedy", ev.greedy, "Argmax actions (default)");
  eval_cmd->add_flag("--sample", [&](std::int64_t) { ev.greedy = false; }, "Sample actions")->excludes(greedy);
  eval_cmd->callback([&] { action = [&] { return mawm::cli::eval(ev, log_line); }; });

  auto* analyze = app.add_subcommand("analyze", "Analysis artifacts");
  analyze->require_subcommand(1);

  mawm::cli::ErrorOptions err;
  auto* err_cmd = analyze->add_subcommand("error", "Compounding multi-step prediction error");
  err_cmd->add_option("--ckpt", err.ckpt)->capture_default_str();
  err_cmd->add_option("--episodes", err.episodes)->capture_default_str();
  err_cmd->add_option("--segments", err.segments)->capture_default_str();
  err_cmd->add_option("--horizon", err.horizon)->capture_default_str();
  err_cmd->add_option("--seed", err.seed)->capture_default_str();
  err_cmd->add_option("--out", err.out)->capture_default_str();
  err_cmd->callback([&] { action = [&] { return mawm::cli::analyze_error(err, log_line); }; });

  mawm::cli::AblateOptions abl;
  auto* abl_cmd = analyze->add_subcommand("ablate", "Matched runs along one design axis");
  abl_cmd
      ->add_option("--axis", abl.axis,
                   "centralized_vs_decentralized, aggregation_on_off, vq_vs_bins or perceiver_vs_selfattn")
      ->required();
  abl_cmd->add_option("--config", abl.config, "Base config file");
  abl_cmd->add_option("--set", abl.overrides, "Base config override key=value");
  abl_cmd->add_option("--seeds", abl.seeds)->capture_default_str();
  abl_cmd->add_option("--mode", abl.mode, "world-model or full")->capture_default_str();
  abl_cmd->add_option("--collect-steps", abl.collect_steps)->capture_default_str();
  abl_cmd->add_option("--updates", abl.updates)->capture_default_str();
  abl_cmd->add_option("--eval-every", abl.eval_every)->capture_default_str();
  abl_cmd->add_option("--loss-threshold", abl.loss_threshold)->capture_default_str();
  abl_cmd->add_option("--horizon", abl.horizon, "Compounding-error steps")->capture_default_str();
  abl_cmd->add_option("--segments", abl.segments)->capture_default_str();
  abl_cmd->add_option("--out", abl.out)->capture_default_str();
  abl_cmd->callback([&] { action = [&] { return mawm::cli::analyze_ablate(abl, log_line); }; });

  mawm::cli::AttentionOptions att;
  auto* att_cmd = analyze->add_subcommand("attention", "Attention maps as .npy and SVG heatmaps");
  att_cmd->add_option("--ckpt", att.ckpt)->capture_default_str();
  att_cmd->add_option("--seed", att.seed)->capture_default_str();
  att_cmd->add_option("--out", att.out)->capture_default_str();
  att_cmd->callback([&] { action = [&] { return mawm::cli::analyze_attention(att, log_line); }; });

  mawm::cli::FlopsOptions flops;
  auto* flops_cmd = analyze->add_subcommand("flops", "Aggregator FLOPs table");
  flops_cmd->add_option("--agents", flops.agents)->capture_default_str();
  flops_cmd->add_option("--out", flops.out)->capture_default_str();
  flops_cmd->callback([&] { action = [&] { return mawm::cli::analyze_flops(flops, log_line); }; });

  CLI11_PARSE(app, argc, argv);
  try {
    return action ? action() : 0;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
