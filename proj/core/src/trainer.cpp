#include "mawm/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <charconv>
#include <chrono>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

#include "mawm/serialization.hpp"

namespace mawm {

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& value) {
  Int out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("config " + key + ": not an integer: " + value);
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) throw std::invalid_argument("config " + key + ": not a number: " + value);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw std::invalid_argument("config " + key + ": not a boolean: " + value);
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

struct KeyDef {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

using KeyTable = std::vector<std::pair<std::string, KeyDef>>;

template <typename Access>
KeyDef int_key(Access access) {
  return {[access](RunConfig& c, const std::string& v) { access(c) = parse_integer<std::decay_t<decltype(access(c))>>("", v); },
          [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
KeyDef double_key(Access access) {
  return {[access](RunConfig& c, const std::string& v) { access(c) = parse_double("", v); },
          [access](const RunConfig& c) { return format_double(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
KeyDef bool_key(Access access) {
  return {[access](RunConfig& c, const std::string& v) { access(c) = parse_bool("", v); },
          [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

#define MAWM_FIELD(expr) [](RunConfig& c) -> auto& { return c.expr; }

const KeyTable& key_table() {
  static const KeyTable table = {
      {"seed", int_key(MAWM_FIELD(seed))},
      {"env.name", {[](RunConfig& c, const std::string& v) { c.env.kind = parse_env_kind(v); },
                    [](const RunConfig& c) { return to_string(c.env.kind); }}},
      {"env.agents", int_key(MAWM_FIELD(env.n_agents))},
      {"env.episode_limit", int_key(MAWM_FIELD(env.episode_limit))},
      {"env.grid_size", int_key(MAWM_FIELD(env.grid_size))},
      {"env.state_dim", int_key(MAWM_FIELD(env.state_dim))},
      {"env.action_bins", int_key(MAWM_FIELD(env.action_bins))},
      {"env.noise_std", double_key(MAWM_FIELD(env.noise_std))},

      {"tokenizer.kind", {[](RunConfig& c, const std::string& v) { c.tokenizer.kind = parse_tokenizer_kind(v); },
                          [](const RunConfig& c) { return to_string(c.tokenizer.kind); }}},
      {"tokenizer.hidden", int_key(MAWM_FIELD(tokenizer.hidden))},
      {"tokenizer.layers", int_key(MAWM_FIELD(tokenizer.layers))},
      {"tokenizer.codebook", int_key(MAWM_FIELD(tokenizer.codebook_size))},
      {"tokenizer.tokens", int_key(MAWM_FIELD(tokenizer.tokens))},
      {"tokenizer.code_dim", int_key(MAWM_FIELD(tokenizer.code_dim))},
      {"tokenizer.beta", double_key(MAWM_FIELD(tokenizer.beta))},
      {"tokenizer.ema_decay", double_key(MAWM_FIELD(tokenizer.ema_decay))},
      {"tokenizer.ema_eps", double_key(MAWM_FIELD(tokenizer.ema_eps))},
      {"tokenizer.lr", double_key(MAWM_FIELD(tokenizer.lr))},
      {"tokenizer.grad_clip", double_key(MAWM_FIELD(tokenizer.grad_clip))},
      {"tokenizer.weight_decay", double_key(MAWM_FIELD(tokenizer.weight_decay))},
      {"tokenizer.bins", int_key(MAWM_FIELD(tokenizer.bins))},
      {"tokenizer.fit_observations", int_key(MAWM_FIELD(tokenizer.fit_observations))},

      {"dynamics.embed_dim", int_key(MAWM_FIELD(dynamics.embed_dim))},
      {"dynamics.layers", int_key(MAWM_FIELD(dynamics.layers))},
      {"dynamics.heads", int_key(MAWM_FIELD(dynamics.heads))},
      {"dynamics.dropout", double_key(MAWM_FIELD(dynamics.dropout))},
      {"dynamics.horizon", int_key(MAWM_FIELD(dynamics.horizon))},
      {"dynamics.centralized", bool_key(MAWM_FIELD(dynamics.centralized))},
      {"dynamics.lr", double_key(MAWM_FIELD(dynamics.lr))},
      {"dynamics.weight_decay", double_key(MAWM_FIELD(dynamics.weight_decay))},
      {"dynamics.grad_clip", double_key(MAWM_FIELD(dynamics.grad_clip))},
      {"dynamics.batch_size", int_key(MAWM_FIELD(dynamics.batch_size))},

      {"aggregator.kind",
       {[](RunConfig& c, const std::string& v) { c.dynamics.aggregator.kind = parse_aggregator_kind(v); },
        [](const RunConfig& c) { return to_string(c.dynamics.aggregator.kind); }}},
      {"aggregator.cross_heads", int_key(MAWM_FIELD(dynamics.aggregator.cross_heads))},
      {"aggregator.inner_layers", int_key(MAWM_FIELD(dynamics.aggregator.inner_layers))},
      {"aggregator.inner_heads", int_key(MAWM_FIELD(dynamics.aggregator.inner_heads))},
      {"aggregator.head_dim", int_key(MAWM_FIELD(dynamics.aggregator.head_dim))},
      {"aggregator.self_attention_layers", int_key(MAWM_FIELD(dynamics.aggregator.self_attention_layers))},
      {"aggregator.ff_mult", int_key(MAWM_FIELD(dynamics.aggregator.ff_mult))},
      {"aggregator.dropout", double_key(MAWM_FIELD(dynamics.aggregator.dropout))},

      {"behavior.hidden", int_key(MAWM_FIELD(behavior.hidden))},
      {"behavior.stack", int_key(MAWM_FIELD(behavior.stack))},
      {"behavior.lambda", double_key(MAWM_FIELD(behavior.lambda))},
      {"behavior.clip", double_key(MAWM_FIELD(behavior.clip))},
      {"behavior.entropy_coef", double_key(MAWM_FIELD(behavior.entropy_coef))},
      {"behavior.ppo_epochs", int_key(MAWM_FIELD(behavior.ppo_epochs))},
      {"behavior.actor_lr", double_key(MAWM_FIELD(behavior.actor_lr))},
      {"behavior.critic_lr", double_key(MAWM_FIELD(behavior.critic_lr))},
      {"behavior.grad_clip", double_key(MAWM_FIELD(behavior.grad_clip))},
      {"behavior.normalize_advantages", bool_key(MAWM_FIELD(behavior.normalize_advantages))},
      {"behavior.critic_heads", int_key(MAWM_FIELD(behavior.critic_heads))},
      {"behavior.agent_id_dim", int_key(MAWM_FIELD(behavior.agent_id_dim))},

      {"schedule.env_steps", int_key(MAWM_FIELD(schedule.env_steps))},
      {"schedule.collect_per_epoch", int_key(MAWM_FIELD(schedule.collect_per_epoch))},
      {"schedule.tokenizer_epochs", int_key(MAWM_FIELD(schedule.tokenizer_epochs))},
      {"schedule.world_model_epochs", int_key(MAWM_FIELD(schedule.world_model_epochs))},
      {"schedule.tokenizer_batch", int_key(MAWM_FIELD(schedule.tokenizer_batch))},
      {"schedule.train_start", int_key(MAWM_FIELD(schedule.train_start))},
      {"schedule.policy_updates", int_key(MAWM_FIELD(schedule.policy_updates))},
      {"schedule.rollouts", int_key(MAWM_FIELD(schedule.rollouts))},
      {"schedule.imagination_temperature", double_key(MAWM_FIELD(schedule.imagination_temperature))},
      {"schedule.buffer_capacity", int_key(MAWM_FIELD(schedule.buffer_capacity))},
      {"schedule.eval_every", int_key(MAWM_FIELD(schedule.eval_every))},
      {"schedule.eval_episodes", int_key(MAWM_FIELD(schedule.eval_episodes))},
      {"schedule.success_threshold", double_key(MAWM_FIELD(schedule.success_threshold))},
      {"schedule.checkpoint_every", int_key(MAWM_FIELD(schedule.checkpoint_every))},
  };
  return table;
}

#undef MAWM_FIELD

const KeyDef& find_key(const std::string& key) {
  for (const auto& [name, def] : key_table()) {
    if (name == key) return def;
  }
  throw std::invalid_argument("unknown config key: " + key);
}

}  // namespace

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& def = find_key(key);
  try {
    def.set(config, unquote(trim(value)));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config " + key + ": " + e.what());
  }
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument("config line " + std::to_string(line_no) + ": bad section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set_config_value(base, key, line.substr(eq + 1));
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str(), std::move(base));
}

std::string to_text(const RunConfig& config) {
  std::ostringstream out;
  for (const auto& [name, def] : key_table()) out << name << " = " << def.get(config) << '\n';
  return out.str();
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& entry : key_table()) keys.push_back(entry.first);
  return keys;
}

int policy_updates_for_horizon(int horizon) {
  if (horizon >= 15) return 4;
  if (horizon >= 8) return 10;
  return 30;
}

SeedStreams derive_seeds(std::uint64_t master) {
  auto next = [state = master]() mutable {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  SeedStreams s{};
  s.env = next();
  s.eval_env = next();
  s.model = next();
  s.sampling = next();
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

torch::Tensor to_tensor(const std::vector<float>& values, std::int64_t rows, std::int64_t cols) {
  return torch::from_blob(const_cast<float*>(values.data()), {rows, cols}, torch::kFloat32).clone();
}

torch::Tensor to_mask(const std::vector<std::uint8_t>& values, std::int64_t rows, std::int64_t cols) {
  return torch::from_blob(const_cast<std::uint8_t*>(values.data()), {rows, cols}, torch::kUInt8).to(torch::kBool);
}

std::string strip_schedule(const std::string& text) {
  std::istringstream in(text);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("schedule.", 0) != 0) out << line << '\n';
  }
  return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace

Trainer::Trainer(RunConfig config, std::filesystem::path out_dir)
    : config_(std::move(config)),
      out_dir_(std::move(out_dir)),
      seeds_(derive_seeds(config_.seed)),
      generator_(at::make_generator<at::CPUGeneratorImpl>(seeds_.sampling)),
      stack_(config_.behavior.stack) {
  torch::manual_seed(seeds_.model);
  EnvSpec spec = config_.env;
  spec.seed = seeds_.env;
  env_ = make_env(spec);
  spec.seed = seeds_.eval_env;
  eval_env_ = make_env(spec);
  buffer_ = std::make_unique<ReplayBuffer>(config_.schedule.buffer_capacity, env_->n_agents(), env_->obs_dim(),
                                           env_->n_actions());
  tokenizer_ = make_tokenizer(env_->obs_dim(), config_.tokenizer);
  WorldModelShape shape{env_->n_agents(), static_cast<int>(tokenizer_->tokens_per_obs()),
                        static_cast<int>(tokenizer_->vocab_size()), env_->n_actions()};
  world_model_ = WorldModel(shape, config_.dynamics);
  world_model_->eval();
  world_model_opt_ = std::make_unique<torch::optim::AdamW>(
      world_model_->parameters(),
      torch::optim::AdamWOptions(config_.dynamics.lr).weight_decay(config_.dynamics.weight_decay));
  learner_ = std::make_unique<AgentLearner>(env_->obs_dim(), env_->n_agents(), env_->n_actions(), config_.behavior);
  rng_.seed(seeds_.sampling);
  next_eval_ = config_.schedule.eval_every;
  if (!out_dir_.empty()) {
    std::filesystem::create_directories(out_dir_);
    metrics_.open(out_dir_ / "metrics.jsonl", std::ios::app);
  }
  env_->reset();
  begin_episode();
}

Trainer::~Trainer() = default;

std::filesystem::path Trainer::checkpoint_dir() const { return out_dir_ / "checkpoint"; }

void Trainer::report(const std::string& message) const {
  if (progress_) progress_(message);
}

void Trainer::write_metrics(const std::string& json_line) {
  if (metrics_.is_open()) {
    metrics_ << json_line << '\n';
    metrics_.flush();
  }
}

torch::Tensor Trainer::reconstruct(const std::vector<float>& joint_obs) {
  auto obs = to_tensor(joint_obs, env_->n_agents(), env_->obs_dim());
  if (!tokenizer_->ready()) return obs;
  return tokenizer_->reconstruct(obs).to(torch::kFloat32);
}

void Trainer::begin_episode() {
  stack_.reset(reconstruct(env_->current().obs));
  episode_return_ = 0.0F;
}

void Trainer::set_environment(std::unique_ptr<Environment> env) {
  if (env->n_agents() != env_->n_agents() || env->obs_dim() != env_->obs_dim() ||
      env->n_actions() != env_->n_actions()) {
    throw std::invalid_argument("replacement environment has different dimensions");
  }
  env_ = std::move(env);
  env_->reset();
  begin_episode();
}

void Trainer::collect_experience(std::int64_t n) {
  const std::int64_t agents = env_->n_agents(), A = env_->n_actions();
  auto& actor = learner_->actor();
  for (std::int64_t i = 0; i < n; ++i) {
    StepRecord record;
    record.obs = env_->current().obs;
    record.avail = env_->current().avail;
    auto choice = actor->act(stack_.flat(), to_mask(record.avail, agents, A), ActMode::kSample, generator_);
    record.actions.assign(choice.actions.data_ptr<std::int64_t>(), choice.actions.data_ptr<std::int64_t>() + agents);
    auto outcome = env_->step(record.actions);
    record.reward = outcome.reward;
    record.continuation = outcome.continuation;
    buffer_->append(std::move(record));
    episode_return_ += outcome.reward;
    if (outcome.done) {
      nlohmann::json row{{"phase", "episode"},      {"env_steps", env_->total_steps()}, {"return", episode_return_},
                         {"length", env_->t()},     {"success", outcome.success}};
      write_metrics(row.dump());
      env_->reset();
      begin_episode();
    } else {
      stack_.push(reconstruct(outcome.next.obs));
    }
  }
}

DynamicsLoss Trainer::world_model_step() {
  auto segments = buffer_->sample_segments(config_.dynamics.horizon, config_.dynamics.batch_size, rng_);
  auto batch = make_segment_batch(segments, *tokenizer_);
  world_model_->train();
  auto loss = world_model_->loss(batch);
  loss.check_finite();
  world_model_opt_->zero_grad();
  loss.total.backward();
  torch::nn::utils::clip_grad_norm_(world_model_->parameters(), config_.dynamics.grad_clip);
  world_model_opt_->step();
  world_model_->eval();
  return loss;
}

WorldModelStats Trainer::train_world_model(int tokenizer_epochs, int world_model_epochs) {
  if (buffer_->size() == 0) throw std::runtime_error("train_world_model needs a non-empty buffer");
  const std::int64_t agents = env_->n_agents(), d = env_->obs_dim();
  WorldModelStats stats;
  if (!tokenizer_->fitted()) {
    auto obs = buffer_->observations(config_.tokenizer.fit_observations);
    tokenizer_->fit(to_tensor(obs, static_cast<std::int64_t>(obs.size()) / d, d));
  }
  auto start = std::chrono::steady_clock::now();
  const int steps_per_batch = std::max<int>(1, (config_.schedule.tokenizer_batch + static_cast<int>(agents) - 1) /
                                                   static_cast<int>(agents));
  for (int e = 0; e < tokenizer_epochs; ++e) {
    auto steps = buffer_->sample_steps(steps_per_batch, rng_);
    auto obs = torch::empty({steps_per_batch * agents, d});
    for (int s = 0; s < steps_per_batch; ++s) {
      std::copy(steps[static_cast<std::size_t>(s)].obs.begin(), steps[static_cast<std::size_t>(s)].obs.end(),
                obs.data_ptr<float>() + s * agents * d);
    }
    auto t = tokenizer_->train_step(obs);
    stats.tokenizer.total += t.total / tokenizer_epochs;
    stats.tokenizer.reconstruction += t.reconstruction / tokenizer_epochs;
    stats.tokenizer.codebook += t.codebook / tokenizer_epochs;
    stats.tokenizer.commitment += t.commitment / tokenizer_epochs;
    stats.tokenizer.utilization = t.utilization;
  }
  stats.tokenizer_updates = tokenizer_epochs;
  stats.tokenizer_seconds = seconds_since(start);

  start = std::chrono::steady_clock::now();
  for (int e = 0; e < world_model_epochs; ++e) {
    auto loss = world_model_step();
    stats.total += loss.total.item<double>() / world_model_epochs;
    stats.tokens += loss.tokens.item<double>() / world_model_epochs;
    stats.reward += loss.reward.item<double>() / world_model_epochs;
    stats.discount += loss.discount.item<double>() / world_model_epochs;
    stats.avail += loss.avail.item<double>() / world_model_epochs;
    stats.token_accuracy += loss.token_accuracy / world_model_epochs;
  }
  stats.dynamics_updates = world_model_epochs;
  stats.dynamics_seconds = seconds_since(start);
  if (world_model_epochs > 0) world_model_trained_ = true;
  return stats;
}

AgentStats Trainer::train_agents(int updates, const PolicyObserver& observer) {
  if (!world_model_trained_) throw std::logic_error("train_agents requires a trained world model");
  ImaginationOptions options;
  options.horizon = config_.dynamics.horizon;
  options.stack = config_.behavior.stack;
  options.sampling.temperature = config_.schedule.imagination_temperature;
  AgentStats stats;
  auto start = std::chrono::steady_clock::now();
  for (int u = 0; u < updates; ++u) {
    auto [obs, avail] = sample_initial_states(*buffer_, config_.schedule.rollouts, rng_);
    auto rollout = imagine(learner_->actor(), world_model_, *tokenizer_, obs, avail, options, generator_, observer);
    auto b = learner_->update(rollout);
    stats.behavior.actor_loss += b.actor_loss / updates;
    stats.behavior.critic_loss += b.critic_loss / updates;
    stats.behavior.entropy += b.entropy / updates;
    stats.behavior.mean_return += b.mean_return / updates;
    stats.behavior.clip_fraction += b.clip_fraction / updates;
    stats.imagined_steps += rollout.rollouts() * rollout.horizon();
  }
  stats.updates = updates;
  stats.seconds = seconds_since(start);
  return stats;
}

EvalResult Trainer::evaluate(int episodes, ActMode mode) {
  const std::int64_t agents = eval_env_->n_agents(), A = eval_env_->n_actions(), d = eval_env_->obs_dim();
  auto& actor = learner_->actor();
  ObservationStack stack(config_.behavior.stack);
  auto recon = [&](const std::vector<float>& obs) {
    auto t = to_tensor(obs, agents, d);
    return tokenizer_->ready() ? tokenizer_->reconstruct(t).to(torch::kFloat32) : t;
  };
  EvalResult result;
  std::vector<double> returns;
  std::vector<double> successes;
  for (int e = 0; e < episodes; ++e) {
    eval_env_->reset();
    stack.reset(recon(eval_env_->current().obs));
    double ret = 0.0;
    bool success = false;
    while (true) {
      auto choice = actor->act(stack.flat(), to_mask(eval_env_->current().avail, agents, A), mode, generator_);
      std::vector<std::int64_t> actions(choice.actions.data_ptr<std::int64_t>(),
                                        choice.actions.data_ptr<std::int64_t>() + agents);
      auto outcome = eval_env_->step(actions);
      ret += outcome.reward;
      ++result.steps;
      if (outcome.done) {
        success = outcome.success;
        result.mean_length += eval_env_->t();
        break;
      }
      stack.push(recon(outcome.next.obs));
    }
    returns.push_back(ret);
    successes.push_back(success ? 1.0 : 0.0);
  }
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
  };
  result.episodes = episodes;
  if (episodes > 0) {
    std::tie(result.success_rate, result.success_std) = mean_std(successes);
    std::tie(result.mean_return, result.std_return) = mean_std(returns);
    result.mean_length /= episodes;
  }
  eval_steps_ += result.steps;
  return result;
}

RunSummary Trainer::run() {
  const auto start = std::chrono::steady_clock::now();
  const auto& sched = config_.schedule;
  const int updates = sched.policy_updates > 0 ? sched.policy_updates
                                               : policy_updates_for_horizon(config_.dynamics.horizon);
  RunSummary summary;
  bool evaluated_now = false;
  while (env_steps() < sched.env_steps) {
    evaluated_now = false;
    const auto n = std::min<std::int64_t>(sched.collect_per_epoch, sched.env_steps - env_steps());
    collect_experience(n);
    ++epoch_;
    if (buffer_->size() >= sched.train_start) {
      auto wm = train_world_model(sched.tokenizer_epochs, sched.world_model_epochs);
      nlohmann::json wm_row{{"phase", "world_model"},
                            {"epoch", epoch_},
                            {"env_steps", env_steps()},
                            {"tokenizer_loss", wm.tokenizer.total},
                            {"reconstruction", wm.tokenizer.reconstruction},
                            {"codebook_utilization", wm.tokenizer.utilization},
                            {"dynamics_loss", wm.total},
                            {"token_loss", wm.tokens},
                            {"reward_loss", wm.reward},
                            {"discount_loss", wm.discount},
                            {"avail_loss", wm.avail},
                            {"token_accuracy", wm.token_accuracy},
                            {"tokenizer_seconds", wm.tokenizer_seconds},
                            {"dynamics_seconds", wm.dynamics_seconds}};
      write_metrics(wm_row.dump());
      auto ag = train_agents(updates);
      nlohmann::json ag_row{{"phase", "behavior"},
                            {"epoch", epoch_},
                            {"env_steps", env_steps()},
                            {"actor_loss", ag.behavior.actor_loss},
                            {"critic_loss", ag.behavior.critic_loss},
                            {"entropy", ag.behavior.entropy},
                            {"imagined_return", ag.behavior.mean_return},
                            {"imagined_steps", ag.imagined_steps},
                            {"seconds", ag.seconds}};
      write_metrics(ag_row.dump());
      std::ostringstream msg;
      msg.precision(4);
      msg << "epoch " << epoch_ << " steps " << env_steps() << " recon " << wm.tokenizer.reconstruction
          << " dyn " << wm.total << " acc " << wm.token_accuracy << " imagined_return " << ag.behavior.mean_return
          << " entropy " << ag.behavior.entropy;
      report(msg.str());
    }
    if (env_steps() >= next_eval_) {
      while (next_eval_ <= env_steps()) next_eval_ += sched.eval_every;
      summary.final_eval = evaluate(sched.eval_episodes);
      evaluated_now = true;
      best_success_ = std::max(best_success_, summary.final_eval.success_rate);
      nlohmann::json row{{"phase", "eval"},
                         {"epoch", epoch_},
                         {"env_steps", env_steps()},
                         {"eval_steps", eval_steps_},
                         {"success_rate", summary.final_eval.success_rate},
                         {"success_std", summary.final_eval.success_std},
                         {"mean_return", summary.final_eval.mean_return},
                         {"mean_length", summary.final_eval.mean_length},
                         {"wall_seconds", seconds_since(start)}};
      write_metrics(row.dump());
      std::ostringstream msg;
      msg << "eval at " << env_steps() << " steps: success " << summary.final_eval.success_rate << " return "
          << summary.final_eval.mean_return;
      report(msg.str());
      if (sched.success_threshold > 0.0 && summary.final_eval.success_rate >= sched.success_threshold) {
        summary.reached_threshold = true;
        break;
      }
    }
    if (!out_dir_.empty() && sched.checkpoint_every > 0 && epoch_ % sched.checkpoint_every == 0) {
      save_checkpoint(checkpoint_dir());
    }
  }
  if (!evaluated_now) {
    summary.final_eval = evaluate(sched.eval_episodes);
    best_success_ = std::max(best_success_, summary.final_eval.success_rate);
    nlohmann::json row{{"phase", "eval"},
                       {"epoch", epoch_},
                       {"env_steps", env_steps()},
                       {"eval_steps", eval_steps_},
                       {"success_rate", summary.final_eval.success_rate},
                       {"success_std", summary.final_eval.success_std},
                       {"mean_return", summary.final_eval.mean_return},
                       {"mean_length", summary.final_eval.mean_length},
                       {"wall_seconds", seconds_since(start)}};
    write_metrics(row.dump());
    if (sched.success_threshold > 0.0 && summary.final_eval.success_rate >= sched.success_threshold) {
      summary.reached_threshold = true;
    }
  }
  if (!out_dir_.empty()) save_checkpoint(checkpoint_dir());
  summary.env_steps = env_steps();
  summary.epochs = epoch_;
  summary.best_success = best_success_;
  summary.wall_seconds = seconds_since(start);
  return summary;
}

void Trainer::save_checkpoint(const std::filesystem::path& dir) const {
  auto tmp = dir;
  tmp += ".tmp";
  std::filesystem::remove_all(tmp);
  std::filesystem::create_directories(tmp);

  write_text(tmp / "config.txt", to_text(config_));
  {
    torch::serialize::OutputArchive archive;
    tokenizer_->save(archive);
    archive.save_to((tmp / "tokenizer.pt").string());
  }
  {
    torch::serialize::OutputArchive archive;
    write_header(archive, "world_model");
    torch::serialize::OutputArchive model;
    world_model_->save(model);
    archive.write("model", model);
    torch::serialize::OutputArchive optim;
    world_model_opt_->save(optim);
    archive.write("optimizer", optim);
    archive.save_to((tmp / "world_model.pt").string());
  }
  {
    torch::serialize::OutputArchive archive;
    learner_->save(archive);
    archive.save_to((tmp / "behavior.pt").string());
  }
  {
    torch::serialize::OutputArchive archive;
    write_header(archive, "trainer_state");
    write_scalar(archive, "epoch", epoch_);
    write_scalar(archive, "world_model_trained", world_model_trained_ ? 1.0 : 0.0);
    write_scalar(archive, "next_eval", static_cast<double>(next_eval_));
    write_scalar(archive, "eval_steps", static_cast<double>(eval_steps_));
    write_scalar(archive, "best_success", best_success_);
    write_scalar(archive, "episode_return", episode_return_);
    std::ostringstream rng;
    rng << rng_;
    write_string(archive, "sampling_rng", rng.str());
    archive.write("sampling_generator", generator_.get_state());
    auto global = at::detail::getDefaultCPUGenerator();
    {
      std::lock_guard<std::mutex> lock(global.mutex());
      archive.write("global_generator", global.get_state());
    }
    archive.write("stack", stack_.history());
    archive.save_to((tmp / "state.pt").string());
  }
  write_text(tmp / "env.txt", env_->save_state());
  write_text(tmp / "eval_env.txt", eval_env_->save_state());
  {
    std::ofstream out(tmp / "buffer.bin", std::ios::binary);
    buffer_->save(out);
    if (!out) throw std::runtime_error("cannot write replay buffer snapshot");
  }
  std::filesystem::remove_all(dir);
  std::filesystem::rename(tmp, dir);
}

void Trainer::load_checkpoint(const std::filesystem::path& dir) {
  const auto saved = read_text(dir / "config.txt");
  if (strip_schedule(saved) != strip_schedule(to_text(config_))) {
    throw std::runtime_error("checkpoint in " + dir.string() + " was written with a different configuration");
  }
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "tokenizer.pt").string());
    tokenizer_->load(archive);
  }
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "world_model.pt").string());
    check_header(archive, "world_model");
    torch::serialize::InputArchive model;
    archive.read("model", model);
    world_model_->load(model);
    torch::serialize::InputArchive optim;
    archive.read("optimizer", optim);
    world_model_opt_->load(optim);
    world_model_->eval();
  }
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "behavior.pt").string());
    learner_->load(archive);
  }
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "state.pt").string());
    check_header(archive, "trainer_state");
    epoch_ = static_cast<int>(read_scalar(archive, "epoch"));
    world_model_trained_ = read_scalar(archive, "world_model_trained") != 0.0;
    next_eval_ = static_cast<std::int64_t>(read_scalar(archive, "next_eval"));
    eval_steps_ = static_cast<std::int64_t>(read_scalar(archive, "eval_steps"));
    best_success_ = read_scalar(archive, "best_success");
    episode_return_ = static_cast<float>(read_scalar(archive, "episode_return"));
    std::istringstream rng(read_string(archive, "sampling_rng"));
    rng >> rng_;
    torch::Tensor state;
    archive.read("sampling_generator", state);
    generator_.set_state(state);
    archive.read("global_generator", state);
    auto global = at::detail::getDefaultCPUGenerator();
    {
      std::lock_guard<std::mutex> lock(global.mutex());
      global.set_state(state);
    }
    torch::Tensor history;
    archive.read("stack", history);
    stack_.set_history(history);
  }
  env_->load_state(read_text(dir / "env.txt"));
  eval_env_->load_state(read_text(dir / "eval_env.txt"));
  {
    std::ifstream in(dir / "buffer.bin", std::ios::binary);
    if (!in) throw std::runtime_error("missing replay buffer snapshot in " + dir.string());
    buffer_->load(in);
  }
}

bool Trainer::resume() {
  if (out_dir_.empty() || !std::filesystem::exists(checkpoint_dir() / "state.pt")) return false;
  load_checkpoint(checkpoint_dir());
  return true;
}

}  // namespace mawm
