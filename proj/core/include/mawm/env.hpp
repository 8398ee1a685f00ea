#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mawm {

enum class EnvKind { kCoopSwitch, kCoupledChain };

std::string to_string(EnvKind kind);
EnvKind parse_env_kind(std::string_view name);

/// Static description of a built-in cooperative environment.
struct EnvSpec {
  EnvKind kind = EnvKind::kCoopSwitch;
  int n_agents = 2;
  int episode_limit = 50;
  std::uint64_t seed = 0;

  // coop-switch
  int grid_size = 5;

  // coupled-chain
  int state_dim = 4;
  int action_bins = 5;
  double noise_std = 0.01;
};

/// Continuation label written on non-terminal steps.
inline constexpr float kContinuationLabel = 0.99F;

/// Joint observation and availability masks of all agents at one timestep.
/// `obs` is row-major [n_agents][obs_dim], `avail` is [n_agents][n_actions].
struct JointObservation {
  std::vector<float> obs;
  std::vector<std::uint8_t> avail;
};

/// Result of one environment transition.
struct StepOutcome {
  JointObservation next;
  float reward = 0.0F;
  float continuation = kContinuationLabel;
  bool done = false;
  bool success = false;
};

/// One buffered transition: the joint observation and masks the agents saw,
/// the joint action taken, the team reward and the continuation label.
struct StepRecord {
  std::vector<float> obs;
  std::vector<std::int64_t> actions;
  float reward = 0.0F;
  float continuation = kContinuationLabel;
  std::vector<std::uint8_t> avail;
};

class UnavailableActionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Environment {
 public:
  explicit Environment(EnvSpec spec);
  virtual ~Environment() = default;

  Environment(const Environment&) = delete;
  Environment& operator=(const Environment&) = delete;

  const EnvSpec& spec() const { return spec_; }
  int n_agents() const { return spec_.n_agents; }
  virtual int obs_dim() const = 0;
  virtual int n_actions() const = 0;

  const JointObservation& reset();

  /// Advances one step. Rejects actions that are masked out for the acting
  /// agent. Stepping a finished episode is an error; call reset() first.
  StepOutcome step(std::span<const std::int64_t> joint_action);

  const JointObservation& current() const { return current_; }
  int t() const { return t_; }
  bool episode_done() const { return done_; }

  /// Number of step() calls over the lifetime of this instance.
  std::int64_t total_steps() const { return total_steps_; }

  /// Opaque snapshot of the dynamic state (RNG included).
  std::string save_state() const;
  void load_state(const std::string& state);

 protected:
  virtual void do_reset() = 0;
  /// Applies a validated joint action; returns the team reward and whether
  /// the task was solved on this step.
  virtual std::pair<float, bool> do_step(std::span<const std::int64_t> joint_action) = 0;
  virtual void observe(JointObservation& out) const = 0;
  virtual void write_state(std::ostream& out) const = 0;
  virtual void read_state(std::istream& in) = 0;

  std::mt19937_64& rng() { return rng_; }
  void refresh_observation() { observe(current_); }

 private:
  EnvSpec spec_;
  std::mt19937_64 rng_;
  JointObservation current_;
  int t_ = 0;
  bool done_ = true;
  std::int64_t total_steps_ = 0;
};

/// Two or more agents on a w x w grid, each with an assigned switch cell.
/// Team reward 1 when every agent stands on its switch at the same time.
class CoopSwitchEnv final : public Environment {
 public:
  explicit CoopSwitchEnv(EnvSpec spec);

  int obs_dim() const override { return 4 + 4 * (n_agents() - 1) + 4; }
  int n_actions() const override { return 5; }

  enum Action : std::int64_t { kStay = 0, kNorth = 1, kSouth = 2, kEast = 3, kWest = 4 };

  struct Cell {
    int x = 0;
    int y = 0;
    bool operator==(const Cell&) const = default;
  };

  const std::vector<Cell>& positions() const { return positions_; }
  const std::vector<Cell>& switches() const { return switches_; }
  void set_positions(std::vector<Cell> positions);

 protected:
  void do_reset() override;
  std::pair<float, bool> do_step(std::span<const std::int64_t> joint_action) override;
  void observe(JointObservation& out) const override;
  void write_state(std::ostream& out) const override;
  void read_state(std::istream& in) override;

 private:
  bool all_on_switch() const;

  std::vector<Cell> switches_;
  std::vector<Cell> positions_;
};

/// Linear per-agent dynamics s <- A s + B u_i + C mean_{j != i} u_j + noise,
/// observed directly; reward is -mean_i ||s_i||.
class CoupledChainEnv final : public Environment {
 public:
  explicit CoupledChainEnv(EnvSpec spec);

  int obs_dim() const override { return spec().state_dim; }
  int n_actions() const override { return spec().action_bins; }

  const std::vector<std::vector<double>>& states() const { return states_; }
  double action_value(std::int64_t bin) const;

 protected:
  void do_reset() override;
  std::pair<float, bool> do_step(std::span<const std::int64_t> joint_action) override;
  void observe(JointObservation& out) const override;
  void write_state(std::ostream& out) const override;
  void read_state(std::istream& in) override;

 private:
  std::vector<std::vector<double>> transition_;  // A, state_dim x state_dim
  std::vector<double> own_gain_;                 // B
  std::vector<double> coupling_gain_;            // C
  std::vector<std::vector<double>> states_;
};

std::unique_ptr<Environment> make_env(const EnvSpec& spec);

}  // namespace mawm
