#include "mawm/env.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mawm/discretize.hpp"

namespace mawm {

std::string to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::kCoopSwitch:
      return "coop-switch";
    case EnvKind::kCoupledChain:
      return "coupled-chain";
  }
  return "unknown";
}

EnvKind parse_env_kind(std::string_view name) {
  if (name == "coop-switch") return EnvKind::kCoopSwitch;
  if (name == "coupled-chain") return EnvKind::kCoupledChain;
  throw std::invalid_argument("unknown environment: " + std::string(name));
}

Environment::Environment(EnvSpec spec) : spec_(spec), rng_(spec.seed) {
  if (spec_.n_agents < 2) throw std::invalid_argument("environment requires at least 2 agents");
  if (spec_.episode_limit < 1) throw std::invalid_argument("episode_limit must be >= 1");
}

const JointObservation& Environment::reset() {
  do_reset();
  t_ = 0;
  done_ = false;
  observe(current_);
  return current_;
}

StepOutcome Environment::step(std::span<const std::int64_t> joint_action) {
  if (done_) throw std::logic_error("step() on a finished episode; call reset()");
  if (static_cast<int>(joint_action.size()) != n_agents()) {
    throw std::invalid_argument("joint action has wrong number of agents");
  }
  const int n_act = n_actions();
  for (int i = 0; i < n_agents(); ++i) {
    const auto a = joint_action[static_cast<std::size_t>(i)];
    if (a < 0 || a >= n_act) throw std::out_of_range("action id out of range");
    if (current_.avail[static_cast<std::size_t>(i * n_act + a)] == 0) {
      throw UnavailableActionError("agent " + std::to_string(i) + " chose unavailable action " +
                                   std::to_string(a));
    }
  }

  ++total_steps_;
  ++t_;
  auto [reward, success] = do_step(joint_action);
  done_ = success || t_ >= spec_.episode_limit;

  StepOutcome out;
  observe(current_);
  out.next = current_;
  out.reward = reward;
  out.success = success;
  out.done = done_;
  out.continuation = done_ ? 0.0F : kContinuationLabel;
  return out;
}

std::string Environment::save_state() const {
  std::ostringstream out;
  out.precision(17);
  out << rng_ << ' ' << t_ << ' ' << done_ << ' ' << total_steps_ << ' ';
  write_state(out);
  return out.str();
}

void Environment::load_state(const std::string& state) {
  std::istringstream in(state);
  in >> rng_ >> t_ >> done_ >> total_steps_;
  read_state(in);
  if (!in) throw std::runtime_error("corrupt environment state");
  observe(current_);
}

// ---------------------------------------------------------------------------

CoopSwitchEnv::CoopSwitchEnv(EnvSpec spec) : Environment(spec) {
  const int w = spec.grid_size;
  if (w < 2) throw std::invalid_argument("coop-switch grid_size must be >= 2");
  // Corners first, then cells along the middle row.
  std::vector<Cell> layout = {{0, 0}, {w - 1, w - 1}, {0, w - 1}, {w - 1, 0}};
  for (int x = 0; x < w && static_cast<int>(layout.size()) < spec.n_agents; ++x) {
    Cell c{x, w / 2};
    if (std::find(layout.begin(), layout.end(), c) == layout.end()) layout.push_back(c);
  }
  if (static_cast<int>(layout.size()) < spec.n_agents) {
    throw std::invalid_argument("coop-switch grid too small for the number of agents");
  }
  switches_.assign(layout.begin(), layout.begin() + spec.n_agents);
  positions_ = switches_;
}

void CoopSwitchEnv::do_reset() {
  std::uniform_int_distribution<int> coord(0, spec().grid_size - 1);
  positions_.resize(static_cast<std::size_t>(n_agents()));
  for (auto& p : positions_) {
    p.x = coord(rng());
    p.y = coord(rng());
  }
}

void CoopSwitchEnv::set_positions(std::vector<Cell> positions) {
  if (static_cast<int>(positions.size()) != n_agents()) {
    throw std::invalid_argument("set_positions: wrong agent count");
  }
  positions_ = std::move(positions);
  refresh_observation();
}

bool CoopSwitchEnv::all_on_switch() const {
  for (std::size_t i = 0; i < positions_.size(); ++i) {
    if (!(positions_[i] == switches_[i])) return false;
  }
  return true;
}

std::pair<float, bool> CoopSwitchEnv::do_step(std::span<const std::int64_t> joint_action) {
  for (std::size_t i = 0; i < positions_.size(); ++i) {
    auto& p = positions_[i];
    switch (joint_action[i]) {
      case kNorth:
        ++p.y;
        break;
      case kSouth:
        --p.y;
        break;
      case kEast:
        ++p.x;
        break;
      case kWest:
        --p.x;
        break;
      default:
        break;
    }
  }
  const bool success = all_on_switch();
  return {success ? 1.0F : 0.0F, success};
}

void CoopSwitchEnv::observe(JointObservation& out) const {
  const int n = n_agents();
  const int d = obs_dim();
  const int w = spec().grid_size;
  const float scale = 1.0F / static_cast<float>(w - 1);
  out.obs.assign(static_cast<std::size_t>(n * d), 0.0F);
  out.avail.assign(static_cast<std::size_t>(n * n_actions()), 1);
  for (int i = 0; i < n; ++i) {
    const auto& p = positions_[static_cast<std::size_t>(i)];
    const auto& s = switches_[static_cast<std::size_t>(i)];
    float* o = out.obs.data() + static_cast<std::ptrdiff_t>(i * d);
    int k = 0;
    o[k++] = static_cast<float>(p.x) * scale;
    o[k++] = static_cast<float>(p.y) * scale;
    o[k++] = static_cast<float>(s.x - p.x) * scale;
    o[k++] = static_cast<float>(s.y - p.y) * scale;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto& q = positions_[static_cast<std::size_t>(j)];
      const auto& sq = switches_[static_cast<std::size_t>(j)];
      o[k++] = static_cast<float>(q.x - p.x) * scale;
      o[k++] = static_cast<float>(q.y - p.y) * scale;
      o[k++] = static_cast<float>(sq.x - q.x) * scale;
      o[k++] = static_cast<float>(sq.y - q.y) * scale;
    }
    const bool blocked[4] = {p.y == w - 1, p.y == 0, p.x == w - 1, p.x == 0};
    std::uint8_t* m = out.avail.data() + static_cast<std::ptrdiff_t>(i * n_actions());
    for (int b = 0; b < 4; ++b) {
      o[k++] = blocked[b] ? 1.0F : 0.0F;
      m[b + 1] = blocked[b] ? 0 : 1;
    }
  }
}

void CoopSwitchEnv::write_state(std::ostream& out) const {
  for (const auto& p : positions_) out << p.x << ' ' << p.y << ' ';
}

void CoopSwitchEnv::read_state(std::istream& in) {
  positions_.resize(static_cast<std::size_t>(n_agents()));
  for (auto& p : positions_) in >> p.x >> p.y;
}

// ---------------------------------------------------------------------------

CoupledChainEnv::CoupledChainEnv(EnvSpec spec) : Environment(spec) {
  const int d = spec.state_dim;
  if (d < 1) throw std::invalid_argument("coupled-chain state_dim must be >= 1");
  if (spec.action_bins < 2) throw std::invalid_argument("coupled-chain needs >= 2 action bins");

  // A: damped rotations on consecutive coordinate pairs.
  transition_.assign(static_cast<std::size_t>(d), std::vector<double>(static_cast<std::size_t>(d), 0.0));
  const double damping = 0.9;
  const double angle = 0.3;
  for (int k = 0; k + 1 < d; k += 2) {
    transition_[k][k] = damping * std::cos(angle);
    transition_[k][k + 1] = -damping * std::sin(angle);
    transition_[k + 1][k] = damping * std::sin(angle);
    transition_[k + 1][k + 1] = damping * std::cos(angle);
  }
  if (d % 2 == 1) transition_[d - 1][d - 1] = damping;

  // B drives the even coordinates, C (the other agents' mean action) the odd
  // ones, with gains shrinking along the chain.
  own_gain_.assign(static_cast<std::size_t>(d), 0.0);
  coupling_gain_.assign(static_cast<std::size_t>(d), 0.0);
  for (int k = 0; k < d; ++k) {
    const double gain = 0.4 / (1.0 + static_cast<double>(k / 2));
    if (k % 2 == 0) {
      own_gain_[k] = gain;
    } else {
      coupling_gain_[k] = gain;
    }
  }
  if (d == 1) coupling_gain_[0] = 0.4;
}

double CoupledChainEnv::action_value(std::int64_t bin) const {
  return ActionDiscretizer(-1.0, 1.0, spec().action_bins).undiscretize(bin);
}

void CoupledChainEnv::do_reset() {
  std::uniform_real_distribution<double> init(-1.0, 1.0);
  states_.assign(static_cast<std::size_t>(n_agents()),
                 std::vector<double>(static_cast<std::size_t>(spec().state_dim), 0.0));
  for (auto& s : states_) {
    for (auto& v : s) v = init(rng());
  }
}

std::pair<float, bool> CoupledChainEnv::do_step(std::span<const std::int64_t> joint_action) {
  const int n = n_agents();
  const int d = spec().state_dim;
  std::vector<double> u(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) u[i] = action_value(joint_action[static_cast<std::size_t>(i)]);
  const double total = std::accumulate(u.begin(), u.end(), 0.0);

  std::normal_distribution<double> noise(0.0, spec().noise_std);
  auto next = states_;
  for (int i = 0; i < n; ++i) {
    const double others = (total - u[i]) / static_cast<double>(n - 1);
    for (int k = 0; k < d; ++k) {
      double v = 0.0;
      for (int m = 0; m < d; ++m) v += transition_[k][m] * states_[i][m];
      v += own_gain_[k] * u[i] + coupling_gain_[k] * others + noise(rng());
      next[i][k] = v;
    }
  }
  states_ = std::move(next);

  double norm_sum = 0.0;
  for (const auto& s : states_) {
    double sq = 0.0;
    for (double v : s) sq += v * v;
    norm_sum += std::sqrt(sq);
  }
  return {static_cast<float>(-norm_sum / n), false};
}

void CoupledChainEnv::observe(JointObservation& out) const {
  const int n = n_agents();
  const int d = spec().state_dim;
  out.obs.resize(static_cast<std::size_t>(n * d));
  out.avail.assign(static_cast<std::size_t>(n * n_actions()), 1);
  for (int i = 0; i < n && i < static_cast<int>(states_.size()); ++i) {
    for (int k = 0; k < d; ++k) out.obs[i * d + k] = static_cast<float>(states_[i][k]);
  }
}

void CoupledChainEnv::write_state(std::ostream& out) const {
  for (const auto& s : states_) {
    for (double v : s) out << v << ' ';
  }
}

void CoupledChainEnv::read_state(std::istream& in) {
  states_.assign(static_cast<std::size_t>(n_agents()),
                 std::vector<double>(static_cast<std::size_t>(spec().state_dim), 0.0));
  for (auto& s : states_) {
    for (auto& v : s) in >> v;
  }
}

std::unique_ptr<Environment> make_env(const EnvSpec& spec) {
  switch (spec.kind) {
    case EnvKind::kCoopSwitch:
      return std::make_unique<CoopSwitchEnv>(spec);
    case EnvKind::kCoupledChain:
      return std::make_unique<CoupledChainEnv>(spec);
  }
  throw std::invalid_argument("unknown environment kind");
}

}  // namespace mawm
