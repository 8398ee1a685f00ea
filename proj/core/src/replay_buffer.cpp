#include "mawm/replay_buffer.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <mutex>
#include <stdexcept>

namespace mawm {

int TrajectorySegment::valid_steps() const {
  return static_cast<int>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

ReplayBuffer::ReplayBuffer(std::int64_t capacity, int n_agents, int obs_dim, int n_actions)
    : capacity_(capacity), n_agents_(n_agents), obs_dim_(obs_dim), n_actions_(n_actions) {
  if (capacity < 1) throw std::invalid_argument("replay buffer capacity must be >= 1");
  if (n_agents < 1 || obs_dim < 1 || n_actions < 1) {
    throw std::invalid_argument("replay buffer dimensions must be positive");
  }
}

void ReplayBuffer::validate(const StepRecord& r) const {
  if (r.obs.size() != static_cast<std::size_t>(n_agents_ * obs_dim_) ||
      r.actions.size() != static_cast<std::size_t>(n_agents_) ||
      r.avail.size() != static_cast<std::size_t>(n_agents_ * n_actions_)) {
    throw std::invalid_argument("step record does not match buffer dimensions");
  }
}

void ReplayBuffer::append(StepRecord record) {
  validate(record);
  std::unique_lock lock(mutex_);
  append_locked(std::move(record));
}

void ReplayBuffer::append(std::span<const StepRecord> records) {
  for (const auto& r : records) validate(r);
  std::unique_lock lock(mutex_);
  for (const auto& r : records) append_locked(r);
}

void ReplayBuffer::append_locked(StepRecord record) {
  if (episodes_.empty() || episodes_.back().closed) {
    episodes_.push_back(Episode{next_episode_id_++, {}, false});
  }
  const bool closes = record.continuation == 0.0F;
  episodes_.back().steps.push_back(std::move(record));
  episodes_.back().closed = closes;
  ++size_;

  while (size_ > capacity_) {
    auto& oldest = episodes_.front();
    oldest.steps.pop_front();
    --size_;
    if (oldest.steps.empty()) episodes_.pop_front();
  }
}

std::int64_t ReplayBuffer::size() const {
  std::shared_lock lock(mutex_);
  return size_;
}

std::int64_t ReplayBuffer::num_episodes() const {
  std::shared_lock lock(mutex_);
  return static_cast<std::int64_t>(episodes_.size());
}

namespace {
std::int64_t windows_in(std::size_t length, int horizon) {
  const auto len = static_cast<std::int64_t>(length);
  return std::max<std::int64_t>(1, len - horizon + 1);
}
}  // namespace

std::int64_t ReplayBuffer::window_count(int horizon) const {
  std::shared_lock lock(mutex_);
  std::int64_t total = 0;
  for (const auto& ep : episodes_) total += windows_in(ep.steps.size(), horizon);
  return total;
}

TrajectorySegment ReplayBuffer::make_segment(const Episode& ep, int start, int horizon) const {
  TrajectorySegment seg;
  seg.horizon = horizon;
  seg.n_agents = n_agents_;
  seg.obs_dim = obs_dim_;
  seg.n_actions = n_actions_;
  seg.episode_id = ep.id;
  seg.start = start;
  const auto H = static_cast<std::size_t>(horizon);
  seg.obs.assign(H * n_agents_ * obs_dim_, 0.0F);
  seg.actions.assign(H * n_agents_, 0);
  seg.rewards.assign(H, 0.0F);
  seg.continuation.assign(H, 0.0F);
  seg.avail.assign(H * n_agents_ * n_actions_, 0);
  seg.valid.assign(H, 0);
  for (int t = 0; t < horizon; ++t) {
    const auto idx = static_cast<std::size_t>(start + t);
    if (idx >= ep.steps.size()) break;
    const auto& r = ep.steps[idx];
    std::copy(r.obs.begin(), r.obs.end(), seg.obs.begin() + static_cast<std::ptrdiff_t>(t * n_agents_ * obs_dim_));
    std::copy(r.actions.begin(), r.actions.end(), seg.actions.begin() + static_cast<std::ptrdiff_t>(t * n_agents_));
    std::copy(r.avail.begin(), r.avail.end(),
              seg.avail.begin() + static_cast<std::ptrdiff_t>(t * n_agents_ * n_actions_));
    seg.rewards[t] = r.reward;
    seg.continuation[t] = r.continuation;
    seg.valid[t] = 1;
  }
  return seg;
}

TrajectorySegment ReplayBuffer::sample_segment(int horizon, std::mt19937_64& rng) const {
  return sample_segments(horizon, 1, rng).front();
}

std::vector<TrajectorySegment> ReplayBuffer::sample_segments(int horizon, int count,
                                                             std::mt19937_64& rng) const {
  if (horizon < 1) throw std::invalid_argument("segment horizon must be >= 1");
  std::shared_lock lock(mutex_);
  if (size_ == 0) throw std::runtime_error("cannot sample from an empty replay buffer");

  std::vector<std::int64_t> cumulative;
  cumulative.reserve(episodes_.size());
  std::int64_t total = 0;
  for (const auto& ep : episodes_) {
    total += windows_in(ep.steps.size(), horizon);
    cumulative.push_back(total);
  }
  std::uniform_int_distribution<std::int64_t> pick(0, total - 1);
  std::vector<TrajectorySegment> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto index = pick(rng);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), index);
    const auto e = static_cast<std::size_t>(it - cumulative.begin());
    const auto before = e == 0 ? 0 : cumulative[e - 1];
    out.push_back(make_segment(episodes_[e], static_cast<int>(index - before), horizon));
  }
  return out;
}

StepRecord ReplayBuffer::sample_step(std::mt19937_64& rng) const { return sample_steps(1, rng).front(); }

std::vector<StepRecord> ReplayBuffer::sample_steps(int count, std::mt19937_64& rng) const {
  std::shared_lock lock(mutex_);
  if (size_ == 0) throw std::runtime_error("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::int64_t> pick(0, size_ - 1);
  std::vector<StepRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    auto index = pick(rng);
    for (const auto& ep : episodes_) {
      const auto len = static_cast<std::int64_t>(ep.steps.size());
      if (index < len) {
        out.push_back(ep.steps[static_cast<std::size_t>(index)]);
        break;
      }
      index -= len;
    }
  }
  return out;
}

std::vector<float> ReplayBuffer::observations(std::int64_t limit) const {
  std::shared_lock lock(mutex_);
  std::vector<float> out;
  std::int64_t taken = 0;
  for (const auto& ep : episodes_) {
    for (const auto& r : ep.steps) {
      if (taken >= limit) return out;
      out.insert(out.end(), r.obs.begin(), r.obs.end());
      ++taken;
    }
  }
  return out;
}

std::vector<std::vector<StepRecord>> ReplayBuffer::episodes() const {
  std::shared_lock lock(mutex_);
  std::vector<std::vector<StepRecord>> out;
  out.reserve(episodes_.size());
  for (const auto& ep : episodes_) out.emplace_back(ep.steps.begin(), ep.steps.end());
  return out;
}

void ReplayBuffer::clear() {
  std::unique_lock lock(mutex_);
  episodes_.clear();
  size_ = 0;
}

namespace {

constexpr std::uint64_t kBufferMagic = 0x6d61776d62756631ULL;

template <typename T>
void put(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void put_vector(std::ostream& out, const std::vector<T>& values) {
  put(out, static_cast<std::uint64_t>(values.size()));
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("truncated replay buffer snapshot");
  return value;
}

template <typename T>
std::vector<T> get_vector(std::istream& in, std::uint64_t expected) {
  const auto size = get<std::uint64_t>(in);
  if (size != expected) throw std::runtime_error("replay buffer snapshot has mismatched record sizes");
  std::vector<T> values(size);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(size * sizeof(T)));
  if (!in) throw std::runtime_error("truncated replay buffer snapshot");
  return values;
}

}  // namespace

void ReplayBuffer::save(std::ostream& out) const {
  std::shared_lock lock(mutex_);
  put(out, kBufferMagic);
  put(out, static_cast<std::int64_t>(n_agents_));
  put(out, static_cast<std::int64_t>(obs_dim_));
  put(out, static_cast<std::int64_t>(n_actions_));
  put(out, next_episode_id_);
  put(out, static_cast<std::uint64_t>(episodes_.size()));
  for (const auto& ep : episodes_) {
    put(out, ep.id);
    put(out, static_cast<std::uint8_t>(ep.closed));
    put(out, static_cast<std::uint64_t>(ep.steps.size()));
    for (const auto& r : ep.steps) {
      put_vector(out, r.obs);
      put_vector(out, r.actions);
      put(out, r.reward);
      put(out, r.continuation);
      put_vector(out, r.avail);
    }
  }
}

void ReplayBuffer::load(std::istream& in) {
  if (get<std::uint64_t>(in) != kBufferMagic) throw std::runtime_error("not a replay buffer snapshot");
  if (get<std::int64_t>(in) != n_agents_ || get<std::int64_t>(in) != obs_dim_ || get<std::int64_t>(in) != n_actions_) {
    throw std::runtime_error("replay buffer snapshot has different dimensions");
  }
  std::deque<Episode> episodes;
  std::int64_t size = 0;
  const auto next_id = get<std::int64_t>(in);
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t e = 0; e < count; ++e) {
    Episode ep;
    ep.id = get<std::int64_t>(in);
    ep.closed = get<std::uint8_t>(in) != 0;
    const auto steps = get<std::uint64_t>(in);
    for (std::uint64_t s = 0; s < steps; ++s) {
      StepRecord r;
      r.obs = get_vector<float>(in, static_cast<std::uint64_t>(n_agents_) * obs_dim_);
      r.actions = get_vector<std::int64_t>(in, static_cast<std::uint64_t>(n_agents_));
      r.reward = get<float>(in);
      r.continuation = get<float>(in);
      r.avail = get_vector<std::uint8_t>(in, static_cast<std::uint64_t>(n_agents_) * n_actions_);
      ep.steps.push_back(std::move(r));
    }
    size += static_cast<std::int64_t>(ep.steps.size());
    episodes.push_back(std::move(ep));
  }
  std::unique_lock lock(mutex_);
  episodes_ = std::move(episodes);
  size_ = size;
  next_episode_id_ = next_id;
}

}  // namespace mawm
