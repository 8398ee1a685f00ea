#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <random>
#include <shared_mutex>
#include <span>
#include <vector>

#include "mawm/env.hpp"

namespace mawm {

/// A fixed-horizon window of one episode. Steps past the end of a short
/// episode are zero-filled and flagged invalid in `valid`.
struct TrajectorySegment {
  int horizon = 0;
  int n_agents = 0;
  int obs_dim = 0;
  int n_actions = 0;
  std::vector<float> obs;              // [H][n][obs_dim]
  std::vector<std::int64_t> actions;   // [H][n]
  std::vector<float> rewards;          // [H]
  std::vector<float> continuation;     // [H]
  std::vector<std::uint8_t> avail;     // [H][n][n_actions]
  std::vector<std::uint8_t> valid;     // [H]
  std::int64_t episode_id = -1;
  int start = 0;

  int valid_steps() const;
};

/// Ring buffer of real transitions grouped into episodes. A record whose
/// continuation label is 0 closes its episode. Oldest steps are evicted first
/// once `capacity` transitions are stored.
///
/// One writer and any number of readers may use the buffer concurrently; each
/// sampling call sees a consistent snapshot.
class ReplayBuffer {
 public:
  ReplayBuffer(std::int64_t capacity, int n_agents, int obs_dim, int n_actions);

  void append(StepRecord record);
  void append(std::span<const StepRecord> records);

  std::int64_t size() const;
  std::int64_t capacity() const { return capacity_; }
  std::int64_t num_episodes() const;
  int n_agents() const { return n_agents_; }
  int obs_dim() const { return obs_dim_; }
  int n_actions() const { return n_actions_; }

  /// Number of distinct windows of length `horizon` (episodes shorter than the
  /// horizon contribute one padded window).
  std::int64_t window_count(int horizon) const;

  /// Uniform over all windows of all stored episodes. Never mixes episodes.
  TrajectorySegment sample_segment(int horizon, std::mt19937_64& rng) const;
  std::vector<TrajectorySegment> sample_segments(int horizon, int count, std::mt19937_64& rng) const;

  /// Uniform over stored steps.
  StepRecord sample_step(std::mt19937_64& rng) const;
  std::vector<StepRecord> sample_steps(int count, std::mt19937_64& rng) const;

  /// Oldest-first joint observations, at most `limit` steps.
  std::vector<float> observations(std::int64_t limit) const;

  /// Copy of all stored episodes, oldest first.
  std::vector<std::vector<StepRecord>> episodes() const;

  void clear();

  /// Binary snapshot of the stored episodes; load() requires matching
  /// dimensions and replaces the current contents.
  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  struct Episode {
    std::int64_t id = 0;
    std::deque<StepRecord> steps;
    bool closed = false;
  };

  void validate(const StepRecord& record) const;
  void append_locked(StepRecord record);
  TrajectorySegment make_segment(const Episode& ep, int start, int horizon) const;

  std::int64_t capacity_;
  int n_agents_;
  int obs_dim_;
  int n_actions_;
  std::deque<Episode> episodes_;
  std::int64_t size_ = 0;
  std::int64_t next_episode_id_ = 0;
  mutable std::shared_mutex mutex_;
};

}  // namespace mawm
