#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mawm/env.hpp"

namespace mawm {

/// Line-delimited JSON episode log.
///
/// Line 1 is a header:
///   {"schema":"mawm.episode_log","version":1,"env":"coop-switch",
///    "n_agents":2,"obs_dim":12,"n_actions":5}
/// Every following line is one step:
///   {"episode":0,"step":3,"obs":[[...],[...]],"actions":[1,0],
///    "reward":0.0,"continuation":0.99,"mask":[[1,1,0,1,1],[...]]}
/// `obs` and `mask` are per agent; mask entries are 0/1.
struct EpisodeLogHeader {
  std::string env;
  int n_agents = 0;
  int obs_dim = 0;
  int n_actions = 0;
};

inline constexpr int kEpisodeLogVersion = 1;

class EpisodeLogWriter {
 public:
  EpisodeLogWriter(const std::filesystem::path& path, const EpisodeLogHeader& header);
  void write(int episode, int step, const StepRecord& record);
  void flush() { out_.flush(); }

 private:
  EpisodeLogHeader header_;
  std::ofstream out_;
};

struct EpisodeLog {
  EpisodeLogHeader header;
  std::vector<std::vector<StepRecord>> episodes;
};

EpisodeLog read_episode_log(const std::filesystem::path& path);

/// Reads every *.jsonl log in a directory (sorted by name); all logs must share
/// the same dimensions.
EpisodeLog read_episode_logs(const std::filesystem::path& dir);

}  // namespace mawm
