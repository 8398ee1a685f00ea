#include "mawm/episode_log.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace mawm {

using nlohmann::json;

EpisodeLogWriter::EpisodeLogWriter(const std::filesystem::path& path, const EpisodeLogHeader& header)
    : header_(header), out_(path) {
  if (!out_) throw std::runtime_error("cannot open episode log for writing: " + path.string());
  json h = {{"schema", "mawm.episode_log"}, {"version", kEpisodeLogVersion}, {"env", header.env},
            {"n_agents", header.n_agents},  {"obs_dim", header.obs_dim},   {"n_actions", header.n_actions}};
  out_ << h.dump() << '\n';
}

void EpisodeLogWriter::write(int episode, int step, const StepRecord& r) {
  const int n = header_.n_agents;
  json obs = json::array();
  json mask = json::array();
  for (int i = 0; i < n; ++i) {
    obs.push_back(std::vector<float>(r.obs.begin() + i * header_.obs_dim, r.obs.begin() + (i + 1) * header_.obs_dim));
    std::vector<int> m(r.avail.begin() + i * header_.n_actions, r.avail.begin() + (i + 1) * header_.n_actions);
    mask.push_back(m);
  }
  json line = {{"episode", episode}, {"step", step},          {"obs", obs},
               {"actions", r.actions}, {"reward", r.reward}, {"continuation", r.continuation},
               {"mask", mask}};
  out_ << line.dump() << '\n';
}

EpisodeLog read_episode_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open episode log: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty episode log: " + path.string());
  const auto h = json::parse(line);
  if (h.value("schema", "") != "mawm.episode_log") throw std::runtime_error("not an episode log: " + path.string());
  if (h.at("version").get<int>() != kEpisodeLogVersion) throw std::runtime_error("unsupported episode log version");

  EpisodeLog log;
  log.header.env = h.at("env").get<std::string>();
  log.header.n_agents = h.at("n_agents").get<int>();
  log.header.obs_dim = h.at("obs_dim").get<int>();
  log.header.n_actions = h.at("n_actions").get<int>();

  int current_episode = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    StepRecord r;
    for (const auto& row : j.at("obs")) {
      const auto v = row.get<std::vector<float>>();
      r.obs.insert(r.obs.end(), v.begin(), v.end());
    }
    for (const auto& row : j.at("mask")) {
      for (int m : row.get<std::vector<int>>()) r.avail.push_back(static_cast<std::uint8_t>(m != 0));
    }
    r.actions = j.at("actions").get<std::vector<std::int64_t>>();
    r.reward = j.at("reward").get<float>();
    r.continuation = j.at("continuation").get<float>();
    if (r.obs.size() != static_cast<std::size_t>(log.header.n_agents * log.header.obs_dim) ||
        r.avail.size() != static_cast<std::size_t>(log.header.n_agents * log.header.n_actions) ||
        r.actions.size() != static_cast<std::size_t>(log.header.n_agents)) {
      throw std::runtime_error("episode log record has wrong dimensions");
    }
    const int ep = j.at("episode").get<int>();
    if (ep != current_episode) {
      log.episodes.emplace_back();
      current_episode = ep;
    }
    log.episodes.back().push_back(std::move(r));
  }
  return log;
}

EpisodeLog read_episode_logs(const std::filesystem::path& dir) {
  if (std::filesystem::is_regular_file(dir)) return read_episode_log(dir);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".jsonl") files.push_back(entry.path());
  }
  if (files.empty()) throw std::runtime_error("no *.jsonl episode logs in " + dir.string());
  std::sort(files.begin(), files.end());
  EpisodeLog merged = read_episode_log(files.front());
  for (std::size_t i = 1; i < files.size(); ++i) {
    auto next = read_episode_log(files[i]);
    if (next.header.n_agents != merged.header.n_agents || next.header.obs_dim != merged.header.obs_dim ||
        next.header.n_actions != merged.header.n_actions) {
      throw std::runtime_error("episode logs disagree on dimensions: " + files[i].string());
    }
    for (auto& ep : next.episodes) merged.episodes.push_back(std::move(ep));
  }
  return merged;
}

}  // namespace mawm
