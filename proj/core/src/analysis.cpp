#include "mawm/analysis.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mawm {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

// ---------------------------------------------------------------------------
// .npy

void write_npy(const std::filesystem::path& path, const torch::Tensor& tensor) {
  auto t = tensor.detach().cpu().contiguous();
  std::string descr;
  switch (t.scalar_type()) {
    case torch::kFloat32: descr = "<f4"; break;
    case torch::kFloat64: descr = "<f8"; break;
    case torch::kInt64: descr = "<i8"; break;
    case torch::kBool: descr = "|b1"; break;
    default: throw std::invalid_argument("write_npy: unsupported dtype");
  }
  std::string shape = "(";
  for (std::int64_t d = 0; d < t.dim(); ++d) shape += std::to_string(t.size(d)) + (t.dim() == 1 ? ",)" : d + 1 < t.dim() ? ", " : ")");
  if (t.dim() == 0) shape += ")";
  std::string header = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  auto out = open_out(path);
  out.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out << header;
  out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
}

torch::Tensor read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "\x93NUMPY\x01\x00", 8) != 0) {
    throw std::runtime_error("not an .npy v1 file: " + path.string());
  }
  unsigned char len_bytes[2];
  in.read(reinterpret_cast<char*>(len_bytes), 2);
  std::string header(static_cast<std::size_t>(len_bytes[0] | (len_bytes[1] << 8)), '\0');
  in.read(header.data(), static_cast<std::streamsize>(header.size()));
  torch::Dtype dtype;
  if (header.find("'<f4'") != std::string::npos) dtype = torch::kFloat32;
  else if (header.find("'<f8'") != std::string::npos) dtype = torch::kFloat64;
  else if (header.find("'<i8'") != std::string::npos) dtype = torch::kInt64;
  else if (header.find("'|b1'") != std::string::npos) dtype = torch::kBool;
  else throw std::runtime_error("unsupported .npy dtype in " + path.string());
  if (header.find("'fortran_order': False") == std::string::npos) throw std::runtime_error("fortran order .npy");
  const auto open = header.find('(', header.find("'shape'"));
  const auto close = header.find(')', open);
  std::vector<std::int64_t> shape;
  std::istringstream dims(header.substr(open + 1, close - open - 1));
  std::string item;
  while (std::getline(dims, item, ',')) {
    if (item.find_first_not_of(" ") != std::string::npos) shape.push_back(std::stoll(item));
  }
  auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
  if (!in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()))) {
    throw std::runtime_error("truncated .npy file: " + path.string());
  }
  return t;
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string viridis(double v) {
  static constexpr std::array<std::array<double, 3>, 5> anchors{
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  v = std::clamp(v, 0.0, 1.0) * 4.0;
  const auto i = std::min<std::size_t>(3, static_cast<std::size_t>(v));
  const double f = v - static_cast<double>(i);
  std::ostringstream s;
  s << "rgb(";
  for (int c = 0; c < 3; ++c) {
    s << static_cast<int>(std::lround(anchors[i][c] + f * (anchors[i + 1][c] - anchors[i][c]))) << (c < 2 ? "," : ")");
  }
  return s.str();
}

constexpr std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace

void write_heatmap_svg(const std::filesystem::path& path, const torch::Tensor& map, const std::string& title) {
  if (map.dim() != 2) throw std::invalid_argument("heatmap needs a 2-D tensor");
  auto m = map.detach().cpu().to(torch::kFloat64).contiguous();
  const auto rows = m.size(0), cols = m.size(1);
  const double lo = m.min().item<double>(), hi = m.max().item<double>();
  const double range = hi > lo ? hi - lo : 1.0;
  const double cell = std::clamp(480.0 / static_cast<double>(std::max(rows, cols)), 2.0, 24.0);
  const double top = 30.0, left = 10.0;
  const double width = left * 2 + cell * static_cast<double>(cols), height = top + 10 + cell * static_cast<double>(rows);
  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\"" << fmt(height)
      << "\" shape-rendering=\"crispEdges\">\n";
  out << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(title)
      << " [" << fmt(lo, 4) << ", " << fmt(hi, 4) << "]</text>\n";
  const auto* data = m.data_ptr<double>();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      out << "<rect x=\"" << fmt(left + cell * static_cast<double>(c)) << "\" y=\""
          << fmt(top + cell * static_cast<double>(r)) << "\" width=\"" << fmt(cell) << "\" height=\"" << fmt(cell)
          << "\" fill=\"" << viridis((data[r * cols + c] - lo) / range) << "\"/>\n";
    }
  }
  out << "</svg>\n";
}

void write_line_plot_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                         const std::string& y_label, const std::vector<PlotSeries>& series) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double spread = i < s.spread.size() ? s.spread[i] : 0.0;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - spread);
      y1 = std::max(y1, s.y[i] + spread);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double W = 640, H = 400, ml = 70, mr = 150, mt = 30, mb = 50;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };
  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << ml << "\" y=\"18\" font-size=\"13\">" << xml_escape(title) << "</text>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    out << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << H - mb + 15 << "\" text-anchor=\"middle\">" << fmt(xv, 4)
        << "</text>\n";
    out << "<text x=\"" << ml - 5 << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">" << fmt(yv, 4)
        << "</text>\n";
  }
  out << "<text x=\"" << fmt((ml + W - mr) / 2) << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
      << xml_escape(x_label) << "</text>\n";
  out << "<text transform=\"translate(15," << fmt((mt + H - mb) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % kPalette.size()];
    if (!s.spread.empty()) {
      out << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) out << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i] + s.spread[i])) << ' ';
      for (std::size_t i = s.x.size(); i-- > 0;) out << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i] - s.spread[i])) << ' ';
      out << "\"/>\n";
    }
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) out << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i])) << ' ';
    out << "\"/>\n";
    const double ly = mt + 15.0 * static_cast<double>(k);
    out << "<line x1=\"" << W - mr + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - mr + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - mr + 35 << "\" y=\"" << ly + 4 << "\">" << xml_escape(s.name) << "</text>\n";
  }
  out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Compounding error

WorldModelPredictor::WorldModelPredictor(WorldModel model, ObservationTokenizer& tokenizer)
    : model_(std::move(model)), tokenizer_(tokenizer) {}

torch::Tensor WorldModelPredictor::predict(const torch::Tensor& obs0, const torch::Tensor& actions) {
  const auto h = actions.size(1);
  if (h > max_steps()) {
    throw ContextOverflowError("cannot predict " + std::to_string(h) + " steps with a context of " +
                               std::to_string(model_->config().horizon));
  }
  torch::NoGradGuard guard;
  const bool was_training = model_->is_training();
  model_->eval();
  WorldModelRollout rollout(model_, SamplingOptions{true, 1.0}, at::make_generator<at::CPUGeneratorImpl>(0));
  rollout.start(tokenizer_.encode(obs0));
  std::vector<torch::Tensor> preds;
  for (std::int64_t t = 0; t < h; ++t) {
    rollout.act(actions.select(1, t));
    preds.push_back(tokenizer_.decode(rollout.next_observation().tokens).to(torch::kFloat32));
  }
  model_->train(was_training);
  return torch::stack(preds, 1);
}

std::vector<double> CompoundingError::per_step() const {
  auto m = mean.to(torch::kFloat64).mean({1, 2});
  return {m.data_ptr<double>(), m.data_ptr<double>() + m.numel()};
}

CompoundingError compounding_error(TrajectoryPredictor& predictor,
                                   const std::vector<std::vector<StepRecord>>& episodes, int horizon,
                                   int segments, std::mt19937_64& rng, int batch_size) {
  if (horizon < 1) throw std::invalid_argument("compounding_error: horizon must be positive");
  if (horizon > predictor.max_steps()) {
    throw std::invalid_argument("compounding_error: horizon " + std::to_string(horizon) +
                                " exceeds the predictor's " + std::to_string(predictor.max_steps()) + " steps");
  }
  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    for (std::size_t s = 0; s + static_cast<std::size_t>(horizon) < episodes[e].size(); ++s) windows.emplace_back(e, s);
  }
  if (windows.empty()) throw std::invalid_argument("compounding_error: no episode is longer than the horizon");
  const auto& first = episodes[windows.front().first].front();
  const auto n = static_cast<std::int64_t>(first.actions.size());
  const auto d = static_cast<std::int64_t>(first.obs.size()) / n;

  std::uniform_int_distribution<std::size_t> pick(0, windows.size() - 1);
  std::vector<std::pair<std::size_t, std::size_t>> chosen(static_cast<std::size_t>(segments));
  for (auto& w : chosen) w = windows[pick(rng)];

  auto sum = torch::zeros({horizon, n, d}, torch::kFloat64);
  auto sum_sq = torch::zeros({horizon, n, d}, torch::kFloat64);
  for (std::size_t begin = 0; begin < chosen.size(); begin += static_cast<std::size_t>(batch_size)) {
    const auto B = static_cast<std::int64_t>(std::min(chosen.size() - begin, static_cast<std::size_t>(batch_size)));
    auto obs0 = torch::empty({B, n, d});
    auto truth = torch::empty({B, horizon, n, d});
    auto actions = torch::empty({B, horizon, n}, torch::kInt64);
    for (std::int64_t b = 0; b < B; ++b) {
      const auto [e, s] = chosen[begin + static_cast<std::size_t>(b)];
      const auto& ep = episodes[e];
      std::copy(ep[s].obs.begin(), ep[s].obs.end(), obs0[b].data_ptr<float>());
      for (int t = 0; t < horizon; ++t) {
        const auto& rec = ep[s + static_cast<std::size_t>(t)];
        std::copy(rec.actions.begin(), rec.actions.end(), actions[b][t].data_ptr<std::int64_t>());
        const auto& next = ep[s + static_cast<std::size_t>(t) + 1].obs;
        std::copy(next.begin(), next.end(), truth[b][t].data_ptr<float>());
      }
    }
    auto err = (predictor.predict(obs0, actions) - truth).abs().to(torch::kFloat64);
    sum += err.sum(0);
    sum_sq += err.square().sum(0);
  }
  CompoundingError out;
  out.segments = segments;
  out.mean = sum / segments;
  out.std = (sum_sq / segments - out.mean.square()).clamp_min(0.0).sqrt();
  return out;
}

std::vector<std::vector<StepRecord>> record_episodes(Environment& env, Actor& actor, ObservationTokenizer& tokenizer,
                                                     int stack, int episodes, ActMode mode,
                                                     at::Generator& generator) {
  const std::int64_t n = env.n_agents(), d = env.obs_dim(), A = env.n_actions();
  auto recon = [&](const std::vector<float>& obs) {
    auto t = torch::from_blob(const_cast<float*>(obs.data()), {n, d}, torch::kFloat32).clone();
    return tokenizer.ready() ? tokenizer.reconstruct(t).to(torch::kFloat32) : t;
  };
  std::vector<std::vector<StepRecord>> out;
  ObservationStack history(stack);
  for (int e = 0; e < episodes; ++e) {
    env.reset();
    history.reset(recon(env.current().obs));
    std::vector<StepRecord> episode;
    while (true) {
      StepRecord rec;
      rec.obs = env.current().obs;
      rec.avail = env.current().avail;
      auto mask = torch::from_blob(rec.avail.data(), {n, A}, torch::kUInt8).to(torch::kBool);
      auto choice = actor->act(history.flat(), mask, mode, generator);
      rec.actions.assign(choice.actions.data_ptr<std::int64_t>(), choice.actions.data_ptr<std::int64_t>() + n);
      auto outcome = env.step(rec.actions);
      rec.reward = outcome.reward;
      rec.continuation = outcome.continuation;
      episode.push_back(std::move(rec));
      if (outcome.done) {
        // Terminal observation with a no-op action.
        StepRecord last;
        last.obs = outcome.next.obs;
        last.avail = outcome.next.avail;
        last.actions.assign(static_cast<std::size_t>(n), 0);
        last.continuation = 0.0F;
        episode.push_back(std::move(last));
        break;
      }
      history.push(recon(outcome.next.obs));
    }
    out.push_back(std::move(episode));
  }
  return out;
}

void write_compounding_error(const std::filesystem::path& dir, const CompoundingError& error) {
  std::filesystem::create_directories(dir);
  write_npy(dir / "error_mean.npy", error.mean);
  write_npy(dir / "error_std.npy", error.std);
  const auto h = error.mean.size(0), n = error.mean.size(1), d = error.mean.size(2);
  auto mean = error.mean.contiguous(), std = error.std.contiguous();
  {
    auto out = open_out(dir / "error.csv");
    out << "step,agent,dim,mean_l1,std_l1\n";
    for (std::int64_t t = 0; t < h; ++t)
      for (std::int64_t a = 0; a < n; ++a)
        for (std::int64_t k = 0; k < d; ++k)
          out << t + 1 << ',' << a << ',' << k << ',' << fmt(mean[t][a][k].item<double>()) << ','
              << fmt(std[t][a][k].item<double>()) << '\n';
  }
  const auto steps = error.per_step();
  auto spread = error.std.mean({1, 2});
  PlotSeries series{"mean L1", {}, steps, {}};
  {
    auto out = open_out(dir / "error_steps.csv");
    out << "step,mean_l1,mean_std_l1\n";
    for (std::size_t t = 0; t < steps.size(); ++t) {
      series.x.push_back(static_cast<double>(t + 1));
      series.spread.push_back(spread[static_cast<std::int64_t>(t)].item<double>());
      out << t + 1 << ',' << fmt(steps[t]) << ',' << fmt(series.spread.back()) << '\n';
    }
  }
  write_line_plot_svg(dir / "error.svg", "Compounding error (" + std::to_string(error.segments) + " segments)",
                      "prediction step", "L1 per dimension", {series});
}

// ---------------------------------------------------------------------------
// Ablations

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kCentralized: return "centralized_vs_decentralized";
    case AblationAxis::kAggregation: return "aggregation_on_off";
    case AblationAxis::kTokenizer: return "vq_vs_bins";
    case AblationAxis::kAggregator: return "perceiver_vs_selfattn";
  }
  return "unknown";
}

AblationAxis parse_ablation_axis(const std::string& name) {
  for (auto axis : {AblationAxis::kCentralized, AblationAxis::kAggregation, AblationAxis::kTokenizer,
                    AblationAxis::kAggregator}) {
    if (to_string(axis) == name) return axis;
  }
  throw std::invalid_argument("unknown ablation axis: " + name);
}

std::vector<AblationVariant> ablation_variants(AblationAxis axis, const RunConfig& base) {
  AblationVariant a{"", base}, b{"", base};
  switch (axis) {
    case AblationAxis::kCentralized:
      a.name = "decentralized";
      a.config.dynamics.centralized = false;
      if (a.config.dynamics.aggregator.kind == AggregatorKind::kNone) {
        a.config.dynamics.aggregator.kind = AggregatorKind::kPerceiver;
      }
      b.name = "centralized";
      b.config.dynamics.centralized = true;
      b.config.dynamics.aggregator.kind = AggregatorKind::kNone;
      break;
    case AblationAxis::kAggregation:
      a.name = "aggregation_on";
      a.config.dynamics.aggregator.kind = AggregatorKind::kPerceiver;
      b.name = "aggregation_off";
      b.config.dynamics.aggregator.kind = AggregatorKind::kNone;
      break;
    case AblationAxis::kTokenizer:
      a.name = "vq";
      a.config.tokenizer.kind = TokenizerKind::kVq;
      b.name = "bins";
      b.config.tokenizer.kind = TokenizerKind::kBins;
      break;
    case AblationAxis::kAggregator:
      a.name = "perceiver";
      a.config.dynamics.aggregator.kind = AggregatorKind::kPerceiver;
      b.name = "self_attention";
      b.config.dynamics.aggregator.kind = AggregatorKind::kSelfAttention;
      break;
  }
  return {a, b};
}

void check_matched_budgets(const std::vector<AblationVariant>& variants) {
  static const std::set<std::string> axis_keys{"dynamics.centralized", "aggregator.kind", "tokenizer.kind"};
  auto lines = [](const RunConfig& c) {
    std::map<std::string, std::string> kv;
    std::istringstream in(to_text(c));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return kv;
  };
  if (variants.empty()) return;
  const auto ref = lines(variants.front().config);
  for (std::size_t i = 1; i < variants.size(); ++i) {
    for (const auto& [key, value] : lines(variants[i].config)) {
      if (ref.at(key) != value && !axis_keys.count(key)) {
        throw std::invalid_argument("ablation variants " + variants.front().name + " and " + variants[i].name +
                                    " differ in " + key + " (" + ref.at(key) + " vs " + value + ")");
      }
    }
  }
}

namespace {

/// Uniform random joint actions over the available ones; identical across
/// variants for a given seed.
void collect_random(Environment& env, ReplayBuffer& buffer, std::int64_t steps, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(env.n_agents());
  const auto A = static_cast<std::size_t>(env.n_actions());
  if (env.episode_done() || env.t() == 0) env.reset();
  for (std::int64_t i = 0; i < steps; ++i) {
    StepRecord rec;
    rec.obs = env.current().obs;
    rec.avail = env.current().avail;
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<std::int64_t> legal;
      for (std::size_t k = 0; k < A; ++k) {
        if (rec.avail[a * A + k] != 0) legal.push_back(static_cast<std::int64_t>(k));
      }
      rec.actions.push_back(legal[std::uniform_int_distribution<std::size_t>(0, legal.size() - 1)(rng)]);
    }
    auto outcome = env.step(rec.actions);
    rec.reward = outcome.reward;
    rec.continuation = outcome.continuation;
    buffer.append(std::move(rec));
    if (outcome.done) env.reset();
  }
}

std::vector<std::vector<StepRecord>> collect_random_episodes(Environment& env, int episodes, std::mt19937_64& rng) {
  ReplayBuffer buffer(static_cast<std::int64_t>(episodes) * env.spec().episode_limit + 1, env.n_agents(),
                      env.obs_dim(), env.n_actions());
  std::vector<std::vector<StepRecord>> out;
  env.reset();
  while (static_cast<int>(out.size()) < episodes) {
    const auto n = static_cast<std::size_t>(env.n_agents()), A = static_cast<std::size_t>(env.n_actions());
    std::vector<StepRecord> ep;
    while (true) {
      StepRecord rec;
      rec.obs = env.current().obs;
      rec.avail = env.current().avail;
      for (std::size_t a = 0; a < n; ++a) {
        std::vector<std::int64_t> legal;
        for (std::size_t k = 0; k < A; ++k) {
          if (rec.avail[a * A + k] != 0) legal.push_back(static_cast<std::int64_t>(k));
        }
        rec.actions.push_back(legal[std::uniform_int_distribution<std::size_t>(0, legal.size() - 1)(rng)]);
      }
      auto outcome = env.step(rec.actions);
      rec.reward = outcome.reward;
      rec.continuation = outcome.continuation;
      ep.push_back(std::move(rec));
      if (outcome.done) {
        StepRecord last;
        last.obs = outcome.next.obs;
        last.avail = outcome.next.avail;
        last.actions.assign(n, 0);
        last.continuation = 0.0F;
        ep.push_back(std::move(last));
        env.reset();
        break;
      }
    }
    out.push_back(std::move(ep));
  }
  return out;
}

AblationRun world_model_study(const AblationVariant& variant, std::uint64_t seed, const AblationOptions& options) {
  RunConfig config = variant.config;
  config.seed = seed;
  Trainer trainer(config);
  AblationRun run;
  run.variant = variant.name;
  run.seed = seed;
  run.tokens_per_obs = trainer.tokenizer().tokens_per_obs();
  run.sequence_length = static_cast<std::int64_t>(config.dynamics.horizon) * trainer.world_model()->layout().block();

  const auto seeds = derive_seeds(seed);
  std::mt19937_64 data_rng(seeds.env ^ 0x5eedULL);
  collect_random(trainer.env(), trainer.buffer(), options.collect_steps, data_rng);

  EnvSpec held_spec = config.env;
  held_spec.seed = seeds.eval_env;
  auto held_env = make_env(held_spec);
  std::mt19937_64 held_rng(seeds.eval_env ^ 0x5eedULL);
  const auto held_episodes = collect_random_episodes(*held_env, options.error_episodes, held_rng);

  run.tokenizer_seconds = trainer.train_world_model(config.schedule.tokenizer_epochs, 0).tokenizer_seconds;

  // Held-out batches, tokenized with the now frozen tokenizer.
  ReplayBuffer held(static_cast<std::int64_t>(options.error_episodes) * config.env.episode_limit + 1,
                    held_env->n_agents(), held_env->obs_dim(), held_env->n_actions());
  for (const auto& ep : held_episodes) {
    held.append(std::span<const StepRecord>(ep.data(), ep.size() - 1));
  }
  std::vector<SegmentBatch> eval_batches;
  std::mt19937_64 batch_rng(seed);
  for (int i = 0; i < options.eval_batches; ++i) {
    eval_batches.push_back(make_segment_batch(
        held.sample_segments(config.dynamics.horizon, config.dynamics.batch_size, batch_rng), trainer.tokenizer()));
  }
  auto held_out_loss = [&] {
    torch::NoGradGuard guard;
    auto& model = trainer.world_model();
    model->eval();
    double total = 0.0;
    for (const auto& batch : eval_batches) total += model->loss(batch).total.item<double>();
    return total / static_cast<double>(eval_batches.size());
  };

  double dynamics_seconds = 0.0;
  run.curve.push_back({0, run.tokenizer_seconds, held_out_loss()});
  for (int u = 1; u <= options.updates; ++u) {
    const auto start = std::chrono::steady_clock::now();
    trainer.world_model_step();
    dynamics_seconds += seconds_since(start);
    if (u % options.eval_every == 0 || u == options.updates) {
      run.curve.push_back({u, run.tokenizer_seconds + dynamics_seconds, held_out_loss()});
    }
  }
  run.final_loss = run.curve.back().loss;
  run.seconds_per_update = options.updates > 0 ? dynamics_seconds / options.updates : 0.0;
  if (options.loss_threshold > 0.0) {
    for (const auto& p : run.curve) {
      if (p.loss <= options.loss_threshold) {
        run.seconds_to_threshold = p.seconds;
        break;
      }
    }
  }
  if (options.error_horizon > 0) {
    WorldModelPredictor predictor(trainer.world_model(), trainer.tokenizer());
    std::mt19937_64 error_rng(seed + 17);
    run.error_per_step =
        compounding_error(predictor, held_episodes, options.error_horizon, options.error_segments, error_rng)
            .per_step();
  }
  run.env_steps = trainer.env_steps();
  return run;
}

AblationRun full_run(const AblationVariant& variant, std::uint64_t seed) {
  RunConfig config = variant.config;
  config.seed = seed;
  Trainer trainer(config);
  AblationRun run;
  run.variant = variant.name;
  run.seed = seed;
  run.tokens_per_obs = trainer.tokenizer().tokens_per_obs();
  run.sequence_length = static_cast<std::int64_t>(config.dynamics.horizon) * trainer.world_model()->layout().block();
  auto summary = trainer.run();
  run.success_rate = summary.final_eval.success_rate;
  run.env_steps = summary.env_steps;
  run.wall_seconds = summary.wall_seconds;
  return run;
}

}  // namespace

AblationReport run_ablation(AblationAxis axis, const RunConfig& base, const AblationOptions& options,
                            const AblationProgress& progress) {
  if (options.seeds.empty()) throw std::invalid_argument("run_ablation needs at least one seed");
  auto variants = ablation_variants(axis, base);
  check_matched_budgets(variants);
  AblationReport report;
  report.axis = axis;
  report.mode = options.mode;
  report.loss_threshold = options.loss_threshold;
  for (auto seed : options.seeds) {
    for (const auto& variant : variants) {
      const auto start = std::chrono::steady_clock::now();
      auto run = options.mode == AblationMode::kWorldModel ? world_model_study(variant, seed, options)
                                                           : full_run(variant, seed);
      if (options.mode == AblationMode::kWorldModel) run.wall_seconds = seconds_since(start);
      if (progress) progress(run);
      report.runs.push_back(std::move(run));
    }
  }
  report.summary = summarize(report.runs);
  return report;
}

std::vector<VariantSummary> summarize(const std::vector<AblationRun>& runs) {
  std::vector<VariantSummary> out;
  std::vector<std::string> order;
  for (const auto& r : runs) {
    if (std::find(order.begin(), order.end(), r.variant) == order.end()) order.push_back(r.variant);
  }
  for (const auto& name : order) {
    VariantSummary s;
    s.variant = name;
    std::vector<double> loss, spu, err, reach, success;
    for (const auto& r : runs) {
      if (r.variant != name) continue;
      s.tokens_per_obs = r.tokens_per_obs;
      s.sequence_length = r.sequence_length;
      loss.push_back(r.final_loss);
      spu.push_back(r.seconds_per_update);
      if (!r.error_per_step.empty()) err.push_back(r.error_per_step.back());
      if (r.seconds_to_threshold >= 0.0) reach.push_back(r.seconds_to_threshold);
      success.push_back(r.success_rate);
    }
    std::tie(s.final_loss_mean, s.final_loss_std) = mean_std(loss);
    std::tie(s.seconds_per_update_mean, s.seconds_per_update_std) = mean_std(spu);
    std::tie(s.error_mean, s.error_std) = mean_std(err);
    s.reached_threshold = static_cast<int>(reach.size());
    s.seconds_to_threshold_mean = mean_std(reach).first;
    std::tie(s.success_mean, s.success_std) = mean_std(success);
    out.push_back(s);
  }
  return out;
}

void write_ablation_report(const std::filesystem::path& dir, const AblationReport& report) {
  std::filesystem::create_directories(dir);
  {
    auto out = open_out(dir / "curves.csv");
    out << "variant,seed,update,seconds,loss\n";
    for (const auto& r : report.runs)
      for (const auto& p : r.curve)
        out << r.variant << ',' << r.seed << ',' << p.update << ',' << fmt(p.seconds) << ',' << fmt(p.loss) << '\n';
  }
  {
    auto out = open_out(dir / "runs.csv");
    out << "variant,seed,tokens_per_obs,sequence_length,final_loss,tokenizer_seconds,seconds_per_update,"
           "seconds_to_threshold,error_last_step,success_rate,env_steps,wall_seconds\n";
    for (const auto& r : report.runs) {
      out << r.variant << ',' << r.seed << ',' << r.tokens_per_obs << ',' << r.sequence_length << ','
          << fmt(r.final_loss) << ',' << fmt(r.tokenizer_seconds) << ',' << fmt(r.seconds_per_update) << ','
          << fmt(r.seconds_to_threshold) << ',' << (r.error_per_step.empty() ? 0.0 : r.error_per_step.back()) << ','
          << fmt(r.success_rate) << ',' << r.env_steps << ',' << fmt(r.wall_seconds) << '\n';
    }
  }
  {
    auto csv = open_out(dir / "summary.csv");
    auto md = open_out(dir / "summary.md");
    csv << "variant,tokens_per_obs,sequence_length,final_loss_mean,final_loss_std,seconds_per_update_mean,"
           "seconds_per_update_std,error_mean,error_std,reached_threshold,seconds_to_threshold_mean,success_mean,"
           "success_std\n";
    md << "# Ablation: " << to_string(report.axis) << "\n\n";
    md << "Mode: " << (report.mode == AblationMode::kWorldModel ? "world-model study" : "full training") << ", "
       << report.runs.size() / std::max<std::size_t>(1, report.summary.size()) << " seeds per variant";
    if (report.loss_threshold > 0.0) md << ", loss threshold " << fmt(report.loss_threshold);
    md << ".\n\n";
    md << "| variant | tokens/obs | sequence length | final loss | s/update | last-step L1 | time to threshold (s) "
          "| success |\n";
    md << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& s : report.summary) {
      csv << s.variant << ',' << s.tokens_per_obs << ',' << s.sequence_length << ',' << fmt(s.final_loss_mean) << ','
          << fmt(s.final_loss_std) << ',' << fmt(s.seconds_per_update_mean) << ',' << fmt(s.seconds_per_update_std)
          << ',' << fmt(s.error_mean) << ',' << fmt(s.error_std) << ',' << s.reached_threshold << ','
          << fmt(s.seconds_to_threshold_mean) << ',' << fmt(s.success_mean) << ',' << fmt(s.success_std) << '\n';
      md << "| " << s.variant << " | " << s.tokens_per_obs << " | " << s.sequence_length << " | "
         << fmt(s.final_loss_mean, 4) << " ± " << fmt(s.final_loss_std, 2) << " | "
         << fmt(s.seconds_per_update_mean, 4) << " ± " << fmt(s.seconds_per_update_std, 2) << " | "
         << fmt(s.error_mean, 4) << " ± " << fmt(s.error_std, 2) << " | "
         << (s.reached_threshold > 0 ? fmt(s.seconds_to_threshold_mean, 4) + " (" +
                                           std::to_string(s.reached_threshold) + " seeds)"
                                     : std::string("-"))
         << " | " << fmt(s.success_mean, 3) << " ± " << fmt(s.success_std, 2) << " |\n";
    }
  }
  if (report.mode == AblationMode::kWorldModel) {
    std::vector<PlotSeries> by_time, by_error;
    for (const auto& s : report.summary) {
      std::vector<const AblationRun*> runs;
      for (const auto& r : report.runs)
        if (r.variant == s.variant) runs.push_back(&r);
      PlotSeries curve{s.variant, {}, {}, {}};
      for (std::size_t i = 0; i < runs.front()->curve.size(); ++i) {
        std::vector<double> secs, losses;
        for (const auto* r : runs) {
          if (i < r->curve.size()) {
            secs.push_back(r->curve[i].seconds);
            losses.push_back(r->curve[i].loss);
          }
        }
        const auto [l, ls] = mean_std(losses);
        curve.x.push_back(mean_std(secs).first);
        curve.y.push_back(l);
        curve.spread.push_back(ls);
      }
      by_time.push_back(curve);
      PlotSeries err{s.variant, {}, {}, {}};
      for (std::size_t t = 0; t < runs.front()->error_per_step.size(); ++t) {
        std::vector<double> v;
        for (const auto* r : runs) v.push_back(r->error_per_step[t]);
        const auto [m, sd] = mean_std(v);
        err.x.push_back(static_cast<double>(t + 1));
        err.y.push_back(m);
        err.spread.push_back(sd);
      }
      if (!err.x.empty()) by_error.push_back(err);
    }
    write_line_plot_svg(dir / "curves.svg", "Held-out dynamics loss: " + to_string(report.axis), "wall-clock (s)",
                        "dynamics loss", by_time);
    if (!by_error.empty()) {
      write_line_plot_svg(dir / "error.svg", "Compounding error: " + to_string(report.axis), "prediction step",
                          "L1 per dimension", by_error);
    }
  }
}

// ---------------------------------------------------------------------------
// Attention

AttentionDump dump_attention(WorldModel& model, const SegmentBatch& segment, const std::filesystem::path& dir) {
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  model->set_capture(true);
  model->loss(segment.size() > 1 ? SegmentBatch{segment.tokens.slice(0, 0, 1), segment.actions.slice(0, 0, 1),
                                                segment.rewards.slice(0, 0, 1), segment.continuation.slice(0, 0, 1),
                                                segment.avail.slice(0, 0, 1), segment.valid.slice(0, 0, 1)}
                                 : segment);
  AttentionDump dump;
  for (const auto& map : model->attention_maps()) dump.causal.push_back(map[0].clone());
  auto perceiver = model->perceiver_attention();
  if (perceiver.defined()) dump.perceiver = perceiver.clone();
  model->set_capture(false);
  model->train(was_training);

  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    for (std::size_t l = 0; l < dump.causal.size(); ++l) {
      const auto& maps = dump.causal[l];
      write_npy(dir / ("causal_layer" + std::to_string(l) + ".npy"), maps);
      for (std::int64_t h = 0; h < maps.size(0); ++h) {
        write_heatmap_svg(dir / ("causal_layer" + std::to_string(l) + "_head" + std::to_string(h) + ".svg"), maps[h],
                          "causal attention, layer " + std::to_string(l) + ", head " + std::to_string(h));
      }
    }
    if (dump.perceiver.defined()) {
      write_npy(dir / "perceiver.npy", dump.perceiver);
      for (std::int64_t t = 0; t < dump.perceiver.size(0); ++t) {
        for (std::int64_t h = 0; h < dump.perceiver.size(1); ++h) {
          write_heatmap_svg(dir / ("perceiver_step" + std::to_string(t) + "_head" + std::to_string(h) + ".svg"),
                            dump.perceiver[t][h],
                            "agent-wise cross-attention, step " + std::to_string(t) + ", head " + std::to_string(h));
        }
      }
    }
  }
  return dump;
}

// ---------------------------------------------------------------------------
// FLOPs

std::vector<FlopRow> flops_report(const std::vector<std::int64_t>& n_agents, const FlopConfig& config) {
  std::vector<FlopRow> rows;
  for (auto n : n_agents) {
    rows.push_back({n, flops_estimate(AggregatorKind::kPerceiver, n, config).total(),
                    flops_estimate(AggregatorKind::kSelfAttention, n, config).total()});
  }
  return rows;
}

double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  const double mx = mean_std(x).first, my = mean_std(y).first;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (n < 2 || sxx == 0.0 || syy == 0.0) return 1.0;
  return sxy * sxy / (sxx * syy);
}

void write_flops_report(const std::filesystem::path& dir, const std::vector<FlopRow>& rows) {
  std::filesystem::create_directories(dir);
  auto csv = open_out(dir / "flops.csv");
  auto md = open_out(dir / "flops.md");
  csv << "n_agents,perceiver_gflops,self_attention_gflops,ratio\n";
  md << "| agents | Perceiver (GFLOPs) | self-attention (GFLOPs) | ratio |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    const double p = r.perceiver / 1e9, s = r.self_attention / 1e9;
    csv << r.n_agents << ',' << fmt(p) << ',' << fmt(s) << ',' << fmt(s / p) << '\n';
    md << "| " << r.n_agents << " | " << std::fixed << std::setprecision(3) << p << " | " << s << " | "
       << std::setprecision(2) << s / p << " |\n"
       << std::defaultfloat;
  }
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    xs.push_back(static_cast<double>(r.n_agents));
    ys.push_back(r.perceiver);
  }
  md << "\nPerceiver linear fit R^2 = " << std::fixed << std::setprecision(4) << linear_fit_r2(xs, ys) << "\n";
}

}  // namespace mawm
