#include <doctest.h>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mawm/analysis.hpp"

using namespace mawm;

namespace {

// Replays recorded observations: a perfect predictor for episodes where
// obs[t + 1] = obs[t] + action.
class AdditivePredictor final : public TrajectoryPredictor {
 public:
  explicit AdditivePredictor(int steps, float bias = 0.0F) : steps_(steps), bias_(bias) {}
  int max_steps() const override { return steps_; }
  torch::Tensor predict(const torch::Tensor& obs0, const torch::Tensor& actions) override {
    std::vector<torch::Tensor> out;
    auto obs = obs0.clone();
    for (int t = 0; t < actions.size(1); ++t) {
      obs = obs + actions.select(1, t).unsqueeze(-1).to(obs.dtype()) + bias_;
      out.push_back(obs);
    }
    return torch::stack(out, 1);
  }

 private:
  int steps_;
  float bias_;
};

std::vector<StepRecord> additive_episode(int length, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> act(0, 2);
  std::vector<StepRecord> steps;
  std::vector<float> obs = {0.0F, 1.0F, 2.0F, 3.0F};  // 2 agents x 2 dims
  for (int t = 0; t < length; ++t) {
    StepRecord r;
    r.obs = obs;
    r.actions = {act(rng), act(rng)};
    r.avail.assign(6, 1);
    r.continuation = t + 1 == length ? 0.0F : kContinuationLabel;
    for (int i = 0; i < 2; ++i) {
      for (int k = 0; k < 2; ++k) obs[static_cast<std::size_t>(i * 2 + k)] += static_cast<float>(r.actions[i]);
    }
    steps.push_back(r);
  }
  return steps;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("npy round trip") {
  auto dir = scratch("mawm_npy_test");
  for (auto dtype : {torch::kFloat32, torch::kFloat64, torch::kInt64}) {
    auto t = (torch::randn({3, 4, 2}) * 10).to(dtype);
    write_npy(dir / "a.npy", t);
    auto back = read_npy(dir / "a.npy");
    CHECK(back.dtype() == t.dtype());
    CHECK(torch::equal(back, t));
  }
  auto mask = torch::rand({5}) > 0.5;
  write_npy(dir / "b.npy", mask);
  CHECK(torch::equal(read_npy(dir / "b.npy"), mask));
  std::ifstream raw(dir / "a.npy", std::ios::binary);
  char magic[6];
  raw.read(magic, 6);
  CHECK(std::string(magic + 1, 5) == "NUMPY");
  std::filesystem::remove_all(dir);
}

TEST_CASE("compounding error of an exact predictor is zero") {
  std::mt19937_64 rng(0);
  std::vector<std::vector<StepRecord>> episodes = {additive_episode(12, rng), additive_episode(3, rng),
                                                   additive_episode(9, rng)};
  AdditivePredictor exact(5);
  auto error = compounding_error(exact, episodes, 5, 40, rng, 16);
  CHECK(error.mean.sizes() == torch::IntArrayRef({5, 2, 2}));
  CHECK(error.segments == 40);
  CHECK(error.mean.abs().max().item<double>() == 0.0);

  AdditivePredictor biased(5, 0.5F);
  auto drift = compounding_error(biased, episodes, 5, 40, rng, 16).per_step();
  REQUIRE(drift.size() == 5);
  for (int t = 0; t < 5; ++t) CHECK(drift[static_cast<std::size_t>(t)] == doctest::Approx(0.5 * (t + 1)));

  CHECK_THROWS_AS(compounding_error(exact, episodes, 6, 10, rng), std::invalid_argument);
  std::vector<std::vector<StepRecord>> too_short = {additive_episode(3, rng)};
  CHECK_THROWS_AS(compounding_error(exact, too_short, 5, 10, rng), std::invalid_argument);

  auto dir = scratch("mawm_error_test");
  write_compounding_error(dir, error);
  CHECK(std::filesystem::exists(dir / "error_mean.npy"));
  CHECK(std::filesystem::exists(dir / "error.svg"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("attention maps are causal and row-stochastic") {
  WorldModelShape shape{2, 3, 8, 4};
  DynamicsConfig config;
  config.embed_dim = 16;
  config.layers = 2;
  config.heads = 2;
  config.dropout = 0.0;
  config.horizon = 3;
  config.aggregator.cross_heads = 2;
  config.aggregator.inner_heads = 2;
  config.aggregator.head_dim = 8;
  config.aggregator.inner_layers = 1;
  config.aggregator.dropout = 0.0;
  WorldModel model(shape, config);
  SegmentBatch batch;
  batch.tokens = torch::randint(8, {1, 3, 2, 3}, torch::kInt64);
  batch.actions = torch::randint(4, {1, 3, 2}, torch::kInt64);
  batch.rewards = torch::zeros({1, 3});
  batch.continuation = torch::full({1, 3}, 0.99);
  batch.avail = torch::ones({1, 3, 2, 4});
  batch.valid = torch::ones({1, 3});

  auto dir = scratch("mawm_attention_test");
  auto dump = dump_attention(model, batch, dir);
  REQUIRE(dump.causal.size() == 2);
  const std::int64_t L = 3 * (3 + 2);
  for (const auto& map : dump.causal) {
    CHECK(map.sizes() == torch::IntArrayRef({2, L, L}));
    CHECK(torch::allclose(map.sum(-1), torch::ones({2, L}), 1e-5, 1e-5));
    CHECK(map.triu(1).abs().max().item<double>() == 0.0);
  }
  REQUIRE(dump.perceiver.defined());
  CHECK(dump.perceiver.sizes() == torch::IntArrayRef({3, 2, 2, 2 * 4}));
  CHECK(torch::allclose(dump.perceiver.sum(-1), torch::ones({3, 2, 2}), 1e-5, 1e-5));
  CHECK(std::filesystem::exists(dir / "causal_layer0.npy"));
  CHECK(std::filesystem::exists(dir / "perceiver.npy"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablation variants differ only along their axis") {
  RunConfig base;
  for (auto axis : {AblationAxis::kCentralized, AblationAxis::kAggregation, AblationAxis::kTokenizer,
                    AblationAxis::kAggregator}) {
    auto variants = ablation_variants(axis, base);
    REQUIRE(variants.size() == 2);
    CHECK_NOTHROW(check_matched_budgets(variants));
    CHECK(parse_ablation_axis(to_string(axis)) == axis);
  }
  auto variants = ablation_variants(AblationAxis::kTokenizer, base);
  variants[1].config.schedule.env_steps += 1;
  CHECK_THROWS_AS(check_matched_budgets(variants), std::invalid_argument);
  CHECK_THROWS(parse_ablation_axis("bigger_model"));
}

TEST_CASE("flops report files") {
  auto dir = scratch("mawm_flops_test");
  write_flops_report(dir, flops_report({2, 3}));
  CHECK(std::filesystem::exists(dir / "flops.csv"));
  CHECK(std::filesystem::exists(dir / "flops.md"));
  std::filesystem::remove_all(dir);
}
