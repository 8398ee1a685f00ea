#include <doctest.h>
#include <torch/torch.h>

#include <vector>

#include "mawm/aggregator.hpp"
#include "mawm/analysis.hpp"

using namespace mawm;

namespace {

AggregatorConfig small_config() {
  AggregatorConfig c;
  c.cross_heads = 2;
  c.inner_heads = 2;
  c.head_dim = 8;
  c.inner_layers = 1;
  c.self_attention_layers = 2;
  c.dropout = 0.0;
  return c;
}

}  // namespace

TEST_CASE("perceiver output holds one feature per agent") {
  for (int n : {1, 2, 5}) {
    PerceiverAggregator agg(n, 16, small_config());
    agg->eval();
    auto out = agg->forward(torch::randn({3, n, 17, 16}));
    CHECK(out.sizes() == torch::IntArrayRef({3, n, 16}));
    auto flat = agg->forward_flat(torch::randn({3, n * 17, 16}));
    CHECK(flat.sizes() == torch::IntArrayRef({3, n, 16}));
  }
  PerceiverAggregator agg(2, 16, small_config());
  CHECK_THROWS(agg->forward_flat(torch::randn({1, 35, 16})));
}

TEST_CASE("self-attention aggregator preserves the sequence length") {
  SelfAttentionAggregator agg(2, 16, small_config());
  agg->eval();
  auto joint = torch::randn({2, 2, 17, 16});
  CHECK(agg->forward(joint).sizes() == torch::IntArrayRef({2, 34, 16}));
  CHECK(agg->pooled(joint).sizes() == torch::IntArrayRef({2, 2, 16}));
}

TEST_CASE("aggregators move information between agents") {
  auto joint = torch::randn({1, 3, 5, 16});
  auto perturbed = joint.clone();
  perturbed[0][1][4] += torch::randn({16});  // agent 2's action embedding

  PerceiverAggregator perceiver(3, 16, small_config());
  perceiver->eval();
  auto a = perceiver->forward(joint);
  auto b = perceiver->forward(perturbed);
  CHECK((a[0][0] - b[0][0]).abs().max().item<double>() > 1e-6);
  CHECK(torch::equal(perceiver->forward(joint), a));

  SelfAttentionAggregator self_attn(3, 16, small_config());
  self_attn->eval();
  auto c = self_attn->forward(joint);
  auto d = self_attn->forward(perturbed);
  CHECK((c[0].slice(0, 0, 5) - d[0].slice(0, 0, 5)).abs().max().item<double>() > 1e-6);

  SUBCASE("the Jacobian block for other agents is nonzero") {
    auto input = joint.clone().requires_grad_(true);
    (perceiver->forward(input)[0][0] * torch::randn({16})).sum().backward();
    CHECK(input.grad()[0][2].abs().sum().item<double>() > 0.0);
  }
}

TEST_CASE("flop estimates") {
  FlopConfig reference;
  const double p2 = flops_estimate(AggregatorKind::kPerceiver, 2, reference).total() / 1e9;
  const double s2 = flops_estimate(AggregatorKind::kSelfAttention, 2, reference).total() / 1e9;
  const double p9 = flops_estimate(AggregatorKind::kPerceiver, 9, reference).total() / 1e9;
  const double s9 = flops_estimate(AggregatorKind::kSelfAttention, 9, reference).total() / 1e9;
  CHECK(p2 == doctest::Approx(0.016).epsilon(0.2));
  CHECK(s2 == doctest::Approx(0.133).epsilon(0.2));
  CHECK(s9 / p9 > s2 / p2);
  for (std::int64_t n = 2; n <= 12; ++n) {
    CHECK(flops_estimate(AggregatorKind::kPerceiver, n, reference).total() <
          flops_estimate(AggregatorKind::kSelfAttention, n, reference).total());
  }

  auto rows = flops_report({2, 3, 5, 9}, reference);
  std::vector<double> n, perceiver;
  for (const auto& r : rows) {
    n.push_back(static_cast<double>(r.n_agents));
    perceiver.push_back(r.perceiver);
  }
  CHECK(linear_fit_r2(n, perceiver) > 0.99);
  CHECK(linear_fit_r2({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
  CHECK(linear_fit_r2({1, 2, 3, 4}, {1, 4, 9, 16}) < 1.0);
}
