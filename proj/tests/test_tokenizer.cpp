#include <doctest.h>
#include <torch/torch.h>

#include <cmath>
#include <sstream>

#include "mawm/tokenizer.hpp"
#include "test_support.hpp"

using namespace mawm;

namespace {

TokenizerConfig small_vq(int N = 16, int K = 4, int nz = 8, int hidden = 32) {
  TokenizerConfig c;
  c.codebook_size = N;
  c.tokens = K;
  c.code_dim = nz;
  c.hidden = hidden;
  c.layers = 2;
  return c;
}

}  // namespace

TEST_CASE("nearest code lookup") {
  Codebook book(2, 2, 0.99, 1e-5);
  book->set_codes(torch::tensor({{0.0F, 0.0F}, {1.0F, 1.0F}}));
  CHECK(book->nearest(torch::tensor({{0.2F, 0.1F}})).item<std::int64_t>() == 0);
  CHECK(book->nearest(torch::tensor({{0.9F, 0.7F}})).item<std::int64_t>() == 1);
  CHECK(book->nearest(torch::tensor({{0.5F, 0.5F}})).item<std::int64_t>() == 0);
  CHECK(book->nearest(torch::tensor({{1.0F, 0.0F}})).item<std::int64_t>() == 0);
}

TEST_CASE("untrained tokenizer emits K tokens inside the vocabulary") {
  VqVae model(12, TokenizerConfig{});
  auto out = model->encode(torch::randn({7, 12}));
  CHECK(out.tokens.sizes() == torch::IntArrayRef({7, 16}));
  CHECK(out.tokens.min().item<std::int64_t>() >= 0);
  CHECK(out.tokens.max().item<std::int64_t>() < 512);
  CHECK(out.reconstruction.sizes() == torch::IntArrayRef({7, 12}));
}

TEST_CASE("vq loss terms") {
  auto config = small_vq(2, 1, 3, 16);
  VqVae model(5, config);
  model->to(torch::kFloat64);
  auto obs = torch::randn({1, 5}, torch::kFloat64);

  SUBCASE("hand-computed terms on a two-code book") {
    auto latents = model->encode_latents(obs).detach();  // [1, 1, 3]
    auto z = latents.reshape({3});
    auto c0 = z + 0.1;
    auto c1 = z - torch::tensor({1.0, 2.0, -0.5}, torch::kFloat64);
    model->codebook()->set_codes(torch::stack({c0, c1}));
    auto loss = model->loss(obs);
    CHECK(loss.tokens.item<std::int64_t>() == 0);
    CHECK(loss.codebook.item<double>() == doctest::Approx(0.01).epsilon(1e-9));
    CHECK(loss.commitment.item<double>() == doctest::Approx(config.beta * 0.01).epsilon(1e-9));
    auto recon = model->decode_codes(c0.reshape({1, 1, 3}));
    const double mse = (recon - obs).pow(2).mean().item<double>();
    CHECK(loss.reconstruction.item<double>() == doctest::Approx(mse).epsilon(1e-9));
    CHECK(loss.total.item<double>() ==
          doctest::Approx(mse + 0.01 + config.beta * 0.01).epsilon(1e-9));
  }

  SUBCASE("codebook and commitment vanish when the latent sits on a code") {
    auto z = model->encode_latents(obs).detach().reshape({1, 3});
    model->codebook()->set_codes(torch::cat({z, z + 5.0}));
    auto loss = model->loss(obs);
    CHECK(loss.codebook.item<double>() < 1e-20);
    CHECK(loss.commitment.item<double>() < 1e-20);
  }

  SUBCASE("doubling beta doubles only the commitment term") {
    auto a = model->loss(obs);
    model->set_beta(2.0 * config.beta);
    auto b = model->loss(obs);
    CHECK(b.commitment.item<double>() == doctest::Approx(2.0 * a.commitment.item<double>()));
    CHECK(b.codebook.item<double>() == doctest::Approx(a.codebook.item<double>()));
    CHECK(b.reconstruction.item<double>() == doctest::Approx(a.reconstruction.item<double>()));
  }
}

TEST_CASE("straight-through gradient matches finite differences of the copied-gradient path") {
  VqVae model(6, small_vq(8, 2, 4, 16));
  model->to(torch::kFloat64);
  auto obs = torch::randn({4, 6}, torch::kFloat64);
  auto tokens = model->quantize(model->encode_latents(obs).detach());
  auto codes = model->codebook()->lookup(tokens).detach();
  // With assignments held fixed, E(o) + sg[z_q - E(o)] has the value z_q and
  // the Jacobian of E(o); the surrogate below has the same value and gradient.
  auto surrogate = [&] {
    auto latents = model->encode_latents(obs);
    return torch::mse_loss(model->decode_codes(latents - latents.detach() + codes), obs);
  };
  auto st_loss = [&] { return model->loss(obs).reconstruction; };
  model->zero_grad();
  st_loss().backward();
  std::vector<torch::Tensor> st_grads;
  for (auto& p : model->parameters()) st_grads.push_back(p.grad().defined() ? p.grad().clone() : torch::Tensor());
  model->zero_grad();
  surrogate().backward();
  std::size_t i = 0;
  for (auto& p : model->parameters()) {
    if (st_grads[i].defined()) CHECK(torch::allclose(st_grads[i], p.grad(), 1e-10, 1e-12));
    ++i;
  }
  // Finite differences on the decoder see the quantized input directly.
  auto decoder_only = [&] { return torch::mse_loss(model->decode_codes(codes), obs); };
  CHECK(test::max_fd_relative_error(*model->decoder(), decoder_only, 6, 1e-6) < 1e-4);
  // The encoder gradient equals the decoder input gradient pushed through E.
  auto input = codes.clone().requires_grad_(true);
  torch::mse_loss(model->decode_codes(input), obs).backward();
  auto chained = [&] { return (model->encode_latents(obs) * input.grad()).sum(); };
  model->zero_grad();
  chained().backward();
  std::vector<torch::Tensor> chain_grads;
  for (auto& p : model->encoder()->parameters()) chain_grads.push_back(p.grad().clone());
  model->zero_grad();
  st_loss().backward();
  i = 0;
  for (auto& p : model->encoder()->parameters()) {
    CHECK(torch::allclose(p.grad(), chain_grads[i], 1e-8, 1e-10));
    ++i;
  }
  CHECK(test::max_fd_relative_error(*model->encoder(), chained, 6, 1e-6) < 1e-4);
}

TEST_CASE("codebook ema") {
  SUBCASE("all assignments to one code converge to the latent mean") {
    Codebook book(4, 3, 0.99, 1e-5);
    book->set_codes(torch::randn({4, 3}));
    auto latents = torch::tensor({{1.0F, 2.0F, 3.0F}, {3.0F, 2.0F, 1.0F}});
    auto indices = torch::tensor({3, 3}, torch::kInt64);
    for (int i = 0; i < 3000; ++i) book->ema_update(latents, indices);
    auto code = book->codes()[3];
    CHECK(torch::allclose(code, torch::tensor({2.0F, 2.0F, 2.0F}), 1e-3, 1e-3));
    CHECK(book->ema_counts()[0].item<double>() < 1e-6);
    CHECK((book->ema_counts() >= 0).all().item<bool>());
    CHECK(torch::isfinite(book->codes()).all().item<bool>());
  }
  SUBCASE("unassigned counts decay geometrically") {
    Codebook book(3, 2, 0.9, 1e-5);
    book->set_codes(torch::randn({3, 2}));
    book->ema_update(torch::ones({1, 2}), torch::tensor({0}, torch::kInt64));
    CHECK(book->ema_counts()[1].item<double>() == doctest::Approx(0.9));
    CHECK(book->ema_counts()[0].item<double>() == doctest::Approx(0.9 + 0.1));
  }
  SUBCASE("decay 1 freezes the codes") {
    Codebook book(3, 2, 1.0, 1e-5);
    book->set_codes(torch::randn({3, 2}));
    auto before = book->codes().clone();
    for (int i = 0; i < 10; ++i) book->ema_update(torch::randn({5, 2}), torch::randint(3, {5}, torch::kInt64));
    CHECK(torch::equal(before, book->codes()));
  }
}

TEST_CASE("codebook initialization from latents") {
  Codebook book(4, 2, 0.99, 1e-5);
  CHECK_FALSE(book->initialized());
  auto latents = torch::arange(20, torch::kFloat32).reshape({10, 2});
  book->init_from(latents);
  CHECK(book->initialized());
  for (int j = 0; j < 4; ++j) {
    auto code = book->codes()[j];
    CHECK(((latents - code).abs().sum(1) < 1e-5).any().item<bool>());
  }
  VqTokenizer tok(6, small_vq());
  CHECK_FALSE(tok.fitted());
  tok.fit(torch::randn({50, 6}));
  CHECK(tok.fitted());
  auto stats = tok.train_step(torch::randn({32, 6}));
  CHECK(std::isfinite(stats.total));
  CHECK(stats.utilization > 0.0);

  torch::serialize::OutputArchive out;
  tok.save(out);
  std::ostringstream bytes;
  out.save_to(bytes);
  VqTokenizer copy(6, small_vq());
  torch::serialize::InputArchive in;
  std::istringstream source(bytes.str());
  in.load_from(source);
  copy.load(in);
  CHECK(copy.fitted());
  auto probe = torch::randn({9, 6});
  CHECK(torch::equal(copy.encode(probe), tok.encode(probe)));
}

TEST_CASE("fixed-width bins tokenizer") {
  BinsCodec codec(4);
  codec.set_ranges(torch::tensor({0.0F}), torch::tensor({1.0F}));
  CHECK(codec.tokenize(torch::tensor({0.3F})).item<std::int64_t>() == 1);
  CHECK(codec.tokenize(torch::tensor({1.0F})).item<std::int64_t>() == 3);
  CHECK(codec.tokenize(torch::tensor({-4.0F})).item<std::int64_t>() == 0);

  TokenizerConfig config;
  config.kind = TokenizerKind::kBins;
  config.bins = 64;
  BinsTokenizer tok(30, config);
  CHECK_FALSE(tok.ready());
  auto obs = torch::rand({200, 30}) * 4.0 - 2.0;
  tok.fit(obs);
  CHECK(tok.tokens_per_obs() == 30);
  auto tokens = tok.encode(obs);
  CHECK(tokens.size(-1) == 30);
  auto half = tok.codec().bin_width() / 2.0 + 1e-6;
  CHECK(((tok.decode(tokens) - obs).abs() <= half).all().item<bool>());
}
