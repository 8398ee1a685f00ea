#include "mawm/imagination.hpp"

#include <stdexcept>
#include <string>

namespace mawm {

torch::Tensor repair_avail(const torch::Tensor& probs, double threshold) {
  auto avail = probs >= threshold;
  auto empty = avail.any(-1).logical_not();
  if (empty.any().item<bool>()) {
    auto forced = torch::one_hot(probs.argmax(-1), probs.size(-1)).to(torch::kBool);
    avail = torch::where(empty.unsqueeze(-1), forced, avail);
  }
  return avail;
}

std::pair<torch::Tensor, torch::Tensor> sample_initial_states(const ReplayBuffer& buffer, int count,
                                                              std::mt19937_64& rng) {
  if (buffer.size() == 0) throw std::runtime_error("cannot seed imagination from an empty buffer");
  const std::int64_t n = buffer.n_agents(), d = buffer.obs_dim(), A = buffer.n_actions();
  auto obs = torch::empty({count, n, d});
  auto avail = torch::empty({count, n, A}, torch::kBool);
  auto steps = buffer.sample_steps(count, rng);
  for (int r = 0; r < count; ++r) {
    const auto& step = steps[static_cast<std::size_t>(r)];
    std::copy(step.obs.begin(), step.obs.end(), obs[r].data_ptr<float>());
    auto* dst = avail[r].data_ptr<bool>();
    for (std::size_t i = 0; i < step.avail.size(); ++i) dst[i] = step.avail[i] != 0;
  }
  return {obs, avail};
}

ImaginedRollout imagine(Actor& actor, WorldModel& model, ObservationTokenizer& tokenizer,
                        const torch::Tensor& initial_obs, const torch::Tensor& initial_avail,
                        const ImaginationOptions& options, at::Generator& generator, const PolicyObserver& observer) {
  torch::NoGradGuard guard;
  const int H = options.horizon;
  if (H < 1) throw std::invalid_argument("imagination horizon must be >= 1");
  if (H > model->config().horizon) {
    throw ContextOverflowError("imagination horizon " + std::to_string(H) + " exceeds the world-model context of " +
                               std::to_string(model->config().horizon));
  }
  const auto R = initial_obs.size(0), n = initial_obs.size(1);
  const std::int64_t A = model->shape().n_actions;

  const bool actor_training = actor->is_training();
  const bool model_training = model->is_training();
  actor->eval();
  model->eval();

  WorldModelRollout world(model, options.sampling, generator);
  auto tokens = tokenizer.encode(initial_obs);
  auto obs = tokenizer.decode(tokens).to(torch::kFloat32);
  auto avail = initial_avail.to(torch::kBool);
  ObservationStack stack(options.stack);
  stack.reset(obs);
  world.start(tokens);

  std::vector<torch::Tensor> obs_t, inputs_t, actions_t, logp_t, avail_t, reward_t, discount_t, prob_t, alive_t;
  auto alive = torch::ones({R, n});
  for (int t = 0; t < H; ++t) {
    auto inputs = stack.flat();
    if (observer) observer(t, inputs, obs);
    auto choice = actor->act(inputs.reshape({R * n, -1}), avail.reshape({R * n, A}), ActMode::kSample, generator);
    auto actions = choice.actions.view({R, n});
    auto step = world.act(actions);
    auto survive = (step.discount_prob >= options.termination_threshold).to(torch::kFloat32);

    obs_t.push_back(obs);
    inputs_t.push_back(inputs);
    actions_t.push_back(actions);
    logp_t.push_back(choice.log_probs.view({R, n}));
    avail_t.push_back(avail);
    reward_t.push_back(step.reward);
    discount_t.push_back(survive * options.discount_label * step.discount_prob);
    prob_t.push_back(step.discount_prob);
    alive_t.push_back(alive);

    if (t + 1 < H) {
      auto next = world.next_observation();
      obs = tokenizer.decode(next.tokens).to(torch::kFloat32);
      avail = repair_avail(next.avail_prob, options.avail_threshold);
      alive = alive * survive;
      stack.push(obs);
    }
  }

  if (actor_training) actor->train();
  if (model_training) model->train();

  ImaginedRollout out;
  out.obs = torch::stack(obs_t, 1);
  out.policy_inputs = torch::stack(inputs_t, 1);
  out.actions = torch::stack(actions_t, 1);
  out.log_probs = torch::stack(logp_t, 1);
  out.avail = torch::stack(avail_t, 1);
  out.rewards = torch::stack(reward_t, 1);
  out.discounts = torch::stack(discount_t, 1);
  out.discount_probs = torch::stack(prob_t, 1);
  out.alive = torch::stack(alive_t, 1);
  return out;
}

}  // namespace mawm
