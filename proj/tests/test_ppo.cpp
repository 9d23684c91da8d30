#include <cmath>

#include <gtest/gtest.h>

#include "nfpo/oracles.hpp"
#include "nfpo/ppo.hpp"

using namespace nfpo;
using Td = Tensor<double>;

namespace {

GaeResult gae1(std::vector<double> r, std::vector<double> v, double last, std::vector<std::uint8_t> d,
               double gamma, double lambda, std::vector<std::uint8_t> tr = {},
               std::vector<double> tv = {}) {
  const auto t = r.size();
  if (tr.empty()) tr.assign(t, 0);
  if (tv.empty()) tv.assign(t, 0.0);
  std::vector<double> lv{last};
  return gae(1, t, r, v, lv, tv, d, tr, gamma, lambda);
}

TrainConfig bandit_config(PolicyFamily family) {
  TrainConfig cfg;
  cfg.policy = family;
  cfg.actor_hidden = {16};
  cfg.critic_hidden = {16};
  cfg.env.num_envs = 64;
  cfg.steps_per_env = 1;
  cfg.minibatches = 2;
  cfg.epochs = 4;
  cfg.lr_schedule = LrSchedule::kFixed;
  cfg.lr = 1e-2;
  cfg.total_steps = 64;
  cfg.resolve();
  cfg.validate();
  return cfg;
}

/// One-step episodes from obs 0 with reward = first action component.
template <typename T>
RolloutBuffer bandit_rollout(Agent<T>& agent, const TrainConfig& cfg, std::uint64_t update) {
  const auto n = cfg.env.num_envs;
  const auto ad = agent.policy.action_dim();
  RolloutBuffer buf(n, 1, 1, ad);
  NoGradGuard ng;
  Stream rng(cfg.seed, "bandit", {update});
  auto obs = Tensor<T>::zeros({n, 1});
  auto [a, lp] = agent.policy.sample(agent.params, obs, 1.0, rng);
  auto v = agent.value(obs);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < ad; ++d) buf.actions[i * ad + d] = a.at(i, d);
    buf.rewards[i] = a.at(i, 0);
    buf.dones[i] = 1;
    buf.log_prob_old[i] = lp.at(i);
    buf.values[i] = v.at(i);
  }
  compute_gae(buf, cfg.gamma, cfg.lambda);
  return buf;
}

template <typename T>
double mode_action(Agent<T>& agent) {
  NoGradGuard ng;
  return agent.policy.mode(agent.params, Tensor<T>::zeros({1, 1})).at(0, 0);
}

}  // namespace

TEST(Gae, TerminalSingleStep) {
  auto g = gae1({1.0}, {0.3}, 5.0, {1}, 0.99, 0.95);
  EXPECT_NEAR(g.advantages[0], 0.7, 1e-15);
  EXPECT_NEAR(g.returns[0], 1.0, 1e-15);
}

TEST(Gae, LambdaZeroIsOneStepTd) {
  std::vector<double> r{0.5, -1.0, 2.0}, v{0.1, 0.2, 0.3};
  const double last = 0.4, gamma = 0.9;
  auto g = gae1(r, v, last, {0, 0, 0}, gamma, 0.0);
  EXPECT_NEAR(g.advantages[0], r[0] + gamma * v[1] - v[0], 1e-15);
  EXPECT_NEAR(g.advantages[1], r[1] + gamma * v[2] - v[1], 1e-15);
  EXPECT_NEAR(g.advantages[2], r[2] + gamma * last - v[2], 1e-15);
}

TEST(Gae, TruncationBootstrapsButCutsChain) {
  // Step 0 truncated with V(terminal obs) = 2; step 1 starts a new episode.
  auto g = gae1({1.0, 0.0}, {0.5, 0.0}, 10.0, {0, 0}, 0.5, 1.0, {1, 0}, {2.0, 0.0});
  EXPECT_NEAR(g.advantages[0], 1.0 + 0.5 * 2.0 - 0.5, 1e-15);
  EXPECT_NEAR(g.advantages[1], 0.5 * 10.0, 1e-15);
}

TEST(Gae, MatchesBruteForce) {
  auto c = oracle::check_gae(100, 50, 3);
  EXPECT_EQ(c.sequences, 100u);
  EXPECT_LE(c.max_error, 1e-10);
}

TEST(Gae, RejectsMismatchedLengths) {
  std::vector<double> r(3), v(2), lv(1), tv(3);
  std::vector<std::uint8_t> d(3), tr(3);
  EXPECT_THROW(gae(1, 3, r, v, lv, tv, d, tr, 0.9, 0.9), ShapeError);
}

TEST(ClipLoss, UnitRatioIsNegativeMeanAdvantage) {
  Td lp({3}, {-1.0, 0.5, 2.0});
  Td adv({3}, {1.0, -2.0, 4.0});
  EXPECT_NEAR(ppo_clip_loss(lp, lp, adv, 0.2).item(), -1.0, 1e-15);
}

TEST(ClipLoss, HandValues) {
  Td old({1}, {0.0});
  EXPECT_NEAR(ppo_clip_loss(Td({1}, {std::log(2.0)}), old, Td({1}, {1.0}), 0.2).item(), -1.2, 1e-12);
  EXPECT_NEAR(ppo_clip_loss(Td({1}, {std::log(0.5)}), old, Td({1}, {-1.0}), 0.2).item(), 0.8, 1e-12);
  // Pessimistic side is unclipped: r = 0.5 with A = 1 keeps r A.
  EXPECT_NEAR(ppo_clip_loss(Td({1}, {std::log(0.5)}), old, Td({1}, {1.0}), 0.2).item(), -0.5, 1e-12);
}

TEST(ClipLoss, GradientVanishesInsideClippedRegion) {
  Td lp({2}, {std::log(2.0), std::log(1.1)}, true);
  Td old({2}, {0.0, 0.0});
  backward(ppo_clip_loss(lp, old, Td({2}, {1.0, 1.0}), 0.2));
  EXPECT_EQ(lp.grad()[0], 0.0);
  EXPECT_NEAR(lp.grad()[1], -0.5 * 1.1, 1e-12);
}

TEST(ValueLoss, ZeroAtTargetAndQuadraticInOffset) {
  Td ret({4}, {1, 2, 3, 4});
  EXPECT_EQ(value_loss(ret, ret).item(), 0.0);
  Td off({4}, {1.5, 2.5, 3.5, 4.5});
  EXPECT_NEAR(value_loss(off, ret).item(), 0.25, 1e-15);
}

TEST(ValueLoss, GradientMatchesFiniteDifferences) {
  ParamStore<double> store;
  MlpSpec spec = critic_spec(3, {8}, Activation::kTanh);
  init_mlp(store, "critic", spec, 2);
  Stream rng(2, "x", {});
  oracle::randomize(store, 0.3, rng);
  auto obs = oracle::normal_tensor<double>({6, 3}, 1.0, rng);
  auto ret = oracle::normal_tensor<double>({6}, 1.0, rng);
  auto g = oracle::check_gradients(store, [&] {
    return value_loss(reshape(mlp_forward(store, "critic", spec, obs), Shape{6}), ret);
  });
  EXPECT_LE(g.max_rel_error, 1e-5) << g.worst;
}

TEST(AdaptiveLr, Rules) {
  EXPECT_DOUBLE_EQ(adaptive_lr(1e-3, 0.05, 0.01), 1e-3 / 1.5);
  EXPECT_DOUBLE_EQ(adaptive_lr(1e-3, 0.001, 0.01), 1.5e-3);
  EXPECT_DOUBLE_EQ(adaptive_lr(1e-3, 0.01, 0.01), 1e-3);
  EXPECT_DOUBLE_EQ(adaptive_lr(1e-3, 0.0, 0.01), 1e-3);
  EXPECT_DOUBLE_EQ(adaptive_lr(1.2e-5, 1.0, 0.01), 1e-5);
  EXPECT_DOUBLE_EQ(adaptive_lr(9e-3, 1e-6, 0.01), 1e-2);
  EXPECT_DOUBLE_EQ(adaptive_lr(1e-3, 1.0, 0.01, LrSchedule::kFixed), 1e-3);
}

TEST(Update, ZeroLearningRateLeavesParameters) {
  for (auto family : {PolicyFamily::kFlow, PolicyFamily::kGaussian}) {
    auto cfg = bandit_config(family);
    cfg.lr = 0.0;
    auto agent = make_agent<double>(cfg, 1, 2, cfg.seed);
    auto before = agent.params.clone();
    auto buf = bandit_rollout(agent, cfg, 0);
    Adam<double> opt;
    double lr = 0.0;
    auto m = ppo_update(agent, opt, buf, cfg, lr, 0);
    EXPECT_EQ(m.gradient_steps, cfg.epochs * cfg.minibatches);
    EXPECT_NEAR(m.approx_kl, 0.0, 1e-12);
    for (const auto& [name, p] : agent.params) EXPECT_EQ(p.values(), before.get(name).values()) << name;
  }
}

TEST(Update, BanditImprovesMeanAction) {
  for (auto family : {PolicyFamily::kFlow, PolicyFamily::kGaussian}) {
    auto cfg = bandit_config(family);
    auto agent = make_agent<double>(cfg, 1, 2, cfg.seed);
    Adam<double> opt;
    double lr = cfg.lr;
    const double start = mode_action(agent);
    int rises = 0;
    double prev = start;
    for (std::uint64_t u = 0; u < 50; ++u) {
      auto buf = bandit_rollout(agent, cfg, u);
      auto m = ppo_update(agent, opt, buf, cfg, lr, u);
      ASSERT_FALSE(m.instability);
      const double now = mode_action(agent);
      rises += now > prev;
      prev = now;
    }
    EXPECT_GT(prev, start + 0.5);
    EXPECT_GE(rises, 35);
  }
}

TEST(Update, ZeroNoiseMatchesNoNoise) {
  auto cfg = bandit_config(PolicyFamily::kFlow);
  auto a = make_agent<double>(cfg, 1, 2, cfg.seed);
  auto b = make_agent<double>(cfg, 1, 2, cfg.seed);
  auto buf_a = bandit_rollout(a, cfg, 0);
  auto buf_b = bandit_rollout(b, cfg, 0);
  Adam<double> oa, ob;
  double la = cfg.lr, lb = cfg.lr;
  UpdateOptions zero;
  zero.noise = [](std::size_t, std::size_t, std::size_t) { return 0.0; };
  ppo_update(a, oa, buf_a, cfg, la, 0);
  ppo_update(b, ob, buf_b, cfg, lb, 0, zero);
  for (const auto& [name, p] : a.params) EXPECT_EQ(p.values(), b.params.get(name).values()) << name;
}

TEST(Update, NoiseChangesTheUpdate) {
  auto cfg = bandit_config(PolicyFamily::kFlow);
  auto a = make_agent<double>(cfg, 1, 2, cfg.seed);
  auto b = make_agent<double>(cfg, 1, 2, cfg.seed);
  auto buf_a = bandit_rollout(a, cfg, 0);
  auto buf_b = bandit_rollout(b, cfg, 0);
  Adam<double> oa, ob;
  double la = cfg.lr, lb = cfg.lr;
  ppo_update(a, oa, buf_a, cfg, la, 0);
  cfg.action_noise = 0.1;
  ppo_update(b, ob, buf_b, cfg, lb, 0);
  bool differ = false;
  for (const auto& [name, p] : a.params) differ = differ || p.values() != b.params.get(name).values();
  EXPECT_TRUE(differ);
}

TEST(Update, StoredLogProbsReproducedInFloat) {
  auto cfg = bandit_config(PolicyFamily::kFlow);
  auto agent = make_agent<float>(cfg, 1, 2, cfg.seed);
  Stream rng(5, "x", {});
  oracle::randomize(agent.params, 0.2, rng);
  auto buf = bandit_rollout(agent, cfg, 0);
  Adam<float> opt;
  double lr = cfg.lr;
  auto m = ppo_update(agent, opt, buf, cfg, lr, 0);
  EXPECT_LE(m.ratio_check_error, 1e-5);
}
