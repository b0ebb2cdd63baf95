#include <gtest/gtest.h>

#include <numeric>

#include "mflb/ppo.hpp"

using namespace mflb;

namespace {

SystemConfig small_system() {
  SystemConfig c;
  c.buffer = 2;
  c.nu0 = QueueDist::point_mass(2, 0);
  c.delta_t = 2.0;
  return c;
}

PpoConfig small_ppo() {
  PpoConfig p;
  p.train_batch = 64;
  p.minibatch = 16;
  p.epochs_per_iteration = 2;
  p.episode_length = 8;
  p.hidden_width = 8;
  p.learning_rate = 1e-3;
  return p;
}

struct Learner {
  SystemConfig config = small_system();
  PpoConfig ppo = small_ppo();
  UpperPolicy policy{UpperPolicyShape{2, 2, 2, 8, 2}};
  ValueFunction value{5, 8, 2};

  explicit Learner(std::uint64_t seed) {
    Rng rng(seed);
    policy.initialize(rng, -0.5, 1.0);
    value.initialize(rng);
  }
};

RolloutBatch manual_batch(std::vector<double> rewards, std::vector<double> values,
                          std::vector<std::uint8_t> ends, double tail) {
  RolloutBatch b;
  b.rewards = Eigen::Map<Eigen::VectorXd>(rewards.data(), static_cast<Eigen::Index>(rewards.size()));
  b.values = Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  b.episode_end = std::move(ends);
  b.tail_value = tail;
  return b;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

double rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

}  // namespace

TEST(CollectRollouts, BatchShape) {
  Learner s(1);
  s.ppo.train_batch = 8;
  s.ppo.episode_length = 4;
  Rng rng(2);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  EXPECT_EQ(b.size(), 8u);
  EXPECT_EQ(b.episode_returns.size(), 2u);
  EXPECT_EQ(b.episode_end, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 1}));
  EXPECT_EQ(b.observations.cols(), 8);
  EXPECT_EQ(b.actions.rows(), s.policy.shape().action_dim());
}

TEST(CollectRollouts, TruncatedLastEpisodeBootstraps) {
  Learner s(1);
  s.ppo.train_batch = 10;
  s.ppo.episode_length = 4;
  Rng rng(2);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  EXPECT_EQ(b.episode_returns.size(), 2u);
  EXPECT_FALSE(b.episode_end.back());
  EXPECT_NE(b.tail_value, 0.0);
}

TEST(CollectRollouts, SeededBatchesAreIdentical) {
  Learner s(3);
  Rng a(4), b(4), c(5);
  const auto x = collect_rollouts(s.policy, s.value, s.config, s.ppo, a);
  const auto y = collect_rollouts(s.policy, s.value, s.config, s.ppo, b);
  const auto z = collect_rollouts(s.policy, s.value, s.config, s.ppo, c);
  EXPECT_EQ(x.actions, y.actions);
  EXPECT_EQ(x.rewards, y.rewards);
  EXPECT_NE(x.actions, z.actions);
}

TEST(CollectRollouts, NoiselessUniformPolicyMatchesRandomRule) {
  // With exploration noise switched off the stochastic policy is the uniform rule.
  SystemConfig c;
  c.delta_t = 5.0;
  UpperPolicy p(UpperPolicyShape{});
  Rng init(1);
  p.initialize(init, -30.0);
  ValueFunction v(8, 16, 1);
  v.initialize(init);
  PpoConfig ppo;
  ppo.episode_length = 20;
  ppo.train_batch = 2000;
  Rng rng(6);
  const auto batch = collect_rollouts(p, v, c, ppo, rng);

  std::vector<double> rnd;
  for (int r = 0; r < 200; ++r) {
    Rng a(derive_seed(99, {static_cast<std::uint64_t>(r)}));
    rnd.push_back(mfc_rollout(fixed_provider(mf_rnd_rule(5, 2)), c, 20, a).discounted_return);
  }
  auto stats = [](const std::vector<double>& x) {
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
    double v = 0.0;
    for (double e : x) v += (e - m) * (e - m);
    return std::pair{m, v / (x.size() - 1) / x.size()};
  };
  const auto [m1, v1] = stats(batch.episode_returns);
  const auto [m2, v2] = stats(rnd);
  ASSERT_EQ(batch.episode_returns.size(), 100u);
  EXPECT_NEAR(m1, m2, 3 * std::sqrt(v1 + v2));
}

TEST(Gae, DiscountedRewardsWithoutCritic) {
  const auto b = manual_batch({1, 1, 1}, {0, 0, 0}, {0, 0, 1}, 0.0);
  const auto adv = gae_advantages(b, 0.5, 1.0, false);
  EXPECT_DOUBLE_EQ(adv.raw[0], 1.75);
  EXPECT_DOUBLE_EQ(adv.raw[1], 1.5);
  EXPECT_DOUBLE_EQ(adv.raw[2], 1.0);
  EXPECT_EQ(adv.returns, adv.raw);
}

TEST(Gae, ResetsAtEpisodeBoundary) {
  const auto b = manual_batch({1, 10, 1, 1}, {0, 0, 0, 0}, {0, 1, 0, 1}, 0.0);
  const auto adv = gae_advantages(b, 0.9, 1.0, false);
  EXPECT_DOUBLE_EQ(adv.raw[1], 10.0);
  EXPECT_DOUBLE_EQ(adv.raw[0], 1.0 + 0.9 * 10.0);
  EXPECT_DOUBLE_EQ(adv.raw[2], 1.0 + 0.9);
}

TEST(Gae, TailBootstrapAndOneStepLimit) {
  const auto b = manual_batch({0, 0}, {0.5, 0.25}, {0, 0}, 2.0);
  const auto full = gae_advantages(b, 1.0, 1.0, false);
  EXPECT_DOUBLE_EQ(full.raw[1], 2.0 - 0.25);
  EXPECT_DOUBLE_EQ(full.raw[0], 2.0 - 0.5);
  EXPECT_DOUBLE_EQ(full.returns[0], 2.0);
  const auto td = gae_advantages(b, 1.0, 0.0, false);  // lambda = 0: one-step TD errors
  EXPECT_DOUBLE_EQ(td.raw[0], 0.25 - 0.5);
  EXPECT_DOUBLE_EQ(td.raw[1], 2.0 - 0.25);
}

TEST(Gae, NormalizationInvariants) {
  Learner s(7);
  Rng rng(8);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  const auto adv = gae_advantages(b, 0.99, 1.0, true);
  const double mean = adv.normalized.mean();
  const double sd = std::sqrt((adv.normalized.array() - mean).square().mean());
  EXPECT_LT(std::abs(mean), 1e-9);
  EXPECT_LT(std::abs(sd - 1.0), 1e-6);
}

TEST(PpoLoss, ZeroAdvantageGivesZeroPolicyLoss) {
  Learner s(9);
  Rng rng(10);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  auto adv = gae_advantages(b, 0.99, 1.0, true);
  adv.normalized.setZero();
  auto moved = s.policy;
  moved.network().params().array() += 0.05;
  const auto idx = all_indices(b.size());
  const auto lg = ppo_loss_gradient(moved, s.value, b, adv, idx, s.ppo);
  EXPECT_EQ(lg.terms.policy_loss, 0.0);
}

TEST(PpoLoss, UnitRatioAtBehaviourPolicy) {
  Learner s(11);
  Rng rng(12);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  const auto adv = gae_advantages(b, 0.99, 1.0, true);
  const auto idx = all_indices(b.size());
  const auto lg = ppo_loss_gradient(s.policy, s.value, b, adv, idx, s.ppo);
  EXPECT_NEAR(lg.terms.policy_loss, -adv.normalized.mean(), 1e-9);
  EXPECT_NEAR(lg.terms.kl, 0.0, 1e-12);
  EXPECT_EQ(lg.terms.clip_fraction, 0.0);
}

TEST(PpoLoss, GradientMatchesFiniteDifferences) {
  Learner s(13);
  Rng rng(14);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  const auto adv = gae_advantages(b, 0.99, 1.0, true);
  const auto idx = all_indices(b.size());

  // Move away from the behaviour policy so ratios and KL are non-trivial.
  UpperPolicy policy = s.policy;
  Rng jitter(15);
  for (auto& w : policy.network().params()) w += 0.02 * jitter.normal();
  for (auto& w : policy.log_std()) w += 0.02 * jitter.normal();
  const auto lg = ppo_loss_gradient(policy, s.value, b, adv, idx, s.ppo);
  ASSERT_GT(lg.terms.kl, 0.0);

  const double h = 1e-6;
  auto fd = [&](auto&& param_ref, Eigen::Index n) {
    Eigen::VectorXd g(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      UpperPolicy p = policy;
      ValueFunction v = s.value;
      double& x = param_ref(p, v, k);
      const double x0 = x;
      x = x0 + h;
      const double up = ppo_loss_gradient(p, v, b, adv, idx, s.ppo).terms.total;
      x = x0 - h;
      const double down = ppo_loss_gradient(p, v, b, adv, idx, s.ppo).terms.total;
      g[k] = (up - down) / (2 * h);
    }
    return g;
  };
  const Eigen::VectorXd g_policy =
      fd([](UpperPolicy& p, ValueFunction&, Eigen::Index k) -> double& { return p.network().params()[k]; },
         policy.network().params().size());
  const Eigen::VectorXd g_log_std =
      fd([](UpperPolicy& p, ValueFunction&, Eigen::Index k) -> double& { return p.log_std()[k]; },
         policy.log_std().size());
  const Eigen::VectorXd g_value =
      fd([](UpperPolicy&, ValueFunction& v, Eigen::Index k) -> double& { return v.network().params()[k]; },
         s.value.network().params().size());

  EXPECT_LT(rel_error(lg.policy_params, g_policy), 1e-4);
  EXPECT_LT(rel_error(lg.log_std, g_log_std), 1e-4);
  EXPECT_LT(rel_error(lg.value_params, g_value), 1e-4);
}

TEST(PpoUpdate, ZeroLearningRateKeepsParameters) {
  Learner s(16);
  s.ppo.learning_rate = 0.0;
  Rng rng(17);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  const UpperPolicy before = s.policy;
  const Eigen::VectorXd value_before = s.value.network().params();
  PpoOptimizer opt(s.policy, s.value, s.ppo);
  for (int i = 0; i < 3; ++i) ppo_update(s.policy, s.value, opt, b, s.ppo, rng);
  EXPECT_TRUE(s.policy == before);
  EXPECT_EQ(s.value.network().params(), value_before);
}

TEST(PpoUpdate, NonFiniteGradientRestoresParameters) {
  Learner s(18);
  Rng rng(19);
  auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  b.rewards[5] = std::numeric_limits<double>::quiet_NaN();
  const UpperPolicy before = s.policy;
  PpoOptimizer opt(s.policy, s.value, s.ppo);
  const auto diag = ppo_update(s.policy, s.value, opt, b, s.ppo, rng);
  EXPECT_TRUE(diag.aborted);
  EXPECT_TRUE(s.policy == before);
}

TEST(PpoUpdate, ImprovesSurrogateOnFixedBatch) {
  Learner s(20);
  Rng rng(21);
  const auto b = collect_rollouts(s.policy, s.value, s.config, s.ppo, rng);
  const auto adv = gae_advantages(b, 0.99, 1.0, true);
  const auto idx = all_indices(b.size());
  const double before = ppo_loss_gradient(s.policy, s.value, b, adv, idx, s.ppo).terms.total;
  PpoOptimizer opt(s.policy, s.value, s.ppo);
  ppo_update(s.policy, s.value, opt, b, s.ppo, rng);
  EXPECT_LT(ppo_loss_gradient(s.policy, s.value, b, adv, idx, s.ppo).terms.total, before);
}

TEST(Train, ZeroBudgetReturnsUniformRule) {
  PpoConfig ppo;
  ppo.hidden_width = 32;
  const auto r = train(SystemConfig{}, ppo, 1);
  EXPECT_TRUE(r.curve.empty());
  Rng rng(1);
  EXPECT_EQ(r.best_policy.decide(QueueDist::uniform(5), 0, PolicyMode::kDeterministic, rng).rule,
            mf_rnd_rule(5, 2));
}

TEST(Train, BestSoFarIsMonotoneAndRunsAreDeterministic) {
  const auto ppo = [] {
    auto p = small_ppo();
    p.iterations = 4;
    return p;
  }();
  const auto a = train(small_system(), ppo, 42);
  const auto b = train(small_system(), ppo, 42);
  ASSERT_EQ(a.curve.size(), 4u);
  for (std::size_t i = 1; i < a.curve.size(); ++i)
    EXPECT_GE(a.curve[i].best_return, a.curve[i - 1].best_return);
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].mean_return, b.curve[i].mean_return);
    EXPECT_EQ(a.curve[i].mean_kl, b.curve[i].mean_kl);
  }
  EXPECT_TRUE(a.final_policy == b.final_policy);
}

TEST(PpoConfigValidation, RejectsBadValues) {
  PpoConfig p;
  p.minibatch = 0;
  EXPECT_THROW(p.validate(), ModelError);
  p = PpoConfig{};
  p.clip = -1;
  EXPECT_THROW(p.validate(), ModelError);
}
