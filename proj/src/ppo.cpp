#include "mflb/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

namespace mflb {

void PpoConfig::validate() const {
  if (!(discount > 0.0 && discount < 1.0)) throw ModelError("ppo: discount must lie in (0,1)");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ModelError("ppo: gae_lambda must lie in [0,1]");
  if (!(clip > 0.0)) throw ModelError("ppo: clip must be positive");
  if (!(kl_coefficient >= 0.0)) throw ModelError("ppo: kl_coefficient must be nonnegative");
  if (!(learning_rate >= 0.0)) throw ModelError("ppo: learning_rate must be nonnegative");
  if (train_batch < 1 || minibatch < 1 || epochs_per_iteration < 0 || episode_length < 1)
    throw ModelError("ppo: batch sizes, epochs and episode length must be positive");
  if (iterations < 0 || eval_episodes < 0) throw ModelError("ppo: negative iteration budget");
}

ValueFunction::ValueFunction(int observation_dim, int hidden_width, int hidden_layers) {
  std::vector<int> sizes{observation_dim};
  for (int l = 0; l < hidden_layers; ++l) sizes.push_back(hidden_width);
  sizes.push_back(1);
  net_ = Mlp(std::move(sizes));
}

void ValueFunction::initialize(Rng& rng) { net_.initialize(rng, 1.0, 0.01); }

Eigen::VectorXd ValueFunction::values(const Eigen::MatrixXd& observations) const {
  return net_.forward(observations).row(0).transpose();
}

RolloutBatch collect_rollouts(const UpperPolicy& policy, const ValueFunction& value_fn,
                              const SystemConfig& config, const PpoConfig& ppo, Rng& rng) {
  const int obs_dim = policy.shape().observation_dim();
  const int act_dim = policy.shape().action_dim();
  const auto n = static_cast<Eigen::Index>(ppo.train_batch);

  RolloutBatch b;
  b.observations.resize(obs_dim, n);
  b.actions.resize(act_dim, n);
  b.means.resize(act_dim, n);
  b.log_std = policy.log_std();
  b.log_probs.resize(n);
  b.rewards.resize(n);
  b.episode_end.assign(static_cast<std::size_t>(n), 0);

  Eigen::Index t = 0;
  MfcState state{config.nu0, 0};
  while (t < n) {
    const std::uint64_t episode_seed = rng();
    Rng arrival(episode_seed, {1});
    Rng noise(episode_seed, {3});
    state = MfcState{config.nu0, config.arrival.sample_initial(arrival)};
    double ret = 0.0;
    double discount = 1.0;
    for (int k = 0; k < ppo.episode_length && t < n; ++k, ++t) {
      b.observations.col(t) = policy.observation(state.nu, state.arrival_level);
      auto decision = policy.decide(state.nu, state.arrival_level, PolicyMode::kStochastic, noise);
      auto step = mfc_step(state, decision.rule, config, arrival);
      if (!std::isfinite(step.reward))
        throw ModelError("collect_rollouts: non-finite reward at step " + std::to_string(t));
      b.actions.col(t) = decision.raw_action;
      b.means.col(t) = decision.mean;
      b.log_probs[t] = decision.log_prob;
      b.rewards[t] = step.reward;
      ret += discount * step.reward;
      discount *= config.discount;
      state = std::move(step.next);
      if (k + 1 == ppo.episode_length) {
        b.episode_end[static_cast<std::size_t>(t)] = 1;
        b.episode_returns.push_back(ret);
      }
    }
  }
  b.values = value_fn.values(b.observations);
  if (!b.episode_end.back())
    b.tail_value = value_fn.value(policy.observation(state.nu, state.arrival_level));
  return b;
}

Advantages gae_advantages(const RolloutBatch& batch, double discount, double gae_lambda,
                          bool normalize) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  Advantages adv;
  adv.raw.resize(n);
  double next_value = batch.tail_value;
  double next_adv = 0.0;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    if (batch.episode_end[static_cast<std::size_t>(t)]) {
      next_value = 0.0;
      next_adv = 0.0;
    }
    const double delta = batch.rewards[t] + discount * next_value - batch.values[t];
    adv.raw[t] = delta + discount * gae_lambda * next_adv;
    next_value = batch.values[t];
    next_adv = adv.raw[t];
  }
  adv.returns = adv.raw + batch.values;
  adv.normalized = adv.raw;
  if (normalize && n > 0) {
    const double mean = adv.raw.mean();
    const double var = (adv.raw.array() - mean).square().mean();
    adv.normalized = adv.raw.array() - mean;
    if (var > 0.0) adv.normalized /= std::sqrt(var);
  }
  return adv;
}

LossGradient ppo_loss_gradient(const UpperPolicy& policy, const ValueFunction& value_fn,
                               const RolloutBatch& batch, const Advantages& adv,
                               std::span<const std::size_t> indices, const PpoConfig& ppo) {
  const auto m = static_cast<Eigen::Index>(indices.size());
  const int obs_dim = policy.shape().observation_dim();
  const int act_dim = policy.shape().action_dim();
  Eigen::MatrixXd obs(obs_dim, m), actions(act_dim, m), old_means(act_dim, m);
  Eigen::VectorXd old_logp(m), a(m), targets(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto s = static_cast<Eigen::Index>(indices[static_cast<std::size_t>(i)]);
    obs.col(i) = batch.observations.col(s);
    actions.col(i) = batch.actions.col(s);
    old_means.col(i) = batch.means.col(s);
    old_logp[i] = batch.log_probs[s];
    a[i] = adv.normalized[s];
    targets[i] = adv.returns[s];
  }

  Mlp::Cache pcache, vcache;
  const Eigen::MatrixXd means = policy.network().forward(obs, &pcache);
  const Eigen::MatrixXd values = value_fn.network().forward(obs, &vcache);

  const Eigen::ArrayXd log_std = policy.log_std().array();
  const Eigen::ArrayXd inv_var = (-2.0 * log_std).exp();
  const Eigen::ArrayXd old_var = (2.0 * batch.log_std.array()).exp();
  const double log_norm = -log_std.sum() - 0.5 * act_dim * std::log(2.0 * std::numbers::pi);
  const double inv_m = 1.0 / static_cast<double>(m);
  const double beta = ppo.kl_coefficient;

  LossGradient out;
  Eigen::MatrixXd grad_means(act_dim, m);
  Eigen::ArrayXd grad_log_std = Eigen::ArrayXd::Zero(act_dim);
  Eigen::MatrixXd grad_values(1, m);
  long clipped = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::ArrayXd diff = (actions.col(i) - means.col(i)).array();
    const Eigen::ArrayXd diff2 = diff.square() * inv_var;
    const double logp = -0.5 * diff2.sum() + log_norm;
    const double ratio = std::exp(logp - old_logp[i]);
    const double clipped_ratio = std::clamp(ratio, 1.0 - ppo.clip, 1.0 + ppo.clip);
    const double surr1 = ratio * a[i];
    const double surr2 = clipped_ratio * a[i];
    if (std::abs(ratio - 1.0) > ppo.clip) ++clipped;
    out.terms.policy_loss -= std::min(surr1, surr2) * inv_m;
    // d(-min)/dlogp; zero when the clipped branch is active.
    const double g = surr1 <= surr2 ? -a[i] * ratio * inv_m : 0.0;

    const Eigen::ArrayXd mean_gap = (means.col(i) - old_means.col(i)).array();
    const Eigen::ArrayXd kl_num = old_var + mean_gap.square();
    const double kl = (log_std - batch.log_std.array() + 0.5 * kl_num * inv_var - 0.5).sum();
    out.terms.kl += kl * inv_m;

    grad_means.col(i) =
        (g * diff * inv_var + beta * inv_m * mean_gap * inv_var).matrix();
    grad_log_std += g * (diff2 - 1.0) + beta * inv_m * (1.0 - kl_num * inv_var);

    const double verr = values(0, i) - targets[i];
    out.terms.value_loss += verr * verr * inv_m;
    grad_values(0, i) = 2.0 * ppo.value_loss_coefficient * verr * inv_m;
  }
  out.terms.clip_fraction = static_cast<double>(clipped) * inv_m;
  out.terms.total = out.terms.policy_loss + beta * out.terms.kl +
                    ppo.value_loss_coefficient * out.terms.value_loss;
  out.policy_params = policy.network().backward(pcache, grad_means);
  out.log_std = grad_log_std.matrix();
  out.value_params = value_fn.network().backward(vcache, grad_values);
  return out;
}

Adam::Adam(Eigen::Index size, double beta1, double beta2, double epsilon)
    : m_(Eigen::VectorXd::Zero(size)),
      v_(Eigen::VectorXd::Zero(size)),
      beta1_(beta1),
      beta2_(beta2),
      epsilon_(epsilon) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, double learning_rate) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + epsilon_);
}

PpoOptimizer::PpoOptimizer(const UpperPolicy& p, const ValueFunction& v, const PpoConfig& ppo)
    : policy(p.network().params().size(), ppo.adam_beta1, ppo.adam_beta2, ppo.adam_epsilon),
      log_std(p.log_std().size(), ppo.adam_beta1, ppo.adam_beta2, ppo.adam_epsilon),
      value(v.network().params().size(), ppo.adam_beta1, ppo.adam_beta2, ppo.adam_epsilon) {}

namespace {

double mean_kl(const UpperPolicy& policy, const RolloutBatch& batch) {
  const Eigen::MatrixXd means = policy.network().forward(batch.observations);
  const Eigen::ArrayXd log_std = policy.log_std().array();
  const Eigen::ArrayXd inv_var = (-2.0 * log_std).exp();
  const Eigen::ArrayXd old_var = (2.0 * batch.log_std.array()).exp();
  const double const_part = (log_std - batch.log_std.array() + 0.5 * old_var * inv_var - 0.5).sum();
  const Eigen::ArrayXXd gap2 = (means - batch.means).array().square();
  const double quad = 0.5 * (gap2.colwise() * inv_var).sum();
  return const_part + quad / static_cast<double>(batch.size());
}

}  // namespace

UpdateDiagnostics ppo_update(UpperPolicy& policy, ValueFunction& value_fn, PpoOptimizer& optimizer,
                             const RolloutBatch& batch, const PpoConfig& ppo, Rng& rng) {
  const UpperPolicy saved_policy = policy;
  const ValueFunction saved_value = value_fn;
  const PpoOptimizer saved_optimizer = optimizer;

  const Advantages adv = gae_advantages(batch, ppo.discount, ppo.gae_lambda, ppo.normalize_advantages);
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);

  UpdateDiagnostics diag;
  long minibatches = 0;
  for (int epoch = 0; epoch < ppo.epochs_per_iteration; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    for (std::size_t start = 0; start < order.size(); start += ppo.minibatch) {
      const std::size_t len = std::min<std::size_t>(ppo.minibatch, order.size() - start);
      const auto lg = ppo_loss_gradient(policy, value_fn, batch, adv,
                                        std::span<const std::size_t>(order).subspan(start, len), ppo);
      if (!lg.policy_params.allFinite() || !lg.log_std.allFinite() || !lg.value_params.allFinite() ||
          !std::isfinite(lg.terms.total)) {
        policy = saved_policy;
        value_fn = saved_value;
        optimizer = saved_optimizer;
        diag.aborted = true;
        return diag;
      }
      optimizer.policy.step(policy.network().params(), lg.policy_params, ppo.learning_rate);
      optimizer.log_std.step(policy.log_std(), lg.log_std, ppo.learning_rate);
      optimizer.value.step(value_fn.network().params(), lg.value_params, ppo.learning_rate);
      diag.clip_fraction += lg.terms.clip_fraction;
      diag.policy_loss += lg.terms.policy_loss;
      diag.value_loss += lg.terms.value_loss;
      ++minibatches;
    }
  }
  if (minibatches > 0) {
    diag.clip_fraction /= static_cast<double>(minibatches);
    diag.policy_loss /= static_cast<double>(minibatches);
    diag.value_loss /= static_cast<double>(minibatches);
  }
  diag.mean_kl = mean_kl(policy, batch);
  return diag;
}

double deterministic_return(const UpperPolicy& policy, const SystemConfig& config, int horizon,
                            std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) return 0.0;
  const auto provider = policy_provider(policy, PolicyMode::kDeterministic);
  double sum = 0.0;
  for (std::uint64_t s : seeds) {
    Rng arrival(s, {1});
    sum += mfc_rollout(provider, config, horizon, arrival).discounted_return;
  }
  return sum / static_cast<double>(seeds.size());
}

TrainResult train(const SystemConfig& config, const PpoConfig& ppo, std::uint64_t seed,
                  const TrainOptions& options) {
  config.validate();
  ppo.validate();
  UpperPolicyShape shape{config.buffer, config.d, static_cast<int>(config.arrival.num_levels()),
                         ppo.hidden_width, ppo.hidden_layers};
  UpperPolicy policy(shape);
  Rng policy_init(seed, {10});
  policy.initialize(policy_init, ppo.initial_log_std, ppo.initial_output_bias);
  ValueFunction value_fn(shape.observation_dim(), ppo.hidden_width, ppo.hidden_layers);
  Rng value_init(seed, {11});
  value_fn.initialize(value_init);
  PpoOptimizer optimizer(policy, value_fn, ppo);

  std::vector<std::uint64_t> eval_seeds;
  for (int k = 0; k < ppo.eval_episodes; ++k)
    eval_seeds.push_back(derive_seed(seed, {20, static_cast<std::uint64_t>(k)}));

  std::ofstream log;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    log.open(*options.out_dir / "train_log.csv");
    if (!log) throw ModelError("cannot write training log in " + options.out_dir->string());
    log << "iteration,timesteps,mean_return,best_return,mean_kl,clip_fraction\n";
    log.precision(17);
  }

  TrainResult result{policy, policy, {}};
  double best = -std::numeric_limits<double>::infinity();
  long timesteps = 0;
  for (int it = 1; it <= ppo.iterations; ++it) {
    Rng it_rng(seed, {30, static_cast<std::uint64_t>(it)});
    const UpperPolicy before = policy;
    const RolloutBatch batch = collect_rollouts(policy, value_fn, config, ppo, it_rng);
    const UpdateDiagnostics diag = ppo_update(policy, value_fn, optimizer, batch, ppo, it_rng);
    timesteps += static_cast<long>(batch.size());

    IterationLog entry;
    entry.iteration = it;
    entry.timesteps = timesteps;
    entry.mean_return =
        batch.episode_returns.empty()
            ? std::numeric_limits<double>::quiet_NaN()
            : std::accumulate(batch.episode_returns.begin(), batch.episode_returns.end(), 0.0) /
                  static_cast<double>(batch.episode_returns.size());
    entry.mean_kl = diag.mean_kl;
    entry.clip_fraction = diag.clip_fraction;

    // Rank either the updated policy on fixed evaluation seeds or the policy
    // that generated the batch by its training return.
    const bool use_eval = !eval_seeds.empty();
    const double score =
        use_eval ? deterministic_return(policy, config, ppo.episode_length, eval_seeds) : entry.mean_return;
    if (score > best) {
      best = score;
      result.best_policy = use_eval ? policy : before;
      if (options.out_dir) save_checkpoint(*options.out_dir / "best.json", result.best_policy, config);
    }
    entry.best_return = best;
    result.curve.push_back(entry);
    if (log) {
      log << entry.iteration << ',' << entry.timesteps << ',' << entry.mean_return << ','
          << entry.best_return << ',' << entry.mean_kl << ',' << entry.clip_fraction << '\n';
      log.flush();
    }
    if (options.on_iteration) options.on_iteration(entry);
  }
  result.final_policy = policy;
  if (options.out_dir) {
    save_checkpoint(*options.out_dir / "final.json", policy, config);
    if (ppo.iterations == 0) save_checkpoint(*options.out_dir / "best.json", policy, config);
  }
  return result;
}

}  // namespace mflb
