#pragma once

// Proximal policy optimization of the upper-level policy on the mean-field
// decision process: rollout collection, generalized advantage estimation,
// clipped surrogate with a fixed KL penalty, and an MSE value baseline.

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "mflb/mfc_dynamics.hpp"
#include "mflb/policies.hpp"

namespace mflb {

struct PpoConfig {
  double discount = 0.99;
  double gae_lambda = 1.0;
  double kl_coefficient = 0.2;
  double clip = 0.3;
  double learning_rate = 5e-5;
  int train_batch = 4000;
  int minibatch = 128;
  int epochs_per_iteration = 30;
  int episode_length = 500;
  int iterations = 0;

  double value_loss_coefficient = 1.0;
  bool normalize_advantages = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  // Initialization of the policy head.
  double initial_log_std = 0.0;
  double initial_output_bias = 1.0;
  int hidden_width = 256;
  int hidden_layers = 2;

  // Deterministic evaluation episodes per iteration used to rank checkpoints;
  // 0 ranks by the mean training return instead.
  int eval_episodes = 0;

  void validate() const;
};

class ValueFunction {
 public:
  ValueFunction(int observation_dim, int hidden_width, int hidden_layers);
  void initialize(Rng& rng);

  Mlp& network() { return net_; }
  const Mlp& network() const { return net_; }

  double value(const Eigen::VectorXd& observation) const { return net_.forward_one(observation)[0]; }
  Eigen::VectorXd values(const Eigen::MatrixXd& observations) const;

 private:
  Mlp net_;
};

struct RolloutBatch {
  Eigen::MatrixXd observations;  // obs_dim x n
  Eigen::MatrixXd actions;       // raw Gaussian actions, act_dim x n
  Eigen::MatrixXd means;         // behaviour policy means, act_dim x n
  Eigen::VectorXd log_std;       // behaviour policy log std
  Eigen::VectorXd log_probs;
  Eigen::VectorXd rewards;
  Eigen::VectorXd values;
  std::vector<std::uint8_t> episode_end;  // step t is the last step of an episode
  double tail_value = 0.0;  // V(s_n) when the last step is not an episode end

  std::vector<double> episode_returns;  // discounted returns of completed episodes

  std::size_t size() const { return static_cast<std::size_t>(rewards.size()); }
};

// Runs stochastic-mode episodes of ppo.episode_length until exactly
// ppo.train_batch steps are collected; the last episode may be cut short.
// Throws ModelError on a non-finite reward.
RolloutBatch collect_rollouts(const UpperPolicy& policy, const ValueFunction& value_fn,
                              const SystemConfig& config, const PpoConfig& ppo, Rng& rng);

struct Advantages {
  Eigen::VectorXd raw;         // before normalization
  Eigen::VectorXd normalized;  // zero mean, unit variance (equals raw when disabled)
  Eigen::VectorXd returns;     // value targets: raw + values
};

Advantages gae_advantages(const RolloutBatch& batch, double discount, double gae_lambda,
                          bool normalize = true);

struct LossTerms {
  double policy_loss = 0.0;
  double kl = 0.0;
  double value_loss = 0.0;
  double total = 0.0;
  double clip_fraction = 0.0;
};

struct LossGradient {
  LossTerms terms;
  Eigen::VectorXd policy_params;
  Eigen::VectorXd log_std;
  Eigen::VectorXd value_params;
};

// Minibatch loss
//   -mean(min(r A, clip(r, 1-c, 1+c) A)) + beta mean(KL(old || new))
//   + c_v mean((V - target)^2)
// and its analytic gradient; r is the density ratio of the raw actions.
LossGradient ppo_loss_gradient(const UpperPolicy& policy, const ValueFunction& value_fn,
                               const RolloutBatch& batch, const Advantages& adv,
                               std::span<const std::size_t> indices, const PpoConfig& ppo);

// Adam over a flat parameter vector.
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index size, double beta1, double beta2, double epsilon);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, double learning_rate);

 private:
  Eigen::VectorXd m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, epsilon_ = 1e-8;
  long t_ = 0;
};

struct PpoOptimizer {
  Adam policy;
  Adam log_std;
  Adam value;

  PpoOptimizer(const UpperPolicy& p, const ValueFunction& v, const PpoConfig& ppo);
};

struct UpdateDiagnostics {
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  bool aborted = false;  // non-finite gradient; parameters were restored
};

UpdateDiagnostics ppo_update(UpperPolicy& policy, ValueFunction& value_fn, PpoOptimizer& optimizer,
                             const RolloutBatch& batch, const PpoConfig& ppo, Rng& rng);

struct IterationLog {
  int iteration = 0;
  long timesteps = 0;
  double mean_return = 0.0;
  double best_return = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
};

struct TrainResult {
  UpperPolicy final_policy;
  UpperPolicy best_policy;
  std::vector<IterationLog> curve;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints and train_log.csv
  std::function<void(const IterationLog&)> on_iteration;
};

TrainResult train(const SystemConfig& config, const PpoConfig& ppo, std::uint64_t seed,
                  const TrainOptions& options = {});

// Mean discounted return of deterministic rollouts, one per seed.
double deterministic_return(const UpperPolicy& policy, const SystemConfig& config, int horizon,
                            std::span<const std::uint64_t> seeds);

}  // namespace mflb
