#pragma once

// Exact one-epoch discretization of the mean-field queue system and the
// resulting upper-level decision process over (nu, arrival level).

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "mflb/core_model.hpp"

namespace mflb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Transposed birth-death rate matrix for a queue that was observed at the
// start of the epoch at some fill level: column = from-state, row = to-state.
// Arrivals occur at arrival_rate from every fill below B, services at
// service_rate from every fill above 0. Columns sum to zero.
Matrix build_generator(int buffer, double arrival_rate, double service_rate);
Matrix build_generator(const QueueDist& nu, const DecisionRule& h, double lambda, int z,
                       double service_rate);

// Generator augmented with a drop-accumulation row: entry (B+1, B) is the
// arrival rate, last column zero.
Matrix build_extended_generator(int buffer, double arrival_rate, double service_rate);

// exp(a t) by scaling and squaring with an adaptively truncated Taylor series.
// Throws ModelError on non-finite input.
Matrix matrix_exponential(const Matrix& a, double t);

struct EpochResult {
  QueueDist next_nu;
  double expected_drops;  // per queue, over one epoch
};

EpochResult epoch_transition(const QueueDist& nu, const DecisionRule& h, double lambda,
                             const SystemConfig& config);

struct MfcState {
  QueueDist nu;
  std::size_t arrival_level = 0;
};

struct StepResult {
  MfcState next;
  double reward;
  double drops;
};

StepResult mfc_step(const MfcState& state, const DecisionRule& h, const SystemConfig& config,
                    Rng& rng);

// Upper-level policy as seen by the dynamics: (nu, arrival level) -> rule.
using RuleProvider = std::function<DecisionRule(const QueueDist&, std::size_t)>;

struct MfcTrajectory {
  std::vector<MfcState> states;  // states[t] is the state before step t
  std::vector<DecisionRule> rules;
  std::vector<double> rewards;
  double discounted_return = 0.0;
  double total_drops = 0.0;  // undiscounted, per queue
};

// Rolls out `horizon` epochs from nu0 with the initial level drawn from the
// arrival process. Only `rng` drives the arrival chain, so rollouts sharing
// a seed share their arrival-level path.
MfcTrajectory mfc_rollout(const RuleProvider& policy, const SystemConfig& config, int horizon,
                          Rng& rng);

}  // namespace mflb
