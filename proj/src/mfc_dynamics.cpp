#include "mflb/mfc_dynamics.hpp"

#include <cmath>

namespace mflb {

Matrix build_generator(int buffer, double arrival_rate, double service_rate) {
  const int n = buffer + 1;
  Matrix q = Matrix::Zero(n, n);
  for (int i = 1; i <= buffer; ++i) {
    q(i, i - 1) = arrival_rate;
    q(i - 1, i) = service_rate;
  }
  for (int i = 0; i < n; ++i) q(i, i) = -(q.col(i).sum() - q(i, i));
  return q;
}

Matrix build_generator(const QueueDist& nu, const DecisionRule& h, double lambda, int z,
                       double service_rate) {
  return build_generator(nu.buffer(), effective_rate(nu, h, lambda, z), service_rate);
}

Matrix build_extended_generator(int buffer, double arrival_rate, double service_rate) {
  const int n = buffer + 1;
  Matrix qbar = Matrix::Zero(n + 1, n + 1);
  qbar.topLeftCorner(n, n) = build_generator(buffer, arrival_rate, service_rate);
  qbar(n, buffer) = arrival_rate;
  return qbar;
}

Matrix matrix_exponential(const Matrix& a, double t) {
  if (a.rows() != a.cols()) throw ModelError("matrix_exponential: matrix is not square");
  if (!a.allFinite() || !std::isfinite(t)) throw ModelError("matrix_exponential: non-finite input");
  const Eigen::Index n = a.rows();
  Matrix scaled = a * t;

  // Scale so that the 1-norm is at most 1/2, then sum the Taylor series until
  // the next term no longer changes the sum in double precision.
  const double norm = scaled.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  scaled /= std::ldexp(1.0, squarings);

  Matrix sum = Matrix::Identity(n, n);
  Matrix term = Matrix::Identity(n, n);
  for (int k = 1; k <= 60; ++k) {
    term = term * scaled / static_cast<double>(k);
    sum += term;
    if (term.cwiseAbs().maxCoeff() <= 1e-18 * sum.cwiseAbs().maxCoeff()) break;
  }
  for (int i = 0; i < squarings; ++i) sum = sum * sum;
  return sum;
}

EpochResult epoch_transition(const QueueDist& nu, const DecisionRule& h, double lambda,
                             const SystemConfig& config) {
  const int buffer = nu.buffer();
  const auto rates = effective_rates(nu, h, lambda);
  std::vector<double> next(nu.size(), 0.0);
  double drops = 0.0;
  for (int z = 0; z <= buffer; ++z) {
    if (nu[z] == 0.0) continue;
    const Matrix qbar = build_extended_generator(buffer, rates[z], config.service_rate);
    const Matrix e = matrix_exponential(qbar, config.delta_t);
    for (int zp = 0; zp <= buffer; ++zp) next[zp] += nu[z] * e(zp, z);
    drops += nu[z] * e(buffer + 1, z);
  }
  // Truncation error can leave tiny negatives; clamp before validation.
  for (double& x : next) x = std::max(x, 0.0);
  return {QueueDist(std::move(next)), drops};
}

StepResult mfc_step(const MfcState& state, const DecisionRule& h, const SystemConfig& config,
                    Rng& rng) {
  const double lambda = config.arrival.level(state.arrival_level);
  auto epoch = epoch_transition(state.nu, h, lambda, config);
  const std::size_t next_level = config.arrival.sample_next(state.arrival_level, rng);
  return {MfcState{std::move(epoch.next_nu), next_level},
          -config.drop_penalty * epoch.expected_drops, epoch.expected_drops};
}

MfcTrajectory mfc_rollout(const RuleProvider& policy, const SystemConfig& config, int horizon,
                          Rng& rng) {
  if (horizon < 1) throw ModelError("mfc_rollout: horizon must be at least 1");
  MfcTrajectory traj;
  MfcState state{config.nu0, config.arrival.sample_initial(rng)};
  double discount = 1.0;
  for (int t = 0; t < horizon; ++t) {
    DecisionRule h = policy(state.nu, state.arrival_level);
    auto step = mfc_step(state, h, config, rng);
    traj.states.push_back(state);
    traj.rules.push_back(std::move(h));
    traj.rewards.push_back(step.reward);
    traj.discounted_return += discount * step.reward;
    traj.total_drops += step.drops;
    discount *= config.discount;
    state = std::move(step.next);
  }
  traj.states.push_back(state);
  return traj;
}

}  // namespace mflb
