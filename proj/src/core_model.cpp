#include "mflb/core_model.hpp"

#include <cmath>
#include <numeric>

namespace mflb {

namespace {

// Validates a probability vector and renormalizes it in place.
void normalize_simplex(std::vector<double>& p, double tol, const char* what) {
  if (p.empty()) throw ModelError(std::string(what) + ": empty probability vector");
  double sum = 0.0;
  for (double x : p) {
    if (!std::isfinite(x) || x < -tol || x > 1.0 + tol)
      throw ModelError(std::string(what) + ": entry outside [0,1]: " + std::to_string(x));
    sum += x;
  }
  if (std::abs(sum - 1.0) > tol)
    throw ModelError(std::string(what) + ": entries sum to " + std::to_string(sum));
  for (double& x : p) x = std::max(x, 0.0) / sum;
}

}  // namespace

QueueDist::QueueDist(std::vector<double> probs) : probs_(std::move(probs)) {
  normalize_simplex(probs_, kSimplexTolerance, "QueueDist");
  if (probs_.size() < 2) throw ModelError("QueueDist: buffer must be at least 1");
}

QueueDist QueueDist::point_mass(int buffer, int fill) {
  if (fill < 0 || fill > buffer) throw ModelError("QueueDist::point_mass: fill out of range");
  std::vector<double> p(buffer + 1, 0.0);
  p[fill] = 1.0;
  return QueueDist(std::move(p));
}

QueueDist QueueDist::uniform(int buffer) {
  return QueueDist(std::vector<double>(buffer + 1, 1.0 / (buffer + 1)));
}

ArrivalProcess::ArrivalProcess(std::vector<double> levels,
                               std::vector<std::vector<double>> transition,
                               std::vector<double> initial)
    : levels_(std::move(levels)), transition_(std::move(transition)), initial_(std::move(initial)) {
  if (levels_.empty()) throw ModelError("ArrivalProcess: no levels");
  for (double l : levels_)
    if (!(l > 0.0) || !std::isfinite(l)) throw ModelError("ArrivalProcess: levels must be positive");
  if (transition_.size() != levels_.size())
    throw ModelError("ArrivalProcess: transition matrix has wrong row count");
  for (auto& row : transition_) {
    if (row.size() != levels_.size())
      throw ModelError("ArrivalProcess: transition matrix has wrong column count");
    normalize_simplex(row, 1e-12, "ArrivalProcess transition row");
  }
  if (initial_.size() != levels_.size())
    throw ModelError("ArrivalProcess: initial distribution has wrong size");
  normalize_simplex(initial_, kSimplexTolerance, "ArrivalProcess initial");
}

ArrivalProcess ArrivalProcess::constant(double rate) {
  return ArrivalProcess({rate}, {{1.0}}, {1.0});
}

ArrivalProcess ArrivalProcess::two_level(double high, double low, double p_high_low,
                                         double p_low_high) {
  return ArrivalProcess({high, low},
                        {{1.0 - p_high_low, p_high_low}, {p_low_high, 1.0 - p_low_high}},
                        {0.5, 0.5});
}

std::size_t ArrivalProcess::sample_uniform(Rng& rng) const {
  const std::vector<double> w(levels_.size(), 1.0 / static_cast<double>(levels_.size()));
  return rng.categorical(w);
}

std::size_t pow_size(std::size_t base, int exponent) {
  std::size_t r = 1;
  for (int i = 0; i < exponent; ++i) r *= base;
  return r;
}

DecisionRule::DecisionRule(int buffer, int d, std::vector<double> table)
    : buffer_(buffer), d_(d), num_rows_(0), table_(std::move(table)) {
  if (buffer < 1 || d < 1) throw ModelError("DecisionRule: buffer and d must be positive");
  num_rows_ = pow_size(static_cast<std::size_t>(buffer) + 1, d);
  if (table_.size() != num_rows_ * static_cast<std::size_t>(d))
    throw ModelError("DecisionRule: table size does not match (B+1)^d x d");
  std::vector<double> row(d);
  for (std::size_t r = 0; r < num_rows_; ++r) {
    std::copy_n(table_.begin() + r * d, d, row.begin());
    normalize_simplex(row, kSimplexTolerance, "DecisionRule row");
    std::copy(row.begin(), row.end(), table_.begin() + r * d);
  }
}

std::size_t DecisionRule::encode(std::span<const int> fills) const {
  std::size_t idx = 0;
  for (int z : fills) idx = idx * (buffer_ + 1) + static_cast<std::size_t>(z);
  return idx;
}

std::vector<int> DecisionRule::decode(std::size_t row) const {
  std::vector<int> fills(d_);
  for (int k = d_ - 1; k >= 0; --k) {
    fills[k] = static_cast<int>(row % (buffer_ + 1));
    row /= (buffer_ + 1);
  }
  return fills;
}

void SystemConfig::validate() const {
  if (num_queues < 1) throw ModelError("num_queues must be positive");
  if (num_clients < 1) throw ModelError("num_clients must be positive");
  if (d < 1) throw ModelError("d must be positive");
  if (d > num_queues) throw ModelError("d must not exceed num_queues");
  if (buffer < 1) throw ModelError("buffer must be at least 1");
  if (!(service_rate > 0.0)) throw ModelError("service_rate must be positive");
  if (!(delta_t > 0.0)) throw ModelError("delta_t must be positive");
  if (!(discount > 0.0 && discount < 1.0)) throw ModelError("discount must lie in (0,1)");
  if (!(drop_penalty > 0.0)) throw ModelError("drop_penalty must be positive");
  if (nu0.buffer() != buffer) throw ModelError("nu0 length does not match buffer + 1");
}

SystemConfig reference_config(double delta_t) {
  SystemConfig c;
  c.delta_t = delta_t;
  return c;
}

std::vector<double> product_measure(const QueueDist& nu, int d) {
  const std::size_t levels = nu.size();
  std::vector<double> mu{1.0};
  for (int k = 0; k < d; ++k) {
    std::vector<double> next(mu.size() * levels);
    for (std::size_t i = 0; i < mu.size(); ++i)
      for (std::size_t z = 0; z < levels; ++z) next[i * levels + z] = mu[i] * nu[z];
    mu = std::move(next);
  }
  return mu;
}

std::vector<double> state_action_dist(std::span<const double> mu, const DecisionRule& h) {
  if (mu.size() != h.num_rows()) throw ModelError("state_action_dist: size mismatch");
  std::vector<double> g(h.table().size());
  const int d = h.d();
  for (std::size_t r = 0; r < mu.size(); ++r)
    for (int u = 0; u < d; ++u) g[r * d + u] = mu[r] * h.prob(r, u);
  return g;
}

std::vector<double> thinned_rates(const QueueDist& nu, const DecisionRule& h, double lambda) {
  if (nu.buffer() != h.buffer()) throw ModelError("thinned_rates: buffer mismatch");
  const auto mu = product_measure(nu, h.d());
  std::vector<double> rates(nu.size(), 0.0);
  std::vector<int> fills(h.d(), 0);
  for (std::size_t r = 0; r < mu.size(); ++r) {
    if (mu[r] != 0.0) {
      for (int u = 0; u < h.d(); ++u) rates[fills[u]] += mu[r] * h.prob(r, u);
    }
    // odometer increment, last slot fastest (matches encode)
    for (int k = h.d() - 1; k >= 0; --k) {
      if (++fills[k] <= h.buffer()) break;
      fills[k] = 0;
    }
  }
  for (double& x : rates) x *= lambda;
  return rates;
}

double thinned_rate(const QueueDist& nu, const DecisionRule& h, double lambda, int z) {
  return thinned_rates(nu, h, lambda).at(z);
}

std::vector<double> effective_rates(const QueueDist& nu, const DecisionRule& h, double lambda) {
  auto rates = thinned_rates(nu, h, lambda);
  for (std::size_t z = 0; z < rates.size(); ++z) rates[z] = nu[z] > 0.0 ? rates[z] / nu[z] : 0.0;
  return rates;
}

double effective_rate(const QueueDist& nu, const DecisionRule& h, double lambda, int z) {
  return effective_rates(nu, h, lambda).at(z);
}

}  // namespace mflb
