#pragma once

// Domain types of the load-balancing model and the mean-field rate algebra:
// product measure of sampled queue fills, state-action distribution,
// Poisson-thinned arrival rates per fill level and the resulting effective
// per-queue arrival rate.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflb/rng.hpp"

namespace mflb {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kSimplexTolerance = 1e-9;

// Probability vector over queue fill levels 0..B (the mean-field state).
class QueueDist {
 public:
  // Validates and renormalizes. Throws ModelError when entries fall outside
  // [0,1] or the sum deviates from 1 by more than kSimplexTolerance.
  explicit QueueDist(std::vector<double> probs);

  static QueueDist point_mass(int buffer, int fill);
  static QueueDist uniform(int buffer);

  int buffer() const { return static_cast<int>(probs_.size()) - 1; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t z) const { return probs_[z]; }
  std::span<const double> probs() const { return probs_; }

  friend bool operator==(const QueueDist&, const QueueDist&) = default;

 private:
  std::vector<double> probs_;
};

// Markov-modulated arrival-rate chain over a finite set of rate levels.
class ArrivalProcess {
 public:
  ArrivalProcess(std::vector<double> levels, std::vector<std::vector<double>> transition,
                 std::vector<double> initial);

  // Single level, never switches.
  static ArrivalProcess constant(double rate);
  // levels {high, low}; P(high -> low) = p_high_low, P(low -> high) = p_low_high;
  // initial level uniform.
  static ArrivalProcess two_level(double high, double low, double p_high_low,
                                  double p_low_high);

  std::size_t num_levels() const { return levels_.size(); }
  double level(std::size_t i) const { return levels_.at(i); }
  const std::vector<double>& levels() const { return levels_; }
  const std::vector<std::vector<double>>& transition() const { return transition_; }
  const std::vector<double>& initial() const { return initial_; }

  std::size_t sample_initial(Rng& rng) const { return rng.categorical(initial_); }
  std::size_t sample_uniform(Rng& rng) const;
  std::size_t sample_next(std::size_t current, Rng& rng) const {
    return rng.categorical(transition_.at(current));
  }

  friend bool operator==(const ArrivalProcess&, const ArrivalProcess&) = default;

 private:
  std::vector<double> levels_;
  std::vector<std::vector<double>> transition_;
  std::vector<double> initial_;
};

// Lower-level policy h: Z^d -> P(U), dense (B+1)^d x d table. Rows are indexed
// by the sampled fill tuple in mixed radix B+1 with the first slot most
// significant; slots are 0-based.
class DecisionRule {
 public:
  DecisionRule(int buffer, int d, std::vector<double> table);

  int buffer() const { return buffer_; }
  int d() const { return d_; }
  std::size_t num_rows() const { return num_rows_; }
  double prob(std::size_t row, int slot) const { return table_[row * d_ + slot]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(table_).subspan(r * d_, d_);
  }
  std::span<const double> table() const { return table_; }

  std::size_t encode(std::span<const int> fills) const;
  std::vector<int> decode(std::size_t row) const;

  friend bool operator==(const DecisionRule&, const DecisionRule&) = default;

 private:
  int buffer_;
  int d_;
  std::size_t num_rows_;
  std::vector<double> table_;
};

// d sampled anonymous queue fills as seen by one agent.
struct AgentObservation {
  std::vector<int> zbar;
};

struct SystemConfig {
  int num_queues = 100;
  long num_clients = 10000;
  int d = 2;
  int buffer = 5;
  double service_rate = 1.0;
  double delta_t = 1.0;
  ArrivalProcess arrival = ArrivalProcess::two_level(0.9, 0.6, 0.2, 0.5);
  QueueDist nu0 = QueueDist::point_mass(5, 0);
  double discount = 0.99;
  double drop_penalty = 1.0;

  // Throws ModelError on the first violated invariant.
  void validate() const;
};

// Setting of the reference experiments for a given synchronization delay.
SystemConfig reference_config(double delta_t);

std::size_t pow_size(std::size_t base, int exponent);

// mu(zbar) = prod_k nu(zbar_k), indexed like DecisionRule rows.
std::vector<double> product_measure(const QueueDist& nu, int d);

// G(zbar, u) = mu(zbar) h(u | zbar), flattened row-major (row, slot).
std::vector<double> state_action_dist(std::span<const double> mu, const DecisionRule& h);

// lambda'(z) for all z: arrival mass routed to queues observed at fill z.
std::vector<double> thinned_rates(const QueueDist& nu, const DecisionRule& h, double lambda);
double thinned_rate(const QueueDist& nu, const DecisionRule& h, double lambda, int z);

// lambda'(z) / nu(z), defined as 0 where nu(z) = 0.
std::vector<double> effective_rates(const QueueDist& nu, const DecisionRule& h, double lambda);
double effective_rate(const QueueDist& nu, const DecisionRule& h, double lambda, int z);

}  // namespace mflb
