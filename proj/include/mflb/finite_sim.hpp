#pragma once

// Event-exact simulation of the finite system with N clients and M queues.
// Within an epoch every client holds d sampled queues and one chosen slot;
// queue j receives Poisson arrivals at M * lambda * (clients routed to j) / N
// and is simulated as a birth-death chain with the Gillespie algorithm.

#include <cstdint>
#include <vector>

#include "mflb/core_model.hpp"
#include "mflb/mfc_dynamics.hpp"

namespace mflb {

struct FiniteSystemState {
  std::vector<int> queue_fills;
  std::size_t arrival_level = 0;
};

// Sampled queue indices, row-major num_clients x d, 0-based, repeats allowed.
struct AgentSamples {
  int d = 0;
  std::vector<std::int32_t> queues;

  std::size_t num_agents() const { return d == 0 ? 0 : queues.size() / d; }
  std::int32_t at(std::size_t agent, int slot) const { return queues[agent * d + slot]; }
};

struct AgentAssignment {
  AgentSamples samples;
  std::vector<std::uint8_t> chosen_slot;  // 0-based

  std::int32_t destination(std::size_t agent) const {
    return samples.at(agent, chosen_slot[agent]);
  }
};

struct EpochStats {
  long drops_total = 0;
  double drops_per_queue_avg = 0.0;
  long events = 0;
};

QueueDist empirical_distribution(const FiniteSystemState& state, int buffer);

AgentSamples sample_agents(const SystemConfig& config, Rng& rng);

// Each agent draws its slot from h given its anonymous sampled fills. Exactly
// one uniform variate is consumed per agent.
AgentAssignment apply_decision_rule(const FiniteSystemState& state, AgentSamples samples,
                                    const DecisionRule& h, Rng& rng);

// Classical JSQ(d): join the shortest sampled queue, ties broken uniformly.
// Consumes one uniform variate per agent like apply_decision_rule.
AgentAssignment jsq_dispatch(const FiniteSystemState& state, AgentSamples samples, Rng& rng);

// Classical RND over the d sampled queues.
AgentAssignment rnd_dispatch(AgentSamples samples, Rng& rng);

std::vector<long> destination_counts(const AgentAssignment& assignment, int num_queues);
std::vector<double> per_queue_rates(const AgentAssignment& assignment, const SystemConfig& config,
                                    double lambda);

struct QueueEpochOutcome {
  int fill;
  long drops;
  long events;
};

// One queue over `duration` time units with frozen rates. An arrival at fill
// B is dropped and leaves the fill unchanged.
QueueEpochOutcome simulate_queue(int fill, double arrival_rate, double service_rate, int buffer,
                                 double duration, Rng& rng);

// Simulates every queue for delta_t; queue j draws from rng.fork(j).
std::pair<FiniteSystemState, EpochStats> simulate_epoch(const FiniteSystemState& state,
                                                        std::span<const double> rates,
                                                        const SystemConfig& config,
                                                        const Rng& rng);

struct FiniteEpisodeResult {
  std::vector<EpochStats> epochs;
  std::vector<std::size_t> levels;  // arrival level used in each epoch
  double total_drops_per_queue = 0.0;
  double discounted_drops_per_queue = 0.0;
};

// Per-episode random streams, all derived from one replication seed. The
// arrival stream matches the one mfc_rollout consumes for the same seed.
struct EpisodeStreams {
  std::uint64_t seed;

  Rng arrival() const { return Rng(seed, {1}); }
  Rng initial_fills() const { return Rng(seed, {2}); }
  Rng policy() const { return Rng(seed, {3}); }
  Rng agents(int epoch) const { return Rng(seed, {4, static_cast<std::uint64_t>(epoch)}); }
  Rng queues(int epoch) const { return Rng(seed, {5, static_cast<std::uint64_t>(epoch)}); }
};

// Applies a mean-field upper-level policy to the finite system. Initial level
// uniform over levels, fills i.i.d. from nu0; each epoch computes the
// empirical distribution, queries the policy, samples agents, dispatches,
// simulates and then resamples the arrival level.
FiniteEpisodeResult run_finite_episode(const RuleProvider& policy, const SystemConfig& config,
                                       int horizon, const EpisodeStreams& streams);

}  // namespace mflb
