#include "mflb/finite_sim.hpp"

#include <algorithm>
#include <cmath>

namespace mflb {

namespace {

std::uint8_t pick_slot(std::span<const double> probs, double u) {
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return static_cast<std::uint8_t>(k);
  }
  for (std::size_t k = probs.size(); k-- > 0;)
    if (probs[k] > 0.0) return static_cast<std::uint8_t>(k);
  return 0;
}

}  // namespace

QueueDist empirical_distribution(const FiniteSystemState& state, int buffer) {
  std::vector<long> counts(buffer + 1, 0);
  for (int f : state.queue_fills) {
    if (f < 0 || f > buffer) throw ModelError("empirical_distribution: fill out of range");
    ++counts[f];
  }
  const double m = static_cast<double>(state.queue_fills.size());
  std::vector<double> p(counts.size());
  for (std::size_t z = 0; z < counts.size(); ++z) p[z] = static_cast<double>(counts[z]) / m;
  return QueueDist(std::move(p));
}

AgentSamples sample_agents(const SystemConfig& config, Rng& rng) {
  AgentSamples s;
  s.d = config.d;
  s.queues.resize(static_cast<std::size_t>(config.num_clients) * config.d);
  const auto m = static_cast<std::uint64_t>(config.num_queues);
  for (auto& q : s.queues) q = static_cast<std::int32_t>(rng.uniform_index(m));
  return s;
}

AgentAssignment apply_decision_rule(const FiniteSystemState& state, AgentSamples samples,
                                    const DecisionRule& h, Rng& rng) {
  if (samples.d != h.d()) throw ModelError("apply_decision_rule: d mismatch");
  AgentAssignment a{std::move(samples), {}};
  const std::size_t n = a.samples.num_agents();
  const int d = h.d();
  const auto radix = static_cast<std::size_t>(h.buffer()) + 1;
  a.chosen_slot.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t row = 0;
    for (int k = 0; k < d; ++k)
      row = row * radix + static_cast<std::size_t>(state.queue_fills[a.samples.at(i, k)]);
    a.chosen_slot[i] = pick_slot(h.row(row), rng.uniform());
  }
  return a;
}

AgentAssignment jsq_dispatch(const FiniteSystemState& state, AgentSamples samples, Rng& rng) {
  AgentAssignment a{std::move(samples), {}};
  const std::size_t n = a.samples.num_agents();
  const int d = a.samples.d;
  a.chosen_slot.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    int best = state.queue_fills[a.samples.at(i, 0)];
    int ties = 1;
    for (int k = 1; k < d; ++k) {
      const int f = state.queue_fills[a.samples.at(i, k)];
      if (f < best) {
        best = f;
        ties = 1;
      } else if (f == best) {
        ++ties;
      }
    }
    const int pick = std::min(ties - 1, static_cast<int>(rng.uniform() * ties));
    for (int k = 0, seen = 0; k < d; ++k) {
      if (state.queue_fills[a.samples.at(i, k)] == best && seen++ == pick) {
        a.chosen_slot[i] = static_cast<std::uint8_t>(k);
        break;
      }
    }
  }
  return a;
}

AgentAssignment rnd_dispatch(AgentSamples samples, Rng& rng) {
  AgentAssignment a{std::move(samples), {}};
  const std::size_t n = a.samples.num_agents();
  const int d = a.samples.d;
  a.chosen_slot.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    a.chosen_slot[i] = static_cast<std::uint8_t>(std::min(d - 1, static_cast<int>(rng.uniform() * d)));
  return a;
}

std::vector<long> destination_counts(const AgentAssignment& assignment, int num_queues) {
  std::vector<long> counts(num_queues, 0);
  for (std::size_t i = 0; i < assignment.chosen_slot.size(); ++i) ++counts[assignment.destination(i)];
  return counts;
}

std::vector<double> per_queue_rates(const AgentAssignment& assignment, const SystemConfig& config,
                                    double lambda) {
  const auto counts = destination_counts(assignment, config.num_queues);
  const double scale = static_cast<double>(config.num_queues) * lambda /
                       static_cast<double>(assignment.chosen_slot.size());
  std::vector<double> rates(counts.size());
  for (std::size_t j = 0; j < counts.size(); ++j) rates[j] = scale * static_cast<double>(counts[j]);
  return rates;
}

QueueEpochOutcome simulate_queue(int fill, double arrival_rate, double service_rate, int buffer,
                                 double duration, Rng& rng) {
  QueueEpochOutcome out{fill, 0, 0};
  double t = 0.0;
  for (;;) {
    const double death = out.fill > 0 ? service_rate : 0.0;
    const double total = arrival_rate + death;
    if (total <= 0.0) break;
    t += rng.exponential(total);
    if (t > duration) break;
    ++out.events;
    if (rng.uniform() * total < arrival_rate) {
      if (out.fill == buffer)
        ++out.drops;
      else
        ++out.fill;
    } else {
      --out.fill;
    }
  }
  return out;
}

std::pair<FiniteSystemState, EpochStats> simulate_epoch(const FiniteSystemState& state,
                                                        std::span<const double> rates,
                                                        const SystemConfig& config,
                                                        const Rng& rng) {
  if (rates.size() != state.queue_fills.size())
    throw ModelError("simulate_epoch: rate vector size mismatch");
  FiniteSystemState next{std::vector<int>(state.queue_fills.size()), state.arrival_level};
  EpochStats stats;
  for (std::size_t j = 0; j < rates.size(); ++j) {
    if (rates[j] < 0.0) throw ModelError("simulate_epoch: negative rate");
    Rng qrng = rng.fork(j);
    const auto o = simulate_queue(state.queue_fills[j], rates[j], config.service_rate,
                                  config.buffer, config.delta_t, qrng);
    next.queue_fills[j] = o.fill;
    stats.drops_total += o.drops;
    stats.events += o.events;
  }
  stats.drops_per_queue_avg =
      static_cast<double>(stats.drops_total) / static_cast<double>(state.queue_fills.size());
  return {std::move(next), stats};
}

FiniteEpisodeResult run_finite_episode(const RuleProvider& policy, const SystemConfig& config,
                                       int horizon, const EpisodeStreams& streams) {
  config.validate();
  FiniteEpisodeResult result;
  if (horizon <= 0) return result;

  Rng arrival = streams.arrival();
  Rng init = streams.initial_fills();
  FiniteSystemState state;
  state.arrival_level = config.arrival.sample_uniform(arrival);
  state.queue_fills.resize(config.num_queues);
  for (int& f : state.queue_fills) f = static_cast<int>(init.categorical(config.nu0.probs()));

  double discount = 1.0;
  for (int t = 0; t < horizon; ++t) {
    const QueueDist empirical = empirical_distribution(state, config.buffer);
    const DecisionRule h = policy(empirical, state.arrival_level);
    const double lambda = config.arrival.level(state.arrival_level);

    Rng agent_rng = streams.agents(t);
    auto samples = sample_agents(config, agent_rng);
    const auto assignment = apply_decision_rule(state, std::move(samples), h, agent_rng);
    const auto rates = per_queue_rates(assignment, config, lambda);

    auto [next, stats] = simulate_epoch(state, rates, config, streams.queues(t));
    result.epochs.push_back(stats);
    result.levels.push_back(state.arrival_level);
    result.total_drops_per_queue += stats.drops_per_queue_avg;
    result.discounted_drops_per_queue += discount * stats.drops_per_queue_avg;
    discount *= config.discount;

    next.arrival_level = config.arrival.sample_next(state.arrival_level, arrival);
    state = std::move(next);
  }
  return result;
}

}  // namespace mflb
