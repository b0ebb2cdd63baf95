#include "mflb/policies.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

namespace mflb {

DecisionRule mf_jsq_rule(int buffer, int d) {
  if (buffer < 1 || d < 1) throw ModelError("mf_jsq_rule: buffer and d must be positive");
  const std::size_t rows = pow_size(buffer + 1, d);
  std::vector<double> table(rows * d, 0.0);
  std::vector<int> fills(d, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const int best = *std::min_element(fills.begin(), fills.end());
    const auto n_min = std::count(fills.begin(), fills.end(), best);
    for (int u = 0; u < d; ++u)
      if (fills[u] == best) table[r * d + u] = 1.0 / static_cast<double>(n_min);
    for (int k = d - 1; k >= 0; --k) {
      if (++fills[k] <= buffer) break;
      fills[k] = 0;
    }
  }
  return DecisionRule(buffer, d, std::move(table));
}

DecisionRule mf_rnd_rule(int buffer, int d) {
  if (buffer < 1 || d < 1) throw ModelError("mf_rnd_rule: buffer and d must be positive");
  return DecisionRule(buffer, d, std::vector<double>(pow_size(buffer + 1, d) * d, 1.0 / d));
}

FixedRule FixedRule::make(FixedKind kind, int buffer, int d) {
  return {kind, kind == FixedKind::kMfJsq ? mf_jsq_rule(buffer, d) : mf_rnd_rule(buffer, d)};
}

RuleProvider fixed_provider(DecisionRule rule) {
  return [rule = std::move(rule)](const QueueDist&, std::size_t) { return rule; };
}

DecisionRule action_to_rule(std::span<const double> raw, int buffer, int d) {
  std::vector<double> table(raw.size());
  for (std::size_t r = 0; r * d < raw.size(); ++r) {
    double sum = 0.0;
    for (int u = 0; u < d; ++u) sum += table[r * d + u] = std::max(raw[r * d + u], kActionFloor);
    for (int u = 0; u < d; ++u) table[r * d + u] /= sum;
  }
  return DecisionRule(buffer, d, std::move(table));
}

double gaussian_log_density(const Eigen::VectorXd& action, const Eigen::VectorXd& mean,
                            const Eigen::VectorXd& log_std) {
  const Eigen::ArrayXd z = (action - mean).array() / log_std.array().exp();
  return -0.5 * z.square().sum() - log_std.sum() -
         0.5 * static_cast<double>(action.size()) * std::log(2.0 * std::numbers::pi);
}

UpperPolicy::UpperPolicy(UpperPolicyShape shape) : shape_(shape) {
  std::vector<int> sizes{shape_.observation_dim()};
  for (int l = 0; l < shape_.hidden_layers; ++l) sizes.push_back(shape_.hidden_width);
  sizes.push_back(shape_.action_dim());
  net_ = Mlp(std::move(sizes));
  log_std_ = Eigen::VectorXd::Zero(shape_.action_dim());
}

void UpperPolicy::initialize(Rng& rng, double initial_log_std, double output_bias) {
  net_.initialize(rng, 1.0, 0.0);
  net_.bias(net_.num_layers() - 1).setConstant(output_bias);
  log_std_.setConstant(initial_log_std);
}

Eigen::VectorXd UpperPolicy::observation(const QueueDist& nu, std::size_t level) const {
  if (nu.buffer() != shape_.buffer) throw ModelError("UpperPolicy: buffer mismatch");
  if (level >= static_cast<std::size_t>(shape_.num_levels))
    throw ModelError("UpperPolicy: arrival level out of range");
  Eigen::VectorXd obs = Eigen::VectorXd::Zero(shape_.observation_dim());
  for (std::size_t z = 0; z < nu.size(); ++z) obs[static_cast<Eigen::Index>(z)] = nu[z];
  obs[static_cast<Eigen::Index>(nu.size() + level)] = 1.0;
  return obs;
}

Eigen::VectorXd UpperPolicy::mean_action(const Eigen::VectorXd& observation) const {
  return net_.forward_one(observation);
}

PolicyDecision UpperPolicy::decide(const QueueDist& nu, std::size_t level, PolicyMode mode,
                                   Rng& rng) const {
  const Eigen::VectorXd mean = mean_action(observation(nu, level));
  if (!mean.allFinite()) throw ModelError("UpperPolicy: non-finite network output");
  PolicyDecision out{mf_rnd_rule(shape_.buffer, shape_.d), mean, mean, 0.0};
  if (mode == PolicyMode::kStochastic) {
    for (Eigen::Index i = 0; i < mean.size(); ++i)
      out.raw_action[i] = mean[i] + std::exp(log_std_[i]) * rng.normal();
    out.log_prob = gaussian_log_density(out.raw_action, mean, log_std_);
  }
  out.rule = action_to_rule(std::span<const double>(out.raw_action.data(), out.raw_action.size()),
                            shape_.buffer, shape_.d);
  return out;
}

RuleProvider policy_provider(const UpperPolicy& policy, PolicyMode mode, Rng* rng) {
  if (mode == PolicyMode::kStochastic && rng == nullptr)
    throw ModelError("policy_provider: stochastic mode needs an rng");
  return [&policy, mode, rng](const QueueDist& nu, std::size_t level) {
    Rng unused(0);
    return policy.decide(nu, level, mode, rng ? *rng : unused).rule;
  };
}

void check_compatible(const UpperPolicy& policy, const SystemConfig& config) {
  const auto& s = policy.shape();
  if (s.buffer != config.buffer || s.d != config.d ||
      s.num_levels != static_cast<int>(config.arrival.num_levels()))
    throw ModelError("checkpoint does not match configuration (buffer " + std::to_string(s.buffer) +
                     " vs " + std::to_string(config.buffer) + ", d " + std::to_string(s.d) + " vs " +
                     std::to_string(config.d) + ", levels " + std::to_string(s.num_levels) + " vs " +
                     std::to_string(config.arrival.num_levels()) + ")");
}

namespace {

using nlohmann::json;

constexpr int kCheckpointVersion = 1;

json config_to_json(const SystemConfig& c) {
  return {{"num_queues", c.num_queues},
          {"num_clients", c.num_clients},
          {"d", c.d},
          {"buffer", c.buffer},
          {"service_rate", c.service_rate},
          {"delta_t", c.delta_t},
          {"arrival_levels", c.arrival.levels()},
          {"arrival_transition", c.arrival.transition()},
          {"arrival_initial", c.arrival.initial()},
          {"nu0", std::vector<double>(c.nu0.probs().begin(), c.nu0.probs().end())},
          {"discount", c.discount},
          {"drop_penalty", c.drop_penalty}};
}

SystemConfig config_from_json(const json& j) {
  SystemConfig c;
  c.num_queues = j.at("num_queues").get<int>();
  c.num_clients = j.at("num_clients").get<long>();
  c.d = j.at("d").get<int>();
  c.buffer = j.at("buffer").get<int>();
  c.service_rate = j.at("service_rate").get<double>();
  c.delta_t = j.at("delta_t").get<double>();
  c.arrival = ArrivalProcess(j.at("arrival_levels").get<std::vector<double>>(),
                             j.at("arrival_transition").get<std::vector<std::vector<double>>>(),
                             j.at("arrival_initial").get<std::vector<double>>());
  c.nu0 = QueueDist(j.at("nu0").get<std::vector<double>>());
  c.discount = j.at("discount").get<double>();
  c.drop_penalty = j.at("drop_penalty").get<double>();
  c.validate();
  return c;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const UpperPolicy& policy,
                     const SystemConfig& config) {
  const auto& s = policy.shape();
  json j;
  j["format"] = "mflb-upper-policy";
  j["version"] = kCheckpointVersion;
  j["shape"] = {{"buffer", s.buffer},
                {"d", s.d},
                {"num_levels", s.num_levels},
                {"hidden_width", s.hidden_width},
                {"hidden_layers", s.hidden_layers}};
  j["layer_sizes"] = policy.network().sizes();
  j["parameters"] = to_std(policy.network().params());
  j["log_std"] = to_std(policy.log_std());
  j["config"] = config_to_json(config);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ModelError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
  if (!out) throw ModelError("failed writing checkpoint " + path.string());
}

PolicyCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot read checkpoint " + path.string());
  json j;
  try {
    in >> j;
    if (j.at("format") != "mflb-upper-policy") throw ModelError("not a policy checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw ModelError("unsupported checkpoint version");
    const auto& sj = j.at("shape");
    UpperPolicyShape shape{sj.at("buffer").get<int>(), sj.at("d").get<int>(),
                           sj.at("num_levels").get<int>(), sj.at("hidden_width").get<int>(),
                           sj.at("hidden_layers").get<int>()};
    UpperPolicy policy(shape);
    if (j.at("layer_sizes").get<std::vector<int>>() != policy.network().sizes())
      throw ModelError("checkpoint layer sizes do not match its shape");
    const auto params = j.at("parameters").get<std::vector<double>>();
    const auto log_std = j.at("log_std").get<std::vector<double>>();
    if (params.size() != static_cast<std::size_t>(policy.network().params().size()) ||
        log_std.size() != static_cast<std::size_t>(policy.log_std().size()))
      throw ModelError("checkpoint parameter count mismatch");
    policy.network().params() = Eigen::Map<const Eigen::VectorXd>(params.data(), params.size());
    policy.log_std() = Eigen::Map<const Eigen::VectorXd>(log_std.data(), log_std.size());
    SystemConfig config = config_from_json(j.at("config"));
    check_compatible(policy, config);
    return {std::move(policy), std::move(config)};
  } catch (const nlohmann::json::exception& e) {
    throw ModelError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace mflb
