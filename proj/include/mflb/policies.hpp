#pragma once

// Fixed lower-level rules (MF-JSQ, MF-RND) and the learned upper-level
// policy mapping (nu, arrival level) to a decision rule.

#include <Eigen/Dense>
#include <filesystem>
#include <string>

#include "mflb/core_model.hpp"
#include "mflb/mfc_dynamics.hpp"
#include "mflb/mlp.hpp"

namespace mflb {

// h(u | zbar) = 1 / N_min when zbar_u is minimal, else 0.
DecisionRule mf_jsq_rule(int buffer, int d);
// h(u | zbar) = 1 / d.
DecisionRule mf_rnd_rule(int buffer, int d);

enum class FixedKind { kMfJsq, kMfRnd };

struct FixedRule {
  FixedKind kind;
  DecisionRule rule;

  static FixedRule make(FixedKind kind, int buffer, int d);
};

RuleProvider fixed_provider(DecisionRule rule);

enum class PolicyMode { kStochastic, kDeterministic };

inline constexpr double kActionFloor = 1e-6;

// Clamps every entry to [kActionFloor, inf) and normalizes each row of d.
DecisionRule action_to_rule(std::span<const double> raw, int buffer, int d);

// Diagonal Gaussian log-density of `action`.
double gaussian_log_density(const Eigen::VectorXd& action, const Eigen::VectorXd& mean,
                            const Eigen::VectorXd& log_std);

struct PolicyDecision {
  DecisionRule rule;
  Eigen::VectorXd mean;
  Eigen::VectorXd raw_action;
  double log_prob = 0.0;  // of raw_action under the Gaussian; 0 in deterministic mode
};

struct UpperPolicyShape {
  int buffer = 5;
  int d = 2;
  int num_levels = 2;
  int hidden_width = 256;
  int hidden_layers = 2;

  int observation_dim() const { return buffer + 1 + num_levels; }
  int action_dim() const { return static_cast<int>(pow_size(buffer + 1, d)) * d; }
  friend bool operator==(const UpperPolicyShape&, const UpperPolicyShape&) = default;
};

class UpperPolicy {
 public:
  explicit UpperPolicy(UpperPolicyShape shape);

  // Hidden layers random, output weights zero and output bias constant, so
  // the initial deterministic rule is uniform.
  void initialize(Rng& rng, double initial_log_std, double output_bias = 1.0);

  const UpperPolicyShape& shape() const { return shape_; }
  Mlp& network() { return net_; }
  const Mlp& network() const { return net_; }
  Eigen::VectorXd& log_std() { return log_std_; }
  const Eigen::VectorXd& log_std() const { return log_std_; }

  Eigen::VectorXd observation(const QueueDist& nu, std::size_t level) const;
  Eigen::VectorXd mean_action(const Eigen::VectorXd& observation) const;

  // Throws ModelError when the network output is not finite.
  PolicyDecision decide(const QueueDist& nu, std::size_t level, PolicyMode mode, Rng& rng) const;

  friend bool operator==(const UpperPolicy& a, const UpperPolicy& b) {
    return a.shape_ == b.shape_ && a.net_.params() == b.net_.params() && a.log_std_ == b.log_std_;
  }

 private:
  UpperPolicyShape shape_;
  Mlp net_;
  Eigen::VectorXd log_std_;
};

// Deterministic mode ignores rng; stochastic mode draws from *rng, which must
// outlive the provider.
RuleProvider policy_provider(const UpperPolicy& policy, PolicyMode mode, Rng* rng = nullptr);

// Checkpoint container: JSON with layer shapes, flat parameters and the
// system configuration the policy was trained for. Doubles round-trip exactly.
struct PolicyCheckpoint {
  UpperPolicy policy;
  SystemConfig config;
};

void save_checkpoint(const std::filesystem::path& path, const UpperPolicy& policy,
                     const SystemConfig& config);
PolicyCheckpoint load_checkpoint(const std::filesystem::path& path);

// Throws ModelError unless buffer, d and the number of arrival levels match.
void check_compatible(const UpperPolicy& policy, const SystemConfig& config);

}  // namespace mflb
