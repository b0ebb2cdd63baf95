#pragma once

// Experiment orchestration: flat key-value configuration files, Monte Carlo
// evaluation of policies on the finite system and on the mean-field model,
// scaling studies over (N, M), delay sweeps, and CSV emission.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mflb/core_model.hpp"
#include "mflb/policies.hpp"
#include "mflb/ppo.hpp"

namespace mflb {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parses `key = value` lines; '#' starts a comment. Duplicate keys: last wins.
std::map<std::string, std::string> parse_key_values(const std::string& text);

struct PolicySpec {
  enum class Kind { kMfJsq, kMfRnd, kLearned };
  Kind kind = Kind::kMfRnd;
  std::string checkpoint;  // learned only; "{dt}" expands to the delta_t value

  static PolicySpec parse(const std::string& text);
  std::string name() const;
};

struct ExperimentConfig {
  SystemConfig system;
  PolicySpec policy;
  int episode_length = 500;
  int replications = 100;
  std::uint64_t seed = 0;
  std::filesystem::path out = "results";
  int threads = 1;

  // Sweeps and comparisons.
  double total_time = 500.0;
  std::vector<double> delta_t_list;
  std::vector<int> queue_list;
  std::vector<long> client_list;  // empty: N = M^2
  std::vector<PolicySpec> policies;

  PpoConfig ppo;

  void validate() const;
};

// Applies every key of `kv` on top of `cfg`; throws ConfigError on unknown
// keys or malformed values.
void apply_overrides(ExperimentConfig& cfg, const std::map<std::string, std::string>& kv);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// T_e for a delay sweep: nearest integer to total_time / delta_t, at least 1.
int sweep_episode_length(double total_time, double delta_t);

// Policy materialized for evaluation; learned policies run deterministically.
class LoadedPolicy {
 public:
  static LoadedPolicy load(const PolicySpec& spec, const SystemConfig& config);

  const PolicySpec& spec() const { return spec_; }
  RuleProvider provider() const;

 private:
  PolicySpec spec_;
  std::optional<DecisionRule> fixed_;
  std::shared_ptr<const UpperPolicy> learned_;
};

struct EvalResult {
  std::vector<double> per_replication;  // total drops per queue over the episode
  double mean = 0.0;
  double std_dev = 0.0;
  double half_width = 0.0;  // 1.96 std / sqrt(n)
  double min = 0.0;
  double max = 0.0;
  double wall_seconds = 0.0;
  bool degenerate = false;  // n == 1, half-width reported as 0
};

EvalResult summarize(std::vector<double> samples);

// Seed of replication `index`; shared by the finite and mean-field evaluators
// so replication r of both sees the same arrival-level path.
std::uint64_t replication_seed(std::uint64_t master, int index);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

EvalResult evaluate_policy_finite(const ExperimentConfig& cfg, const LoadedPolicy& policy);
EvalResult evaluate_policy_mfc(const ExperimentConfig& cfg, const LoadedPolicy& policy);

struct ScalingRow {
  std::string label;  // "finite" or "mfc_limit"
  int num_queues = 0;
  long num_clients = 0;
  EvalResult result;
  double gap = 0.0;  // |finite mean - MFC mean|
};

// One finite row per M (with N = M^2 unless client_list is set) plus the
// mean-field reference as the final row.
std::vector<ScalingRow> scaling_study(const ExperimentConfig& cfg, const LoadedPolicy& policy,
                                      const std::vector<int>& queue_list);

// CSV output.
struct SummaryRow {
  std::string kind;  // finite | mfc | mfc_limit
  std::string policy;
  double delta_t = 0.0;
  int num_queues = 0;
  long num_clients = 0;
  int episode_length = 0;
  int replications = 0;
  double mean = 0.0;
  double ci_half_width = 0.0;
  double std_dev = 0.0;
  double min = 0.0;
  double max = 0.0;
  double gap = 0.0;

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

inline constexpr const char* kSummaryHeader =
    "kind,policy,delta_t,num_queues,num_clients,episode_length,replications,mean,"
    "ci_half_width,std,min,max,gap";

SummaryRow make_summary_row(const std::string& kind, const std::string& policy,
                            const ExperimentConfig& cfg, const EvalResult& r, double gap = 0.0);
std::string format_summary_row(const SummaryRow& row);
void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path);

// Emits one file per experiment below cfg.out. Return the rows written.
std::vector<SummaryRow> run_sweep(const ExperimentConfig& cfg);
std::vector<SummaryRow> run_compare(const ExperimentConfig& cfg);

}  // namespace mflb
