// mflb: command-line harness for training and evaluating load-balancing
// policies on the mean-field model and on finite systems.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mflb/experiment.hpp"
#include "mflb/finite_sim.hpp"

namespace {

using namespace mflb;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<std::string> policy;
  std::optional<int> replications;
  std::optional<int> episode_length;
  std::optional<double> delta_t;
  std::vector<std::string> set;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "key = value configuration file");
  app->add_option("--seed", o.seed, "master seed (env MFLB_SEED)");
  app->add_option("--out", o.out, "output directory (env MFLB_OUT)");
  app->add_option("--threads", o.threads, "worker threads for replications");
  app->add_option("--policy", o.policy, "mf_jsq | mf_rnd | learned:<checkpoint>");
  app->add_option("--replications,-n", o.replications, "Monte Carlo replications");
  app->add_option("--episode-length", o.episode_length, "evaluation episode length T_e");
  app->add_option("--delta-t", o.delta_t, "synchronization delay");
  app->add_option("--set", o.set, "override a config key, key=value (repeatable)");
}

// Config file, then environment, then command-line flags.
ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  std::map<std::string, std::string> kv;
  if (const char* env = std::getenv("MFLB_SEED")) kv["seed"] = env;
  if (const char* env = std::getenv("MFLB_OUT")) kv["out"] = env;
  if (o.seed) kv["seed"] = std::to_string(*o.seed);
  if (o.out) kv["out"] = *o.out;
  if (o.threads) kv["threads"] = std::to_string(*o.threads);
  if (o.policy) kv["policy"] = *o.policy;
  if (o.replications) kv["replications"] = std::to_string(*o.replications);
  if (o.episode_length) kv["episode_length"] = std::to_string(*o.episode_length);
  if (o.delta_t) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *o.delta_t);
    kv["delta_t"] = buf;
  }
  for (const auto& item : o.set) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  apply_overrides(cfg, kv);
  cfg.validate();
  return cfg;
}

void print_rows(const std::vector<SummaryRow>& rows) {
  std::cout << kSummaryHeader << '\n';
  for (const auto& r : rows) std::cout << format_summary_row(r) << '\n';
}

void warn_degenerate(const EvalResult& r) {
  if (r.degenerate)
    std::cerr << "warning: a single replication gives no confidence interval (half-width 0)\n";
}

int cmd_eval_finite(const ExperimentConfig& cfg) {
  const auto policy = LoadedPolicy::load(cfg.policy, cfg.system);
  const EvalResult r = evaluate_policy_finite(cfg, policy);
  warn_degenerate(r);
  const std::vector<SummaryRow> rows{make_summary_row("finite", policy.spec().name(), cfg, r)};
  write_summary_csv(cfg.out / "eval_finite.csv", rows);
  std::ofstream reps(cfg.out / "replications.csv");
  reps << "replication,seed,total_drops\n";
  for (std::size_t i = 0; i < r.per_replication.size(); ++i) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", r.per_replication[i]);
    reps << i << ',' << replication_seed(cfg.seed, static_cast<int>(i)) << ',' << buf << '\n';
  }
  print_rows(rows);
  std::cerr << "eval-finite: " << r.wall_seconds << " s\n";
  return 0;
}

int cmd_eval_mfc(const ExperimentConfig& cfg) {
  const auto policy = LoadedPolicy::load(cfg.policy, cfg.system);
  const EvalResult r = evaluate_policy_mfc(cfg, policy);
  warn_degenerate(r);
  const std::vector<SummaryRow> rows{make_summary_row("mfc", policy.spec().name(), cfg, r)};
  write_summary_csv(cfg.out / "eval_mfc.csv", rows);

  std::ofstream traj(cfg.out / "mfc_trajectory.csv");
  traj << "replication,epoch,arrival_level,lambda,drops,reward\n";
  const auto provider = policy.provider();
  for (int rep = 0; rep < cfg.replications; ++rep) {
    Rng arrival = EpisodeStreams{replication_seed(cfg.seed, rep)}.arrival();
    const auto t = mfc_rollout(provider, cfg.system, cfg.episode_length, arrival);
    for (std::size_t k = 0; k < t.rewards.size(); ++k) {
      char buf[120];
      const std::size_t level = t.states[k].arrival_level;
      std::snprintf(buf, sizeof buf, "%d,%zu,%zu,%.17g,%.17g,%.17g", rep, k, level,
                    cfg.system.arrival.level(level), -t.rewards[k] / cfg.system.drop_penalty,
                    t.rewards[k]);
      traj << buf << '\n';
    }
  }
  print_rows(rows);
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg) {
  print_rows(run_sweep(cfg));
  return 0;
}

int cmd_compare(const ExperimentConfig& cfg) {
  print_rows(run_compare(cfg));
  return 0;
}

int cmd_scaling(const ExperimentConfig& cfg) {
  const auto policy = LoadedPolicy::load(cfg.policy, cfg.system);
  std::vector<int> queues = cfg.queue_list;
  if (queues.empty()) queues = {20, 50, 100};
  std::vector<SummaryRow> rows;
  for (const auto& row : scaling_study(cfg, policy, queues)) {
    ExperimentConfig c = cfg;
    c.system.num_queues = row.num_queues;
    c.system.num_clients = row.num_clients;
    rows.push_back(make_summary_row(row.label, policy.spec().name(), c, row.result, row.gap));
  }
  write_summary_csv(cfg.out / "scaling.csv", rows);
  print_rows(rows);
  return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
  TrainOptions options;
  options.out_dir = cfg.out;
  options.on_iteration = [](const IterationLog& e) {
    std::cerr << "iter " << e.iteration << " steps " << e.timesteps << " return " << e.mean_return
              << " best " << e.best_return << " kl " << e.mean_kl << " clip " << e.clip_fraction
              << '\n';
  };
  train(cfg.system, cfg.ppo, cfg.seed, options);

  // Deterministic comparison against the fixed rules on the training horizon.
  ExperimentConfig eval = cfg;
  eval.episode_length = cfg.ppo.episode_length;
  std::vector<SummaryRow> rows;
  for (const auto& spec : {PolicySpec{PolicySpec::Kind::kLearned, (cfg.out / "best.json").string()},
                           PolicySpec{PolicySpec::Kind::kMfJsq, {}},
                           PolicySpec{PolicySpec::Kind::kMfRnd, {}}}) {
    const auto policy = LoadedPolicy::load(spec, cfg.system);
    // Name the checkpoint relative to the output directory so reruns elsewhere compare equal.
    const std::string name = spec.kind == PolicySpec::Kind::kLearned ? "learned:best.json" : spec.name();
    rows.push_back(make_summary_row("mfc", name, eval, evaluate_policy_mfc(eval, policy)));
  }
  write_summary_csv(cfg.out / "train_summary.csv", rows);
  print_rows(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-field load balancing with synchronization delay"};
  app.require_subcommand(1);

  struct Sub {
    const char* name;
    const char* help;
    int (*run)(const ExperimentConfig&);
  };
  const Sub subs[] = {
      {"train", "train an upper-level policy with PPO on the mean-field model", cmd_train},
      {"eval-mfc", "roll out a policy on the mean-field model", cmd_eval_mfc},
      {"eval-finite", "Monte Carlo evaluation on the finite N-client M-queue system", cmd_eval_finite},
      {"sweep", "evaluate one policy over a grid of delays and system sizes", cmd_sweep},
      {"compare", "evaluate several policies side by side over the grid", cmd_compare},
      {"scaling", "finite-system results over M with N = M^2 against the mean-field limit", cmd_scaling},
  };
  std::vector<CommonOptions> options(std::size(subs));
  std::vector<CLI::App*> apps;
  for (std::size_t i = 0; i < std::size(subs); ++i) {
    apps.push_back(app.add_subcommand(subs[i].name, subs[i].help));
    add_common(apps.back(), options[i]);
  }

  CLI11_PARSE(app, argc, argv);

  for (std::size_t i = 0; i < std::size(subs); ++i) {
    if (!apps[i]->parsed()) continue;
    try {
      const ExperimentConfig cfg = resolve(options[i]);
      return subs[i].run(cfg);
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return 2;
    } catch (const ModelError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}
