#include "mflb/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "mflb/finite_sim.hpp"

namespace mflb {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  if (trim(v).empty()) return out;
  for (const auto& item : split(v, ',')) out.push_back(to_double(key, item));
  return out;
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_dt(double dt) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", dt);
  return buf;
}

struct GridPoint {
  double delta_t;
  int num_queues;
  long num_clients;
};

std::vector<GridPoint> grid(const ExperimentConfig& cfg) {
  std::vector<double> dts = cfg.delta_t_list;
  if (dts.empty()) dts.push_back(cfg.system.delta_t);
  std::vector<std::pair<int, long>> sizes;
  if (cfg.queue_list.empty()) {
    sizes.emplace_back(cfg.system.num_queues, cfg.system.num_clients);
  } else {
    for (std::size_t i = 0; i < cfg.queue_list.size(); ++i) {
      const int m = cfg.queue_list[i];
      sizes.emplace_back(m, cfg.client_list.empty() ? static_cast<long>(m) * m : cfg.client_list[i]);
    }
  }
  std::vector<GridPoint> out;
  for (double dt : dts)
    for (auto [m, n] : sizes) out.push_back({dt, m, n});
  return out;
}

ExperimentConfig at_point(const ExperimentConfig& base, const GridPoint& p, bool sweep_length) {
  ExperimentConfig c = base;
  c.system.delta_t = p.delta_t;
  c.system.num_queues = p.num_queues;
  c.system.num_clients = p.num_clients;
  if (sweep_length) c.episode_length = sweep_episode_length(base.total_time, p.delta_t);
  return c;
}

PolicySpec expand(const PolicySpec& spec, double dt) {
  PolicySpec out = spec;
  const std::string token = "{dt}";
  for (auto pos = out.checkpoint.find(token); pos != std::string::npos;
       pos = out.checkpoint.find(token))
    out.checkpoint.replace(pos, token.size(), fmt_dt(dt));
  return out;
}

bool sweeping(const ExperimentConfig& cfg) { return !cfg.delta_t_list.empty(); }

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

PolicySpec PolicySpec::parse(const std::string& text) {
  const std::string t = trim(text);
  if (t == "mf_jsq") return {Kind::kMfJsq, {}};
  if (t == "mf_rnd") return {Kind::kMfRnd, {}};
  if (t.rfind("learned:", 0) == 0 && t.size() > 8) return {Kind::kLearned, t.substr(8)};
  throw ConfigError("unknown policy '" + t + "' (expected mf_jsq, mf_rnd or learned:<path>)");
}

std::string PolicySpec::name() const {
  switch (kind) {
    case Kind::kMfJsq: return "mf_jsq";
    case Kind::kMfRnd: return "mf_rnd";
    case Kind::kLearned: return "learned:" + checkpoint;
  }
  return {};
}

void ExperimentConfig::validate() const {
  system.validate();
  ppo.validate();
  if (replications < 1) throw ConfigError("replications must be at least 1");
  if (episode_length < 1) throw ConfigError("episode_length must be at least 1");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (!(total_time > 0.0)) throw ConfigError("total_time must be positive");
  for (double dt : delta_t_list)
    if (!(dt > 0.0)) throw ConfigError("delta_t_list entries must be positive");
  for (int m : queue_list)
    if (m < system.d) throw ConfigError("queue_list entries must be at least d");
  if (!client_list.empty() && client_list.size() != queue_list.size())
    throw ConfigError("client_list must have one entry per queue_list entry");
}

void apply_overrides(ExperimentConfig& cfg, const std::map<std::string, std::string>& kv) {
  bool nu0_set = false;
  std::optional<std::vector<double>> levels, initial;
  std::optional<std::vector<std::vector<double>>> transition;
  auto& s = cfg.system;
  auto& p = cfg.ppo;
  for (const auto& [key, v] : kv) {
    if (key == "num_queues") s.num_queues = static_cast<int>(to_long(key, v));
    else if (key == "num_clients") s.num_clients = to_long(key, v);
    else if (key == "d") s.d = static_cast<int>(to_long(key, v));
    else if (key == "buffer") s.buffer = static_cast<int>(to_long(key, v));
    else if (key == "service_rate") s.service_rate = to_double(key, v);
    else if (key == "delta_t") s.delta_t = to_double(key, v);
    else if (key == "arrival_levels") levels = to_doubles(key, v);
    else if (key == "arrival_initial") initial = to_doubles(key, v);
    else if (key == "arrival_transition") {
      transition.emplace();
      for (const auto& row : split(v, ';')) transition->push_back(to_doubles(key, row));
    } else if (key == "nu0") {
      try {
        s.nu0 = QueueDist(to_doubles(key, v));
      } catch (const ModelError& e) {
        throw ConfigError(std::string("config key 'nu0': ") + e.what());
      }
      nu0_set = true;
    } else if (key == "discount") s.discount = to_double(key, v);
    else if (key == "drop_penalty") s.drop_penalty = to_double(key, v);
    else if (key == "policy") cfg.policy = PolicySpec::parse(v);
    else if (key == "episode_length") cfg.episode_length = static_cast<int>(to_long(key, v));
    else if (key == "replications") cfg.replications = static_cast<int>(to_long(key, v));
    else if (key == "seed") cfg.seed = to_u64(key, v);
    else if (key == "out") cfg.out = v;
    else if (key == "threads") cfg.threads = static_cast<int>(to_long(key, v));
    else if (key == "total_time") cfg.total_time = to_double(key, v);
    else if (key == "delta_t_list") cfg.delta_t_list = to_doubles(key, v);
    else if (key == "queue_list") {
      cfg.queue_list.clear();
      for (double x : to_doubles(key, v)) cfg.queue_list.push_back(static_cast<int>(x));
    } else if (key == "client_list") {
      cfg.client_list.clear();
      for (double x : to_doubles(key, v)) cfg.client_list.push_back(static_cast<long>(x));
    } else if (key == "policies") {
      cfg.policies.clear();
      for (const auto& item : split(v, ','))
        if (!item.empty()) cfg.policies.push_back(PolicySpec::parse(item));
    } else if (key == "ppo.discount") p.discount = to_double(key, v);
    else if (key == "ppo.gae_lambda") p.gae_lambda = to_double(key, v);
    else if (key == "ppo.kl_coefficient") p.kl_coefficient = to_double(key, v);
    else if (key == "ppo.clip") p.clip = to_double(key, v);
    else if (key == "ppo.learning_rate") p.learning_rate = to_double(key, v);
    else if (key == "ppo.train_batch") p.train_batch = static_cast<int>(to_long(key, v));
    else if (key == "ppo.minibatch") p.minibatch = static_cast<int>(to_long(key, v));
    else if (key == "ppo.epochs_per_iteration") p.epochs_per_iteration = static_cast<int>(to_long(key, v));
    else if (key == "ppo.episode_length") p.episode_length = static_cast<int>(to_long(key, v));
    else if (key == "ppo.iterations") p.iterations = static_cast<int>(to_long(key, v));
    else if (key == "ppo.value_loss_coefficient") p.value_loss_coefficient = to_double(key, v);
    else if (key == "ppo.normalize_advantages") p.normalize_advantages = to_bool(key, v);
    else if (key == "ppo.initial_log_std") p.initial_log_std = to_double(key, v);
    else if (key == "ppo.initial_output_bias") p.initial_output_bias = to_double(key, v);
    else if (key == "ppo.hidden_width") p.hidden_width = static_cast<int>(to_long(key, v));
    else if (key == "ppo.hidden_layers") p.hidden_layers = static_cast<int>(to_long(key, v));
    else if (key == "ppo.eval_episodes") p.eval_episodes = static_cast<int>(to_long(key, v));
    else throw ConfigError("unknown config key '" + key + "'");
  }
  if (levels || transition || initial) {
    std::vector<double> lv = levels.value_or(s.arrival.levels());
    std::vector<std::vector<double>> tr;
    if (transition) {
      tr = *transition;
    } else if (lv.size() == s.arrival.num_levels()) {
      tr = s.arrival.transition();
    } else if (lv.size() == 1) {
      tr = {{1.0}};
    } else {
      throw ConfigError("arrival_transition is required when the number of levels changes");
    }
    std::vector<double> init = initial.value_or(
        lv.size() == s.arrival.num_levels() ? s.arrival.initial()
                                            : std::vector<double>(lv.size(), 1.0 / lv.size()));
    try {
      s.arrival = ArrivalProcess(lv, tr, init);
    } catch (const ModelError& e) {
      throw ConfigError(std::string("arrival process: ") + e.what());
    }
  }
  if (!nu0_set && s.nu0.buffer() != s.buffer) s.nu0 = QueueDist::point_mass(s.buffer, 0);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg;
  apply_overrides(cfg, parse_key_values(ss.str()));
  return cfg;
}

int sweep_episode_length(double total_time, double delta_t) {
  return std::max(1, static_cast<int>(std::lround(total_time / delta_t)));
}

LoadedPolicy LoadedPolicy::load(const PolicySpec& spec, const SystemConfig& config) {
  LoadedPolicy lp;
  lp.spec_ = spec;
  switch (spec.kind) {
    case PolicySpec::Kind::kMfJsq: lp.fixed_ = mf_jsq_rule(config.buffer, config.d); break;
    case PolicySpec::Kind::kMfRnd: lp.fixed_ = mf_rnd_rule(config.buffer, config.d); break;
    case PolicySpec::Kind::kLearned: {
      auto ckpt = load_checkpoint(spec.checkpoint);
      check_compatible(ckpt.policy, config);
      lp.learned_ = std::make_shared<const UpperPolicy>(std::move(ckpt.policy));
      break;
    }
  }
  return lp;
}

RuleProvider LoadedPolicy::provider() const {
  if (fixed_) return fixed_provider(*fixed_);
  auto policy = learned_;
  return [policy](const QueueDist& nu, std::size_t level) {
    Rng unused(0);
    return policy->decide(nu, level, PolicyMode::kDeterministic, unused).rule;
  };
}

EvalResult summarize(std::vector<double> samples) {
  EvalResult r;
  r.per_replication = std::move(samples);
  const auto n = static_cast<double>(r.per_replication.size());
  if (r.per_replication.empty()) return r;
  double sum = 0.0;
  for (double x : r.per_replication) sum += x;
  r.mean = sum / n;
  r.min = *std::min_element(r.per_replication.begin(), r.per_replication.end());
  r.max = *std::max_element(r.per_replication.begin(), r.per_replication.end());
  r.mean = std::clamp(r.mean, r.min, r.max);
  if (r.per_replication.size() == 1) {
    r.degenerate = true;
    return r;
  }
  double ss = 0.0;
  for (double x : r.per_replication) ss += (x - r.mean) * (x - r.mean);
  r.std_dev = std::sqrt(ss / (n - 1.0));
  r.half_width = 1.96 * r.std_dev / std::sqrt(n);
  return r;
}

std::uint64_t replication_seed(std::uint64_t master, int index) {
  return derive_seed(master, {0x5eed, static_cast<std::uint64_t>(index)});
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (int w = 0; w < std::min(threads, n); ++w) {
      pool.emplace_back([&] {
        for (int i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

EvalResult evaluate_policy_finite(const ExperimentConfig& cfg, const LoadedPolicy& policy) {
  cfg.system.validate();
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> totals(static_cast<std::size_t>(cfg.replications));
  parallel_for(cfg.replications, cfg.threads, [&](int r) {
    const auto provider = policy.provider();
    const EpisodeStreams streams{replication_seed(cfg.seed, r)};
    totals[static_cast<std::size_t>(r)] =
        run_finite_episode(provider, cfg.system, cfg.episode_length, streams).total_drops_per_queue;
  });
  EvalResult result = summarize(std::move(totals));
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

EvalResult evaluate_policy_mfc(const ExperimentConfig& cfg, const LoadedPolicy& policy) {
  cfg.system.validate();
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> totals(static_cast<std::size_t>(cfg.replications));
  parallel_for(cfg.replications, cfg.threads, [&](int r) {
    const auto provider = policy.provider();
    Rng arrival = EpisodeStreams{replication_seed(cfg.seed, r)}.arrival();
    totals[static_cast<std::size_t>(r)] =
        mfc_rollout(provider, cfg.system, cfg.episode_length, arrival).total_drops;
  });
  EvalResult result = summarize(std::move(totals));
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::vector<ScalingRow> scaling_study(const ExperimentConfig& cfg, const LoadedPolicy& policy,
                                      const std::vector<int>& queue_list) {
  for (std::size_t i = 1; i < queue_list.size(); ++i)
    if (queue_list[i] <= queue_list[i - 1])
      throw ConfigError("scaling_study: queue counts must be ascending");
  const EvalResult mfc = evaluate_policy_mfc(cfg, policy);
  std::vector<ScalingRow> rows;
  for (std::size_t i = 0; i < queue_list.size(); ++i) {
    ExperimentConfig c = cfg;
    c.system.num_queues = queue_list[i];
    c.system.num_clients = cfg.client_list.empty() ? static_cast<long>(queue_list[i]) * queue_list[i]
                                                   : cfg.client_list.at(i);
    ScalingRow row{"finite", c.system.num_queues, c.system.num_clients,
                   evaluate_policy_finite(c, policy), 0.0};
    row.gap = std::abs(row.result.mean - mfc.mean);
    rows.push_back(std::move(row));
  }
  rows.push_back({"mfc_limit", 0, 0, mfc, 0.0});
  return rows;
}

SummaryRow make_summary_row(const std::string& kind, const std::string& policy,
                            const ExperimentConfig& cfg, const EvalResult& r, double gap) {
  SummaryRow row;
  row.kind = kind;
  row.policy = policy;
  row.delta_t = cfg.system.delta_t;
  const bool finite = kind == "finite";
  row.num_queues = finite ? cfg.system.num_queues : 0;
  row.num_clients = finite ? cfg.system.num_clients : 0;
  row.episode_length = cfg.episode_length;
  row.replications = static_cast<int>(r.per_replication.size());
  row.mean = r.mean;
  row.ci_half_width = r.half_width;
  row.std_dev = r.std_dev;
  row.min = r.min;
  row.max = r.max;
  row.gap = gap;
  return row;
}

std::string format_summary_row(const SummaryRow& r) {
  std::string s = r.kind + ',' + r.policy + ',' + fmt_double(r.delta_t) + ',' +
                  std::to_string(r.num_queues) + ',' + std::to_string(r.num_clients) + ',' +
                  std::to_string(r.episode_length) + ',' + std::to_string(r.replications) + ',' +
                  fmt_double(r.mean) + ',' + fmt_double(r.ci_half_width) + ',' +
                  fmt_double(r.std_dev) + ',' + fmt_double(r.min) + ',' + fmt_double(r.max) + ',' +
                  fmt_double(r.gap);
  return s;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << kSummaryHeader << '\n';
  for (const auto& r : rows) out << format_summary_row(r) << '\n';
  if (!out) throw ConfigError("failed writing " + path.string());
}

std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kSummaryHeader)
    throw ConfigError(path.string() + ": unexpected header");
  std::vector<SummaryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 13) throw ConfigError(path.string() + ": wrong field count in '" + line + "'");
    SummaryRow r;
    r.kind = f[0];
    r.policy = f[1];
    r.delta_t = to_double("delta_t", f[2]);
    r.num_queues = static_cast<int>(to_long("num_queues", f[3]));
    r.num_clients = to_long("num_clients", f[4]);
    r.episode_length = static_cast<int>(to_long("episode_length", f[5]));
    r.replications = static_cast<int>(to_long("replications", f[6]));
    r.mean = to_double("mean", f[7]);
    r.ci_half_width = to_double("ci_half_width", f[8]);
    r.std_dev = to_double("std", f[9]);
    r.min = to_double("min", f[10]);
    r.max = to_double("max", f[11]);
    r.gap = to_double("gap", f[12]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<SummaryRow> run_sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<SummaryRow> rows;
  for (const auto& point : grid(cfg)) {
    const ExperimentConfig c = at_point(cfg, point, sweeping(cfg));
    const auto policy = LoadedPolicy::load(expand(cfg.policy, point.delta_t), c.system);
    rows.push_back(make_summary_row("finite", policy.spec().name(), c,
                                    evaluate_policy_finite(c, policy)));
  }
  write_summary_csv(cfg.out / "sweep.csv", rows);
  return rows;
}

std::vector<SummaryRow> run_compare(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<PolicySpec> specs = cfg.policies;
  if (specs.empty())
    specs = {PolicySpec{PolicySpec::Kind::kMfJsq, {}}, PolicySpec{PolicySpec::Kind::kMfRnd, {}}};
  std::vector<SummaryRow> rows;
  for (const auto& point : grid(cfg)) {
    const ExperimentConfig c = at_point(cfg, point, sweeping(cfg));
    for (const auto& spec : specs) {
      const auto policy = LoadedPolicy::load(expand(spec, point.delta_t), c.system);
      rows.push_back(make_summary_row("finite", policy.spec().name(), c,
                                      evaluate_policy_finite(c, policy)));
    }
  }
  // Mean-field reference per (policy, delta_t).
  std::vector<double> dts = cfg.delta_t_list;
  if (dts.empty()) dts.push_back(cfg.system.delta_t);
  for (double dt : dts) {
    const ExperimentConfig c = at_point(cfg, {dt, cfg.system.num_queues, cfg.system.num_clients},
                                        sweeping(cfg));
    for (const auto& spec : specs) {
      const auto policy = LoadedPolicy::load(expand(spec, dt), c.system);
      rows.push_back(make_summary_row("mfc", policy.spec().name(), c, evaluate_policy_mfc(c, policy)));
    }
  }
  write_summary_csv(cfg.out / "compare.csv", rows);
  return rows;
}

}  // namespace mflb
