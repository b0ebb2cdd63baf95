#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mflb/experiment.hpp"

using namespace mflb;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mflb_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.system.num_queues = 10;
  c.system.num_clients = 100;
  c.episode_length = 10;
  c.replications = 5;
  c.seed = 3;
  return c;
}

// ν0 = δ_B and (almost) no service: every arrival is dropped.
ExperimentConfig saturated(double lambda, double dt, int horizon, int n) {
  ExperimentConfig c = small_experiment();
  c.system.arrival = ArrivalProcess::constant(lambda);
  c.system.nu0 = QueueDist::point_mass(5, 5);
  c.system.service_rate = 1e-12;
  c.system.delta_t = dt;
  c.episode_length = horizon;
  c.replications = n;
  c.policy = PolicySpec::parse("mf_rnd");
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MFLB_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(ParseKeyValues, CommentsAndWhitespace) {
  const auto kv = parse_key_values("# header\n  seed = 7  # trailing\n\nout=abc\nseed = 8\n");
  EXPECT_EQ(kv.at("seed"), "8");
  EXPECT_EQ(kv.at("out"), "abc");
  EXPECT_THROW(parse_key_values("no equals sign\n"), ConfigError);
  EXPECT_THROW(parse_key_values(" = 3\n"), ConfigError);
}

TEST(ApplyOverrides, SystemAndPpoKeys) {
  ExperimentConfig c;
  apply_overrides(c, {{"delta_t", "5"},
                      {"arrival_levels", "0.8, 0.5"},
                      {"arrival_transition", "0.9, 0.1; 0.3, 0.7"},
                      {"arrival_initial", "1, 0"},
                      {"buffer", "3"},
                      {"ppo.learning_rate", "0.001"},
                      {"policy", "learned:ckpt_{dt}.json"}});
  EXPECT_EQ(c.system.delta_t, 5.0);
  EXPECT_EQ(c.system.arrival.level(1), 0.5);
  EXPECT_EQ(c.system.arrival.transition()[1][1], 0.7);
  EXPECT_EQ(c.system.nu0, QueueDist::point_mass(3, 0));
  EXPECT_EQ(c.ppo.learning_rate, 0.001);
  EXPECT_EQ(c.policy.kind, PolicySpec::Kind::kLearned);
}

TEST(ApplyOverrides, RejectsUnknownAndMalformed) {
  ExperimentConfig c;
  EXPECT_THROW(apply_overrides(c, {{"bogus", "1"}}), ConfigError);
  EXPECT_THROW(apply_overrides(c, {{"seed", "x"}}), ConfigError);
  EXPECT_THROW(apply_overrides(c, {{"nu0", "0.5, 0.6"}}), ConfigError);
  EXPECT_THROW(apply_overrides(c, {{"policy", "jsq"}}), ConfigError);
  c = ExperimentConfig{};
  c.replications = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(LoadExperimentConfig, MissingFile) {
  EXPECT_THROW(load_experiment_config("/nonexistent/mflb.conf"), ConfigError);
}

TEST(SweepEpisodeLength, NearestInteger) {
  const std::vector<int> expected{500, 250, 167, 125, 100, 83, 71, 63, 56, 50};
  for (int dt = 1; dt <= 10; ++dt) EXPECT_EQ(sweep_episode_length(500.0, dt), expected[dt - 1]);
  EXPECT_EQ(sweep_episode_length(1.0, 10.0), 1);
}

TEST(Summarize, StatisticsAndDegenerateCase) {
  const auto r = summarize({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  EXPECT_NEAR(r.std_dev, std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_NEAR(r.half_width, 1.96 * std::sqrt(5.0 / 3.0) / 2.0, 1e-12);
  EXPECT_EQ(r.min, 1.0);
  EXPECT_EQ(r.max, 4.0);
  const auto one = summarize({7.0});
  EXPECT_TRUE(one.degenerate);
  EXPECT_EQ(one.half_width, 0.0);
}

TEST(ReplicationSeeds, DistinctAndStable) {
  EXPECT_EQ(replication_seed(1, 5), replication_seed(1, 5));
  EXPECT_NE(replication_seed(1, 5), replication_seed(1, 6));
  EXPECT_NE(replication_seed(1, 5), replication_seed(2, 5));
}

TEST(EvaluateFinite, SingleReplicationIsDegenerate) {
  auto c = small_experiment();
  c.replications = 1;
  const auto r = evaluate_policy_finite(c, LoadedPolicy::load(c.policy, c.system));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.half_width, 0.0);
  EXPECT_EQ(r.per_replication.size(), 1u);
}

TEST(EvaluateFinite, SaturatedSystemDropsEveryArrival) {
  // Total drops per queue are an average of Poisson counts with mean lambda dt T_e.
  const double lambda = 0.9, dt = 2.0;
  const int horizon = 5, n = 400;
  auto c = saturated(lambda, dt, horizon, n);
  const auto r = evaluate_policy_finite(c, LoadedPolicy::load(c.policy, c.system));
  const double expected = lambda * dt * horizon;
  const double se = std::sqrt(expected / c.system.num_queues / n);
  EXPECT_NEAR(r.mean, expected, 3 * se);
  EXPECT_NEAR(r.std_dev, std::sqrt(expected / c.system.num_queues), 0.1 * std::sqrt(expected / 10));

  const auto mfc = evaluate_policy_mfc(c, LoadedPolicy::load(c.policy, c.system));
  EXPECT_NEAR(mfc.mean, expected, 1e-9);
}

TEST(EvaluateFinite, ConfidenceIntervalShrinksAsRootN) {
  // Quadrupling n halves the half-width up to the noise in the std estimate.
  auto small = saturated(0.9, 1.0, 4, 100);
  auto large = saturated(0.9, 1.0, 4, 400);
  const auto policy = LoadedPolicy::load(small.policy, small.system);
  const double ratio = evaluate_policy_finite(large, policy).half_width /
                       evaluate_policy_finite(small, policy).half_width;
  EXPECT_NEAR(ratio, 0.5, 0.1);
}

TEST(EvaluateFinite, ThreadCountDoesNotChangeResults) {
  auto c = small_experiment();
  const auto policy = LoadedPolicy::load(c.policy, c.system);
  const auto one = evaluate_policy_finite(c, policy);
  c.threads = 3;
  EXPECT_EQ(evaluate_policy_finite(c, policy).per_replication, one.per_replication);
}

TEST(ScalingStudy, LimitRowMatchesMfcEvaluation) {
  auto c = small_experiment();
  c.replications = 3;
  const auto policy = LoadedPolicy::load(c.policy, c.system);
  const auto rows = scaling_study(c, policy, {4, 8});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].num_clients, 16);
  EXPECT_EQ(rows[2].label, "mfc_limit");
  EXPECT_EQ(rows[2].result.per_replication, evaluate_policy_mfc(c, policy).per_replication);
  for (int i = 0; i < 2; ++i)
    EXPECT_EQ(rows[i].gap, std::abs(rows[i].result.mean - rows[2].result.mean));
  EXPECT_THROW(scaling_study(c, policy, {8, 4}), ConfigError);
}

TEST(SummaryCsv, RoundTrip) {
  const auto dir = scratch("csv");
  auto c = small_experiment();
  const auto r = summarize({0.1, 1.0 / 3.0, 2.5e-7});
  const std::vector<SummaryRow> rows{make_summary_row("finite", "mf_jsq", c, r),
                                     make_summary_row("mfc", "mf_rnd", c, r, 0.125)};
  write_summary_csv(dir / "s.csv", rows);
  EXPECT_EQ(read_summary_csv(dir / "s.csv"), rows);
  fs::remove_all(dir);
}

TEST(Compare, OneRowPerPolicyAndGridPoint) {
  auto c = small_experiment();
  c.out = scratch("compare");
  c.delta_t_list = {1.0, 2.0};
  c.replications = 2;
  const auto rows = run_compare(c);
  // 2 delays x 2 policies finite rows, then the mean-field rows.
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0].episode_length, 500);
  EXPECT_EQ(rows[2].episode_length, 250);
  EXPECT_EQ(rows[6].kind, "mfc");
  EXPECT_EQ(read_summary_csv(c.out / "compare.csv"), rows);
  fs::remove_all(c.out);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli_exit");
  EXPECT_NE(run_cli("", dir / "log"), 0);
  EXPECT_NE(run_cli("frobnicate", dir / "log"), 0);
  EXPECT_EQ(run_cli("eval-mfc --config /nonexistent.conf", dir / "log"), 2);
  EXPECT_EQ(run_cli("eval-mfc --set bogus=1 --out " + dir.string(), dir / "log"), 2);
  EXPECT_EQ(run_cli("eval-mfc --policy learned:/nonexistent.json --out " + dir.string(), dir / "log"), 2);
  EXPECT_EQ(run_cli("eval-mfc -n 3 --episode-length 5 --out " + dir.string(), dir / "log"), 0);
  fs::remove_all(dir);
}

TEST(Cli, CheckpointMismatchIsRejected) {
  const auto dir = scratch("cli_mismatch");
  ASSERT_EQ(run_cli("train --set ppo.hidden_width=8 --out " + dir.string() + " -n 2", dir / "log"), 0);
  EXPECT_EQ(run_cli("eval-mfc --set buffer=4 --policy learned:" + (dir / "best.json").string() +
                        " --out " + dir.string(),
                    dir / "log"),
            2);
  EXPECT_EQ(run_cli("eval-mfc -n 2 --episode-length 5 --policy learned:" + (dir / "best.json").string() +
                        " --out " + dir.string(),
                    dir / "log"),
            0);
  fs::remove_all(dir);
}

TEST(Cli, EnvironmentAndFlagPrecedence) {
  const auto dir = scratch("cli_env");
  const auto a = dir / "a", b = dir / "b";
  EXPECT_EQ(run_cli("eval-mfc -n 2 --episode-length 5 --out " + a.string(), dir / "log"), 0);
  setenv("MFLB_OUT", b.string().c_str(), 1);
  EXPECT_EQ(run_cli("eval-mfc -n 2 --episode-length 5", dir / "log"), 0);
  unsetenv("MFLB_OUT");
  EXPECT_TRUE(fs::exists(a / "eval_mfc.csv"));
  EXPECT_TRUE(fs::exists(b / "eval_mfc.csv"));
  fs::remove_all(dir);
}

TEST(Cli, DegenerateWarning) {
  const auto dir = scratch("cli_warn");
  EXPECT_EQ(run_cli("eval-finite -n 1 --episode-length 3 --set num_queues=5 --set num_clients=25 --out " +
                        dir.string(),
                    dir / "log"),
            0);
  EXPECT_NE(slurp(dir / "log").find("warning"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, SingleLevelMfcEvaluationIsDeterministic) {
  const auto dir = scratch("cli_single");
  const std::string args = "eval-mfc --policy mf_rnd -n 2 --episode-length 20 --set arrival_levels=0.9 "
                           "--set arrival_transition=1 --set arrival_initial=1 --out ";
  ASSERT_EQ(run_cli(args + (dir / "1").string(), dir / "log"), 0);
  ASSERT_EQ(run_cli(args + (dir / "2").string() + " --seed 99", dir / "log"), 0);
  const auto rows = read_summary_csv(dir / "1" / "eval_mfc.csv");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].min, rows[0].max);  // no randomness left
  EXPECT_EQ(slurp(dir / "1" / "mfc_trajectory.csv"), slurp(dir / "2" / "mfc_trajectory.csv"));
  fs::remove_all(dir);
}
