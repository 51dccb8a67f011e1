#include "prefdyn/csv.hpp"
#include "prefdyn/errors.hpp"
#include "prefdyn/runner.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace prefdyn;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "prefdyn_test_runner" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_run_config(json{{"beta", 0.5}, {"betta", 0.5}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("betta"), std::string::npos);
  }
}

TEST(Config, TableThreeValuesAccepted) {
  const auto c = parse_run_config(json{{"beta", 0.5}, {"lambda", 1.0}, {"K", 1}});
  EXPECT_EQ(c.spo.beta, 0.5);
  EXPECT_EQ(c.spo.lambda, 1.0);
  EXPECT_EQ(c.spo.K, 1);
}

TEST(Config, BadValuesAreConfigErrors) {
  EXPECT_THROW(parse_run_config(json{{"K", -1}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"beta", "high"}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"method", "ppo"}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"name", ""}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"task", "t.json"}, {"generator", "probe"}}), ConfigError);
  EXPECT_THROW(parse_run_config(json::array()), ConfigError);
  const auto c = parse_run_config(json{{"clip_norm", nullptr}});
  EXPECT_FALSE(c.spo.clip_norm.has_value());
}

TEST(Config, ConfigRoundTrip) {
  const auto c = parse_run_config(json{{"beta", 0.25}, {"method", "dpo"}, {"sweep_values", {0, 1}}});
  const auto back = parse_run_config(to_json(c));
  EXPECT_EQ(back.spo.beta, 0.25);
  EXPECT_EQ(back.method, Method::dpo);
  EXPECT_EQ(back.sweep_values, (std::vector<double>{0, 1}));
}

TEST(OutDir, Precedence) {
  const auto base = fresh_dir("precedence");
  RunConfig c;
  ::setenv("PREFDYN_OUT", (base / "env").c_str(), 1);
  EXPECT_EQ(resolve_out_dir(std::nullopt, c), base / "env");
  c.out_dir = base / "cfg";
  EXPECT_EQ(resolve_out_dir(std::nullopt, c), base / "cfg");
  EXPECT_EQ(resolve_out_dir(base / "flag", c), base / "flag");
  EXPECT_TRUE(fs::is_directory(base / "flag"));
  ::unsetenv("PREFDYN_OUT");
}

TEST(Dynamics, TwoHundredRowsWithSchema) {
  const auto out = fresh_dir("dynamics");
  const auto c = parse_run_config(json{{"steps", 200}});
  ASSERT_EQ(cmd_dynamics(c, out), ExitCode::ok);
  const auto t = read_csv(out / "dynamics.csv");
  EXPECT_EQ(t.rows().size(), 200u);
  EXPECT_EQ(t.header(),
            (std::vector<std::string>{"step", "log_pi_w", "log_pi_l", "z", "sigma_z", "term_w", "term_l",
                                      "delta_w_pred", "delta_l_pred", "delta_w_meas", "delta_l_meas",
                                      "log_delta_ratio", "pi_ystar", "delta_ystar_meas", "case_label"}));
  const auto first = slurp(out / "dynamics.csv");
  EXPECT_EQ(first.find('\r'), std::string::npos);
  ASSERT_EQ(cmd_dynamics(c, out), ExitCode::ok);
  EXPECT_EQ(slurp(out / "dynamics.csv"), first);
}

TEST(MassShift, ColumnsAndRows) {
  const auto out = fresh_dir("mass_shift");
  const auto c = parse_run_config(json{{"T", 10}, {"method", "spo"}});
  ASSERT_EQ(cmd_mass_shift(c, out), ExitCode::ok);
  const auto t = read_csv(out / "mass_shift.csv");
  EXPECT_EQ(t.header(), (std::vector<std::string>{"step", "mean_logp_dw", "mean_logp_dl", "logp_ystar"}));
  EXPECT_EQ(t.rows().size(), 11u);
  EXPECT_TRUE(fs::exists(out / "probe_sets.json"));
}

TEST(Train, SchemaAndAccuracyRange) {
  const auto out = fresh_dir("train");
  const auto c = parse_run_config(json{{"T", 20}});
  ASSERT_EQ(cmd_train(c, out), ExitCode::ok);
  const auto t = read_csv(out / "train.csv");
  EXPECT_EQ(t.header(),
            (std::vector<std::string>{"step", "loss_dpo", "loss_sft", "loss_sft_star",
                                      "constraint_residual", "loss_reg", "loss_total", "z_mean",
                                      "sigma_z_mean", "accuracy", "grad_norm_theta", "grad_norm_phi"}));
  ASSERT_EQ(t.rows().size(), 20u);
  for (const auto& row : t.rows()) {
    const double acc = std::stod(row[9]);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
  EXPECT_NO_THROW(policy_from_json(json::parse(slurp(out / "policy.json"))));
}

TEST(Train, SftThenDpoChainsThroughSnapshot) {
  const auto base = fresh_dir("chain");
  const auto sft_out = base / "sft";
  fs::create_directories(sft_out);
  const auto sft_cfg = parse_run_config(json{{"method", "sft"}, {"T", 15}});
  ASSERT_EQ(cmd_train(sft_cfg, sft_out), ExitCode::ok);

  const auto dpo_cfg = parse_run_config(
      json{{"method", "dpo"}, {"T", 5}, {"ref_checkpoint", "post_sft"}, {"policy", "sft/policy.json"}}, base);
  const auto snapshot = policy_from_json(json::parse(slurp(sft_out / "policy.json")));
  const auto e = build_experiment(dpo_cfg, GeneratorKind::random);
  EXPECT_EQ(e.policy.params().values(), snapshot.params().values());
  const auto report = train_run(Method::dpo, e.policy, e.data, dpo_cfg.spo, dpo_cfg.warm_start);
  EXPECT_EQ(report.initial_policy.params().values(), snapshot.params().values());
  EXPECT_EQ(report.ref_policy.params().values(), snapshot.params().values());
  EXPECT_EQ(report.rows[0].loss.z, 0.0);
}

TEST(Sweep, FourLambdaRowsAndZeroMatchesDpo) {
  const auto out = fresh_dir("sweep");
  const auto c = parse_run_config(
      json{{"T", 30}, {"gamma", 0.0}, {"sweep_param", "lambda"}, {"sweep_values", {0, 0.1, 1, 5}}});
  ASSERT_EQ(cmd_sweep(c, out), ExitCode::ok);
  const auto t = read_csv(out / "sweep.csv");
  EXPECT_EQ(t.header(),
            (std::vector<std::string>{"param_name", "param_value", "final_accuracy", "final_pi_w_mean"}));
  ASSERT_EQ(t.rows().size(), 4u);
  EXPECT_EQ(t.rows()[0][0], "lambda");

  const auto e = build_experiment(c, GeneratorKind::random);
  const auto dpo = train_run(Method::dpo, e.policy, e.data, c.spo, c.warm_start);
  EXPECT_EQ(t.rows()[0][2], CsvTable::cell(dpo.accuracy));
  EXPECT_EQ(t.rows()[0][3], CsvTable::cell(mean_pi_w(dpo.final_policy, e.data.triples)));
}

TEST(Sweep, EmptyGridIsConfigError) {
  const auto out = fresh_dir("sweep_empty");
  const auto c = parse_run_config(json{{"T", 5}});
  EXPECT_THROW(cmd_sweep(c, out), ConfigError);
}

TEST(Verify, DefaultPassesWithSixOrMoreProperties) {
  const auto out = fresh_dir("verify");
  const auto c = parse_run_config(json::object());
  EXPECT_EQ(cmd_verify(c, out), ExitCode::ok);
  const auto report = json::parse(slurp(out / "verify_report.json"));
  EXPECT_GE(report["properties"].size(), 6u);
  bool saw_richardson = false;
  for (const auto& p : report["properties"]) {
    EXPECT_TRUE(p.contains("instances"));
    EXPECT_TRUE(p.contains("worst_slack"));
    if (p["name"] == "richardson_first_order") {
      saw_richardson = true;
      const double ratio = p["statistic"];
      EXPECT_GE(ratio, 3.0);
      EXPECT_LE(ratio, 5.0);
    }
  }
  EXPECT_TRUE(saw_richardson);
}

TEST(Verify, SignFlipBreaksCorollaryOne) {
  VerifyOptions o;
  o.gradient_instances = 5;
  o.tabular_instances = 100;
  o.mutation = Mutation::flip_delta_l_sign;
  const auto report = run_verify(o);
  EXPECT_FALSE(report.passed());
  ASSERT_NE(report.find("corollary1"), nullptr);
  EXPECT_FALSE(report.find("corollary1")->passed());
  EXPECT_FALSE(report.find("corollary1")->failing_instances.empty());
}

TEST(Csv, FormatAndQuoting) {
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(CsvTable::cell(std::optional<double>{}), "");
  EXPECT_EQ(CsvTable::cell(std::string_view("a,b")), "\"a,b\"");
  CsvTable t({"a", "b"});
  EXPECT_THROW(t.add_row({"1"}), std::invalid_argument);
  t.add_row({"1", "x"});
  EXPECT_EQ(t.str(), "a,b\n1,x\n");
}
