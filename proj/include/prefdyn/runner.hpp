#pragma once

#include "prefdyn/config.hpp"
#include "prefdyn/csv.hpp"
#include "prefdyn/data.hpp"
#include "prefdyn/dynamics.hpp"
#include "prefdyn/trainer.hpp"
#include "prefdyn/verify.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace prefdyn {

enum class ExitCode : int { ok = 0, property_failure = 1, config_error = 2 };

/// Flat JSON run configuration. Every key is optional; unknown keys are
/// rejected. Paths are resolved relative to the config file's directory.
struct RunConfig {
  std::string name = "run";
  std::optional<Method> method;
  SpoConfig spo;
  WarmStart warm_start;
  std::optional<std::filesystem::path> out_dir;

  // Task source: a task file, or a generator. Dataset and initial policy
  // files override what the task/generator would produce.
  std::optional<std::filesystem::path> task;
  std::optional<GeneratorKind> generator;
  std::optional<std::filesystem::path> triples;
  std::optional<std::filesystem::path> sft_pairs;
  std::optional<std::filesystem::path> policy;
  RandomTaskParams random_task;
  DisplacementParams displacement;

  int steps = 200;  // dynamics
  int n_samples = 500;
  int top_k = 5;

  std::string sweep_param = "lambda";
  std::vector<double> sweep_values;
  int threads = 0;  // 0: hardware concurrency

  VerifyOptions verify;
};

// Throws ConfigError naming the offending key.
RunConfig parse_run_config(const nlohmann::json& doc,
                           const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

// --out flag, then the config's out_dir, then $PREFDYN_OUT, then
// ./prefdyn_out. The directory is created.
std::filesystem::path resolve_out_dir(const std::optional<std::filesystem::path>& flag,
                                      const RunConfig& config);

/// Everything a command needs: the task, its initial policy and datasets.
struct Experiment {
  SyntheticTask task;
  SplitPolicy policy;
  Datasets data;
  std::optional<ProbeDataset> probe;
  std::optional<int> ystar;  // displacement-prone tasks
};

// `fallback` is used when the config names neither a task file nor a generator.
Experiment build_experiment(const RunConfig& config, GeneratorKind fallback);

// Each command writes its artifacts into `out` and returns the exit code.
ExitCode cmd_verify(const RunConfig& config, const std::filesystem::path& out);
ExitCode cmd_dynamics(const RunConfig& config, const std::filesystem::path& out);
ExitCode cmd_mass_shift(const RunConfig& config, const std::filesystem::path& out);
ExitCode cmd_train(const RunConfig& config, const std::filesystem::path& out);
ExitCode cmd_sweep(const RunConfig& config, const std::filesystem::path& out);

// Table builders behind the commands, exposed for tests.
CsvTable dynamics_table(const std::vector<ProbeStep>& steps);
CsvTable train_table(const TrainReport& report);

struct MassShiftRow {
  int step = 0;
  double mean_logp_dw = 0.0;
  double mean_logp_dl = 0.0;
  double logp_ystar = 0.0;
};
// Row 0 is the state before training, then one row per outer step.
std::vector<MassShiftRow> mass_shift_trajectory(const Experiment& experiment, Method method,
                                                const SpoConfig& config);
CsvTable mass_shift_table(const std::vector<MassShiftRow>& rows);

struct SweepRow {
  std::string param_name;
  double param_value = 0.0;
  double final_accuracy = 0.0;
  double final_pi_w_mean = 0.0;
};
std::vector<SweepRow> run_sweep(const Experiment& experiment, const RunConfig& config);
CsvTable sweep_table(const std::vector<SweepRow>& rows);

// Mean of pi(y_w | x) over the triples.
double mean_pi_w(const SplitPolicy& policy, std::span<const PreferenceTriple> triples);

}  // namespace prefdyn
