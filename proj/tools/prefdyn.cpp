#include "prefdyn/errors.hpp"
#include "prefdyn/runner.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace prefdyn;

  CLI::App app{"Preference-optimization dynamics lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"verify", "run the property suite and write verify_report.json"},
      {"dynamics", "single-step DPO audits along a trajectory, dynamics.csv"},
      {"mass-shift", "log-probabilities of the probe sets during training, mass_shift.csv"},
      {"train", "sft, dpo or spo training, train.csv and policy.json"},
      {"sweep", "one spo run per lambda or gamma value, sweep.csv"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--method", method, "sft, dpo or spo");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::config_error);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    RunConfig config = load_run_config(config_path);
    if (seed) config.spo.seed = *seed;
    if (method) {
      try {
        config.method = parse_method(*method);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    const auto dir = resolve_out_dir(out ? std::optional<std::filesystem::path>(*out) : std::nullopt,
                                     config);

    ExitCode code = ExitCode::ok;
    if (command == "verify") {
      code = cmd_verify(config, dir);
    } else if (command == "dynamics") {
      code = cmd_dynamics(config, dir);
    } else if (command == "mass-shift") {
      code = cmd_mass_shift(config, dir);
    } else if (command == "train") {
      code = cmd_train(config, dir);
    } else {
      code = cmd_sweep(config, dir);
    }
    if (code == ExitCode::property_failure) {
      std::cerr << "prefdyn " << command << ": property failure, see " << (dir / "verify_report.json").string()
                << "\n";
    }
    return static_cast<int>(code);
  } catch (const ConfigError& e) {
    std::cerr << "prefdyn " << command << ": config error: " << e.what() << "\n";
  } catch (const ParseError& e) {
    std::cerr << "prefdyn " << command << ": input error: " << e.what() << "\n";
  } catch (const GenerationError& e) {
    std::cerr << "prefdyn " << command << ": generation error: " << e.what() << "\n";
  } catch (const std::invalid_argument& e) {
    std::cerr << "prefdyn " << command << ": invalid input: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "prefdyn " << command << ": error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::property_failure);
  }
  return static_cast<int>(ExitCode::config_error);
}
