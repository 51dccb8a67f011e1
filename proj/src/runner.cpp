#include "prefdyn/runner.hpp"

#include "prefdyn/dynamics.hpp"
#include "prefdyn/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <set>
#include <thread>

namespace prefdyn {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

double number(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return v.get<double>();
}

int integer(const std::string& key, const json& v) {
  if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
  const auto i = v.get<std::int64_t>();
  if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max()) {
    throw ConfigError("config key '" + key + "' is out of range");
  }
  return static_cast<int>(i);
}

std::string text(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

fs::path path_value(const std::string& key, const json& v, const fs::path& base) {
  fs::path p = text(key, v);
  if (p.empty()) throw ConfigError("config key '" + key + "' must not be empty");
  return p.is_relative() && !base.empty() ? base / p : p;
}

template <typename Fn>
auto as_config_error(const std::string& key, Fn fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << body;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

SplitPolicy initial_policy_for(const SyntheticTask& task, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  const Eigen::Index n = task.features
                             ? task.features->cols()
                             : static_cast<Eigen::Index>(task.space.prompts) * task.space.outputs;
  Eigen::VectorXd phi(n);
  for (Eigen::Index i = 0; i < n; ++i) phi(i) = normal(rng);
  const Eigen::VectorXd theta = Eigen::VectorXd::Zero(n);
  if (task.features) {
    return SplitPolicy::log_linear(task.space.prompts, task.space.outputs, *task.features, theta, phi);
  }
  return SplitPolicy::tabular(task.space.prompts, task.space.outputs, theta, phi);
}

double mean_log_prob(const SplitPolicy& policy, int x, const std::vector<int>& outputs) {
  const Eigen::VectorXd lp = policy.log_prob_vector(x);
  double sum = 0.0;
  for (int y : outputs) sum += lp(y);
  return sum / static_cast<double>(outputs.size());
}

MassShiftRow mass_shift_row(int step, const SplitPolicy& policy, const ProbeDataset& probe) {
  MassShiftRow row;
  row.step = step;
  for (const auto& sets : probe.prompts) {
    row.mean_logp_dw += mean_log_prob(policy, sets.x, sets.d_w);
    row.mean_logp_dl += mean_log_prob(policy, sets.x, sets.d_l);
    row.logp_ystar += policy.log_prob(sets.x, sets.ystar);
  }
  const auto n = static_cast<double>(probe.prompts.size());
  row.mean_logp_dw /= n;
  row.mean_logp_dl /= n;
  row.logp_ystar /= n;
  return row;
}

}  // namespace

RunConfig parse_run_config(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : doc.items()) {
    if (key == "name") {
      c.name = text(key, v);
    } else if (key == "method") {
      c.method = as_config_error(key, [&] { return parse_method(text(key, v)); });
    } else if (key == "out_dir") {
      c.out_dir = path_value(key, v, base_dir);
    } else if (key == "beta") {
      c.spo.beta = number(key, v);
    } else if (key == "lambda") {
      c.spo.lambda = number(key, v);
    } else if (key == "gamma") {
      c.spo.gamma = number(key, v);
    } else if (key == "eta_theta") {
      c.spo.eta_theta = number(key, v);
    } else if (key == "eta_phi") {
      c.spo.eta_phi = number(key, v);
    } else if (key == "eta_phi_prime") {
      c.spo.eta_phi_prime = number(key, v);
    } else if (key == "K") {
      c.spo.K = integer(key, v);
    } else if (key == "T") {
      c.spo.T = integer(key, v);
    } else if (key == "clip_norm") {
      c.spo.clip_norm = v.is_null() ? std::nullopt : std::optional<double>(number(key, v));
    } else if (key == "batch_size") {
      c.spo.batch_size = integer(key, v);
    } else if (key == "seed") {
      if (!v.is_number_unsigned()) throw ConfigError("config key 'seed' must be a nonnegative integer");
      c.spo.seed = v.get<std::uint64_t>();
    } else if (key == "ref_checkpoint") {
      const std::string s = text(key, v);
      if (s == "init") {
        c.spo.ref_checkpoint = RefCheckpoint::init;
      } else if (s == "post_sft") {
        c.spo.ref_checkpoint = RefCheckpoint::post_sft;
      } else {
        throw ConfigError("config key 'ref_checkpoint' must be \"init\" or \"post_sft\"");
      }
    } else if (key == "sft_epochs") {
      c.warm_start.sft_epochs = integer(key, v);
    } else if (key == "sft_eta") {
      c.warm_start.sft_eta = number(key, v);
    } else if (key == "task") {
      c.task = path_value(key, v, base_dir);
    } else if (key == "generator") {
      c.generator = as_config_error(key, [&] { return parse_generator(text(key, v)); });
    } else if (key == "triples") {
      c.triples = path_value(key, v, base_dir);
    } else if (key == "sft_pairs") {
      c.sft_pairs = path_value(key, v, base_dir);
    } else if (key == "policy") {
      c.policy = path_value(key, v, base_dir);
    } else if (key == "policy_kind") {
      const std::string s = text(key, v);
      if (s == "tabular") {
        c.random_task.kind = PolicyKind::tabular;
      } else if (s == "log_linear") {
        c.random_task.kind = PolicyKind::log_linear;
      } else {
        throw ConfigError("config key 'policy_kind' must be \"tabular\" or \"log_linear\"");
      }
    } else if (key == "prompts") {
      c.random_task.prompts = integer(key, v);
    } else if (key == "outputs") {
      c.random_task.outputs = integer(key, v);
      c.displacement.outputs = c.random_task.outputs;
    } else if (key == "feature_dim") {
      c.random_task.feature_dim = integer(key, v);
      c.displacement.feature_dim = c.random_task.feature_dim;
    } else if (key == "init_scale") {
      c.random_task.init_scale = number(key, v);
    } else if (key == "pair_noise") {
      c.displacement.pair_noise = number(key, v);
    } else if (key == "min_ystar_mass") {
      c.displacement.min_ystar_mass = number(key, v);
    } else if (key == "search_budget") {
      c.displacement.budget = integer(key, v);
    } else if (key == "steps") {
      c.steps = integer(key, v);
    } else if (key == "n_samples") {
      c.n_samples = integer(key, v);
    } else if (key == "top_k") {
      c.top_k = integer(key, v);
    } else if (key == "sweep_param") {
      c.sweep_param = text(key, v);
    } else if (key == "sweep_values") {
      if (!v.is_array()) throw ConfigError("config key 'sweep_values' must be an array");
      c.sweep_values.clear();
      for (const auto& item : v) c.sweep_values.push_back(number(key, item));
    } else if (key == "threads") {
      c.threads = integer(key, v);
    } else if (key == "verify_gradient_instances") {
      c.verify.gradient_instances = integer(key, v);
    } else if (key == "verify_audit_instances") {
      c.verify.audit_instances = integer(key, v);
    } else if (key == "verify_richardson_instances") {
      c.verify.richardson_instances = integer(key, v);
    } else if (key == "verify_tabular_instances") {
      c.verify.tabular_instances = integer(key, v);
    } else if (key == "verify_displacement_instances") {
      c.verify.displacement_instances = integer(key, v);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }

  if (c.name.empty()) throw ConfigError("config key 'name' must not be empty");
  try {
    c.spo.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.warm_start.sft_epochs < 0) throw ConfigError("config key 'sft_epochs' must be >= 0");
  if (!(c.warm_start.sft_eta > 0.0)) throw ConfigError("config key 'sft_eta' must be positive");
  if (c.steps < 1) throw ConfigError("config key 'steps' must be >= 1");
  if (c.n_samples < 1) throw ConfigError("config key 'n_samples' must be >= 1");
  if (c.top_k < 1) throw ConfigError("config key 'top_k' must be >= 1");
  if (c.sweep_param != "lambda" && c.sweep_param != "gamma") {
    throw ConfigError("config key 'sweep_param' must be \"lambda\" or \"gamma\"");
  }
  if (c.threads < 0) throw ConfigError("config key 'threads' must be >= 0");
  if (!(c.random_task.init_scale > 0.0)) throw ConfigError("config key 'init_scale' must be positive");
  if (c.displacement.budget < 1) throw ConfigError("config key 'search_budget' must be >= 1");
  for (int n : {c.verify.gradient_instances, c.verify.audit_instances,
                c.verify.richardson_instances, c.verify.tabular_instances,
                c.verify.displacement_instances}) {
    if (n < 1) throw ConfigError("verify instance counts must be >= 1");
  }
  if (c.task && c.generator) throw ConfigError("config keys 'task' and 'generator' are exclusive");
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  return parse_run_config(read_json(path), path.parent_path());
}

json to_json(const RunConfig& c) {
  json doc{{"name", c.name},
           {"beta", c.spo.beta},
           {"lambda", c.spo.lambda},
           {"gamma", c.spo.gamma},
           {"eta_theta", c.spo.eta_theta},
           {"eta_phi", c.spo.eta_phi},
           {"eta_phi_prime", c.spo.eta_phi_prime},
           {"K", c.spo.K},
           {"T", c.spo.T},
           {"batch_size", c.spo.batch_size},
           {"seed", c.spo.seed},
           {"ref_checkpoint", to_string(c.spo.ref_checkpoint)},
           {"sft_epochs", c.warm_start.sft_epochs},
           {"sft_eta", c.warm_start.sft_eta},
           {"steps", c.steps},
           {"n_samples", c.n_samples},
           {"top_k", c.top_k},
           {"sweep_param", c.sweep_param},
           {"sweep_values", c.sweep_values}};
  doc["clip_norm"] = c.spo.clip_norm ? json(*c.spo.clip_norm) : json(nullptr);
  if (c.method) doc["method"] = to_string(*c.method);
  if (c.generator) doc["generator"] = to_string(*c.generator);
  if (c.task) doc["task"] = c.task->string();
  if (c.triples) doc["triples"] = c.triples->string();
  if (c.sft_pairs) doc["sft_pairs"] = c.sft_pairs->string();
  if (c.policy) doc["policy"] = c.policy->string();
  return doc;
}

fs::path resolve_out_dir(const std::optional<fs::path>& flag, const RunConfig& config) {
  fs::path out;
  if (flag) {
    out = *flag;
  } else if (config.out_dir) {
    out = *config.out_dir;
  } else if (const char* env = std::getenv("PREFDYN_OUT"); env != nullptr && *env != '\0') {
    out = env;
  } else {
    out = "prefdyn_out";
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) {
    throw ConfigError("output directory " + out.string() + " cannot be created");
  }
  return out;
}

Experiment build_experiment(const RunConfig& config, GeneratorKind fallback) {
  std::mt19937_64 rng(config.spo.seed);
  Experiment e;
  if (config.task) {
    e.task = load_task(*config.task);
    e.policy = initial_policy_for(e.task, config.random_task.init_scale, rng);
    e.data.triples = all_preference_pairs(e.task.space);
    e.data.sft_pairs = all_sft_pairs(e.task.space);
  } else {
    switch (config.generator.value_or(fallback)) {
      case GeneratorKind::random: {
        GeneratedTask g = generate_random_task(config.random_task, rng);
        e.task = std::move(g.task);
        e.policy = std::move(g.policy);
        e.data.triples = all_preference_pairs(e.task.space);
        e.data.sft_pairs = all_sft_pairs(e.task.space);
        break;
      }
      case GeneratorKind::probe: {
        GeneratedTask g = make_probe_task(rng);
        e.task = std::move(g.task);
        e.policy = std::move(g.policy);
        e.probe = generate_probe_dataset(e.policy, e.task.space, config.n_samples, config.top_k, rng);
        e.data.triples = e.probe->triples;
        e.data.sft_pairs = e.probe->sft_pairs;
        break;
      }
      case GeneratorKind::displacement_prone: {
        DisplacementTask d = generate_displacement_prone(config.displacement, rng);
        e.task = std::move(d.task);
        e.policy = std::move(d.policy);
        e.data.triples = {d.triple};
        e.data.sft_pairs = {SftPair{d.triple.x, d.triple.y_w}};
        e.ystar = d.ystar;
        break;
      }
    }
  }
  e.data.space = e.task.space;
  if (config.policy) {
    try {
      e.policy = policy_from_json(read_json(*config.policy));
    } catch (const std::invalid_argument& err) {
      throw ConfigError(config.policy->string() + ": " + err.what());
    }
  }
  if (config.triples) e.data.triples = load_triples_jsonl(*config.triples, &e.task.space);
  if (config.sft_pairs) e.data.sft_pairs = load_sft_jsonl(*config.sft_pairs, &e.task.space);
  try {
    validate_datasets(e.policy, e.data);
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  }
  return e;
}

double mean_pi_w(const SplitPolicy& policy, std::span<const PreferenceTriple> triples) {
  if (triples.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : triples) sum += policy.prob(t.x, t.y_w);
  return sum / static_cast<double>(triples.size());
}

CsvTable dynamics_table(const std::vector<ProbeStep>& steps) {
  CsvTable table({"step", "log_pi_w", "log_pi_l", "z", "sigma_z", "term_w", "term_l",
                  "delta_w_pred", "delta_l_pred", "delta_w_meas", "delta_l_meas",
                  "log_delta_ratio", "pi_ystar", "delta_ystar_meas", "case_label"});
  for (const auto& s : steps) {
    const StepDynamicsReport& r = s.report;
    table.add_row({CsvTable::cell(s.step), CsvTable::cell(s.log_pi_w), CsvTable::cell(s.log_pi_l),
                   CsvTable::cell(r.z), CsvTable::cell(r.sigma_z), CsvTable::cell(r.term_w),
                   CsvTable::cell(r.term_l), CsvTable::cell(r.delta_w_pred),
                   CsvTable::cell(r.delta_l_pred), CsvTable::cell(r.delta_w_meas),
                   CsvTable::cell(r.delta_l_meas), CsvTable::cell(s.log_delta_ratio),
                   CsvTable::cell(r.pi_ystar), CsvTable::cell(r.delta_ystar_meas),
                   CsvTable::cell(std::string_view(to_string(r.case_label)))});
  }
  return table;
}

CsvTable train_table(const TrainReport& report) {
  CsvTable table({"step", "loss_dpo", "loss_sft", "loss_sft_star", "constraint_residual",
                  "loss_reg", "loss_total", "z_mean", "sigma_z_mean", "accuracy",
                  "grad_norm_theta", "grad_norm_phi"});
  for (const auto& r : report.rows) {
    table.add_row({CsvTable::cell(r.step), CsvTable::cell(r.loss.dpo), CsvTable::cell(r.loss.sft),
                   CsvTable::cell(r.loss.sft_star_estimate), CsvTable::cell(r.constraint_residual),
                   CsvTable::cell(r.loss.reg), CsvTable::cell(r.loss.total),
                   CsvTable::cell(r.loss.z), CsvTable::cell(r.loss.sigma_z_mean),
                   CsvTable::cell(r.accuracy), CsvTable::cell(r.grad_norm_theta),
                   CsvTable::cell(r.grad_norm_phi)});
  }
  return table;
}

std::vector<MassShiftRow> mass_shift_trajectory(const Experiment& e, Method method,
                                                const SpoConfig& config) {
  if (!e.probe) throw ConfigError("mass-shift needs the probe generator");
  if (method == Method::sft) throw ConfigError("mass-shift runs dpo or spo, not sft");
  std::vector<MassShiftRow> rows;
  const ProbeDataset& probe = *e.probe;
  TrainReport report = train_run(method, e.policy, e.data, config, {},
                                 [&](int step, const SplitPolicy& policy) {
                                   rows.push_back(mass_shift_row(step, policy, probe));
                                 });
  rows.insert(rows.begin(), mass_shift_row(0, report.initial_policy, probe));
  return rows;
}

CsvTable mass_shift_table(const std::vector<MassShiftRow>& rows) {
  CsvTable table({"step", "mean_logp_dw", "mean_logp_dl", "logp_ystar"});
  for (const auto& r : rows) {
    table.add_row({CsvTable::cell(r.step), CsvTable::cell(r.mean_logp_dw),
                   CsvTable::cell(r.mean_logp_dl), CsvTable::cell(r.logp_ystar)});
  }
  return table;
}

std::vector<SweepRow> run_sweep(const Experiment& e, const RunConfig& config) {
  if (config.sweep_values.empty()) throw ConfigError("sweep needs a nonempty 'sweep_values' grid");
  const std::size_t n = config.sweep_values.size();
  std::vector<SweepRow> rows(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        SpoConfig spo = config.spo;
        (config.sweep_param == "lambda" ? spo.lambda : spo.gamma) = config.sweep_values[i];
        const TrainReport report = train_run(Method::spo, e.policy, e.data, spo, config.warm_start);
        rows[i] = {config.sweep_param, config.sweep_values[i], report.accuracy,
                   mean_pi_w(report.final_policy, e.data.triples)};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t n_threads =
      std::min<std::size_t>(n, config.threads > 0 ? static_cast<std::size_t>(config.threads) : hw);
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
  }
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  return rows;
}

CsvTable sweep_table(const std::vector<SweepRow>& rows) {
  CsvTable table({"param_name", "param_value", "final_accuracy", "final_pi_w_mean"});
  for (const auto& r : rows) {
    table.add_row({CsvTable::cell(std::string_view(r.param_name)), CsvTable::cell(r.param_value),
                   CsvTable::cell(r.final_accuracy), CsvTable::cell(r.final_pi_w_mean)});
  }
  return table;
}

ExitCode cmd_verify(const RunConfig& config, const fs::path& out) {
  VerifyOptions options = config.verify;
  options.seed = config.spo.seed;
  const VerifyReport report = run_verify(options);
  write_text(out / "verify_report.json", to_json(report).dump(2) + "\n");
  return report.passed() ? ExitCode::ok : ExitCode::property_failure;
}

ExitCode cmd_dynamics(const RunConfig& config, const fs::path& out) {
  const Experiment e = build_experiment(config, GeneratorKind::probe);
  const ProbeSettings settings{config.spo.beta, config.spo.eta_theta};
  const auto steps = probe_trajectory(e.policy, e.policy, e.data.triples, settings, config.steps);
  dynamics_table(steps).write(out / "dynamics.csv");
  return ExitCode::ok;
}

ExitCode cmd_mass_shift(const RunConfig& config, const fs::path& out) {
  const Experiment e = build_experiment(config, GeneratorKind::probe);
  const auto rows = mass_shift_trajectory(e, config.method.value_or(Method::dpo), config.spo);
  mass_shift_table(rows).write(out / "mass_shift.csv");
  json sets = json::array();
  for (const auto& s : e.probe->prompts) {
    sets.push_back({{"x", s.x}, {"d_w", s.d_w}, {"d_l", s.d_l}, {"ystar", s.ystar}});
  }
  write_text(out / "probe_sets.json", sets.dump(2) + "\n");
  return ExitCode::ok;
}

ExitCode cmd_train(const RunConfig& config, const fs::path& out) {
  const Experiment e = build_experiment(config, GeneratorKind::random);
  const TrainReport report = train_run(config.method.value_or(Method::spo), e.policy, e.data,
                                       config.spo, config.warm_start);
  train_table(report).write(out / "train.csv");
  write_text(out / "policy.json", to_json(report.final_policy).dump(2) + "\n");
  return ExitCode::ok;
}

ExitCode cmd_sweep(const RunConfig& config, const fs::path& out) {
  const Experiment e = build_experiment(config, GeneratorKind::random);
  sweep_table(run_sweep(e, config)).write(out / "sweep.csv");
  return ExitCode::ok;
}

}  // namespace prefdyn
