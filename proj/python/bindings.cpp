#include "prefdyn/data.hpp"
#include "prefdyn/dynamics.hpp"
#include "prefdyn/errors.hpp"
#include "prefdyn/objectives.hpp"
#include "prefdyn/policy.hpp"
#include "prefdyn/runner.hpp"
#include "prefdyn/trainer.hpp"
#include "prefdyn/verify.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace prefdyn;

namespace {

// JSON crosses the boundary as text; the Python package wraps it with json.
std::string dump(const nlohmann::json& doc) { return doc.dump(); }

std::vector<PreferenceTriple> triples_from(const std::vector<std::tuple<int, int, int>>& rows) {
  std::vector<PreferenceTriple> out;
  for (const auto& [x, w, l] : rows) out.push_back({x, w, l});
  return out;
}

std::vector<SftPair> pairs_from(const std::vector<std::tuple<int, int>>& rows) {
  std::vector<SftPair> out;
  for (const auto& [x, w] : rows) out.push_back({x, w});
  return out;
}

py::dict loss_dict(const LossBreakdown& b) {
  py::dict d;
  d["dpo"] = b.dpo;
  d["sft"] = b.sft;
  d["sft_star"] = b.sft_star_estimate;
  d["reg"] = b.reg;
  d["total"] = b.total;
  d["z"] = b.z;
  d["sigma_z"] = b.sigma_z;
  d["sigma_z_mean"] = b.sigma_z_mean;
  return d;
}

SpoConfig config_from(const py::dict& kwargs) {
  nlohmann::json doc = nlohmann::json::parse(py::module_::import("json").attr("dumps")(kwargs).cast<std::string>());
  return parse_run_config(doc).spo;
}

}  // namespace

PYBIND11_MODULE(_prefdyn, m) {
  m.doc() = "Split softmax policies, preference objectives and their one-step dynamics";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<GenerationError>(m, "GenerationError");
  py::register_exception<DegenerateGradientError>(m, "DegenerateGradientError");

  py::enum_<PolicyKind>(m, "PolicyKind")
      .value("tabular", PolicyKind::tabular)
      .value("log_linear", PolicyKind::log_linear);
  py::enum_<Block>(m, "Block").value("theta", Block::theta).value("phi", Block::phi).value("all", Block::all);

  py::class_<SplitPolicy>(m, "SplitPolicy")
      .def_static("tabular",
                  py::overload_cast<int, int, const Eigen::VectorXd&, const Eigen::VectorXd&>(
                      &SplitPolicy::tabular),
                  py::arg("prompts"), py::arg("outputs"), py::arg("theta"), py::arg("phi"))
      .def_static("log_linear",
                  py::overload_cast<int, int, const Eigen::MatrixXd&, const Eigen::VectorXd&,
                                    const Eigen::VectorXd&>(&SplitPolicy::log_linear),
                  py::arg("prompts"), py::arg("outputs"), py::arg("features"), py::arg("theta"),
                  py::arg("phi"))
      .def_property_readonly("kind", &SplitPolicy::kind)
      .def_property_readonly("prompts", &SplitPolicy::prompts)
      .def_property_readonly("outputs", &SplitPolicy::outputs)
      .def_property_readonly("theta", [](const SplitPolicy& p) { return Eigen::VectorXd(p.params().theta()); })
      .def_property_readonly("phi", [](const SplitPolicy& p) { return Eigen::VectorXd(p.params().phi()); })
      .def("logits", &SplitPolicy::logits)
      .def("probs", &SplitPolicy::prob_vector)
      .def("log_probs", &SplitPolicy::log_prob_vector)
      .def("grad_log_prob", &SplitPolicy::grad_log_prob, py::arg("x"), py::arg("y"), py::arg("wrt") = Block::theta)
      .def("second_derivative_log_prob", &SplitPolicy::second_derivative_log_prob)
      .def("to_json", [](const SplitPolicy& p) { return dump(to_json(p)); })
      .def_static("from_json",
                  [](const std::string& text) { return policy_from_json(nlohmann::json::parse(text)); });

  m.def("margin_z",
        [](const SplitPolicy& p, const SplitPolicy& ref, std::tuple<int, int, int> t, double beta) {
          return margin_z(p, ref, triples_from({t})[0], beta);
        });
  m.def("dpo_loss", [](const SplitPolicy& p, const SplitPolicy& ref,
                       const std::vector<std::tuple<int, int, int>>& ts,
                       double beta) { return dpo_loss(p, ref, triples_from(ts), beta); });
  m.def("sft_loss", [](const SplitPolicy& p, const std::vector<std::tuple<int, int>>& ps) {
    return sft_loss(p, pairs_from(ps));
  });
  m.def("reg_term", [](const SplitPolicy& p, const std::vector<std::tuple<int, int, int>>& ts) {
    return reg_term(p, triples_from(ts));
  });

  m.def("predict_deltas",
        [](const SplitPolicy& p, const SplitPolicy& ref, std::tuple<int, int, int> t, double eta, double beta) {
          const auto d = predict_deltas(p, ref, triples_from({t})[0], eta, beta);
          return std::make_pair(d.delta_w, d.delta_l);
        });
  m.def("measure_deltas",
        [](const SplitPolicy& p, const SplitPolicy& ref, std::tuple<int, int, int> t, double eta, double beta) {
          return measure_deltas(p, ref, triples_from({t})[0], eta, beta);
        });
  m.def("classify",
        [](const SplitPolicy& p, const SplitPolicy& ref, std::tuple<int, int, int> t, double beta) {
          return std::string(to_string(classify(gradient_geometry(p, ref, triples_from({t})[0], beta))));
        });

  m.def(
      "displacement_task",
      [](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const auto task = generate_displacement_prone(DisplacementParams{}, rng);
        return py::make_tuple(task.policy, std::make_tuple(task.triple.x, task.triple.y_w, task.triple.y_l),
                              task.ystar);
      },
      py::arg("seed") = 0, "Certified case-1 log-linear task: (policy, triple, ystar).");

  m.def(
      "train",
      [](const std::string& method, const SplitPolicy& policy,
         const std::vector<std::tuple<int, int, int>>& triples, const std::vector<std::tuple<int, int>>& pairs,
         const std::vector<std::vector<int>>& correct, const py::dict& config) {
        Datasets data{triples_from(triples), pairs_from(pairs),
                      OutputSpace::from_correct_sets(policy.prompts(), policy.outputs(), correct)};
        const auto report = train_run(parse_method(method), policy, data, config_from(config));
        py::list rows;
        for (const auto& r : report.rows) {
          py::dict d = loss_dict(r.loss);
          d["step"] = r.step;
          d["constraint_residual"] = r.constraint_residual;
          d["accuracy"] = r.accuracy;
          rows.append(d);
        }
        return py::make_tuple(report.final_policy, rows);
      },
      py::arg("method"), py::arg("policy"), py::arg("triples"), py::arg("sft_pairs"), py::arg("correct"),
      py::arg("config") = py::dict(), "Runs sft/dpo/spo; config takes the CLI's flat keys.");

  m.def(
      "verify",
      [](std::uint64_t seed, int gradient_instances, int audit_instances) {
        VerifyOptions o;
        o.seed = seed;
        o.gradient_instances = gradient_instances;
        o.audit_instances = audit_instances;
        return dump(to_json(run_verify(o)));
      },
      py::arg("seed") = 0, py::arg("gradient_instances") = 200, py::arg("audit_instances") = 1000);

  m.def(
      "run_command",
      [](const std::string& command, const std::string& config_json, const std::filesystem::path& out) {
        const RunConfig c = parse_run_config(nlohmann::json::parse(config_json));
        std::filesystem::create_directories(out);
        ExitCode code = ExitCode::ok;
        if (command == "verify") {
          code = cmd_verify(c, out);
        } else if (command == "dynamics") {
          code = cmd_dynamics(c, out);
        } else if (command == "mass-shift") {
          code = cmd_mass_shift(c, out);
        } else if (command == "train") {
          code = cmd_train(c, out);
        } else if (command == "sweep") {
          code = cmd_sweep(c, out);
        } else {
          throw ConfigError("unknown command '" + command + "'");
        }
        return static_cast<int>(code);
      },
      py::arg("command"), py::arg("config_json"), py::arg("out"));
}
