#include "prefdyn/data.hpp"

#include "prefdyn/dynamics.hpp"
#include "prefdyn/errors.hpp"
#include "prefdyn/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace prefdyn {

namespace {

using nlohmann::json;

Eigen::VectorXd normal_vector(Eigen::Index n, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  // Row-major fill so the draw order does not depend on Eigen's storage order.
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  }
  return m;
}

void check_index(int value, int limit, const char* name, std::size_t line) {
  if (value < 0 || (limit >= 0 && value >= limit)) {
    throw ValidationError("line " + std::to_string(line) + ": " + name + " = " +
                          std::to_string(value) + " out of range");
  }
}

int int_field(const json& obj, const char* key, std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(line, std::string("missing key \"") + key + "\"");
  if (!it->is_number_integer()) {
    throw ParseError(line, std::string("\"") + key + "\" must be an integer");
  }
  const auto v = it->get<std::int64_t>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ValidationError("line " + std::to_string(line) + ": " + key + " out of range");
  }
  return static_cast<int>(v);
}

// Calls fn(object, line_number) for every nonblank line.
template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, std::size_t expected_keys, Fn fn) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(line, "expected a JSON object");
    if (obj.size() != expected_keys) {
      throw ParseError(line, "expected " + std::to_string(expected_keys) + " keys, got " +
                                 std::to_string(obj.size()));
    }
    fn(obj, line);
  }
}

void write_lines(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << body;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Feature row for the probe outputs: one-hot per position, then the
// memorized-sequence indicator.
constexpr int kProbeVocab = 4;
constexpr int kProbeLength = 3;
constexpr std::array<int, kProbeLength> kProbeMemorized{1, 3, 3};

std::array<int, kProbeLength> probe_tokens(int y) {
  std::array<int, kProbeLength> tokens{};
  for (int p = kProbeLength - 1; p >= 0; --p) {
    tokens[static_cast<std::size_t>(p)] = y % kProbeVocab;
    y /= kProbeVocab;
  }
  return tokens;
}

}  // namespace

const char* to_string(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::probe: return "probe";
    case GeneratorKind::displacement_prone: return "displacement_prone";
    case GeneratorKind::random: break;
  }
  return "random";
}

GeneratorKind parse_generator(const std::string& name) {
  if (name == "random") return GeneratorKind::random;
  if (name == "probe") return GeneratorKind::probe;
  if (name == "displacement_prone") return GeneratorKind::displacement_prone;
  throw std::invalid_argument("unknown generator '" + name +
                              "' (expected random, probe or displacement_prone)");
}

void SyntheticTask::validate() const {
  space.validate();
  if (features) {
    if (features->rows() != static_cast<Eigen::Index>(space.prompts) * space.outputs) {
      throw ValidationError("task features need one row per (prompt, output)");
    }
    if (features->cols() < 1) throw ValidationError("task features need at least one column");
    if (!features->allFinite()) throw ValidationError("task features must be finite");
  }
}

json to_json(const SyntheticTask& task) {
  json doc;
  doc["prompts"] = task.space.prompts;
  doc["outputs"] = task.space.outputs;
  json correct = json::array();
  for (int x = 0; x < task.space.prompts; ++x) correct.push_back(task.space.correct_outputs(x));
  doc["correct"] = std::move(correct);
  if (task.features) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < task.features->rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < task.features->cols(); ++c) row.push_back((*task.features)(r, c));
      rows.push_back(std::move(row));
    }
    doc["features"] = std::move(rows);
  }
  return doc;
}

SyntheticTask task_from_json(const json& doc) {
  if (!doc.is_object()) throw ValidationError("task json: expected an object");
  for (const auto& [key, value] : doc.items()) {
    if (key != "prompts" && key != "outputs" && key != "correct" && key != "features") {
      throw ValidationError("task json: unknown key '" + key + "'");
    }
  }
  try {
    SyntheticTask task;
    const int prompts = doc.at("prompts").get<int>();
    const int outputs = doc.at("outputs").get<int>();
    const auto correct = doc.at("correct").get<std::vector<std::vector<int>>>();
    task.space = OutputSpace::from_correct_sets(prompts, outputs, correct);
    if (doc.contains("features")) {
      const auto rows = doc.at("features").get<std::vector<std::vector<double>>>();
      const std::size_t d = rows.empty() ? 0 : rows.front().size();
      Eigen::MatrixXd f(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != d) {
          throw ValidationError("task json: feature row " + std::to_string(r) + " has wrong width");
        }
        for (std::size_t c = 0; c < d; ++c) {
          f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
      }
      task.features = std::move(f);
    }
    task.validate();
    return task;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("task json: ") + e.what());
  }
}

SyntheticTask load_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("task file " + path.string() + ": " + e.what());
  }
  return task_from_json(doc);
}

void validate_triple(const PreferenceTriple& t, const OutputSpace& space) {
  if (t.x < 0 || t.x >= space.prompts) {
    throw ValidationError("triple prompt " + std::to_string(t.x) + " out of range");
  }
  if (t.y_w < 0 || t.y_w >= space.outputs || t.y_l < 0 || t.y_l >= space.outputs) {
    throw ValidationError("triple output index out of range on prompt " + std::to_string(t.x));
  }
  if (t.y_w == t.y_l) {
    throw ValidationError("triple on prompt " + std::to_string(t.x) + " has y_w == y_l");
  }
}

void validate_sft_pair(const SftPair& p, const OutputSpace& space) {
  if (p.x < 0 || p.x >= space.prompts || p.y_w < 0 || p.y_w >= space.outputs) {
    throw ValidationError("SFT pair (" + std::to_string(p.x) + ", " + std::to_string(p.y_w) +
                          ") out of range");
  }
  if (!space.is_correct(p.x, p.y_w)) {
    throw ValidationError("SFT pair (" + std::to_string(p.x) + ", " + std::to_string(p.y_w) +
                          ") targets an output not labeled correct");
  }
}

std::vector<PreferenceTriple> load_triples_jsonl(const std::filesystem::path& path,
                                                 const OutputSpace* space) {
  std::vector<PreferenceTriple> out;
  const int prompts = space ? space->prompts : -1;
  const int outputs = space ? space->outputs : -1;
  for_each_json_line(path, 3, [&](const json& obj, std::size_t line) {
    PreferenceTriple t{int_field(obj, "x", line), int_field(obj, "y_w", line),
                       int_field(obj, "y_l", line)};
    check_index(t.x, prompts, "x", line);
    check_index(t.y_w, outputs, "y_w", line);
    check_index(t.y_l, outputs, "y_l", line);
    if (t.y_w == t.y_l) {
      throw ValidationError("line " + std::to_string(line) + ": y_w == y_l");
    }
    out.push_back(t);
  });
  return out;
}

std::vector<SftPair> load_sft_jsonl(const std::filesystem::path& path, const OutputSpace* space) {
  std::vector<SftPair> out;
  for_each_json_line(path, 2, [&](const json& obj, std::size_t line) {
    SftPair p{int_field(obj, "x", line), int_field(obj, "y_w", line)};
    check_index(p.x, space ? space->prompts : -1, "x", line);
    check_index(p.y_w, space ? space->outputs : -1, "y_w", line);
    if (space && !space->is_correct(p.x, p.y_w)) {
      throw ValidationError("line " + std::to_string(line) + ": y_w is not labeled correct");
    }
    out.push_back(p);
  });
  return out;
}

void save_jsonl(const std::filesystem::path& path, std::span<const PreferenceTriple> triples) {
  std::ostringstream body;
  for (const auto& t : triples) {
    body << "{\"x\":" << t.x << ",\"y_w\":" << t.y_w << ",\"y_l\":" << t.y_l << "}\n";
  }
  write_lines(path, body.str());
}

void save_jsonl(const std::filesystem::path& path, std::span<const SftPair> pairs) {
  std::ostringstream body;
  for (const auto& p : pairs) body << "{\"x\":" << p.x << ",\"y_w\":" << p.y_w << "}\n";
  write_lines(path, body.str());
}

double accuracy(const SplitPolicy& policy, const OutputSpace& space) {
  if (space.prompts != policy.prompts() || space.outputs != policy.outputs()) {
    throw std::invalid_argument("accuracy: policy and task output spaces differ");
  }
  int hits = 0;
  for (int x = 0; x < space.prompts; ++x) hits += space.is_correct(x, argmax_output(policy, x)) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(space.prompts);
}

std::vector<PreferenceTriple> all_preference_pairs(const OutputSpace& space) {
  std::vector<PreferenceTriple> out;
  for (int x = 0; x < space.prompts; ++x) {
    for (int w = 0; w < space.outputs; ++w) {
      if (!space.is_correct(x, w)) continue;
      for (int l = 0; l < space.outputs; ++l) {
        if (!space.is_correct(x, l)) out.push_back({x, w, l});
      }
    }
  }
  return out;
}

std::vector<SftPair> all_sft_pairs(const OutputSpace& space) {
  std::vector<SftPair> out;
  for (int x = 0; x < space.prompts; ++x) {
    for (int y : space.correct_outputs(x)) out.push_back({x, y});
  }
  return out;
}

GeneratedTask generate_random_task(const RandomTaskParams& params, std::mt19937_64& rng) {
  if (params.prompts < 1) throw std::invalid_argument("random task: prompts must be >= 1");
  if (params.outputs < 3) throw std::invalid_argument("random task: outputs must be >= 3");
  if (params.kind == PolicyKind::log_linear && params.feature_dim < 1) {
    throw std::invalid_argument("random task: feature_dim must be >= 1");
  }
  std::vector<std::vector<int>> correct(static_cast<std::size_t>(params.prompts));
  std::uniform_int_distribution<int> count(1, params.outputs - 1);
  for (auto& set : correct) {
    std::vector<int> order(static_cast<std::size_t>(params.outputs));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(count(rng)));
    std::sort(order.begin(), order.end());
    set = std::move(order);
  }
  GeneratedTask out;
  out.task.generator = GeneratorKind::random;
  out.task.space = OutputSpace::from_correct_sets(params.prompts, params.outputs, correct);
  if (params.kind == PolicyKind::tabular) {
    const Eigen::Index n = static_cast<Eigen::Index>(params.prompts) * params.outputs;
    out.policy = SplitPolicy::tabular(params.prompts, params.outputs, Eigen::VectorXd::Zero(n),
                                      normal_vector(n, params.init_scale, rng));
  } else {
    Eigen::MatrixXd f = normal_matrix(static_cast<Eigen::Index>(params.prompts) * params.outputs,
                                      params.feature_dim, rng);
    out.policy = SplitPolicy::log_linear(params.prompts, params.outputs, f,
                                         Eigen::VectorXd::Zero(params.feature_dim),
                                         normal_vector(params.feature_dim, params.init_scale, rng));
    out.task.features = std::move(f);
  }
  return out;
}

GeneratedTask make_probe_task(std::mt19937_64& rng) {
  constexpr int n_outputs = 64;
  constexpr int positional = kProbeVocab * kProbeLength;
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n_outputs, positional + 1);
  std::vector<int> correct;
  for (int y = 0; y < n_outputs; ++y) {
    const auto tokens = probe_tokens(y);
    for (int p = 0; p < kProbeLength; ++p) f(y, p * kProbeVocab + tokens[static_cast<std::size_t>(p)]) = 1.0;
    if (tokens == kProbeMemorized) f(y, positional) = 1.0;
    if (tokens[0] == 1 && tokens[2] != 3) correct.push_back(y);
  }
  Eigen::VectorXd w(positional + 1);
  w.head(positional) = normal_vector(positional, 1.0, rng);
  for (int p = 0; p < kProbeLength; ++p) w(p * kProbeVocab + 3) = -1.5;
  w(positional) = std::log(static_cast<double>(n_outputs)) + 2.0;

  GeneratedTask out;
  out.task.generator = GeneratorKind::probe;
  out.task.space = OutputSpace::from_correct_sets(1, n_outputs, {correct});
  out.policy = SplitPolicy::log_linear(1, n_outputs, f, Eigen::VectorXd::Zero(w.size()), w);
  out.task.features = std::move(f);
  return out;
}

ProbeDataset generate_probe_dataset(const SplitPolicy& policy, const OutputSpace& space,
                                    int n_samples, int top_k, std::mt19937_64& rng) {
  if (n_samples < 1 || top_k < 1) {
    throw std::invalid_argument("probe dataset: n_samples and top_k must be >= 1");
  }
  if (space.prompts != policy.prompts() || space.outputs != policy.outputs()) {
    throw std::invalid_argument("probe dataset: policy and task output spaces differ");
  }
  ProbeDataset out;
  for (int x = 0; x < space.prompts; ++x) {
    const auto n_correct = static_cast<int>(space.correct_outputs(x).size());
    if (n_correct < top_k || space.outputs - n_correct < top_k) {
      throw GenerationError("probe dataset: prompt " + std::to_string(x) + " has fewer than top_k=" +
                            std::to_string(top_k) + " correct or incorrect outputs");
    }
    std::set<int> seen;
    for (int i = 0; i < n_samples; ++i) seen.insert(sample(policy, x, rng));

    ProbeSets sets;
    sets.x = x;
    sets.ystar = argmax_output(policy, x);
    const Eigen::VectorXd p = policy.prob_vector(x);
    std::vector<int> good;
    std::vector<int> bad;
    for (int y : seen) {
      if (space.is_correct(x, y)) {
        good.push_back(y);
      } else if (y != sets.ystar) {
        bad.push_back(y);
      }
    }
    // Most probable first, lower index on ties.
    auto by_prob = [&p](int a, int b) { return p(a) > p(b) || (p(a) == p(b) && a < b); };
    std::sort(good.begin(), good.end(), by_prob);
    std::sort(bad.begin(), bad.end(), by_prob);
    if (good.size() < static_cast<std::size_t>(top_k) || bad.size() < static_cast<std::size_t>(top_k)) {
      throw GenerationError("probe dataset: prompt " + std::to_string(x) + " sampled " +
                            std::to_string(good.size()) + " correct and " +
                            std::to_string(bad.size()) + " usable incorrect outputs, need " +
                            std::to_string(top_k) + " of each; increase n_samples");
    }
    good.resize(static_cast<std::size_t>(top_k));
    bad.resize(static_cast<std::size_t>(top_k));
    for (int w : good) {
      out.sft_pairs.push_back({x, w});
      for (int l : bad) out.triples.push_back({x, w, l});
    }
    sets.d_w = std::move(good);
    sets.d_l = std::move(bad);
    out.prompts.push_back(std::move(sets));
  }
  return out;
}

DisplacementTask generate_displacement_prone(const DisplacementParams& params,
                                             std::mt19937_64& rng) {
  if (params.kind == PolicyKind::tabular) {
    throw std::invalid_argument(
        "displacement-prone task: tabular policies never have g_w.g_l > |g_w|^2; use log_linear");
  }
  if (params.feature_dim < 2) {
    throw std::invalid_argument("displacement-prone task: feature_dim must be >= 2");
  }
  if (params.outputs < 3) throw std::invalid_argument("displacement-prone task: outputs must be >= 3");
  if (params.budget < 1) throw std::invalid_argument("displacement-prone task: budget must be >= 1");

  const int n = params.outputs;
  const int d = params.feature_dim;
  const PreferenceTriple triple{0, 0, 1};
  const std::array<SftPair, 1> sft{SftPair{0, 0}};
  const std::array<int, 2> exclude{triple.y_w, triple.y_l};
  std::vector<int> correct{0};

  for (std::int64_t candidate = 1; candidate <= params.budget; ++candidate) {
    Eigen::MatrixXd f = normal_matrix(n, d, rng);
    f.row(1) = f.row(0) + params.pair_noise * normal_vector(d, 1.0, rng).transpose();
    SplitPolicy policy =
        SplitPolicy::log_linear(1, n, f, Eigen::VectorXd::Zero(d), normal_vector(d, 1.0, rng));
    sft_train(policy, sft, params.sft_eta, params.sft_epochs);
    policy = SplitPolicy::log_linear(1, n, f, Eigen::VectorXd::Zero(d), policy.effective_params());

    const GradientGeometry g = gradient_geometry(policy, policy, triple, 0.5);
    if (classify(g) != CaseLabel::case1) continue;
    const int ystar = argmax_output(policy, 0, exclude);
    if (policy.prob(0, ystar) < params.min_ystar_mass) continue;
    // y* must be the output that absorbs the mass to first order.
    const Eigen::VectorXd step_dir = policy.grad_log_prob(0, triple.y_w, Block::all) -
                                     policy.grad_log_prob(0, triple.y_l, Block::all);
    if (policy.grad_log_prob(0, ystar, Block::all).dot(step_dir) <= 0.0) continue;

    DisplacementTask out;
    out.task.generator = GeneratorKind::displacement_prone;
    out.task.space = OutputSpace::from_correct_sets(1, n, {correct});
    out.task.features = std::move(f);
    out.policy = std::move(policy);
    out.triple = triple;
    out.ystar = ystar;
    out.candidates_tried = candidate;
    return out;
  }
  throw SearchExhaustedError("displacement-prone task: no certified instance in " +
                             std::to_string(params.budget) +
                             " candidates; try a smaller pair_noise (more correlated features)");
}

}  // namespace prefdyn
