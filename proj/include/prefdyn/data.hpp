#pragma once

#include "prefdyn/policy.hpp"
#include "prefdyn/records.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace prefdyn {

enum class GeneratorKind { random, probe, displacement_prone };
const char* to_string(GeneratorKind kind);
GeneratorKind parse_generator(const std::string& name);

/// Output space with correctness labels, plus a feature map when the task is
/// meant for log-linear policies (one row per (prompt, output)).
struct SyntheticTask {
  OutputSpace space;
  GeneratorKind generator = GeneratorKind::random;
  std::optional<Eigen::MatrixXd> features;

  // Throws ValidationError if the space or the feature shape is invalid.
  void validate() const;
};

// {prompts, outputs, correct: [[...]], features?: [[...]]}
nlohmann::json to_json(const SyntheticTask& task);
SyntheticTask task_from_json(const nlohmann::json& doc);
SyntheticTask load_task(const std::filesystem::path& path);

// Range checks; triples also need y_w != y_l, SFT pairs need a correct y_w.
void validate_triple(const PreferenceTriple& triple, const OutputSpace& space);
void validate_sft_pair(const SftPair& pair, const OutputSpace& space);

// One JSON object per line. Blank lines are skipped. Malformed lines throw
// ParseError with the 1-based line number; y_w == y_l, negative indices and,
// when `space` is given, out-of-range indices throw ValidationError.
std::vector<PreferenceTriple> load_triples_jsonl(const std::filesystem::path& path,
                                                 const OutputSpace* space = nullptr);
std::vector<SftPair> load_sft_jsonl(const std::filesystem::path& path,
                                    const OutputSpace* space = nullptr);
void save_jsonl(const std::filesystem::path& path, std::span<const PreferenceTriple> triples);
void save_jsonl(const std::filesystem::path& path, std::span<const SftPair> pairs);

// Fraction of prompts whose argmax output is labeled correct.
double accuracy(const SplitPolicy& policy, const OutputSpace& space);

// Every (correct, incorrect) pair per prompt, and every correct output as an
// SFT pair.
std::vector<PreferenceTriple> all_preference_pairs(const OutputSpace& space);
std::vector<SftPair> all_sft_pairs(const OutputSpace& space);

struct RandomTaskParams {
  PolicyKind kind = PolicyKind::tabular;
  int prompts = 4;
  int outputs = 6;
  int feature_dim = 4;     // log-linear only
  double init_scale = 1.0;  // std-dev of the initial phi block; theta starts at 0
};

struct GeneratedTask {
  SyntheticTask task;
  SplitPolicy policy;
};

// Random correct sets (proper and nonempty per prompt), random features for
// log-linear tasks, and a random initial policy.
GeneratedTask generate_random_task(const RandomTaskParams& params, std::mt19937_64& rng);

/// Probe task: outputs are all length-3 sequences over a 4-token vocabulary
/// (64 outputs, one prompt). Features are a per-position one-hot code plus an
/// indicator for one memorized incorrect sequence, which the initial policy
/// strongly prefers. Correct: first token 1 and last token not 3.
GeneratedTask make_probe_task(std::mt19937_64& rng);

struct ProbeSets {
  int x = 0;
  std::vector<int> d_w;  // top-k correct sampled outputs, most probable first
  std::vector<int> d_l;  // top-k incorrect sampled outputs, y* excluded
  int ystar = -1;        // argmax over all outputs
};

struct ProbeDataset {
  std::vector<ProbeSets> prompts;
  std::vector<PreferenceTriple> triples;  // every (w, l) in D_w x D_l, per prompt
  std::vector<SftPair> sft_pairs;         // D_w
};

// Samples n_samples outputs per prompt and keeps the top_k most probable
// correct and incorrect ones. y* is left out of D_l when it is incorrect.
// Throws GenerationError when too few distinct outputs were sampled.
ProbeDataset generate_probe_dataset(const SplitPolicy& policy, const OutputSpace& space,
                                    int n_samples, int top_k, std::mt19937_64& rng);

struct DisplacementParams {
  PolicyKind kind = PolicyKind::log_linear;
  int outputs = 6;
  int feature_dim = 4;
  double pair_noise = 0.3;  // y_l's features are y_w's plus this much noise
  int sft_epochs = 5;
  double sft_eta = 0.1;
  double min_ystar_mass = 0.3;
  std::int64_t budget = 100000;
};

struct DisplacementTask {
  SyntheticTask task;
  SplitPolicy policy;  // SFT-warm-started, theta = 0
  PreferenceTriple triple;
  int ystar = -1;
  std::int64_t candidates_tried = 0;
};

// Searches random one-prompt feature maps until the warm-started policy has a
// triple with g_w.g_l > |g_w|^2 and a third output y* of mass >= min_ystar_mass
// whose first-order change under a DPO step on the triple is positive.
// Output 0 is the only correct output; the triple is (0, 0, 1).
// Throws std::invalid_argument for tabular requests or feature_dim < 2, and
// SearchExhaustedError when the budget runs out.
DisplacementTask generate_displacement_prone(const DisplacementParams& params,
                                             std::mt19937_64& rng);

}  // namespace prefdyn
