#pragma once

#include "prefdyn/config.hpp"
#include "prefdyn/objectives.hpp"
#include "prefdyn/policy.hpp"
#include "prefdyn/records.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace prefdyn {

enum class Method { sft, dpo, spo };
const char* to_string(Method method);
Method parse_method(const std::string& name);

ObjectiveWeights weights_of(const SpoConfig& config);

struct InnerSolution {
  Eigen::VectorXd phi_prime;  // phi'^(K)
  double sft_star = 0.0;      // L_sft(theta, phi'^(K)), the L*_sft estimate
};

// K plain gradient steps on the phi block of L_sft, starting from the live
// phi, theta frozen. The policy itself is not modified.
InnerSolution inner_sft_descent(const SplitPolicy& policy, std::span<const SftPair> pairs,
                                double eta_phi_prime, int K);

// Scales g in place so that |g| <= clip_norm. Returns the norm before clipping.
double clip_to_norm(Eigen::VectorXd& g, std::optional<double> clip_norm);

struct StepResult {
  LossBreakdown loss;
  double constraint_residual = 0.0;  // L_sft(theta, phi) - L_sft(theta, phi'^(K))
  double grad_norm_theta = 0.0;      // before clipping
  double grad_norm_phi = 0.0;
};

// One outer iteration of the bilevel loop: inner descent, both block gradients
// at the pre-step parameters, per-block clipping, then the simultaneous update
// theta -= eta_theta g_theta, phi -= eta_phi g_phi.
// Throws NonFiniteGradientError naming the term (a)-(e) that went non-finite.
StepResult spo_step(SplitPolicy& policy, const SplitPolicy& ref,
                    std::span<const PreferenceTriple> triples, std::span<const SftPair> pairs,
                    const SpoConfig& config);

// One gradient step on the DPO loss alone, both blocks, same clipping and
// learning rates as spo_step.
StepResult dpo_step(SplitPolicy& policy, const SplitPolicy& ref,
                    std::span<const PreferenceTriple> triples, const SpoConfig& config);

// One NLL step on both blocks.
StepResult sft_step(SplitPolicy& policy, std::span<const SftPair> pairs, const SpoConfig& config);

// Full-batch NLL descent on both blocks, one step per epoch. Returns the SFT
// loss before the first epoch followed by the loss after each epoch.
std::vector<double> sft_train(SplitPolicy& policy, std::span<const SftPair> pairs, double eta,
                              int epochs);

struct Datasets {
  std::vector<PreferenceTriple> triples;
  std::vector<SftPair> sft_pairs;
  OutputSpace space;
};

struct WarmStart {
  int sft_epochs = 0;
  double sft_eta = 0.1;
};

struct TrainRow {
  int step = 0;
  LossBreakdown loss;
  double constraint_residual = 0.0;
  double accuracy = 0.0;  // after the step
  double grad_norm_theta = 0.0;
  double grad_norm_phi = 0.0;
};

struct TrainReport {
  Method method = Method::dpo;
  std::vector<TrainRow> rows;
  double accuracy = 0.0;
  SplitPolicy initial_policy;  // after warm start, before step 0
  SplitPolicy ref_policy;
  SplitPolicy final_policy;
};

// Called after every outer step with the 1-based step count.
using StepObserver = std::function<void(int step, const SplitPolicy& policy)>;

// Runs T outer steps of `method`. Minibatches of batch_size are drawn from a
// per-epoch shuffle driven by config.seed; the lower level (inner descent and
// SFT terms) is always full batch. The warm start runs before the reference
// snapshot when ref_checkpoint is post_sft and after it when it is init.
TrainReport train_run(Method method, const SplitPolicy& initial, const Datasets& data,
                      const SpoConfig& config, const WarmStart& warm_start = {},
                      const StepObserver& observer = {});

void validate_datasets(const SplitPolicy& policy, const Datasets& data);

}  // namespace prefdyn
