#include "prefdyn/trainer.hpp"

#include "prefdyn/data.hpp"
#include "prefdyn/errors.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace prefdyn {

namespace {

void require_finite(const Eigen::VectorXd& g, char term, const char* description) {
  if (!g.allFinite()) {
    throw NonFiniteGradientError(
        term, std::string("non-finite gradient in term (") + term + "): " + description);
  }
}

void apply_update(SplitPolicy& policy, Eigen::VectorXd g_theta, Eigen::VectorXd g_phi,
                  const SpoConfig& config, StepResult& result) {
  result.grad_norm_theta = clip_to_norm(g_theta, config.clip_norm);
  result.grad_norm_phi = clip_to_norm(g_phi, config.clip_norm);
  // Both gradients were taken at the same pre-step point.
  policy.params().theta() -= config.eta_theta * g_theta;
  policy.params().phi() -= config.eta_phi * g_phi;
}

// Cycles through a dataset in per-epoch shuffled order.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t batch_size) {
    std::vector<std::size_t> batch;
    if (order_.empty()) return batch;
    batch_size = std::min(batch_size, order_.size());
    while (batch.size() < batch_size) {
      if (cursor_ == order_.size()) reshuffle();
      batch.push_back(order_[cursor_++]);
    }
    return batch;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::mt19937_64& rng_;
  std::size_t cursor_ = 0;
};

template <typename T>
std::vector<T> gather(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace

void SpoConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("config: " + field + " " + why);
  };
  if (!(beta > 0.0)) fail("beta", "must be positive");
  if (!(lambda >= 0.0)) fail("lambda", "must be nonnegative");
  if (!(gamma >= 0.0)) fail("gamma", "must be nonnegative");
  if (!(eta_theta > 0.0)) fail("eta_theta", "must be positive");
  if (!(eta_phi > 0.0)) fail("eta_phi", "must be positive");
  if (!(eta_phi_prime > 0.0)) fail("eta_phi_prime", "must be positive");
  if (K < 0) fail("K", "must be >= 0");
  if (T < 1) fail("T", "must be >= 1");
  if (clip_norm && !(*clip_norm > 0.0)) fail("clip_norm", "must be positive or null");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
}

const char* to_string(RefCheckpoint checkpoint) {
  return checkpoint == RefCheckpoint::init ? "init" : "post_sft";
}

const char* to_string(Method method) {
  switch (method) {
    case Method::sft: return "sft";
    case Method::spo: return "spo";
    case Method::dpo: break;
  }
  return "dpo";
}

Method parse_method(const std::string& name) {
  if (name == "sft") return Method::sft;
  if (name == "dpo") return Method::dpo;
  if (name == "spo") return Method::spo;
  throw std::invalid_argument("unknown method '" + name + "' (expected sft, dpo or spo)");
}

ObjectiveWeights weights_of(const SpoConfig& config) {
  return {config.beta, config.lambda, config.gamma};
}

InnerSolution inner_sft_descent(const SplitPolicy& policy, std::span<const SftPair> pairs,
                                double eta_phi_prime, int K) {
  if (K < 0) throw std::invalid_argument("inner_sft_descent: K must be >= 0");
  SplitPolicy lower = policy;
  for (int k = 0; k < K; ++k) {
    lower.params().phi() -= eta_phi_prime * sft_gradient(lower, pairs, Block::phi);
  }
  return {lower.params().phi(), sft_loss(lower, pairs)};
}

double clip_to_norm(Eigen::VectorXd& g, std::optional<double> clip_norm) {
  const double norm = g.norm();
  if (clip_norm && norm > *clip_norm) g *= *clip_norm / norm;
  return norm;
}

StepResult spo_step(SplitPolicy& policy, const SplitPolicy& ref,
                    std::span<const PreferenceTriple> triples, std::span<const SftPair> pairs,
                    const SpoConfig& config) {
  if (triples.empty() || pairs.empty()) {
    throw std::invalid_argument("spo_step: both batches must be nonempty");
  }
  const ObjectiveWeights w = weights_of(config);
  const InnerSolution inner = inner_sft_descent(policy, pairs, config.eta_phi_prime, config.K);

  const GradientTerms gt = grad_theta_terms(policy, ref, inner.phi_prime, triples, pairs, w);
  const GradientTerms gp = grad_phi_terms(policy, ref, triples, pairs, w);
  require_finite(gt.margin, 'a', "DPO margin gradient w.r.t. theta");
  require_finite(gt.sft, 'b', "SFT value-function gap w.r.t. theta");
  require_finite(gp.margin, 'c', "DPO margin gradient w.r.t. phi");
  require_finite(gp.sft, 'd', "SFT gradient w.r.t. phi");
  require_finite(gt.reg, 'e', "hinge regularizer gradient w.r.t. theta");
  require_finite(gp.reg, 'e', "hinge regularizer gradient w.r.t. phi");

  StepResult result;
  result.loss = evaluate_objective(policy, ref, inner.phi_prime, triples, pairs, w);
  result.constraint_residual = result.loss.sft - result.loss.sft_star_estimate;
  apply_update(policy, gt.total, gp.total, config, result);
  return result;
}

StepResult dpo_step(SplitPolicy& policy, const SplitPolicy& ref,
                    std::span<const PreferenceTriple> triples, const SpoConfig& config) {
  if (triples.empty()) throw std::invalid_argument("dpo_step: empty batch");
  Eigen::VectorXd g_theta = dpo_gradient(policy, ref, triples, config.beta, Block::theta);
  Eigen::VectorXd g_phi = dpo_gradient(policy, ref, triples, config.beta, Block::phi);
  require_finite(g_theta, 'a', "DPO margin gradient w.r.t. theta");
  require_finite(g_phi, 'c', "DPO margin gradient w.r.t. phi");

  StepResult result;
  result.loss = evaluate_objective(policy, ref, std::nullopt, triples, {},
                                   ObjectiveWeights{config.beta, 0.0, 0.0});
  apply_update(policy, std::move(g_theta), std::move(g_phi), config, result);
  return result;
}

StepResult sft_step(SplitPolicy& policy, std::span<const SftPair> pairs, const SpoConfig& config) {
  if (pairs.empty()) throw std::invalid_argument("sft_step: empty batch");
  Eigen::VectorXd g_theta = sft_gradient(policy, pairs, Block::theta);
  Eigen::VectorXd g_phi = sft_gradient(policy, pairs, Block::phi);
  require_finite(g_theta, 'b', "SFT gradient w.r.t. theta");
  require_finite(g_phi, 'd', "SFT gradient w.r.t. phi");

  StepResult result;
  result.loss.sft = sft_loss(policy, pairs);
  result.loss.sft_star_estimate = result.loss.sft;
  result.loss.total = result.loss.sft;
  apply_update(policy, std::move(g_theta), std::move(g_phi), config, result);
  return result;
}

std::vector<double> sft_train(SplitPolicy& policy, std::span<const SftPair> pairs, double eta,
                              int epochs) {
  if (epochs < 0) throw std::invalid_argument("sft_train: epochs must be >= 0");
  std::vector<double> losses;
  if (pairs.empty()) {
    if (epochs > 0) throw std::invalid_argument("sft_train: empty dataset");
    return losses;
  }
  losses.push_back(sft_loss(policy, pairs));
  for (int e = 0; e < epochs; ++e) {
    policy.params().values() -= eta * sft_gradient(policy, pairs, Block::all);
    losses.push_back(sft_loss(policy, pairs));
  }
  return losses;
}

void validate_datasets(const SplitPolicy& policy, const Datasets& data) {
  if (data.space.prompts != policy.prompts() || data.space.outputs != policy.outputs()) {
    throw std::invalid_argument("dataset output space (" + std::to_string(data.space.prompts) +
                                " x " + std::to_string(data.space.outputs) +
                                ") does not match the policy (" +
                                std::to_string(policy.prompts()) + " x " +
                                std::to_string(policy.outputs()) + ")");
  }
  for (const auto& t : data.triples) validate_triple(t, data.space);
  for (const auto& p : data.sft_pairs) validate_sft_pair(p, data.space);
}

TrainReport train_run(Method method, const SplitPolicy& initial, const Datasets& data,
                      const SpoConfig& config, const WarmStart& warm_start,
                      const StepObserver& observer) {
  config.validate();
  validate_datasets(initial, data);
  if (method != Method::sft && data.triples.empty()) {
    throw std::invalid_argument("train_run: method needs preference triples");
  }
  if (method != Method::dpo && data.sft_pairs.empty()) {
    throw std::invalid_argument("train_run: method needs SFT pairs");
  }

  TrainReport report;
  report.method = method;
  SplitPolicy policy = initial;
  if (config.ref_checkpoint == RefCheckpoint::post_sft) {
    sft_train(policy, data.sft_pairs, warm_start.sft_eta, warm_start.sft_epochs);
    report.ref_policy = policy;
  } else {
    report.ref_policy = policy;
    sft_train(policy, data.sft_pairs, warm_start.sft_eta, warm_start.sft_epochs);
  }
  report.initial_policy = policy;

  std::mt19937_64 rng(config.seed);
  BatchSampler triple_sampler(data.triples.size(), rng);
  BatchSampler sft_sampler(data.sft_pairs.size(), rng);
  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  const ObjectiveWeights log_weights{config.beta, 0.0, 0.0};

  report.rows.reserve(static_cast<std::size_t>(config.T));
  for (int step = 0; step < config.T; ++step) {
    StepResult result;
    switch (method) {
      case Method::spo: {
        const auto batch = gather(data.triples, triple_sampler.next(batch_size));
        result = spo_step(policy, report.ref_policy, batch, data.sft_pairs, config);
        break;
      }
      case Method::dpo: {
        const auto batch = gather(data.triples, triple_sampler.next(batch_size));
        result = dpo_step(policy, report.ref_policy, batch, config);
        if (!data.sft_pairs.empty()) {
          result.loss.sft = sft_loss(policy, data.sft_pairs);
          result.loss.sft_star_estimate = result.loss.sft;
        }
        break;
      }
      case Method::sft: {
        const auto batch = gather(data.sft_pairs, sft_sampler.next(batch_size));
        const SplitPolicy before = policy;
        result = sft_step(policy, batch, config);
        if (!data.triples.empty()) {
          const LossBreakdown pref = evaluate_objective(before, report.ref_policy, std::nullopt,
                                                        data.triples, {}, log_weights);
          result.loss.dpo = pref.dpo;
          result.loss.reg = pref.reg;
          result.loss.z = pref.z;
          result.loss.sigma_z = pref.sigma_z;
          result.loss.sigma_z_mean = pref.sigma_z_mean;
        }
        break;
      }
    }
    TrainRow row;
    row.step = step;
    row.loss = result.loss;
    row.constraint_residual = result.constraint_residual;
    row.accuracy = accuracy(policy, data.space);
    row.grad_norm_theta = result.grad_norm_theta;
    row.grad_norm_phi = result.grad_norm_phi;
    report.rows.push_back(row);
    if (observer) observer(step + 1, policy);
  }
  report.accuracy = accuracy(policy, data.space);
  report.final_policy = std::move(policy);
  return report;
}

}  // namespace prefdyn
