#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace prefdyn {

enum class PolicyKind { tabular, log_linear };

// Parameter block selector. `all` is the concatenation [theta; phi].
enum class Block { theta, phi, all };

/// Finite prompt/output space with a per-(prompt, output) correctness label.
///
/// Labels are stored row-major: index `x * outputs + y`. A valid space has at
/// least three outputs and every prompt has at least one correct and one
/// incorrect output.
struct OutputSpace {
  int prompts = 0;
  int outputs = 0;
  std::vector<std::uint8_t> labels;

  static OutputSpace from_correct_sets(int prompts, int outputs,
                                       const std::vector<std::vector<int>>& correct);

  bool is_correct(int x, int y) const { return labels[index(x, y)] != 0; }
  std::vector<int> correct_outputs(int x) const;
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(outputs) +
           static_cast<std::size_t>(y);
  }

  // Throws ValidationError when an invariant is broken.
  void validate() const;
};

/// Dense parameter vector laid out as [theta; phi], both blocks the same size.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(const Eigen::VectorXd& theta, const Eigen::VectorXd& phi);

  Eigen::Index block_size() const { return block_size_; }
  Eigen::Index size() const { return values_.size(); }

  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }

  auto theta() { return values_.head(block_size_); }
  auto theta() const { return values_.head(block_size_); }
  auto phi() { return values_.tail(block_size_); }
  auto phi() const { return values_.tail(block_size_); }

  // Which block coordinate i belongs to (theta or phi, never all).
  Block owner(Eigen::Index i) const {
    return i < block_size_ ? Block::theta : Block::phi;
  }

  bool all_finite() const { return values_.allFinite(); }

 private:
  Eigen::VectorXd values_;
  Eigen::Index block_size_ = 0;
};

/// Softmax policy over an enumerable output space whose logits are produced by
/// two additive parameter blocks: a backbone (phi) and an adapter (theta).
///
///   tabular:    L(x, y) = phi[x, y] + theta[x, y]
///   log-linear: L(x, y) = f(x, y) . (phi + theta)
///
/// Value type: copies are deep and independent.
class SplitPolicy {
 public:
  SplitPolicy() = default;

  static SplitPolicy tabular(int prompts, int outputs);
  static SplitPolicy tabular(int prompts, int outputs, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& phi);
  // `features` has one row per (prompt, output), row index x * outputs + y.
  static SplitPolicy log_linear(int prompts, int outputs, const Eigen::MatrixXd& features);
  static SplitPolicy log_linear(int prompts, int outputs, const Eigen::MatrixXd& features,
                                const Eigen::VectorXd& theta, const Eigen::VectorXd& phi);

  PolicyKind kind() const { return kind_; }
  int prompts() const { return prompts_; }
  int outputs() const { return outputs_; }
  int feature_dim() const { return static_cast<int>(features_.cols()); }
  const Eigen::MatrixXd& features() const { return features_; }

  const ParamVector& params() const { return params_; }
  ParamVector& params() { return params_; }
  Eigen::Index block_size() const { return params_.block_size(); }

  // theta + phi: the parameters the model actually sees.
  Eigen::VectorXd effective_params() const;

  Eigen::VectorXd logits(int x) const;
  Eigen::VectorXd prob_vector(int x) const;
  Eigen::VectorXd log_prob_vector(int x) const;
  double log_prob(int x, int y) const;
  double prob(int x, int y) const;

  // Gradient of log pi(y|x). For `theta` or `phi` the result has block_size()
  // entries; for `all` it is [g; g] (both blocks enter the logits identically).
  Eigen::VectorXd grad_log_prob(int x, int y, Block wrt) const;

  // Second derivative of log pi(y|x) with respect to one block. The matrix is
  // the same for either block and, for both kinds, does not depend on y.
  Eigen::MatrixXd second_derivative_log_prob(int x, int y) const;

  // H v without forming H, with H = second_derivative_log_prob(x, .).
  Eigen::VectorXd hessian_vector_product(int x, const Eigen::VectorXd& v) const;

  void check_prompt(int x) const;
  void check_output(int y) const;

 private:
  SplitPolicy(PolicyKind kind, int prompts, int outputs, Eigen::MatrixXd features,
              ParamVector params);
  auto prompt_features(int x) const {
    return features_.middleRows(static_cast<Eigen::Index>(x) * outputs_, outputs_);
  }

  PolicyKind kind_ = PolicyKind::tabular;
  int prompts_ = 0;
  int outputs_ = 0;
  Eigen::MatrixXd features_;
  ParamVector params_;
};

// Copy of `policy` with its phi block replaced.
SplitPolicy with_phi(const SplitPolicy& policy, const Eigen::VectorXd& phi);

// Inverse-CDF draw from pi(.|x). Consumes exactly one 64-bit word from rng.
int sample(const SplitPolicy& policy, int x, std::mt19937_64& rng);
int sample(const SplitPolicy& policy, int x, std::uint64_t seed);

// Highest-probability output not in `exclude`, lowest index on ties.
// Throws std::invalid_argument if every output is excluded.
int argmax_output(const SplitPolicy& policy, int x, std::span<const int> exclude = {});

nlohmann::json to_json(const SplitPolicy& policy);
SplitPolicy policy_from_json(const nlohmann::json& doc);

const char* to_string(PolicyKind kind);

}  // namespace prefdyn
