#include "prefdyn/policy.hpp"

#include "prefdyn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace prefdyn {

OutputSpace OutputSpace::from_correct_sets(int prompts, int outputs,
                                           const std::vector<std::vector<int>>& correct) {
  if (prompts <= 0 || outputs <= 0) {
    throw ValidationError("output space needs positive prompt and output counts");
  }
  if (correct.size() != static_cast<std::size_t>(prompts)) {
    throw ValidationError("correct sets: expected " + std::to_string(prompts) +
                          " rows, got " + std::to_string(correct.size()));
  }
  OutputSpace space{prompts, outputs,
                    std::vector<std::uint8_t>(static_cast<std::size_t>(prompts) * outputs, 0)};
  for (int x = 0; x < prompts; ++x) {
    for (int y : correct[static_cast<std::size_t>(x)]) {
      if (y < 0 || y >= outputs) {
        throw ValidationError("correct output " + std::to_string(y) + " out of range for prompt " +
                              std::to_string(x));
      }
      space.labels[space.index(x, y)] = 1;
    }
  }
  space.validate();
  return space;
}

std::vector<int> OutputSpace::correct_outputs(int x) const {
  std::vector<int> out;
  for (int y = 0; y < outputs; ++y) {
    if (is_correct(x, y)) out.push_back(y);
  }
  return out;
}

void OutputSpace::validate() const {
  if (outputs < 3) {
    throw ValidationError("output space needs at least 3 outputs, got " + std::to_string(outputs));
  }
  if (prompts <= 0) throw ValidationError("output space needs at least one prompt");
  if (labels.size() != static_cast<std::size_t>(prompts) * outputs) {
    throw ValidationError("label table size does not match prompts x outputs");
  }
  for (int x = 0; x < prompts; ++x) {
    int n_correct = 0;
    for (int y = 0; y < outputs; ++y) n_correct += is_correct(x, y) ? 1 : 0;
    if (n_correct == 0 || n_correct == outputs) {
      throw ValidationError("prompt " + std::to_string(x) +
                            " needs at least one correct and one incorrect output");
    }
  }
}

ParamVector::ParamVector(const Eigen::VectorXd& theta, const Eigen::VectorXd& phi)
    : values_(theta.size() + phi.size()), block_size_(theta.size()) {
  if (theta.size() != phi.size()) {
    throw std::invalid_argument("theta and phi blocks must have the same size");
  }
  values_ << theta, phi;
}

SplitPolicy::SplitPolicy(PolicyKind kind, int prompts, int outputs, Eigen::MatrixXd features,
                         ParamVector params)
    : kind_(kind),
      prompts_(prompts),
      outputs_(outputs),
      features_(std::move(features)),
      params_(std::move(params)) {
  if (prompts_ <= 0 || outputs_ <= 0) {
    throw std::invalid_argument("policy needs positive prompt and output counts");
  }
  if (!params_.all_finite()) throw std::invalid_argument("policy parameters must be finite");
}

SplitPolicy SplitPolicy::tabular(int prompts, int outputs) {
  const Eigen::Index n = static_cast<Eigen::Index>(prompts) * outputs;
  return tabular(prompts, outputs, Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n));
}

SplitPolicy SplitPolicy::tabular(int prompts, int outputs, const Eigen::VectorXd& theta,
                                 const Eigen::VectorXd& phi) {
  const Eigen::Index n = static_cast<Eigen::Index>(prompts) * outputs;
  if (theta.size() != n || phi.size() != n) {
    throw std::invalid_argument("tabular policy expects blocks of size prompts * outputs = " +
                                std::to_string(n));
  }
  return SplitPolicy(PolicyKind::tabular, prompts, outputs, Eigen::MatrixXd(),
                     ParamVector(theta, phi));
}

SplitPolicy SplitPolicy::log_linear(int prompts, int outputs, const Eigen::MatrixXd& features) {
  const Eigen::Index d = features.cols();
  return log_linear(prompts, outputs, features, Eigen::VectorXd::Zero(d),
                    Eigen::VectorXd::Zero(d));
}

SplitPolicy SplitPolicy::log_linear(int prompts, int outputs, const Eigen::MatrixXd& features,
                                    const Eigen::VectorXd& theta, const Eigen::VectorXd& phi) {
  if (features.rows() != static_cast<Eigen::Index>(prompts) * outputs) {
    throw std::invalid_argument("feature map needs one row per (prompt, output) pair");
  }
  if (features.cols() < 1) throw std::invalid_argument("feature dimension must be positive");
  if (!features.allFinite()) throw std::invalid_argument("features must be finite");
  if (theta.size() != features.cols() || phi.size() != features.cols()) {
    throw std::invalid_argument("log-linear blocks must match the feature dimension");
  }
  return SplitPolicy(PolicyKind::log_linear, prompts, outputs, features, ParamVector(theta, phi));
}

Eigen::VectorXd SplitPolicy::effective_params() const {
  return params_.theta() + params_.phi();
}

void SplitPolicy::check_prompt(int x) const {
  if (x < 0 || x >= prompts_) {
    throw std::out_of_range("prompt index " + std::to_string(x) + " outside [0, " +
                            std::to_string(prompts_) + ")");
  }
}

void SplitPolicy::check_output(int y) const {
  if (y < 0 || y >= outputs_) {
    throw std::out_of_range("output index " + std::to_string(y) + " outside [0, " +
                            std::to_string(outputs_) + ")");
  }
}

Eigen::VectorXd SplitPolicy::logits(int x) const {
  check_prompt(x);
  if (kind_ == PolicyKind::tabular) {
    const Eigen::Index start = static_cast<Eigen::Index>(x) * outputs_;
    return params_.theta().segment(start, outputs_) + params_.phi().segment(start, outputs_);
  }
  return prompt_features(x) * effective_params();
}

Eigen::VectorXd SplitPolicy::log_prob_vector(int x) const {
  Eigen::VectorXd l = logits(x);
  const double m = l.maxCoeff();
  const double lse = m + std::log((l.array() - m).exp().sum());
  return l.array() - lse;
}

Eigen::VectorXd SplitPolicy::prob_vector(int x) const {
  Eigen::VectorXd l = logits(x);
  const double m = l.maxCoeff();
  Eigen::VectorXd e = (l.array() - m).exp();
  return e / e.sum();
}

double SplitPolicy::log_prob(int x, int y) const {
  check_output(y);
  return log_prob_vector(x)(y);
}

double SplitPolicy::prob(int x, int y) const {
  check_output(y);
  return prob_vector(x)(y);
}

Eigen::VectorXd SplitPolicy::grad_log_prob(int x, int y, Block wrt) const {
  check_output(y);
  const Eigen::VectorXd p = prob_vector(x);
  Eigen::VectorXd g;
  if (kind_ == PolicyKind::tabular) {
    g = Eigen::VectorXd::Zero(block_size());
    auto row = g.segment(static_cast<Eigen::Index>(x) * outputs_, outputs_);
    row = -p;
    row(y) += 1.0;
  } else {
    const auto f = prompt_features(x);
    g = f.row(y).transpose() - f.transpose() * p;
  }
  if (wrt != Block::all) return g;
  Eigen::VectorXd both(2 * g.size());
  both << g, g;
  return both;
}

Eigen::MatrixXd SplitPolicy::second_derivative_log_prob(int x, int y) const {
  check_output(y);
  const Eigen::VectorXd p = prob_vector(x);
  if (kind_ == PolicyKind::tabular) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(block_size(), block_size());
    const Eigen::Index start = static_cast<Eigen::Index>(x) * outputs_;
    h.block(start, start, outputs_, outputs_) = p * p.transpose();
    h.block(start, start, outputs_, outputs_).diagonal() -= p;
    return h;
  }
  // -Cov_p[f] = -(F^T diag(p) F - mu mu^T)
  const auto f = prompt_features(x);
  const Eigen::VectorXd mu = f.transpose() * p;
  Eigen::MatrixXd h = mu * mu.transpose();
  h.noalias() -= f.transpose() * p.asDiagonal() * f;
  return h;
}

Eigen::VectorXd SplitPolicy::hessian_vector_product(int x, const Eigen::VectorXd& v) const {
  if (v.size() != block_size()) {
    throw std::invalid_argument("hessian_vector_product: vector size does not match block");
  }
  const Eigen::VectorXd p = prob_vector(x);
  if (kind_ == PolicyKind::tabular) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(block_size());
    const Eigen::Index start = static_cast<Eigen::Index>(x) * outputs_;
    const auto vr = v.segment(start, outputs_);
    out.segment(start, outputs_) = p * p.dot(vr) - p.cwiseProduct(vr);
    return out;
  }
  const auto f = prompt_features(x);
  const Eigen::VectorXd fv = f * v;
  const Eigen::VectorXd mu = f.transpose() * p;
  return mu * p.dot(fv) - f.transpose() * p.cwiseProduct(fv);
}

SplitPolicy with_phi(const SplitPolicy& policy, const Eigen::VectorXd& phi) {
  if (phi.size() != policy.block_size()) {
    throw std::invalid_argument("with_phi: phi has " + std::to_string(phi.size()) +
                                " entries, policy block has " +
                                std::to_string(policy.block_size()));
  }
  SplitPolicy out = policy;
  out.params().phi() = phi;
  return out;
}

int sample(const SplitPolicy& policy, int x, std::mt19937_64& rng) {
  const Eigen::VectorXd p = policy.prob_vector(x);
  // 53 random mantissa bits -> u in [0, 1).
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  double cumulative = 0.0;
  int last_positive = 0;
  for (int y = 0; y < p.size(); ++y) {
    if (p(y) <= 0.0) continue;
    cumulative += p(y);
    last_positive = y;
    if (u < cumulative) return y;
  }
  return last_positive;
}

int sample(const SplitPolicy& policy, int x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample(policy, x, rng);
}

int argmax_output(const SplitPolicy& policy, int x, std::span<const int> exclude) {
  const Eigen::VectorXd p = policy.prob_vector(x);
  int best = -1;
  for (int y = 0; y < p.size(); ++y) {
    if (std::find(exclude.begin(), exclude.end(), y) != exclude.end()) continue;
    if (best < 0 || p(y) > p(best)) best = y;
  }
  if (best < 0) throw std::invalid_argument("argmax_output: every output is excluded");
  return best;
}

const char* to_string(PolicyKind kind) {
  return kind == PolicyKind::tabular ? "tabular" : "log_linear";
}

namespace {

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd to_eigen(const nlohmann::json& arr, const char* field) {
  if (!arr.is_array()) throw ValidationError(std::string("policy json: '") + field + "' must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  return v;
}

}  // namespace

nlohmann::json to_json(const SplitPolicy& policy) {
  nlohmann::json doc;
  doc["kind"] = to_string(policy.kind());
  doc["prompts"] = policy.prompts();
  doc["outputs"] = policy.outputs();
  if (policy.kind() == PolicyKind::log_linear) doc["feature_dim"] = policy.feature_dim();
  doc["theta"] = to_std(policy.params().theta());
  doc["phi"] = to_std(policy.params().phi());
  if (policy.kind() == PolicyKind::log_linear) {
    nlohmann::json rows = nlohmann::json::array();
    const auto& f = policy.features();
    for (Eigen::Index r = 0; r < f.rows(); ++r) rows.push_back(to_std(f.row(r).transpose()));
    doc["features"] = std::move(rows);
  }
  return doc;
}

SplitPolicy policy_from_json(const nlohmann::json& doc) {
  try {
    const std::string kind = doc.at("kind").get<std::string>();
    const int prompts = doc.at("prompts").get<int>();
    const int outputs = doc.at("outputs").get<int>();
    const Eigen::VectorXd theta = to_eigen(doc.at("theta"), "theta");
    const Eigen::VectorXd phi = to_eigen(doc.at("phi"), "phi");
    if (kind == "tabular") return SplitPolicy::tabular(prompts, outputs, theta, phi);
    if (kind != "log_linear") throw ValidationError("policy json: unknown kind '" + kind + "'");
    const auto& rows = doc.at("features");
    const int d = doc.at("feature_dim").get<int>();
    Eigen::MatrixXd f(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != static_cast<std::size_t>(d)) {
        throw ValidationError("policy json: feature row " + std::to_string(r) + " has wrong width");
      }
      for (int c = 0; c < d; ++c) f(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)].get<double>();
    }
    return SplitPolicy::log_linear(prompts, outputs, f, theta, phi);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("policy json: ") + e.what());
  }
}

}  // namespace prefdyn
