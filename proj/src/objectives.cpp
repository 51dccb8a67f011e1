#include "prefdyn/objectives.hpp"

#include "prefdyn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace prefdyn {

namespace {

double clamp_margin(double z) { return std::clamp(z, -kMarginClamp, kMarginClamp); }

Eigen::Index block_length(const SplitPolicy& policy, Block wrt) {
  return wrt == Block::all ? 2 * policy.block_size() : policy.block_size();
}

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw std::invalid_argument(std::string(what) + ": empty batch");
}

void require_same_space(const SplitPolicy& a, const SplitPolicy& b) {
  if (a.prompts() != b.prompts() || a.outputs() != b.outputs()) {
    throw std::invalid_argument("policy and reference policy have different output spaces");
  }
}

Eigen::VectorXd stack(const Eigen::VectorXd& g) {
  Eigen::VectorXd both(2 * g.size());
  both << g, g;
  return both;
}

}  // namespace

double sigmoid(double z) {
  z = clamp_margin(z);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double neg_log_sigmoid(double z) {
  z = clamp_margin(z);
  if (z >= 0.0) return std::log1p(std::exp(-z));
  return -z + std::log1p(std::exp(z));
}

double margin_z(const SplitPolicy& policy, const SplitPolicy& ref, const PreferenceTriple& t,
                double beta) {
  require_same_space(policy, ref);
  const Eigen::VectorXd lp = policy.log_prob_vector(t.x);
  const Eigen::VectorXd lr = ref.log_prob_vector(t.x);
  policy.check_output(t.y_w);
  policy.check_output(t.y_l);
  return beta * (lp(t.y_w) - lr(t.y_w) - lp(t.y_l) + lr(t.y_l));
}

double dpo_loss(const SplitPolicy& policy, const SplitPolicy& ref,
                std::span<const PreferenceTriple> triples, double beta) {
  require_nonempty(triples.size(), "dpo_loss");
  double sum = 0.0;
  for (const auto& t : triples) sum += neg_log_sigmoid(margin_z(policy, ref, t, beta));
  return sum / static_cast<double>(triples.size());
}

double sft_loss(const SplitPolicy& policy, std::span<const SftPair> pairs) {
  require_nonempty(pairs.size(), "sft_loss");
  double sum = 0.0;
  for (const auto& p : pairs) sum -= policy.log_prob(p.x, p.y_w);
  return sum / static_cast<double>(pairs.size());
}

double reg_term(const SplitPolicy& policy, std::span<const PreferenceTriple> triples) {
  require_nonempty(triples.size(), "reg_term");
  double sum = 0.0;
  for (const auto& t : triples) {
    const double nw = policy.grad_log_prob(t.x, t.y_w, Block::theta).norm();
    const double nl = policy.grad_log_prob(t.x, t.y_l, Block::theta).norm();
    sum += std::max(0.0, nl - nw);
  }
  return sum / static_cast<double>(triples.size());
}

Eigen::VectorXd dpo_gradient(const SplitPolicy& policy, const SplitPolicy& ref,
                             std::span<const PreferenceTriple> triples, double beta, Block wrt) {
  require_nonempty(triples.size(), "dpo_gradient");
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(block_length(policy, wrt));
  for (const auto& t : triples) {
    const double coeff = -beta * (1.0 - sigmoid(margin_z(policy, ref, t, beta)));
    grad += coeff * (policy.grad_log_prob(t.x, t.y_w, wrt) - policy.grad_log_prob(t.x, t.y_l, wrt));
  }
  return grad / static_cast<double>(triples.size());
}

Eigen::VectorXd sft_gradient(const SplitPolicy& policy, std::span<const SftPair> pairs, Block wrt) {
  require_nonempty(pairs.size(), "sft_gradient");
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(block_length(policy, wrt));
  for (const auto& p : pairs) grad -= policy.grad_log_prob(p.x, p.y_w, wrt);
  return grad / static_cast<double>(pairs.size());
}

Eigen::VectorXd reg_gradient(const SplitPolicy& policy, const PreferenceTriple& t, Block wrt) {
  const Eigen::VectorXd gw = policy.grad_log_prob(t.x, t.y_w, Block::theta);
  const Eigen::VectorXd gl = policy.grad_log_prob(t.x, t.y_l, Block::theta);
  const double nw = gw.norm();
  const double nl = gl.norm();
  if (nl - nw <= 0.0) return Eigen::VectorXd::Zero(block_length(policy, wrt));
  if (nw < 1e-12 || nl < 1e-12) {
    throw DegenerateGradientError(
        "reg_gradient: hinge active but |grad log pi| < 1e-12 on prompt " + std::to_string(t.x) +
        " (near-deterministic policy)");
  }
  // d|g_y|/d(block) = H^T g_y / |g_y|, H symmetric and shared by both blocks.
  const Eigen::VectorXd g = policy.hessian_vector_product(t.x, gl) / nl -
                            policy.hessian_vector_product(t.x, gw) / nw;
  return wrt == Block::all ? stack(g) : g;
}

Eigen::VectorXd reg_gradient(const SplitPolicy& policy, std::span<const PreferenceTriple> triples,
                             Block wrt) {
  require_nonempty(triples.size(), "reg_gradient");
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(block_length(policy, wrt));
  for (const auto& t : triples) grad += reg_gradient(policy, t, wrt);
  return grad / static_cast<double>(triples.size());
}

GradientTerms grad_theta_terms(const SplitPolicy& policy, const SplitPolicy& ref,
                               const Eigen::VectorXd& inner_solution,
                               std::span<const PreferenceTriple> triples,
                               std::span<const SftPair> pairs, const ObjectiveWeights& w) {
  if (inner_solution.size() != policy.block_size()) {
    throw std::invalid_argument("grad_theta_total: inner solution has " +
                                std::to_string(inner_solution.size()) + " entries, expected " +
                                std::to_string(policy.block_size()));
  }
  GradientTerms terms;
  terms.margin = dpo_gradient(policy, ref, triples, w.beta, Block::theta);
  terms.total = terms.margin;
  if (w.lambda != 0.0) {
    const SplitPolicy lower = with_phi(policy, inner_solution);
    terms.sft = sft_gradient(policy, pairs, Block::theta) - sft_gradient(lower, pairs, Block::theta);
    terms.total += w.lambda * terms.sft;
  } else {
    terms.sft = Eigen::VectorXd::Zero(policy.block_size());
  }
  if (w.gamma != 0.0) {
    terms.reg = reg_gradient(policy, triples, Block::theta);
    terms.total += w.gamma * terms.reg;
  } else {
    terms.reg = Eigen::VectorXd::Zero(policy.block_size());
  }
  return terms;
}

Eigen::VectorXd grad_theta_total(const SplitPolicy& policy, const SplitPolicy& ref,
                                 const Eigen::VectorXd& inner_solution,
                                 std::span<const PreferenceTriple> triples,
                                 std::span<const SftPair> pairs, const ObjectiveWeights& weights) {
  return grad_theta_terms(policy, ref, inner_solution, triples, pairs, weights).total;
}

GradientTerms grad_phi_terms(const SplitPolicy& policy, const SplitPolicy& ref,
                             std::span<const PreferenceTriple> triples,
                             std::span<const SftPair> pairs, const ObjectiveWeights& w) {
  GradientTerms terms;
  terms.margin = dpo_gradient(policy, ref, triples, w.beta, Block::phi);
  terms.total = terms.margin;
  if (w.lambda != 0.0) {
    terms.sft = sft_gradient(policy, pairs, Block::phi);
    terms.total += w.lambda * terms.sft;
  } else {
    terms.sft = Eigen::VectorXd::Zero(policy.block_size());
  }
  if (w.gamma != 0.0) {
    terms.reg = reg_gradient(policy, triples, Block::phi);
    terms.total += w.gamma * terms.reg;
  } else {
    terms.reg = Eigen::VectorXd::Zero(policy.block_size());
  }
  return terms;
}

Eigen::VectorXd grad_phi_total(const SplitPolicy& policy, const SplitPolicy& ref,
                               std::span<const PreferenceTriple> triples,
                               std::span<const SftPair> pairs, const ObjectiveWeights& weights) {
  return grad_phi_terms(policy, ref, triples, pairs, weights).total;
}

LossBreakdown evaluate_objective(const SplitPolicy& policy, const SplitPolicy& ref,
                                 const std::optional<Eigen::VectorXd>& inner_solution,
                                 std::span<const PreferenceTriple> triples,
                                 std::span<const SftPair> pairs, const ObjectiveWeights& w) {
  LossBreakdown out;
  if (!triples.empty()) {
    double z_sum = 0.0;
    double s_sum = 0.0;
    double loss_sum = 0.0;
    for (const auto& t : triples) {
      const double z = margin_z(policy, ref, t, w.beta);
      z_sum += z;
      s_sum += sigmoid(z);
      loss_sum += neg_log_sigmoid(z);
    }
    const auto n = static_cast<double>(triples.size());
    out.dpo = loss_sum / n;
    out.z = z_sum / n;
    out.sigma_z = sigmoid(out.z);
    out.sigma_z_mean = s_sum / n;
    out.reg = reg_term(policy, triples);
  }
  if (!pairs.empty()) {
    out.sft = sft_loss(policy, pairs);
    out.sft_star_estimate =
        inner_solution ? sft_loss(with_phi(policy, *inner_solution), pairs) : out.sft;
  }
  out.total = out.dpo + w.lambda * (out.sft - out.sft_star_estimate) + w.gamma * out.reg;
  return out;
}

}  // namespace prefdyn
