#pragma once

#include "prefdyn/policy.hpp"
#include "prefdyn/records.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>

namespace prefdyn {

// z is clamped to this magnitude before entering sigma / softplus.
inline constexpr double kMarginClamp = 50.0;

double sigmoid(double z);
// -log sigma(z) = log(1 + exp(-z)), evaluated without overflow.
double neg_log_sigmoid(double z);

struct ObjectiveWeights {
  double beta = 0.5;
  double lambda = 1.0;
  double gamma = 0.0;
};

/// Values of the penalized objective on one batch.
///
/// `z` is the batch-mean margin and `sigma_z` = sigmoid(z); `sigma_z_mean` is
/// the batch mean of sigmoid(z_i) (equal to sigma_z for a single triple).
struct LossBreakdown {
  double dpo = 0.0;
  double sft = 0.0;
  double sft_star_estimate = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double z = 0.0;
  double sigma_z = 0.5;
  double sigma_z_mean = 0.5;
};

double margin_z(const SplitPolicy& policy, const SplitPolicy& ref, const PreferenceTriple& triple,
                double beta);

double dpo_loss(const SplitPolicy& policy, const SplitPolicy& ref,
                std::span<const PreferenceTriple> triples, double beta);
double sft_loss(const SplitPolicy& policy, std::span<const SftPair> pairs);

// Mean over the batch of max(0, |grad_theta log pi(y_l)| - |grad_theta log pi(y_w)|).
double reg_term(const SplitPolicy& policy, std::span<const PreferenceTriple> triples);

// Gradient of dpo_loss on its own; the reference every SPO path must reduce to
// when lambda = gamma = 0.
Eigen::VectorXd dpo_gradient(const SplitPolicy& policy, const SplitPolicy& ref,
                             std::span<const PreferenceTriple> triples, double beta, Block wrt);
Eigen::VectorXd sft_gradient(const SplitPolicy& policy, std::span<const SftPair> pairs, Block wrt);

// (Sub)gradient of the hinge for one triple. Zero when the hinge is inactive
// (delta <= 0); otherwise H g_l / |g_l| - H g_w / |g_w| with the exact second
// derivative of log pi. Under the additive split the theta and phi results
// coincide. Throws DegenerateGradientError when the hinge is active and a
// gradient norm is below 1e-12.
Eigen::VectorXd reg_gradient(const SplitPolicy& policy, const PreferenceTriple& triple, Block wrt);
Eigen::VectorXd reg_gradient(const SplitPolicy& policy, std::span<const PreferenceTriple> triples,
                             Block wrt);

/// The three contributions to one block's gradient, before weighting:
/// margin  = batch-mean DPO gradient                       (terms a / c)
/// sft     = SFT gradient, minus the value-function part    (terms b / d)
/// reg     = hinge subgradient                              (term e)
struct GradientTerms {
  Eigen::VectorXd margin;
  Eigen::VectorXd sft;
  Eigen::VectorXd reg;
  Eigen::VectorXd total;
};

// Gradient of the penalized objective w.r.t. theta. `inner_solution` is the
// frozen K-step lower-level solution phi'^(K); L*_sft is differentiated as
// L_sft(theta, phi'^(K)) with phi' held fixed. Terms with zero weight are
// skipped entirely, so lambda = gamma = 0 reproduces dpo_gradient bit for bit.
GradientTerms grad_theta_terms(const SplitPolicy& policy, const SplitPolicy& ref,
                               const Eigen::VectorXd& inner_solution,
                               std::span<const PreferenceTriple> triples,
                               std::span<const SftPair> pairs, const ObjectiveWeights& weights);
Eigen::VectorXd grad_theta_total(const SplitPolicy& policy, const SplitPolicy& ref,
                                 const Eigen::VectorXd& inner_solution,
                                 std::span<const PreferenceTriple> triples,
                                 std::span<const SftPair> pairs, const ObjectiveWeights& weights);

// Gradient w.r.t. phi. L*_sft does not depend on phi, so the SFT term is the
// plain SFT gradient (it raises log pi(y_w) under descent).
GradientTerms grad_phi_terms(const SplitPolicy& policy, const SplitPolicy& ref,
                             std::span<const PreferenceTriple> triples,
                             std::span<const SftPair> pairs, const ObjectiveWeights& weights);
Eigen::VectorXd grad_phi_total(const SplitPolicy& policy, const SplitPolicy& ref,
                               std::span<const PreferenceTriple> triples,
                               std::span<const SftPair> pairs, const ObjectiveWeights& weights);

// Evaluates every term of the penalized objective. Without an inner solution
// the value-function estimate equals the current SFT loss (zero residual).
LossBreakdown evaluate_objective(const SplitPolicy& policy, const SplitPolicy& ref,
                                 const std::optional<Eigen::VectorXd>& inner_solution,
                                 std::span<const PreferenceTriple> triples,
                                 std::span<const SftPair> pairs, const ObjectiveWeights& weights);

}  // namespace prefdyn
