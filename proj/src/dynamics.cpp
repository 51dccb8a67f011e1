#include "prefdyn/dynamics.hpp"

#include "prefdyn/objectives.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace prefdyn {

GradientGeometry gradient_geometry(const SplitPolicy& policy, const SplitPolicy& ref,
                                   const PreferenceTriple& t, double beta) {
  GradientGeometry g;
  g.z = margin_z(policy, ref, t, beta);
  g.sigma_z = sigmoid(g.z);
  const Eigen::VectorXd p = policy.prob_vector(t.x);
  g.pi_w = p(t.y_w);
  g.pi_l = p(t.y_l);
  const Eigen::VectorXd gw = policy.grad_log_prob(t.x, t.y_w, Block::all);
  const Eigen::VectorXd gl = policy.grad_log_prob(t.x, t.y_l, Block::all);
  g.norm_gw_sq = gw.squaredNorm();
  g.norm_gl_sq = gl.squaredNorm();
  g.dot_wl = gw.dot(gl);
  g.weighted_gap_sq = (std::sqrt(g.pi_w) * gw - std::sqrt(g.pi_l) * gl).squaredNorm();
  return g;
}

DeltaPrediction predict_deltas(const GradientGeometry& g, double eta, double beta) {
  const double scale = eta * beta * (1.0 - g.sigma_z);
  return {scale * g.pi_w * g.term_w(), scale * g.pi_l * g.term_l()};
}

DeltaPrediction predict_deltas(const SplitPolicy& policy, const SplitPolicy& ref,
                               const PreferenceTriple& triple, double eta, double beta) {
  return predict_deltas(gradient_geometry(policy, ref, triple, beta), eta, beta);
}

void apply_single_dpo_step(SplitPolicy& policy, const SplitPolicy& ref,
                           const PreferenceTriple& triple, double eta, double beta) {
  const std::array<PreferenceTriple, 1> batch{triple};
  const Eigen::VectorXd grad = dpo_gradient(policy, ref, batch, beta, Block::all);
  policy.params().values() -= eta * grad;
}

Eigen::VectorXd measure_deltas(const SplitPolicy& policy, const SplitPolicy& ref,
                               const PreferenceTriple& triple, double eta, double beta) {
  SplitPolicy after = policy;
  apply_single_dpo_step(after, ref, triple, eta, beta);
  return after.prob_vector(triple.x) - policy.prob_vector(triple.x);
}

Corollary1Bounds corollary1_bounds(const GradientGeometry& g, double eta, double beta) {
  const double scale = eta * beta * (1.0 - g.sigma_z);
  const double nw = std::sqrt(g.norm_gw_sq);
  const double nl = std::sqrt(g.norm_gl_sq);
  return {scale * g.pi_w * nw * (nw - nl), scale * g.pi_l * nl * (nw - nl)};
}

double corollary2_lower_bound(const GradientGeometry& g, double eta, double beta) {
  return eta * beta * (1.0 - g.sigma_z) * g.weighted_gap_sq;
}

double corollary2_lower_bound(const SplitPolicy& policy, const SplitPolicy& ref,
                              const PreferenceTriple& triple, double eta, double beta) {
  return corollary2_lower_bound(gradient_geometry(policy, ref, triple, beta), eta, beta);
}

const char* to_string(CaseLabel label) {
  switch (label) {
    case CaseLabel::case1: return "case1";
    case CaseLabel::case2: return "case2";
    case CaseLabel::healthy: break;
  }
  return "healthy";
}

CaseLabel classify(const GradientGeometry& g) {
  if (g.term_w() < 0.0) return CaseLabel::case1;
  if (g.term_l() < 0.0) return CaseLabel::case2;
  return CaseLabel::healthy;
}

StepDynamicsReport mass_shift_audit(const SplitPolicy& policy, const SplitPolicy& ref,
                                    const PreferenceTriple& t, double eta, double beta,
                                    std::span<const int> exclude) {
  if (!(eta >= 0.0) || !(beta > 0.0)) {
    throw std::invalid_argument("mass_shift_audit: need eta >= 0 and beta > 0");
  }
  const GradientGeometry g = gradient_geometry(policy, ref, t, beta);
  const DeltaPrediction pred = predict_deltas(g, eta, beta);
  const Corollary1Bounds c1 = corollary1_bounds(g, eta, beta);

  StepDynamicsReport r;
  r.z = g.z;
  r.sigma_z = g.sigma_z;
  r.norm_gw_sq = g.norm_gw_sq;
  r.norm_gl_sq = g.norm_gl_sq;
  r.dot_wl = g.dot_wl;
  r.term_w = g.term_w();
  r.term_l = g.term_l();
  r.delta_w_pred = pred.delta_w;
  r.delta_l_pred = pred.delta_l;
  r.delta_all_meas = measure_deltas(policy, ref, t, eta, beta);
  r.delta_w_meas = r.delta_all_meas(t.y_w);
  r.delta_l_meas = r.delta_all_meas(t.y_l);
  r.c1_lower_w = c1.lower_w;
  r.c1_upper_l = c1.upper_l;
  r.c2_lower = corollary2_lower_bound(g, eta, beta);
  r.ystar = argmax_output(policy, t.x, exclude);
  r.pi_ystar = policy.prob(t.x, r.ystar);
  r.delta_ystar_meas = r.delta_all_meas(r.ystar);
  r.case_label = classify(g);
  return r;
}

std::vector<ProbeStep> probe_trajectory(SplitPolicy policy, const SplitPolicy& ref,
                                        std::span<const PreferenceTriple> triples,
                                        const ProbeSettings& settings, int steps) {
  if (steps < 1) throw std::invalid_argument("probe_trajectory: steps must be >= 1");
  if (triples.empty()) throw std::invalid_argument("probe_trajectory: empty dataset");
  std::vector<ProbeStep> rows;
  rows.reserve(static_cast<std::size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    const PreferenceTriple& t = triples[static_cast<std::size_t>(step) % triples.size()];
    const std::array<int, 2> exclude{t.y_w, t.y_l};
    ProbeStep row;
    row.step = step;
    row.log_pi_w = policy.log_prob(t.x, t.y_w);
    row.log_pi_l = policy.log_prob(t.x, t.y_l);
    row.report = mass_shift_audit(policy, ref, t, settings.eta, settings.beta, exclude);
    if (row.report.delta_w_meas > 0.0 && row.report.delta_l_meas > 0.0) {
      row.log_delta_ratio = std::log(row.report.delta_w_meas) - std::log(row.report.delta_l_meas);
    }
    rows.push_back(std::move(row));
    apply_single_dpo_step(policy, ref, t, settings.eta, settings.beta);
  }
  return rows;
}

}  // namespace prefdyn
