#pragma once

#include "prefdyn/policy.hpp"
#include "prefdyn/records.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace prefdyn {

/// Gradient geometry of one triple at the current parameters, over the full
/// parameter vector [theta; phi]: everything the first-order probability
/// predictions need.
struct GradientGeometry {
  double z = 0.0;
  double sigma_z = 0.5;
  double pi_w = 0.0;
  double pi_l = 0.0;
  double norm_gw_sq = 0.0;
  double norm_gl_sq = 0.0;
  double dot_wl = 0.0;
  // |sqrt(pi_w) g_w - sqrt(pi_l) g_l|^2, computed from the vectors.
  double weighted_gap_sq = 0.0;

  // |g_w|^2 - g_w.g_l and g_l.g_w - |g_l|^2.
  double term_w() const { return norm_gw_sq - dot_wl; }
  double term_l() const { return dot_wl - norm_gl_sq; }
};

GradientGeometry gradient_geometry(const SplitPolicy& policy, const SplitPolicy& ref,
                                   const PreferenceTriple& triple, double beta);

struct DeltaPrediction {
  double delta_w = 0.0;
  double delta_l = 0.0;
};

// First-order change of pi(y_w|x) and pi(y_l|x) after one DPO step of size eta.
DeltaPrediction predict_deltas(const GradientGeometry& geometry, double eta, double beta);
DeltaPrediction predict_deltas(const SplitPolicy& policy, const SplitPolicy& ref,
                               const PreferenceTriple& triple, double eta, double beta);

// Applies one unclipped DPO step on this triple alone to a copy of `policy`
// (both blocks, learning rate eta) and returns pi_after(.|x) - pi_before(.|x).
Eigen::VectorXd measure_deltas(const SplitPolicy& policy, const SplitPolicy& ref,
                               const PreferenceTriple& triple, double eta, double beta);

// In-place version of the step measure_deltas takes.
void apply_single_dpo_step(SplitPolicy& policy, const SplitPolicy& ref,
                           const PreferenceTriple& triple, double eta, double beta);

struct Corollary1Bounds {
  double lower_w = 0.0;  // delta_w >= lower_w
  double upper_l = 0.0;  // delta_l <= upper_l
};

Corollary1Bounds corollary1_bounds(const GradientGeometry& geometry, double eta, double beta);

// eta * beta * (1 - sigma(z)) * |sqrt(pi_w) g_w - sqrt(pi_l) g_l|^2.
double corollary2_lower_bound(const GradientGeometry& geometry, double eta, double beta);
double corollary2_lower_bound(const SplitPolicy& policy, const SplitPolicy& ref,
                              const PreferenceTriple& triple, double eta, double beta);

enum class CaseLabel { healthy, case1, case2 };
const char* to_string(CaseLabel label);

// case1: term_w < 0 (preferred probability falls); case2: term_l < 0;
// healthy otherwise. case1 takes precedence when both hold.
CaseLabel classify(const GradientGeometry& geometry);

struct StepDynamicsReport {
  double z = 0.0;
  double sigma_z = 0.5;
  double norm_gw_sq = 0.0;
  double norm_gl_sq = 0.0;
  double dot_wl = 0.0;
  double term_w = 0.0;
  double term_l = 0.0;
  double delta_w_pred = 0.0;
  double delta_l_pred = 0.0;
  double delta_w_meas = 0.0;
  double delta_l_meas = 0.0;
  Eigen::VectorXd delta_all_meas;
  double c1_lower_w = 0.0;
  double c1_upper_l = 0.0;
  double c2_lower = 0.0;
  int ystar = -1;
  double pi_ystar = 0.0;
  double delta_ystar_meas = 0.0;
  CaseLabel case_label = CaseLabel::healthy;
};

// Full single-step audit: predictions, bounds, and the measured change of every
// output. y* is the most probable output outside `exclude`.
StepDynamicsReport mass_shift_audit(const SplitPolicy& policy, const SplitPolicy& ref,
                                    const PreferenceTriple& triple, double eta, double beta,
                                    std::span<const int> exclude);

struct ProbeSettings {
  double beta = 0.5;
  double eta = 0.1;
};

struct ProbeStep {
  int step = 0;
  double log_pi_w = 0.0;
  double log_pi_l = 0.0;
  // log(delta_w_meas) - log(delta_l_meas); empty unless both are positive.
  std::optional<double> log_delta_ratio;
  StepDynamicsReport report;
};

// Vanilla DPO with batch size one: step t uses triples[t % n]. Each row audits
// the step about to be taken, so the measured deltas are the real change of
// that step. y* excludes the triple's y_w and y_l.
std::vector<ProbeStep> probe_trajectory(SplitPolicy policy, const SplitPolicy& ref,
                                        std::span<const PreferenceTriple> triples,
                                        const ProbeSettings& settings, int steps);

}  // namespace prefdyn
