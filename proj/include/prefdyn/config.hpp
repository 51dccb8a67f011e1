#pragma once

#include <cstdint>
#include <optional>

namespace prefdyn {

enum class RefCheckpoint { init, post_sft };

/// Hyperparameters of the bilevel (SPO) loop and its baselines.
///
/// beta, lambda and K default to the values used for the GSM8K runs; the
/// learning rates are toy-scale (plain gradient descent on a handful of
/// parameters) and keep the 2:1 ratio between inner and outer rates.
struct SpoConfig {
  double beta = 0.5;
  double lambda = 1.0;
  double gamma = 0.1;
  double eta_theta = 0.1;
  double eta_phi = 0.1;
  double eta_phi_prime = 0.2;
  int K = 1;
  int T = 100;
  std::optional<double> clip_norm = 1.0;
  int batch_size = 4;
  std::uint64_t seed = 0;
  RefCheckpoint ref_checkpoint = RefCheckpoint::post_sft;

  // Throws std::invalid_argument naming the first bad field.
  void validate() const;
};

const char* to_string(RefCheckpoint checkpoint);

}  // namespace prefdyn
