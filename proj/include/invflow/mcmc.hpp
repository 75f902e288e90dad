#pragma once

// Affine-invariant ensemble sampler (stretch move) with a red-black split of
// the walkers: each half is updated against the other half held fixed.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "invflow/bayes.hpp"
#include "invflow/samples.hpp"

namespace invflow {

struct TargetDensity {
  int dim = 0;
  std::function<double(const Vector&)> log_density;  // -inf outside the support
  bool augmented_b = false;
  double b_lo = 0.0, b_hi = 0.0;  // only meaningful when augmented_b
};

/// Fixed-noise posterior: log_likelihood + log_prior.
TargetDensity make_posterior_target(const ForwardModel& forward, const Measurement& measurement,
                                    const NoiseModel& noise, const PriorBox& prior);

/// Joint posterior over (x, b) with b uniform on [b_lo, b_hi] and w = measurement.w.
TargetDensity make_augmented_target(const ForwardModel& forward, const Measurement& measurement,
                                    const PriorBox& prior, double b_lo, double b_hi);

/// log p(y | x, b) + log p(x) + log p(b). The -n log b term of the
/// likelihood is retained since b varies.
double augmented_log_density(const Vector& x_b, const ForwardModel& forward, const Measurement& measurement,
                             const PriorBox& prior, double b_lo, double b_hi);

struct Ensemble {
  Matrix walkers;    // D x K, one walker per column
  Vector log_probs;  // K
  long step_count = 0;
  long proposed = 0;
  long accepted = 0;
  Rng rng;

  Eigen::Index num_walkers() const { return walkers.cols(); }
  Eigen::Index dim() const { return walkers.rows(); }
  double acceptance_rate() const { return proposed ? static_cast<double>(accepted) / proposed : 0.0; }
};

/// Initial ensemble; rejects odd K, K < 2D + 2 or walkers with -inf log density.
Ensemble make_ensemble(const Matrix& walkers, const TargetDensity& target, std::uint64_t seed);

/// Stretch factor z with density proportional to 1/sqrt(z) on [1/a, a], from a uniform u.
double stretch_factor(double a, double u);

/// Proposal X_k + (z - 1)(X_k - X_j); equals X_k exactly at z = 1.
Vector stretch_proposal(const Vector& x_k, const Vector& x_j, double z);

/// min(1, z^(D-1) exp(logp_new - logp_old)).
double stretch_acceptance(double z, int dim, double logp_new, double logp_old);

/// One full sweep (both halves).
void stretch_move(Ensemble& ensemble, const TargetDensity& target, double a);

struct SamplerConfig {
  int walkers = 32;
  int steps = 10000;
  int burn_in = 2000;
  int thin = 1;
  double a = 2.0;
  std::uint64_t seed = 0;
};

struct SamplerRun {
  SampleSet samples;            // flattened: row = kept_step * K + walker
  double acceptance_rate = 0.0;
  int walkers = 0;
  long kept_steps = 0;
};

/// Walkers start uniform in the box (and b uniform in its range when the
/// target is augmented). Walkers initialised outside the support are redrawn
/// a bounded number of times before giving up.
SamplerRun run_sampler(const TargetDensity& target, const PriorBox& box, const SamplerConfig& cfg);

/// Same as run_sampler but from caller-supplied walkers (D x K).
SamplerRun run_sampler_from(const TargetDensity& target, const Matrix& initial, const SamplerConfig& cfg);

struct DiagnosticsReport {
  std::optional<double> acceptance_rate;
  Vector iact;  // per coordinate
  Vector ess;
  Vector mean;
  Vector stddev;
  std::vector<int> window;  // Sokal window per coordinate
  bool degenerate = false;  // some coordinate has zero variance
  bool short_chain = false; // chain shorter than 10 windows
  std::vector<std::string> flags;
};

/// chains[k] is (N x D) for walker k. The autocorrelation function is
/// averaged over walkers and summed up to the smallest M with M >= c * tau(M).
DiagnosticsReport diagnostics(const std::vector<Matrix>& chains, std::optional<double> acceptance_rate = {},
                              double window_c = 5.0);

/// Splits a flattened SamplerRun back into per-walker chains.
std::vector<Matrix> walker_chains(const SampleSet& flat, int walkers);

nlohmann::json to_json(const DiagnosticsReport& report);

}  // namespace invflow
