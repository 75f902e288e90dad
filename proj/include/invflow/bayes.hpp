#pragma once

#include <string>
#include <vector>

#include "invflow/flow.hpp"
#include "invflow/forward.hpp"
#include "invflow/samples.hpp"

namespace invflow {

/// Coordinate-wise uniform prior on [lo, hi] (closed box) plus the weight of
/// the out-of-support penalty used by the transport-map loss.
struct PriorBox {
  Vector lo, hi;
  double lambda_bd = 10.0;

  static PriorBox grating(double lambda_bd = 10.0);

  Eigen::Index dim() const { return lo.size(); }
  bool contains(const Vector& x) const;
  void validate() const;
};

/// Likelihood y ~ N(f(x), b^2 diag(w^2)).
struct NoiseModel {
  double b = 0.0;
  Vector w;

  void validate() const;
};

/// x = mid + half * z maps the standardized cube [-1, 1]^d onto the box.
struct BoxCoordinates {
  Vector mid, half;

  BoxCoordinates() = default;
  explicit BoxCoordinates(const PriorBox& box);

  Matrix to_physical(const Matrix& z) const;
  Matrix to_standard(const Matrix& x) const;
};

/// Logarithm of the Gaussian sampling density, normalization included.
double log_likelihood(const NoiseModel& noise, const Vector& forward_y, const Vector& y);

/// lambda * sum_i relu(x_i - hi_i) + relu(lo_i - x_i). With smooth_beta > 0
/// ReLU is replaced by softplus(beta u) / beta.
double boundary_loss(const PriorBox& prior, const Vector& x, double smooth_beta = 0.0);

/// 0 inside the closed box, -infinity outside (normalization dropped).
double log_prior(const PriorBox& prior, const Vector& x);

struct InnLoss {
  double loss = 0.0;      // batch mean of data + boundary - log_det
  double data = 0.0;      // batch means of the individual terms
  double boundary = 0.0;
  double log_det = 0.0;
  Vector per_sample;      // loss of each reference draw
  FlowGradients grads;
};

struct LossOptions {
  double boundary_smooth_beta = 0.0;  // 0 keeps the exact ReLU
};

/// Empirical transport-map loss on a batch of reference draws (d x B).
/// The flow acts in standardized coordinates of `prior`; the boundary penalty
/// uses the cube [-1, 1]^d with weight prior.lambda_bd. Constant likelihood
/// normalization terms are omitted.
InnLoss inn_loss_batch(const FlowModel& flow, const ForwardModel& forward, const Measurement& measurement,
                       const NoiseModel& noise, const PriorBox& prior, const Matrix& xi_batch,
                       const LossOptions& options = {});

struct TrainConfig {
  int epochs = 80;
  int updates_per_epoch = 40;
  int batch_size = 200;
  double lr = 1e-3;
  int lr_decay_every = 20;
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 0;
  double grad_clip = 100.0;  // global L2 norm; <= 0 disables
  double boundary_smooth_beta = 0.0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& doc);

struct TraceEntry {
  long update = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainedInn {
  FlowModel flow;
  BoxCoordinates coords;
  std::vector<TraceEntry> trace;
  bool diverged = false;
  std::string message;
  std::string config_hash;
  std::vector<std::string> names;
};

/// Runs epochs * updates_per_epoch Adam steps on fresh standard-normal
/// batches. On a non-finite loss the flow is rolled back to the parameters of
/// the last finite evaluation and training stops with diverged = true.
TrainedInn train_inn(FlowModel flow, const ForwardModel& forward, const Measurement& measurement,
                     const NoiseModel& noise, const PriorBox& prior, const TrainConfig& cfg);

/// Pushes `count` standard-normal draws through the flow and back to
/// physical coordinates.
SampleSet sample_posterior_inn(const TrainedInn& trained, Eigen::Index count, std::uint64_t seed);

void write_trace_csv(const std::string& path, const std::vector<TraceEntry>& trace);

/// Trailing moving average; window is clipped to the trace length.
std::vector<double> smoothed_losses(const std::vector<TraceEntry>& trace, std::size_t window);

}  // namespace invflow
