#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "invflow/nnet.hpp"

namespace invflow {

/// Grating parameter domains (h, cd, swa, t_t, t_b, t_g, t_s); nm except swa in degrees.
Vector grating_box_lo();
Vector grating_box_hi();
std::vector<std::string> grating_parameter_names();

/// 178 incidence angles in degrees, uniform on [0.8, 14.75].
Vector gixrf_angles();

enum class ForwardKind { linear, synthetic_curve, surrogate_mlp };

std::string to_string(ForwardKind kind);

struct LinearForward {
  Matrix A;
  Vector c;
};

/// Smooth positive 7-parameter curve over an angle grid. Each coordinate is
/// first rescaled affinely from [lo, hi] to u in [0.2, 1]:
///
///   f_i = u1 * sigma(3 (a_i - (1 + 3 u2)))
///       + u3 * exp(-(a_i - (5 + 6 u4))^2 / (2 s^2)),   s = 0.5 exp(1.5 u5)
///       + u6 + u7 * a_i / 15 + 0.05
///
/// with a_i in degrees. The threshold sits in [1.6, 4] deg, the bump centre
/// in [6.2, 11] deg and its width s in [0.67, 2.24] deg. s is monotone in u5 so
/// the curve has no mirrored parameter mode outside the box.
struct CurveForward {
  Vector angles;
  Vector box_lo, box_hi;
};

/// One-hidden-layer ReLU net applied to box-standardized inputs
/// 2 (x - lo) / (hi - lo) - 1; outputs are raw.
struct SurrogateForward {
  MlpParams net;
  Vector box_lo, box_hi;
};

class ForwardModel {
 public:
  static ForwardModel linear(Matrix A, Vector c);
  static ForwardModel synthetic_curve();
  static ForwardModel synthetic_curve(Vector box_lo, Vector box_hi, Vector angles);
  static ForwardModel surrogate(MlpParams net, Vector box_lo, Vector box_hi);

  ForwardKind kind() const;
  int input_dim() const { return d_; }
  int output_dim() const { return n_; }

  /// Batched evaluation, one sample per column.
  Matrix eval(const Matrix& x) const;
  /// (df/dx)^T u per column.
  Matrix vjp(const Matrix& x, const Matrix& upstream) const;

  const LinearForward* as_linear() const { return std::get_if<LinearForward>(&payload_); }
  const CurveForward* as_curve() const { return std::get_if<CurveForward>(&payload_); }
  const SurrogateForward* as_surrogate() const { return std::get_if<SurrogateForward>(&payload_); }

 private:
  using Payload = std::variant<LinearForward, CurveForward, SurrogateForward>;
  ForwardModel(Payload payload, int d, int n) : payload_(std::move(payload)), d_(d), n_(n) {}

  Payload payload_;
  int d_ = 0;
  int n_ = 0;
};

Vector eval_forward(const ForwardModel& model, const Vector& x);
Vector forward_vjp(const ForwardModel& model, const Vector& x, const Vector& upstream);

struct Measurement {
  Vector y;
  Vector w;
  std::optional<double> b_true;
  std::optional<Vector> x_true;

  void validate() const;
};

enum class WeightConvention {
  measured,  // w = y_meas, held constant
  unit,      // w = 1
};

/// y = f(x_true) * (1 + b z), z ~ N(0, I). With the measured convention the
/// clean signal must be strictly positive when b > 0.
Measurement synthesize_measurement(const ForwardModel& model, const Vector& x_true, double b, Rng& rng,
                                   WeightConvention weights = WeightConvention::measured);

nlohmann::json to_json(const Measurement& m);
Measurement measurement_from_json(const nlohmann::json& doc);

// --- surrogate training ---------------------------------------------------

struct SurrogateConfig {
  int width = 256;
  int epochs = 200;
  int batch_size = 128;
  double lr = 1e-3;
  int lr_decay_every = 0;  // epochs; 0 disables decay
  double lr_decay_factor = 0.5;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct SurrogateFit {
  ForwardModel model;
  double initial_holdout_rmse = 0.0;
  double holdout_rmse = 0.0;
  /// sqrt(sum (f - y)^2 / sum y^2) over the held-out pairs.
  double holdout_relative_l2 = 0.0;
  int train_count = 0;
  int holdout_count = 0;
};

/// Fits f(x) ~ y by minimizing mean squared error with Adam. Inputs are
/// standardized to [box_lo, box_hi]; if the box is empty it is taken from
/// the data range. Columns of x and y are paired samples.
SurrogateFit train_surrogate(const Matrix& x, const Matrix& y, const SurrogateConfig& cfg,
                             const Vector& box_lo = Vector(), const Vector& box_hi = Vector());

nlohmann::json to_json(const ForwardModel& model);
ForwardModel forward_from_json(const nlohmann::json& doc);

// --- training pairs CSV (header x1..xd,y1..yn) -----------------------------

struct PairTable {
  Matrix x;  // d x N
  Matrix y;  // n x N
};

void write_pairs_csv(const std::string& path, const PairTable& pairs);
PairTable read_pairs_csv(const std::string& path);

/// Uniform draws in the box, pushed through the model.
PairTable sample_pairs(const ForwardModel& model, const Vector& box_lo, const Vector& box_hi, int count,
                       Rng& rng);

}  // namespace invflow
