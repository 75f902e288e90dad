#pragma once

// Invertible coupling network
//
//   T = T_L o P_L o ... o T_1 o P_1
//
// where P_l reorders coordinates and T_l is an affine coupling block acting
// on the split (xi1, xi2), dim(xi1) = floor(d/2):
//
//   x1 = xi1 * exp(S2(xi2)) + t2(xi2)
//   x2 = xi2 * exp(S1(x1))  + t1(x1)
//
// S = c * tanh(s / c) is the soft-clamped output of the scale subnet s; with
// c = infinity the raw output is used. The same clamp is applied in forward,
// inverse and log-determinant so the three stay consistent.

#include <limits>
#include <vector>

#include "invflow/nnet.hpp"

namespace invflow {

struct CouplingBlock {
  int d1 = 0;
  int d2 = 0;
  MlpParams s2, t2;  // R^{d2} -> R^{d1}
  MlpParams s1, t1;  // R^{d1} -> R^{d2}

  void validate() const;
};

struct FlowModel {
  int dim = 0;
  double clamp = 2.0;
  /// perms[l][i] is the source coordinate of output coordinate i:
  /// (P_l v)_i = v_{perms[l][i]}.
  std::vector<std::vector<int>> perms;
  std::vector<CouplingBlock> blocks;

  std::size_t num_blocks() const { return blocks.size(); }
  std::size_t num_parameters() const;
  void validate() const;
};

/// Per-block record of a batched forward pass.
struct BlockTape {
  Matrix xi1, xi2, x1;
  Matrix s2_raw, s1_raw;    // subnet outputs before clamping
  Matrix s2_hat, s1_hat;    // clamped scales
  MlpTape s2, t2, s1, t1;
  Vector log_det;           // this block's contribution, per sample
};

struct FlowEval {
  Matrix output;    // d x batch
  Vector log_det;   // per sample
  std::vector<BlockTape> tapes;
};

/// Gradients for every subnet of every block, in block order.
struct BlockGradients {
  std::vector<DenseLayer> s2, t2, s1, t1;
};

struct FlowGradients {
  std::vector<BlockGradients> blocks;
  Matrix d_input;  // gradient w.r.t. xi, d x batch

  double squared_norm() const;
  void scale(double factor);
};

FlowEval flow_forward(const FlowModel& model, const Matrix& xi);
FlowEval flow_forward(const FlowModel& model, const Vector& xi);
/// Output and log-determinant only; no tapes are kept.
FlowEval flow_apply(const FlowModel& model, const Matrix& xi);

Matrix flow_inverse(const FlowModel& model, const Matrix& x);
Vector flow_inverse(const FlowModel& model, const Vector& x);

/// Gradient of sum_j [ <d_output_j, T(xi_j)> + d_logdet_j * log|det dT(xi_j)| ].
FlowGradients flow_backward(const FlowModel& model, const FlowEval& eval, const Matrix& d_output,
                            const Vector& d_logdet);

struct FlowShape {
  int dim = 7;
  int blocks = 10;
  int subnet_width = 256;
  int subnet_depth = 2;  // hidden layers per subnet
  double clamp = 2.0;
};

FlowModel build_flow(const FlowShape& shape, Rng& rng);

/// Clamp helpers, exposed for tests.
double clamp_scale(double s, double c);
double clamp_scale_derivative(double s, double c);

inline constexpr double kNoClamp = std::numeric_limits<double>::infinity();

nlohmann::json to_json(const FlowModel& model);
FlowModel flow_from_json(const nlohmann::json& doc);

}  // namespace invflow
