#pragma once

// Small dense feed-forward networks with exact reverse-mode gradients and
// Adam. Batched evaluation stores one sample per column.

#include <vector>

#include "json.hpp"

#include "invflow/common.hpp"

namespace invflow {

struct DenseLayer {
  Matrix weights;  // rows = out dim, cols = in dim
  Vector bias;
};

/// ReLU on every hidden layer, identity on the last.
enum class Activation { relu };

struct MlpParams {
  std::vector<int> layer_dims;
  std::vector<DenseLayer> layers;
  Activation activation = Activation::relu;

  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_parameters() const;

  /// Throws ShapeError / NumericalError if the invariants do not hold.
  void validate() const;
};

/// Inputs to every layer as seen during a forward pass; inputs[0] is the
/// network input. Enough to run the backward pass without re-evaluating.
struct MlpTape {
  std::vector<Matrix> inputs;
};

struct GradientBundle {
  std::vector<DenseLayer> d_params;  // summed over batch columns
  Matrix d_input;                    // one column per batch sample
};

struct AdamState {
  std::vector<DenseLayer> first_moment;
  std::vector<DenseLayer> second_moment;
  long step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

enum class InitScheme { he_uniform, zero_last_layer };

// Batched API: x is (input_dim x batch).
Matrix mlp_forward(const MlpParams& params, const Matrix& x, MlpTape* tape);
GradientBundle mlp_backward(const MlpParams& params, const MlpTape& tape,
                            const Matrix& upstream);

// Single-sample conveniences.
Vector mlp_forward(const MlpParams& params, const Vector& x, MlpTape* tape = nullptr);
GradientBundle mlp_backward(const MlpParams& params, const MlpTape& tape,
                            const Vector& upstream);

MlpParams init_mlp(const std::vector<int>& layer_dims, InitScheme scheme, Rng& rng);

/// Zero-filled tensors with the same shapes as the network parameters.
std::vector<DenseLayer> zeros_like(const MlpParams& params);

AdamState make_adam_state(const MlpParams& params, double learning_rate);

/// One bias-corrected Adam update in place. Rejects shape mismatches and
/// non-finite gradients before touching params or state.
void adam_step(MlpParams& params, const std::vector<DenseLayer>& grads, AdamState& state);

double squared_norm(const std::vector<DenseLayer>& tensors);
void scale_in_place(std::vector<DenseLayer>& tensors, double factor);

nlohmann::json to_json(const MlpParams& params);
MlpParams mlp_from_json(const nlohmann::json& doc);

}  // namespace invflow
