#include "invflow/nnet.hpp"

#include <cmath>

namespace invflow {

std::size_t MlpParams::num_parameters() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += static_cast<std::size_t>(layer.weights.size() + layer.bias.size());
  return n;
}

void MlpParams::validate() const {
  require_shape(!layers.empty(), "mlp: at least one layer required");
  require_shape(layer_dims.size() == layers.size() + 1,
                "mlp: layer_dims must have one more entry than layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& layer = layers[k];
    require_shape(layer_dims[k] > 0 && layer_dims[k + 1] > 0, "mlp: layer dims must be positive");
    require_shape(layer.weights.rows() == layer_dims[k + 1] && layer.weights.cols() == layer_dims[k],
                  "mlp: layer " + std::to_string(k) + " weights are " +
                      shape_str(layer.weights.rows(), layer.weights.cols()) + ", expected " +
                      shape_str(layer_dims[k + 1], layer_dims[k]));
    require_shape(layer.bias.size() == layer_dims[k + 1],
                  "mlp: layer " + std::to_string(k) + " bias has wrong length");
    if (!layer.weights.allFinite() || !layer.bias.allFinite())
      throw NumericalError("mlp: layer " + std::to_string(k) + " has non-finite entries");
  }
}

Matrix mlp_forward(const MlpParams& params, const Matrix& x, MlpTape* tape) {
  require_shape(!params.layers.empty(), "mlp_forward: network has no layers");
  require_shape(x.rows() == params.input_dim(),
                "mlp_forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                    std::to_string(params.input_dim()));
  const std::size_t n_layers = params.layers.size();
  if (tape) {
    tape->inputs.clear();
    tape->inputs.reserve(n_layers);
  }
  Matrix a;
  for (std::size_t k = 0; k < n_layers; ++k) {
    const auto& layer = params.layers[k];
    const Matrix& input = k == 0 ? x : a;
    Matrix z(layer.weights.rows(), input.cols());
    z.noalias() = layer.weights * input;
    // bias and ReLU in one pass
    if (k + 1 < n_layers)
      z = (z.colwise() + layer.bias).cwiseMax(0.0);
    else
      z.colwise() += layer.bias;
    if (tape) tape->inputs.push_back(k == 0 ? x : std::move(a));
    a = std::move(z);
  }
  return a;
}

GradientBundle mlp_backward(const MlpParams& params, const MlpTape& tape, const Matrix& upstream) {
  const std::size_t n_layers = params.layers.size();
  require_shape(tape.inputs.size() == n_layers, "mlp_backward: stale tape (layer count differs)");
  for (std::size_t k = 0; k < n_layers; ++k)
    require_shape(tape.inputs[k].rows() == params.layer_dims[k],
                  "mlp_backward: stale tape (layer " + std::to_string(k) + " width differs)");
  const Eigen::Index batch = tape.inputs.front().cols();
  require_shape(upstream.rows() == params.output_dim() && upstream.cols() == batch,
                "mlp_backward: upstream is " + shape_str(upstream.rows(), upstream.cols()) +
                    ", expected " + shape_str(params.output_dim(), batch));

  GradientBundle out;
  out.d_params.resize(n_layers);
  Matrix delta = upstream;  // gradient w.r.t. the pre-activation of layer k
  for (std::size_t k = n_layers; k-- > 0;) {
    const auto& layer = params.layers[k];
    const Matrix& input = tape.inputs[k];
    out.d_params[k].weights.noalias() = delta * input.transpose();
    out.d_params[k].bias = delta.rowwise().sum();
    Matrix d_in = layer.weights.transpose() * delta;
    if (k > 0) {
      // input = relu(z); the subgradient at z == 0 is taken as 0.
      d_in = (input.array() > 0.0).select(d_in, 0.0);
    }
    delta = std::move(d_in);
  }
  out.d_input = std::move(delta);
  return out;
}

Vector mlp_forward(const MlpParams& params, const Vector& x, MlpTape* tape) {
  Matrix y = mlp_forward(params, Matrix(x), tape);
  return y.col(0);
}

GradientBundle mlp_backward(const MlpParams& params, const MlpTape& tape, const Vector& upstream) {
  return mlp_backward(params, tape, Matrix(upstream));
}

MlpParams init_mlp(const std::vector<int>& layer_dims, InitScheme scheme, Rng& rng) {
  require_shape(layer_dims.size() >= 2, "init_mlp: need at least input and output dims");
  for (int d : layer_dims) require_shape(d > 0, "init_mlp: layer dims must be positive");
  MlpParams params;
  params.layer_dims = layer_dims;
  const std::size_t n_layers = layer_dims.size() - 1;
  params.layers.resize(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k) {
    const int fan_in = layer_dims[k];
    const int fan_out = layer_dims[k + 1];
    auto& layer = params.layers[k];
    layer.weights.resize(fan_out, fan_in);
    layer.bias = Vector::Zero(fan_out);
    const bool zero = scheme == InitScheme::zero_last_layer && k + 1 == n_layers;
    if (zero) {
      layer.weights.setZero();
      continue;
    }
    const double limit = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> uniform(-limit, limit);
    for (Eigen::Index j = 0; j < layer.weights.cols(); ++j)
      for (Eigen::Index i = 0; i < layer.weights.rows(); ++i) layer.weights(i, j) = uniform(rng);
  }
  return params;
}

std::vector<DenseLayer> zeros_like(const MlpParams& params) {
  std::vector<DenseLayer> out(params.layers.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k].weights = Matrix::Zero(params.layers[k].weights.rows(), params.layers[k].weights.cols());
    out[k].bias = Vector::Zero(params.layers[k].bias.size());
  }
  return out;
}

AdamState make_adam_state(const MlpParams& params, double learning_rate) {
  AdamState state;
  state.first_moment = zeros_like(params);
  state.second_moment = zeros_like(params);
  state.learning_rate = learning_rate;
  return state;
}

namespace {

bool same_shapes(const std::vector<DenseLayer>& a, const std::vector<DenseLayer>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].weights.rows() != b[k].weights.rows() || a[k].weights.cols() != b[k].weights.cols() ||
        a[k].bias.size() != b[k].bias.size())
      return false;
  }
  return true;
}

template <typename Param, typename Grad, typename Moment>
void adam_update(Param& theta, const Grad& g, Moment& m, Moment& v, const AdamState& s,
                 double correction1, double correction2) {
  m = s.beta1 * m + (1.0 - s.beta1) * g;
  v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseProduct(g);
  theta.array() -= s.learning_rate * (m.array() / correction1) /
                   ((v.array() / correction2).sqrt() + s.epsilon);
}

}  // namespace

void adam_step(MlpParams& params, const std::vector<DenseLayer>& grads, AdamState& state) {
  require_shape(same_shapes(params.layers, grads), "adam_step: gradient shapes do not match parameters");
  require_shape(same_shapes(params.layers, state.first_moment) &&
                    same_shapes(params.layers, state.second_moment),
                "adam_step: moment shapes do not match parameters");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (!grads[k].weights.allFinite() || !grads[k].bias.allFinite())
      throw NumericalError("adam_step: non-finite gradient in layer " + std::to_string(k));
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    adam_update(params.layers[k].weights, grads[k].weights, state.first_moment[k].weights,
                state.second_moment[k].weights, state, c1, c2);
    adam_update(params.layers[k].bias, grads[k].bias, state.first_moment[k].bias,
                state.second_moment[k].bias, state, c1, c2);
  }
}

double squared_norm(const std::vector<DenseLayer>& tensors) {
  double s = 0.0;
  for (const auto& t : tensors) s += t.weights.squaredNorm() + t.bias.squaredNorm();
  return s;
}

void scale_in_place(std::vector<DenseLayer>& tensors, double factor) {
  for (auto& t : tensors) {
    t.weights *= factor;
    t.bias *= factor;
  }
}

nlohmann::json to_json(const MlpParams& params) {
  nlohmann::json doc;
  doc["layer_dims"] = params.layer_dims;
  doc["activation"] = "relu";
  auto layers = nlohmann::json::array();
  for (const auto& layer : params.layers) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < layer.weights.rows(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(layer.weights.cols()));
      for (Eigen::Index j = 0; j < layer.weights.cols(); ++j) row[static_cast<std::size_t>(j)] = layer.weights(i, j);
      rows.push_back(std::move(row));
    }
    layers.push_back({{"weights", std::move(rows)},
                      {"bias", std::vector<double>(layer.bias.data(), layer.bias.data() + layer.bias.size())}});
  }
  doc["layers"] = std::move(layers);
  return doc;
}

MlpParams mlp_from_json(const nlohmann::json& doc) {
  MlpParams params;
  params.layer_dims = doc.at("layer_dims").get<std::vector<int>>();
  if (doc.contains("activation") && doc.at("activation").get<std::string>() != "relu")
    throw std::invalid_argument("mlp_from_json: unsupported activation");
  for (const auto& jl : doc.at("layers")) {
    DenseLayer layer;
    const auto& rows = jl.at("weights");
    const auto bias = jl.at("bias").get<std::vector<double>>();
    const auto n_rows = static_cast<Eigen::Index>(rows.size());
    const auto n_cols = n_rows > 0 ? static_cast<Eigen::Index>(rows.at(0).size()) : 0;
    layer.weights.resize(n_rows, n_cols);
    for (Eigen::Index i = 0; i < n_rows; ++i) {
      const auto row = rows.at(static_cast<std::size_t>(i)).get<std::vector<double>>();
      require_shape(static_cast<Eigen::Index>(row.size()) == n_cols, "mlp_from_json: ragged weight matrix");
      for (Eigen::Index j = 0; j < n_cols; ++j) layer.weights(i, j) = row[static_cast<std::size_t>(j)];
    }
    layer.bias = Eigen::Map<const Vector>(bias.data(), static_cast<Eigen::Index>(bias.size()));
    params.layers.push_back(std::move(layer));
  }
  params.validate();
  return params;
}

}  // namespace invflow
