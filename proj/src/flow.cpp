#include "invflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace invflow {

double clamp_scale(double s, double c) { return std::isinf(c) ? s : c * std::tanh(s / c); }

double clamp_scale_derivative(double s, double c) {
  if (std::isinf(c)) return 1.0;
  const double t = std::tanh(s / c);
  return 1.0 - t * t;
}

namespace {

Matrix clamp_matrix(const Matrix& s, double c) {
  if (std::isinf(c)) return s;
  return c * (s.array() / c).tanh();
}

Matrix clamp_derivative_matrix(const Matrix& s, double c) {
  if (std::isinf(c)) return Matrix::Ones(s.rows(), s.cols());
  const Eigen::ArrayXXd t = (s.array() / c).tanh();
  return 1.0 - t * t;
}

Matrix permute_rows(const Matrix& v, const std::vector<int>& perm) {
  Matrix out(v.rows(), v.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = v.row(perm[i]);
  return out;
}

Matrix unpermute_rows(const Matrix& u, const std::vector<int>& perm) {
  Matrix out(u.rows(), u.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(perm[i]) = u.row(static_cast<Eigen::Index>(i));
  return out;
}

void check_finite(const Matrix& m, std::size_t block, const char* what) {
  if (!m.allFinite())
    throw NumericalError("flow: non-finite " + std::string(what) + " in block " + std::to_string(block));
}

void check_subnet(const MlpParams& net, int in, int out, const char* name) {
  net.validate();
  require_shape(net.input_dim() == in && net.output_dim() == out,
                std::string("coupling block: subnet ") + name + " maps " + std::to_string(net.input_dim()) +
                    "->" + std::to_string(net.output_dim()) + ", expected " + std::to_string(in) + "->" +
                    std::to_string(out));
}

bool is_permutation(const std::vector<int>& perm, int d) {
  if (static_cast<int>(perm.size()) != d) return false;
  std::vector<bool> seen(static_cast<std::size_t>(d), false);
  for (int p : perm) {
    if (p < 0 || p >= d || seen[static_cast<std::size_t>(p)]) return false;
    seen[static_cast<std::size_t>(p)] = true;
  }
  return true;
}

}  // namespace

void CouplingBlock::validate() const {
  require_shape(d1 > 0 && d2 > 0, "coupling block: both halves must be nonempty");
  check_subnet(s2, d2, d1, "s2");
  check_subnet(t2, d2, d1, "t2");
  check_subnet(s1, d1, d2, "s1");
  check_subnet(t1, d1, d2, "t1");
}

std::size_t FlowModel::num_parameters() const {
  std::size_t n = 0;
  for (const auto& b : blocks)
    n += b.s2.num_parameters() + b.t2.num_parameters() + b.s1.num_parameters() + b.t1.num_parameters();
  return n;
}

void FlowModel::validate() const {
  require_shape(dim >= 2, "flow: dim must be at least 2");
  require_shape(perms.size() == blocks.size(), "flow: one permutation per block required");
  if (!(clamp > 0.0)) throw std::invalid_argument("flow: clamp must be positive");
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    require_shape(is_permutation(perms[l], dim), "flow: perms[" + std::to_string(l) + "] is not a permutation");
    require_shape(blocks[l].d1 + blocks[l].d2 == dim, "flow: block split does not sum to dim");
    blocks[l].validate();
  }
}

double FlowGradients::squared_norm() const {
  double s = 0.0;
  for (const auto& b : blocks)
    s += invflow::squared_norm(b.s2) + invflow::squared_norm(b.t2) + invflow::squared_norm(b.s1) +
         invflow::squared_norm(b.t1);
  return s;
}

void FlowGradients::scale(double factor) {
  for (auto& b : blocks) {
    scale_in_place(b.s2, factor);
    scale_in_place(b.t2, factor);
    scale_in_place(b.s1, factor);
    scale_in_place(b.t1, factor);
  }
  d_input *= factor;
}

namespace {

FlowEval forward_impl(const FlowModel& model, const Matrix& xi, bool record) {
  require_shape(xi.rows() == model.dim, "flow_forward: input has " + std::to_string(xi.rows()) +
                                            " rows, flow dim is " + std::to_string(model.dim));
  FlowEval eval;
  eval.log_det = Vector::Zero(xi.cols());
  eval.tapes.resize(model.blocks.size());
  BlockTape scratch;
  Matrix v = xi;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& block = model.blocks[l];
    auto& tape = record ? eval.tapes[l] : scratch;
    Matrix u = permute_rows(v, model.perms[l]);
    tape.xi1 = u.topRows(block.d1);
    tape.xi2 = u.bottomRows(block.d2);

    tape.s2_raw = mlp_forward(block.s2, tape.xi2, record ? &tape.s2 : nullptr);
    tape.s2_hat = clamp_matrix(tape.s2_raw, model.clamp);
    const Matrix shift2 = mlp_forward(block.t2, tape.xi2, record ? &tape.t2 : nullptr);
    tape.x1 = tape.xi1.cwiseProduct(tape.s2_hat.array().exp().matrix()) + shift2;
    check_finite(tape.x1, l, "first-half output");

    tape.s1_raw = mlp_forward(block.s1, tape.x1, record ? &tape.s1 : nullptr);
    tape.s1_hat = clamp_matrix(tape.s1_raw, model.clamp);
    const Matrix shift1 = mlp_forward(block.t1, tape.x1, record ? &tape.t1 : nullptr);
    Matrix x2 = tape.xi2.cwiseProduct(tape.s1_hat.array().exp().matrix()) + shift1;
    check_finite(x2, l, "second-half output");

    tape.log_det = tape.s2_hat.colwise().sum().transpose() + tape.s1_hat.colwise().sum().transpose();
    check_finite(tape.log_det, l, "log-determinant");
    eval.log_det += tape.log_det;

    v.resize(model.dim, xi.cols());
    v.topRows(block.d1) = tape.x1;
    v.bottomRows(block.d2) = x2;
  }
  eval.output = std::move(v);
  if (!record) eval.tapes.clear();
  return eval;
}

}  // namespace

FlowEval flow_forward(const FlowModel& model, const Matrix& xi) { return forward_impl(model, xi, true); }

FlowEval flow_apply(const FlowModel& model, const Matrix& xi) { return forward_impl(model, xi, false); }

FlowEval flow_forward(const FlowModel& model, const Vector& xi) { return flow_forward(model, Matrix(xi)); }

Matrix flow_inverse(const FlowModel& model, const Matrix& x) {
  require_shape(x.rows() == model.dim, "flow_inverse: input has " + std::to_string(x.rows()) +
                                           " rows, flow dim is " + std::to_string(model.dim));
  Matrix v = x;
  for (std::size_t l = model.blocks.size(); l-- > 0;) {
    const auto& block = model.blocks[l];
    const Matrix x1 = v.topRows(block.d1);
    const Matrix x2 = v.bottomRows(block.d2);
    const Matrix s1_hat = clamp_matrix(mlp_forward(block.s1, x1, nullptr), model.clamp);
    const Matrix xi2 =
        (x2 - mlp_forward(block.t1, x1, nullptr)).cwiseProduct((-s1_hat).array().exp().matrix());
    check_finite(xi2, l, "inverse second half");
    const Matrix s2_hat = clamp_matrix(mlp_forward(block.s2, xi2, nullptr), model.clamp);
    const Matrix xi1 =
        (x1 - mlp_forward(block.t2, xi2, nullptr)).cwiseProduct((-s2_hat).array().exp().matrix());
    check_finite(xi1, l, "inverse first half");
    Matrix u(model.dim, x.cols());
    u.topRows(block.d1) = xi1;
    u.bottomRows(block.d2) = xi2;
    v = unpermute_rows(u, model.perms[l]);
  }
  return v;
}

Vector flow_inverse(const FlowModel& model, const Vector& x) { return flow_inverse(model, Matrix(x)).col(0); }

FlowGradients flow_backward(const FlowModel& model, const FlowEval& eval, const Matrix& d_output,
                            const Vector& d_logdet) {
  require_shape(eval.tapes.size() == model.blocks.size(), "flow_backward: stale tape (block count differs)");
  const Eigen::Index batch = eval.output.cols();
  require_shape(eval.output.rows() == model.dim, "flow_backward: stale tape (dim differs)");
  require_shape(d_output.rows() == model.dim && d_output.cols() == batch,
                "flow_backward: d_output is " + shape_str(d_output.rows(), d_output.cols()) + ", expected " +
                    shape_str(model.dim, batch));
  require_shape(d_logdet.size() == batch, "flow_backward: d_logdet length differs from batch");

  FlowGradients grads;
  grads.blocks.resize(model.blocks.size());
  const Eigen::RowVectorXd g_ld = d_logdet.transpose();
  Matrix g = d_output;
  for (std::size_t l = model.blocks.size(); l-- > 0;) {
    const auto& block = model.blocks[l];
    const auto& tape = eval.tapes[l];
    require_shape(tape.xi1.rows() == block.d1 && tape.xi2.rows() == block.d2 && tape.xi1.cols() == batch,
                  "flow_backward: stale tape in block " + std::to_string(l));
    auto& bg = grads.blocks[l];
    Matrix g_x1 = g.topRows(block.d1);
    const Matrix g_x2 = g.bottomRows(block.d2);

    // x2 = xi2 * exp(S1(x1)) + t1(x1)
    const Matrix e1 = tape.s1_hat.array().exp();
    Matrix g_xi2 = g_x2.cwiseProduct(e1);
    Matrix g_s1 = g_x2.cwiseProduct(tape.xi2).cwiseProduct(e1);
    g_s1.rowwise() += g_ld;
    g_s1 = g_s1.cwiseProduct(clamp_derivative_matrix(tape.s1_raw, model.clamp));
    auto s1_back = mlp_backward(block.s1, tape.s1, g_s1);
    auto t1_back = mlp_backward(block.t1, tape.t1, g_x2);
    g_x1 += s1_back.d_input + t1_back.d_input;
    bg.s1 = std::move(s1_back.d_params);
    bg.t1 = std::move(t1_back.d_params);

    // x1 = xi1 * exp(S2(xi2)) + t2(xi2)
    const Matrix e2 = tape.s2_hat.array().exp();
    const Matrix g_xi1 = g_x1.cwiseProduct(e2);
    Matrix g_s2 = g_x1.cwiseProduct(tape.xi1).cwiseProduct(e2);
    g_s2.rowwise() += g_ld;
    g_s2 = g_s2.cwiseProduct(clamp_derivative_matrix(tape.s2_raw, model.clamp));
    auto s2_back = mlp_backward(block.s2, tape.s2, g_s2);
    auto t2_back = mlp_backward(block.t2, tape.t2, g_x1);
    g_xi2 += s2_back.d_input + t2_back.d_input;
    bg.s2 = std::move(s2_back.d_params);
    bg.t2 = std::move(t2_back.d_params);

    Matrix g_u(model.dim, batch);
    g_u.topRows(block.d1) = g_xi1;
    g_u.bottomRows(block.d2) = g_xi2;
    g = unpermute_rows(g_u, model.perms[l]);
  }
  grads.d_input = std::move(g);
  return grads;
}

FlowModel build_flow(const FlowShape& shape, Rng& rng) {
  require_shape(shape.dim >= 2, "build_flow: dim must be at least 2 so both coupling halves are nonempty");
  require_shape(shape.blocks >= 1, "build_flow: need at least one block");
  require_shape(shape.subnet_width >= 1 && shape.subnet_depth >= 0, "build_flow: invalid subnet shape");
  if (!(shape.clamp > 0.0)) throw std::invalid_argument("build_flow: clamp must be positive");

  FlowModel model;
  model.dim = shape.dim;
  model.clamp = shape.clamp;
  const int d1 = shape.dim / 2;
  const int d2 = shape.dim - d1;
  auto dims = [&](int in, int out) {
    std::vector<int> v{in};
    for (int k = 0; k < shape.subnet_depth; ++k) v.push_back(shape.subnet_width);
    v.push_back(out);
    return v;
  };
  for (int l = 0; l < shape.blocks; ++l) {
    std::vector<int> perm(static_cast<std::size_t>(shape.dim));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    model.perms.push_back(std::move(perm));

    CouplingBlock block;
    block.d1 = d1;
    block.d2 = d2;
    block.s2 = init_mlp(dims(d2, d1), InitScheme::zero_last_layer, rng);
    block.t2 = init_mlp(dims(d2, d1), InitScheme::zero_last_layer, rng);
    block.s1 = init_mlp(dims(d1, d2), InitScheme::zero_last_layer, rng);
    block.t1 = init_mlp(dims(d1, d2), InitScheme::zero_last_layer, rng);
    model.blocks.push_back(std::move(block));
  }
  return model;
}

nlohmann::json to_json(const FlowModel& model) {
  nlohmann::json doc;
  doc["dim"] = model.dim;
  doc["clamp"] = std::isinf(model.clamp) ? nlohmann::json(nullptr) : nlohmann::json(model.clamp);
  auto blocks = nlohmann::json::array();
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& b = model.blocks[l];
    blocks.push_back({{"perm", model.perms[l]},
                      {"s2", to_json(b.s2)},
                      {"t2", to_json(b.t2)},
                      {"s1", to_json(b.s1)},
                      {"t1", to_json(b.t1)}});
  }
  doc["blocks"] = std::move(blocks);
  return doc;
}

FlowModel flow_from_json(const nlohmann::json& doc) {
  FlowModel model;
  model.dim = doc.at("dim").get<int>();
  // null encodes the unclamped (raw exponential) variant
  model.clamp = doc.at("clamp").is_null() ? kNoClamp : doc.at("clamp").get<double>();
  for (const auto& jb : doc.at("blocks")) {
    model.perms.push_back(jb.at("perm").get<std::vector<int>>());
    CouplingBlock b;
    b.s2 = mlp_from_json(jb.at("s2"));
    b.t2 = mlp_from_json(jb.at("t2"));
    b.s1 = mlp_from_json(jb.at("s1"));
    b.t1 = mlp_from_json(jb.at("t1"));
    b.d1 = b.s2.output_dim();
    b.d2 = b.s2.input_dim();
    model.blocks.push_back(std::move(b));
  }
  model.validate();
  return model;
}

}  // namespace invflow
