#include "invflow/forward.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "invflow/csv.hpp"

namespace invflow {

Vector grating_box_lo() {
  Vector lo(7);
  lo << 85.0, 45.0, 76.0, 2.0, 0.0, 2.0, 0.1;
  return lo;
}

Vector grating_box_hi() {
  Vector hi(7);
  hi << 100.0, 55.0, 88.0, 4.0, 5.0, 10.0, 3.0;
  return hi;
}

std::vector<std::string> grating_parameter_names() { return {"h", "cd", "swa", "t_t", "t_b", "t_g", "t_s"}; }

Vector gixrf_angles() { return Vector::LinSpaced(178, 0.8, 14.75); }

std::string to_string(ForwardKind kind) {
  switch (kind) {
    case ForwardKind::linear: return "linear";
    case ForwardKind::synthetic_curve: return "synthetic-curve";
    case ForwardKind::surrogate_mlp: return "surrogate-mlp";
  }
  return "unknown";
}

namespace {

void check_box(const Vector& lo, const Vector& hi, const char* who) {
  require_shape(lo.size() == hi.size() && lo.size() > 0, std::string(who) + ": box bounds differ in length");
  for (Eigen::Index i = 0; i < lo.size(); ++i)
    if (!(lo[i] < hi[i])) throw std::invalid_argument(std::string(who) + ": box must have lo < hi");
}

double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

struct CurveTerms {
  double value;
  double grad[7];  // df/du
};

// One angle, rescaled parameters u.
CurveTerms curve_terms(const double* u, double a, bool want_grad) {
  const double sig = logistic(3.0 * (a - (1.0 + 3.0 * u[1])));
  const double r = a - (5.0 + 6.0 * u[3]);
  const double w2 = 0.25 * std::exp(3.0 * u[4]);  // (0.5 e^{1.5 u5})^2
  const double bump = std::exp(-r * r / (2.0 * w2));
  CurveTerms t{};
  t.value = u[0] * sig + u[2] * bump + u[5] + u[6] * a / 15.0 + 0.05;
  if (want_grad) {
    t.grad[0] = sig;
    t.grad[1] = -9.0 * u[0] * sig * (1.0 - sig);
    t.grad[2] = bump;
    t.grad[3] = u[2] * bump * (r / w2) * 6.0;
    t.grad[4] = u[2] * bump * 1.5 * r * r / w2;
    t.grad[5] = 1.0;
    t.grad[6] = a / 15.0;
  }
  return t;
}

Matrix standardize(const Matrix& x, const Vector& lo, const Vector& hi) {
  const Vector scale = (2.0 * (hi - lo).cwiseInverse());
  Matrix z = x.colwise() - lo;
  z = scale.asDiagonal() * z;
  z.array() -= 1.0;
  return z;
}

}  // namespace

ForwardModel ForwardModel::linear(Matrix A, Vector c) {
  require_shape(A.rows() > 0 && A.cols() > 0, "linear forward: empty matrix");
  require_shape(c.size() == A.rows(), "linear forward: offset length must equal rows of A");
  const int d = static_cast<int>(A.cols());
  const int n = static_cast<int>(A.rows());
  return ForwardModel(LinearForward{std::move(A), std::move(c)}, d, n);
}

ForwardModel ForwardModel::synthetic_curve() {
  return synthetic_curve(grating_box_lo(), grating_box_hi(), gixrf_angles());
}

ForwardModel ForwardModel::synthetic_curve(Vector box_lo, Vector box_hi, Vector angles) {
  check_box(box_lo, box_hi, "synthetic curve");
  require_shape(box_lo.size() == 7, "synthetic curve: exactly 7 parameters");
  require_shape(angles.size() > 0, "synthetic curve: empty angle grid");
  const int n = static_cast<int>(angles.size());
  return ForwardModel(CurveForward{std::move(angles), std::move(box_lo), std::move(box_hi)}, 7, n);
}

ForwardModel ForwardModel::surrogate(MlpParams net, Vector box_lo, Vector box_hi) {
  net.validate();
  check_box(box_lo, box_hi, "surrogate");
  require_shape(box_lo.size() == net.input_dim(), "surrogate: box dimension differs from network input");
  const int d = net.input_dim();
  const int n = net.output_dim();
  return ForwardModel(SurrogateForward{std::move(net), std::move(box_lo), std::move(box_hi)}, d, n);
}

ForwardKind ForwardModel::kind() const {
  switch (payload_.index()) {
    case 0: return ForwardKind::linear;
    case 1: return ForwardKind::synthetic_curve;
    default: return ForwardKind::surrogate_mlp;
  }
}

Matrix ForwardModel::eval(const Matrix& x) const {
  require_shape(x.rows() == d_, "eval_forward: input has " + std::to_string(x.rows()) + " rows, model expects " +
                                    std::to_string(d_));
  if (const auto* lin = as_linear()) {
    Matrix y = lin->A * x;
    y.colwise() += lin->c;
    return y;
  }
  if (const auto* curve = as_curve()) {
    const Vector scale = 0.8 * (curve->box_hi - curve->box_lo).cwiseInverse();
    Matrix y(n_, x.cols());
    double u[7];
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      for (int k = 0; k < 7; ++k) u[k] = 0.2 + scale[k] * (x(k, j) - curve->box_lo[k]);
      for (int i = 0; i < n_; ++i) y(i, j) = curve_terms(u, curve->angles[i], false).value;
    }
    return y;
  }
  const auto& sur = *as_surrogate();
  return mlp_forward(sur.net, standardize(x, sur.box_lo, sur.box_hi), nullptr);
}

Matrix ForwardModel::vjp(const Matrix& x, const Matrix& upstream) const {
  require_shape(x.rows() == d_, "forward_vjp: input has wrong dimension");
  require_shape(upstream.rows() == n_ && upstream.cols() == x.cols(),
                "forward_vjp: upstream is " + shape_str(upstream.rows(), upstream.cols()) + ", expected " +
                    shape_str(n_, x.cols()));
  if (const auto* lin = as_linear()) return lin->A.transpose() * upstream;
  if (const auto* curve = as_curve()) {
    const Vector scale = 0.8 * (curve->box_hi - curve->box_lo).cwiseInverse();
    Matrix out = Matrix::Zero(7, x.cols());
    double u[7];
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      for (int k = 0; k < 7; ++k) u[k] = 0.2 + scale[k] * (x(k, j) - curve->box_lo[k]);
      for (int i = 0; i < n_; ++i) {
        const double g = upstream(i, j);
        if (g == 0.0) continue;
        const auto t = curve_terms(u, curve->angles[i], true);
        for (int k = 0; k < 7; ++k) out(k, j) += g * t.grad[k];
      }
      for (int k = 0; k < 7; ++k) out(k, j) *= scale[k];
    }
    return out;
  }
  const auto& sur = *as_surrogate();
  MlpTape tape;
  mlp_forward(sur.net, standardize(x, sur.box_lo, sur.box_hi), &tape);
  const Matrix d_std = mlp_backward(sur.net, tape, upstream).d_input;
  return (2.0 * (sur.box_hi - sur.box_lo).cwiseInverse()).asDiagonal() * d_std;
}

Vector eval_forward(const ForwardModel& model, const Vector& x) { return model.eval(Matrix(x)).col(0); }

Vector forward_vjp(const ForwardModel& model, const Vector& x, const Vector& upstream) {
  return model.vjp(Matrix(x), Matrix(upstream)).col(0);
}

void Measurement::validate() const {
  require_shape(y.size() == w.size() && y.size() > 0, "measurement: y and w must have equal nonzero length");
  if (!y.allFinite()) throw NumericalError("measurement: y has non-finite entries");
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (!(w[i] > 0.0) || !std::isfinite(w[i]))
      throw std::invalid_argument("measurement: weights must be positive and finite (component " +
                                  std::to_string(i) + ")");
}

Measurement synthesize_measurement(const ForwardModel& model, const Vector& x_true, double b, Rng& rng,
                                   WeightConvention weights) {
  if (!(b >= 0.0) || !std::isfinite(b)) throw std::invalid_argument("synthesize_measurement: b must be >= 0");
  const Vector clean = eval_forward(model, x_true);
  if (b > 0.0) {
    for (Eigen::Index i = 0; i < clean.size(); ++i)
      if (!(clean[i] > 0.0))
        throw std::invalid_argument("synthesize_measurement: clean signal component " + std::to_string(i) +
                                    " is not positive; relative noise needs y_true > 0");
  }
  Measurement m;
  m.y = clean;
  if (b > 0.0) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < clean.size(); ++i) m.y[i] = clean[i] * (1.0 + b * normal(rng));
  }
  m.w = weights == WeightConvention::measured ? m.y : Vector::Ones(m.y.size());
  m.b_true = b;
  m.x_true = x_true;
  m.validate();
  return m;
}

namespace {

std::vector<double> to_std(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

nlohmann::json to_json(const Measurement& m) {
  nlohmann::json doc{{"y", to_std(m.y)}, {"w", to_std(m.w)}};
  if (m.b_true) doc["b_true"] = *m.b_true;
  if (m.x_true) doc["x_true"] = to_std(*m.x_true);
  return doc;
}

Measurement measurement_from_json(const nlohmann::json& doc) {
  Measurement m;
  m.y = from_std(doc.at("y").get<std::vector<double>>());
  m.w = from_std(doc.at("w").get<std::vector<double>>());
  if (doc.contains("b_true") && !doc.at("b_true").is_null()) m.b_true = doc.at("b_true").get<double>();
  if (doc.contains("x_true") && !doc.at("x_true").is_null())
    m.x_true = from_std(doc.at("x_true").get<std::vector<double>>());
  m.validate();
  return m;
}

SurrogateFit train_surrogate(const Matrix& x, const Matrix& y, const SurrogateConfig& cfg, const Vector& box_lo,
                             const Vector& box_hi) {
  require_shape(x.cols() == y.cols(), "train_surrogate: x and y must have the same number of pairs");
  require_shape(x.cols() >= 2, "train_surrogate: need at least two pairs");
  require_shape(x.rows() > 0 && y.rows() > 0, "train_surrogate: empty dimensions");
  if (!x.allFinite() || !y.allFinite()) throw NumericalError("train_surrogate: non-finite training data");
  if (cfg.width < 1 || cfg.batch_size < 1 || cfg.epochs < 0 || !(cfg.lr > 0.0))
    throw std::invalid_argument("train_surrogate: invalid config");
  bool all_same = true;
  for (Eigen::Index j = 1; j < x.cols() && all_same; ++j) all_same = x.col(j) == x.col(0);
  if (all_same) throw std::invalid_argument("train_surrogate: degenerate data (all inputs identical)");

  Vector lo = box_lo, hi = box_hi;
  if (lo.size() == 0) {
    lo = x.rowwise().minCoeff();
    hi = x.rowwise().maxCoeff();
    for (Eigen::Index i = 0; i < lo.size(); ++i)
      if (!(lo[i] < hi[i])) hi[i] = lo[i] + 1.0;
  }
  require_shape(lo.size() == x.rows() && hi.size() == x.rows(), "train_surrogate: box dimension mismatch");

  Rng rng(cfg.seed);
  const auto total = static_cast<int>(x.cols());
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  int n_hold = static_cast<int>(std::lround(cfg.holdout_fraction * total));
  n_hold = std::clamp(n_hold, 1, total - 1);
  const int n_train = total - n_hold;

  auto gather = [&](const Matrix& m, int begin, int count) {
    Matrix out(m.rows(), count);
    for (int k = 0; k < count; ++k) out.col(k) = m.col(order[static_cast<std::size_t>(begin + k)]);
    return out;
  };
  const Matrix x_train = standardize(gather(x, n_hold, n_train), lo, hi);
  const Matrix y_train = gather(y, n_hold, n_train);
  const Matrix x_hold = standardize(gather(x, 0, n_hold), lo, hi);
  const Matrix y_hold = gather(y, 0, n_hold);

  MlpParams net = init_mlp({static_cast<int>(x.rows()), cfg.width, static_cast<int>(y.rows())},
                           InitScheme::he_uniform, rng);
  auto holdout_rmse = [&](const MlpParams& p) {
    const Matrix r = mlp_forward(p, x_hold, nullptr) - y_hold;
    return std::sqrt(r.squaredNorm() / static_cast<double>(r.size()));
  };

  SurrogateFit fit{ForwardModel::linear(Matrix::Identity(1, 1), Vector::Zero(1))};
  fit.initial_holdout_rmse = holdout_rmse(net);
  fit.train_count = n_train;
  fit.holdout_count = n_hold;

  AdamState adam = make_adam_state(net, cfg.lr);
  std::vector<int> batch_order(static_cast<std::size_t>(n_train));
  std::iota(batch_order.begin(), batch_order.end(), 0);
  const double out_dim = static_cast<double>(y.rows());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_decay_every > 0 && epoch > 0 && epoch % cfg.lr_decay_every == 0)
      adam.learning_rate *= cfg.lr_decay_factor;
    std::shuffle(batch_order.begin(), batch_order.end(), rng);
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n_train - start);
      Matrix xb(x_train.rows(), count), yb(y_train.rows(), count);
      for (int k = 0; k < count; ++k) {
        const int idx = batch_order[static_cast<std::size_t>(start + k)];
        xb.col(k) = x_train.col(idx);
        yb.col(k) = y_train.col(idx);
      }
      MlpTape tape;
      const Matrix pred = mlp_forward(net, xb, &tape);
      const Matrix upstream = (2.0 / (count * out_dim)) * (pred - yb);
      const auto grads = mlp_backward(net, tape, upstream);
      adam_step(net, grads.d_params, adam);
    }
  }

  fit.holdout_rmse = holdout_rmse(net);
  const Matrix r = mlp_forward(net, x_hold, nullptr) - y_hold;
  fit.holdout_relative_l2 = std::sqrt(r.squaredNorm() / y_hold.squaredNorm());
  fit.model = ForwardModel::surrogate(std::move(net), lo, hi);
  return fit;
}

nlohmann::json to_json(const ForwardModel& model) {
  if (const auto* lin = model.as_linear()) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < lin->A.rows(); ++i) rows.push_back(to_std(lin->A.row(i).transpose()));
    return {{"kind", "linear"}, {"A", rows}, {"c", to_std(lin->c)}};
  }
  if (const auto* curve = model.as_curve()) {
    return {{"kind", "synthetic-curve"},
            {"angles", to_std(curve->angles)},
            {"box_lo", to_std(curve->box_lo)},
            {"box_hi", to_std(curve->box_hi)}};
  }
  const auto& sur = *model.as_surrogate();
  nlohmann::json doc = to_json(sur.net);
  doc["kind"] = "surrogate-mlp";
  doc["standardization"] = {{"box_lo", to_std(sur.box_lo)}, {"box_hi", to_std(sur.box_hi)}};
  return doc;
}

ForwardModel forward_from_json(const nlohmann::json& doc) {
  const std::string kind = doc.value("kind", std::string("surrogate-mlp"));
  if (kind == "linear") {
    const auto rows = doc.at("A").get<std::vector<std::vector<double>>>();
    require_shape(!rows.empty(), "forward_from_json: empty A");
    Matrix A(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require_shape(rows[i].size() == rows.front().size(), "forward_from_json: ragged A");
      for (std::size_t j = 0; j < rows[i].size(); ++j)
        A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    Vector c = doc.contains("c") ? from_std(doc.at("c").get<std::vector<double>>()) : Vector::Zero(A.rows());
    return ForwardModel::linear(std::move(A), std::move(c));
  }
  if (kind == "synthetic-curve") {
    Vector lo = doc.contains("box_lo") ? from_std(doc.at("box_lo").get<std::vector<double>>()) : grating_box_lo();
    Vector hi = doc.contains("box_hi") ? from_std(doc.at("box_hi").get<std::vector<double>>()) : grating_box_hi();
    Vector angles =
        doc.contains("angles") ? from_std(doc.at("angles").get<std::vector<double>>()) : gixrf_angles();
    return ForwardModel::synthetic_curve(std::move(lo), std::move(hi), std::move(angles));
  }
  if (kind == "surrogate-mlp") {
    const auto& st = doc.at("standardization");
    return ForwardModel::surrogate(mlp_from_json(doc), from_std(st.at("box_lo").get<std::vector<double>>()),
                                   from_std(st.at("box_hi").get<std::vector<double>>()));
  }
  throw std::invalid_argument("forward_from_json: unknown kind '" + kind + "'");
}

void write_pairs_csv(const std::string& path, const PairTable& pairs) {
  require_shape(pairs.x.cols() == pairs.y.cols(), "write_pairs_csv: x and y pair counts differ");
  std::ostringstream out;
  for (Eigen::Index i = 0; i < pairs.x.rows(); ++i) out << (i ? "," : "") << "x" << (i + 1);
  for (Eigen::Index i = 0; i < pairs.y.rows(); ++i) out << ",y" << (i + 1);
  out << "\n";
  for (Eigen::Index j = 0; j < pairs.x.cols(); ++j) {
    for (Eigen::Index i = 0; i < pairs.x.rows(); ++i) out << (i ? "," : "") << csv::format_double(pairs.x(i, j));
    for (Eigen::Index i = 0; i < pairs.y.rows(); ++i) out << "," << csv::format_double(pairs.y(i, j));
    out << "\n";
  }
  csv::write_file(path, out.str());
}

PairTable read_pairs_csv(const std::string& path) {
  const auto rows = csv::read_rows(path);
  if (rows.empty()) throw std::invalid_argument("read_pairs_csv: " + path + " has no header");
  const auto& header = rows.front();
  Eigen::Index d = 0, n = 0;
  for (std::size_t k = 0; k < header.size(); ++k) {
    const std::string& h = header[k];
    const bool is_x = !h.empty() && h[0] == 'x';
    const bool is_y = !h.empty() && h[0] == 'y';
    if (is_x && n == 0) {
      ++d;
    } else if (is_y) {
      ++n;
    } else {
      throw std::invalid_argument("read_pairs_csv: header must be x1..xd,y1..yn, got '" + h + "'");
    }
  }
  require_shape(d > 0 && n > 0, "read_pairs_csv: header needs both x and y columns");
  PairTable t;
  const auto count = static_cast<Eigen::Index>(rows.size() - 1);
  t.x.resize(d, count);
  t.y.resize(n, count);
  for (Eigen::Index j = 0; j < count; ++j) {
    const auto& row = rows[static_cast<std::size_t>(j + 1)];
    require_shape(static_cast<Eigen::Index>(row.size()) == d + n,
                  "read_pairs_csv: line " + std::to_string(j + 2) + " has wrong field count");
    for (Eigen::Index i = 0; i < d; ++i) t.x(i, j) = csv::parse_double(row[static_cast<std::size_t>(i)]);
    for (Eigen::Index i = 0; i < n; ++i) t.y(i, j) = csv::parse_double(row[static_cast<std::size_t>(d + i)]);
  }
  return t;
}

PairTable sample_pairs(const ForwardModel& model, const Vector& box_lo, const Vector& box_hi, int count, Rng& rng) {
  check_box(box_lo, box_hi, "sample_pairs");
  require_shape(box_lo.size() == model.input_dim(), "sample_pairs: box dimension differs from model input");
  require_shape(count >= 0, "sample_pairs: negative count");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PairTable t;
  t.x.resize(model.input_dim(), count);
  for (int j = 0; j < count; ++j)
    for (Eigen::Index i = 0; i < box_lo.size(); ++i) t.x(i, j) = box_lo[i] + (box_hi[i] - box_lo[i]) * unit(rng);
  t.y = model.eval(t.x);
  return t;
}

}  // namespace invflow
