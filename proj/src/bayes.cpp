#include "invflow/bayes.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "invflow/csv.hpp"

namespace invflow {

PriorBox PriorBox::grating(double lambda_bd) { return PriorBox{grating_box_lo(), grating_box_hi(), lambda_bd}; }

bool PriorBox::contains(const Vector& x) const {
  require_shape(x.size() == lo.size(), "prior box: point has wrong dimension");
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (!(x[i] >= lo[i] && x[i] <= hi[i])) return false;
  return true;
}

void PriorBox::validate() const {
  require_shape(lo.size() == hi.size() && lo.size() > 0, "prior box: lo/hi length mismatch");
  for (Eigen::Index i = 0; i < lo.size(); ++i)
    if (!(lo[i] < hi[i])) throw std::invalid_argument("prior box: empty interior in coordinate " + std::to_string(i));
  if (!(lambda_bd > 0.0)) throw std::invalid_argument("prior box: lambda_bd must be positive");
}

void NoiseModel::validate() const {
  if (!(b > 0.0) || !std::isfinite(b)) throw std::invalid_argument("noise model: b must be positive");
  require_shape(w.size() > 0, "noise model: empty weight vector");
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (!(w[i] > 0.0)) throw std::invalid_argument("noise model: weights must be positive");
}

BoxCoordinates::BoxCoordinates(const PriorBox& box) : mid(0.5 * (box.lo + box.hi)), half(0.5 * (box.hi - box.lo)) {}

Matrix BoxCoordinates::to_physical(const Matrix& z) const {
  require_shape(z.rows() == mid.size(), "box coordinates: dimension mismatch");
  return (half.asDiagonal() * z).colwise() + mid;
}

Matrix BoxCoordinates::to_standard(const Matrix& x) const {
  require_shape(x.rows() == mid.size(), "box coordinates: dimension mismatch");
  return half.cwiseInverse().asDiagonal() * (x.colwise() - mid);
}

double log_likelihood(const NoiseModel& noise, const Vector& forward_y, const Vector& y) {
  noise.validate();
  require_shape(forward_y.size() == y.size() && y.size() == noise.w.size(),
                "log_likelihood: y, f(x) and w must have equal length");
  const double n = static_cast<double>(y.size());
  const double quad = ((y - forward_y).array() / (noise.b * noise.w.array())).square().sum();
  return -0.5 * quad - 0.5 * n * std::log(2.0 * std::numbers::pi) - n * std::log(noise.b) -
         noise.w.array().log().sum();
}

namespace {

double softplus(double u, double beta) {
  const double t = beta * u;
  // log(1 + e^t) without overflow
  return (t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t))) / beta;
}

double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

struct Penalty {
  double value;
  double slope;
};

Penalty hinge(double u, double beta) {
  if (beta > 0.0) return {softplus(u, beta), logistic(beta * u)};
  return u > 0.0 ? Penalty{u, 1.0} : Penalty{0.0, 0.0};
}

}  // namespace

double boundary_loss(const PriorBox& prior, const Vector& x, double smooth_beta) {
  require_shape(x.size() == prior.lo.size() && prior.hi.size() == prior.lo.size(),
                "boundary_loss: point has wrong dimension");
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    total += hinge(x[i] - prior.hi[i], smooth_beta).value + hinge(prior.lo[i] - x[i], smooth_beta).value;
  return prior.lambda_bd * total;
}

double log_prior(const PriorBox& prior, const Vector& x) {
  return prior.contains(x) ? 0.0 : -std::numeric_limits<double>::infinity();
}

InnLoss inn_loss_batch(const FlowModel& flow, const ForwardModel& forward, const Measurement& measurement,
                       const NoiseModel& noise, const PriorBox& prior, const Matrix& xi_batch,
                       const LossOptions& options) {
  noise.validate();
  require_shape(prior.dim() == flow.dim && forward.input_dim() == flow.dim,
                "inn_loss_batch: flow, prior and forward model dimensions differ");
  require_shape(measurement.y.size() == forward.output_dim() && noise.w.size() == forward.output_dim(),
                "inn_loss_batch: measurement length differs from forward output");
  require_shape(xi_batch.rows() == flow.dim && xi_batch.cols() > 0, "inn_loss_batch: bad reference batch shape");

  const Eigen::Index batch = xi_batch.cols();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  const BoxCoordinates coords(prior);

  const FlowEval eval = flow_forward(flow, xi_batch);
  const Matrix& z = eval.output;
  const Matrix x = coords.to_physical(z);
  const Matrix fx = forward.eval(x);

  // r = (y - f(x)) / w per column
  const Matrix r = ((-fx).colwise() + measurement.y).array().colwise() / noise.w.array();
  const double inv_b2 = 1.0 / (noise.b * noise.b);
  const Vector data = 0.5 * inv_b2 * r.colwise().squaredNorm().transpose();

  Vector boundary = Vector::Zero(batch);
  Matrix g_z_bd = Matrix::Zero(z.rows(), batch);
  const double beta = options.boundary_smooth_beta;
  for (Eigen::Index j = 0; j < batch; ++j) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const auto up = hinge(z(i, j) - 1.0, beta);
      const auto down = hinge(-1.0 - z(i, j), beta);
      boundary[j] += up.value + down.value;
      g_z_bd(i, j) = up.slope - down.slope;
    }
  }
  boundary *= prior.lambda_bd;

  InnLoss out;
  out.per_sample = data + boundary - eval.log_det;
  out.data = data.mean();
  out.boundary = boundary.mean();
  out.log_det = eval.log_det.mean();
  out.loss = out.per_sample.mean();
  if (!std::isfinite(out.data)) throw NumericalError("inn_loss_batch: data term is non-finite");
  if (!std::isfinite(out.boundary)) throw NumericalError("inn_loss_batch: boundary term is non-finite");
  if (!std::isfinite(out.log_det)) throw NumericalError("inn_loss_batch: log-determinant term is non-finite");

  // d data / d f = -(1/b^2) r / w
  const Matrix g_fx = (-inv_b2 * inv_batch) * (r.array().colwise() / noise.w.array()).matrix();
  const Matrix g_x = forward.vjp(x, g_fx);
  Matrix g_z = coords.half.asDiagonal() * g_x;
  g_z += (prior.lambda_bd * inv_batch) * g_z_bd;
  const Vector g_ld = Vector::Constant(batch, -inv_batch);
  out.grads = flow_backward(flow, eval, g_z, g_ld);
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 0 || updates_per_epoch < 1 || batch_size < 1)
    throw std::invalid_argument("train config: epochs >= 0, updates and batch size >= 1 required");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (lr_decay_every < 1) throw std::invalid_argument("train config: lr_decay_every must be positive");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0))
    throw std::invalid_argument("train config: lr_decay_factor must lie in (0, 1)");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"updates_per_epoch", cfg.updates_per_epoch},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"lr_decay_every", cfg.lr_decay_every},
          {"lr_decay_factor", cfg.lr_decay_factor},
          {"seed", cfg.seed},
          {"grad_clip", cfg.grad_clip},
          {"boundary_smooth_beta", cfg.boundary_smooth_beta}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  TrainConfig cfg;
  cfg.epochs = doc.value("epochs", cfg.epochs);
  cfg.updates_per_epoch = doc.value("updates_per_epoch", cfg.updates_per_epoch);
  cfg.batch_size = doc.value("batch_size", cfg.batch_size);
  cfg.lr = doc.value("lr", cfg.lr);
  cfg.lr_decay_every = doc.value("lr_decay_every", cfg.lr_decay_every);
  cfg.lr_decay_factor = doc.value("lr_decay_factor", cfg.lr_decay_factor);
  cfg.seed = doc.value("seed", cfg.seed);
  cfg.grad_clip = doc.value("grad_clip", cfg.grad_clip);
  cfg.boundary_smooth_beta = doc.value("boundary_smooth_beta", cfg.boundary_smooth_beta);
  cfg.validate();
  return cfg;
}

namespace {

struct BlockOptimizer {
  std::array<AdamState, 4> adam;  // s2, t2, s1, t1
};

}  // namespace

TrainedInn train_inn(FlowModel flow, const ForwardModel& forward, const Measurement& measurement,
                     const NoiseModel& noise, const PriorBox& prior, const TrainConfig& cfg) {
  cfg.validate();
  prior.validate();
  noise.validate();
  flow.validate();

  TrainedInn result;
  result.coords = BoxCoordinates(prior);
  result.config_hash = hash_hex(fnv1a64(to_json(cfg).dump()));
  result.names = default_names(flow.dim);

  std::vector<BlockOptimizer> opt(flow.blocks.size());
  for (std::size_t l = 0; l < flow.blocks.size(); ++l) {
    auto& b = flow.blocks[l];
    opt[l].adam = {make_adam_state(b.s2, cfg.lr), make_adam_state(b.t2, cfg.lr), make_adam_state(b.s1, cfg.lr),
                   make_adam_state(b.t1, cfg.lr)};
  }

  Rng rng(cfg.seed);
  const LossOptions options{cfg.boundary_smooth_beta};
  double lr = cfg.lr;
  long update = 0;
  FlowModel previous = flow;
  for (int epoch = 0; epoch < cfg.epochs && !result.diverged; ++epoch) {
    if (epoch > 0 && epoch % cfg.lr_decay_every == 0) lr *= cfg.lr_decay_factor;
    for (auto& o : opt)
      for (auto& a : o.adam) a.learning_rate = lr;

    for (int k = 0; k < cfg.updates_per_epoch; ++k, ++update) {
      const Matrix xi = standard_normal(flow.dim, cfg.batch_size, rng);
      InnLoss loss;
      try {
        loss = inn_loss_batch(flow, forward, measurement, noise, prior, xi, options);
      } catch (const NumericalError& e) {
        result.diverged = true;
        result.message = "update " + std::to_string(update) + ": " + e.what();
      }
      if (!result.diverged && !loss.grads.d_input.allFinite()) {
        result.diverged = true;
        result.message = "update " + std::to_string(update) + ": non-finite gradient";
      }
      if (result.diverged) {
        flow = std::move(previous);
        break;
      }
      result.trace.push_back({update, loss.loss, lr});

      if (cfg.grad_clip > 0.0) {
        const double norm = std::sqrt(loss.grads.squared_norm());
        if (norm > cfg.grad_clip) loss.grads.scale(cfg.grad_clip / norm);
      }
      previous = flow;
      for (std::size_t l = 0; l < flow.blocks.size(); ++l) {
        auto& b = flow.blocks[l];
        const auto& g = loss.grads.blocks[l];
        adam_step(b.s2, g.s2, opt[l].adam[0]);
        adam_step(b.t2, g.t2, opt[l].adam[1]);
        adam_step(b.s1, g.s1, opt[l].adam[2]);
        adam_step(b.t1, g.t1, opt[l].adam[3]);
      }
    }
  }
  result.flow = std::move(flow);
  return result;
}

SampleSet sample_posterior_inn(const TrainedInn& trained, Eigen::Index count, std::uint64_t seed) {
  require_shape(count >= 0, "sample_posterior_inn: negative count");
  const int d = trained.flow.dim;
  SampleSet out;
  out.names = trained.names.size() == static_cast<std::size_t>(d) ? trained.names : default_names(d);
  out.values.resize(count, d);
  out.provenance.method = "inn";
  out.provenance.seed = seed;
  out.provenance.config_hash = trained.config_hash;

  Rng rng(seed);
  constexpr Eigen::Index chunk = 256;
  for (Eigen::Index start = 0; start < count; start += chunk) {
    const Eigen::Index m = std::min(chunk, count - start);
    const Matrix xi = standard_normal(d, m, rng);
    const Matrix x = trained.coords.to_physical(flow_apply(trained.flow, xi).output);
    out.values.middleRows(start, m) = x.transpose();
  }
  return out;
}

void write_trace_csv(const std::string& path, const std::vector<TraceEntry>& trace) {
  std::ostringstream out;
  out << "update,loss,lr\n";
  for (const auto& e : trace)
    out << e.update << "," << csv::format_double(e.loss) << "," << csv::format_double(e.lr) << "\n";
  csv::write_file(path, out.str());
}

std::vector<double> smoothed_losses(const std::vector<TraceEntry>& trace, std::size_t window) {
  if (window == 0) throw std::invalid_argument("smoothed_losses: window must be at least 1");
  std::vector<double> out(trace.size());
  double running = 0.0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    running += trace[i].loss;
    if (i >= window) running -= trace[i - window].loss;
    out[i] = running / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace invflow
