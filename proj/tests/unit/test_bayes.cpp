#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"

#include "invflow/bayes.hpp"
#include "invflow/harness.hpp"
#include "support/linear_gaussian.hpp"

using namespace invflow;
using invflow::testing::linear_gaussian;

namespace {

void randomize(FlowModel& f, Rng& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& b : f.blocks)
    for (auto* net : {&b.s2, &b.t2, &b.s1, &b.t1})
      for (auto& l : net->layers) {
        for (Eigen::Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] += u(rng);
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] += u(rng);
      }
}

PriorBox cube(int d, double lambda = 10.0) {
  return PriorBox{Vector::Constant(d, -1.0), Vector::Constant(d, 1.0), lambda};
}

double normal_logpdf(double r, double sigma) {
  return -0.5 * (r / sigma) * (r / sigma) - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

std::vector<double> column(const SampleSet& s, int i) {
  const Vector c = s.values.col(i);
  return {c.data(), c.data() + c.size()};
}

TrainConfig quick_train(int epochs = 20) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.lr = 3e-3;
  cfg.lr_decay_every = 10;
  cfg.seed = 3;
  return cfg;
}

FlowModel small_flow(int d, std::uint64_t seed) {
  Rng rng(seed);
  return build_flow(FlowShape{d, 4, 32, 2, 2.0}, rng);
}

}  // namespace

TEST_CASE("log likelihood normalization") {
  Vector y(1), w(1);
  y << 0.7;
  w << 1.0;
  CHECK(log_likelihood(NoiseModel{1.0, w}, y, y) == doctest::Approx(-0.918939).epsilon(1e-6));

  Vector y5 = Vector::LinSpaced(5, 1.0, 2.0), w5 = Vector::Constant(5, 0.3);
  const double l1 = log_likelihood(NoiseModel{0.2, w5}, y5, y5);
  const double l2 = log_likelihood(NoiseModel{0.4, w5}, y5, y5);
  CHECK(l2 - l1 == doctest::Approx(-5.0 * std::log(2.0)).epsilon(1e-12));

  Vector w3(3), r(3), y3(3);
  w3 << 1, 2, 4;
  r << 0.1, 0.2, 0.4;
  y3 << 3.0, -1.0, 0.5;
  const double b = 0.1;
  double oracle = 0.0;
  for (int i = 0; i < 3; ++i) oracle += normal_logpdf(r[i], b * w3[i]);
  CHECK(std::abs(log_likelihood(NoiseModel{b, w3}, y3 - r, y3) - oracle) < 1e-12);

  CHECK_THROWS_AS(log_likelihood(NoiseModel{0.0, w3}, y3, y3), std::invalid_argument);
  CHECK_THROWS_AS(log_likelihood(NoiseModel{-1.0, w3}, y3, y3), std::invalid_argument);
  Vector wbad = w3;
  wbad[1] = 0.0;
  CHECK_THROWS_AS(log_likelihood(NoiseModel{b, wbad}, y3, y3), std::invalid_argument);
  CHECK_THROWS_AS(log_likelihood(NoiseModel{b, w3}, y3.head(2), y3), ShapeError);
}

TEST_CASE("boundary loss") {
  const auto box = PriorBox::grating(1.0);
  Vector x = 0.5 * (box.lo + box.hi);
  CHECK(boundary_loss(box, x) == 0.0);
  CHECK(boundary_loss(box, box.lo) == 0.0);
  CHECK(boundary_loss(box, box.hi) == 0.0);
  x[0] = 110.0;
  CHECK(boundary_loss(box, x) == doctest::Approx(10.0).epsilon(1e-15));

  auto box10 = PriorBox::grating(10.0);
  Vector y = 0.5 * (box10.lo + box10.hi);
  y[4] = box10.lo[4] - 0.25;
  CHECK(boundary_loss(box10, y) == doctest::Approx(2.5).epsilon(1e-15));
  y[4] = box10.lo[4] - 0.5;
  CHECK(boundary_loss(box10, y) == doctest::Approx(5.0).epsilon(1e-15));

  // Softplus variant is smooth, positive, and approaches the hinge far from the edge.
  const auto c = cube(1, 1.0);
  Vector in(1), out(1);
  in << 0.0;
  out << 3.0;
  CHECK(boundary_loss(c, in, 10.0) > 0.0);
  CHECK(boundary_loss(c, in, 10.0) < 1e-5);
  CHECK(boundary_loss(c, out, 10.0) == doctest::Approx(2.0).epsilon(1e-8));
  CHECK_THROWS_AS(boundary_loss(c, Vector(Vector::Zero(2))), ShapeError);
}

TEST_CASE("log prior is closed-box uniform") {
  const auto box = PriorBox::grating();
  const Vector mid = 0.5 * (box.lo + box.hi);
  CHECK(log_prior(box, mid) == 0.0);
  CHECK(log_prior(box, box.lo) == 0.0);
  CHECK(log_prior(box, box.hi) == 0.0);
  Vector out = mid;
  out[6] = box.hi[6] + 1e-12;
  CHECK(std::isinf(log_prior(box, out)));
  CHECK(log_prior(box, out) < 0.0);
}

TEST_CASE("inn loss basic values") {
  const auto f = ForwardModel::linear(Matrix::Identity(2, 2), Vector(Vector::Zero(2)));
  const Measurement m{Vector::Zero(2), Vector::Ones(2), {}, {}};
  Rng rng(1);
  const auto flow = build_flow(FlowShape{2, 3, 8, 2, 2.0}, rng);
  const auto l = inn_loss_batch(flow, f, m, NoiseModel{0.1, m.w}, cube(2), Matrix::Zero(2, 1));
  CHECK(l.loss == 0.0);
  CHECK(l.data == 0.0);
  CHECK(l.boundary == 0.0);
  CHECK(l.log_det == 0.0);

  // Large b: the data term vanishes and only boundary minus log-det remain.
  auto flow2 = build_flow(FlowShape{2, 2, 8, 2, 2.0}, rng);
  randomize(flow2, rng, 0.4);
  const Matrix xi = 2.0 * standard_normal(2, 16, rng);
  const Measurement m2{Vector::Constant(2, 0.3), Vector::Ones(2), {}, {}};
  const auto big = inn_loss_batch(flow2, f, m2, NoiseModel{1e8, m2.w}, cube(2), xi);
  CHECK(big.data < 1e-12);
  CHECK(big.boundary > 0.0);
  CHECK(big.loss == doctest::Approx(big.boundary - big.log_det).epsilon(1e-12));

  CHECK_THROWS_AS(inn_loss_batch(flow2, f, m2, NoiseModel{0.1, m2.w}, cube(3), xi), ShapeError);
  CHECK_THROWS_AS(inn_loss_batch(flow2, f, m2, NoiseModel{0.0, m2.w}, cube(2), xi), std::invalid_argument);
}

TEST_CASE("inn loss equals negative log posterior terms per sample") {
  const auto lg = linear_gaussian(0.1);
  Rng rng(4);
  auto flow = build_flow(FlowShape{3, 3, 8, 2, 2.0}, rng);
  randomize(flow, rng, 0.3);
  const Matrix xi = 1.5 * standard_normal(3, 40, rng);
  const auto l = inn_loss_batch(flow, lg.forward, lg.measurement, lg.noise, lg.prior, xi);

  const BoxCoordinates coords(lg.prior);
  const auto e = flow_apply(flow, xi);
  const Matrix x = coords.to_physical(e.output);
  const double n = 6.0;
  const double constant = 0.5 * n * std::log(2.0 * std::numbers::pi) + n * std::log(lg.noise.b) +
                          lg.noise.w.array().log().sum();
  const auto unit = cube(3, lg.prior.lambda_bd);
  bool any_outside = false;
  for (int j = 0; j < 40; ++j) {
    const Vector z = e.output.col(j);
    any_outside = any_outside || boundary_loss(unit, z) > 0.0;
    const double expected = -log_likelihood(lg.noise, eval_forward(lg.forward, x.col(j)), lg.measurement.y) +
                            boundary_loss(unit, z) - e.log_det[j] - constant;
    CHECK(l.per_sample[j] == doctest::Approx(expected).epsilon(1e-11));
  }
  CHECK(any_outside);
  CHECK(l.loss == doctest::Approx(l.per_sample.mean()).epsilon(1e-14));
}

TEST_CASE("inn loss gradient matches central differences") {
  for (double beta : {0.0, 10.0}) {
    CAPTURE(beta);
    Matrix A(4, 3);
    A << 1.0, 0.5, -0.3, 0.2, -1.1, 0.7, 0.4, 0.3, 0.9, -0.6, 0.8, 0.1;
    const auto f = ForwardModel::linear(A, Vector(Vector::Constant(4, 0.2)));
    Vector y(4);
    y << 0.5, -0.4, 1.2, 0.3;
    const Measurement m{y, Vector::Constant(4, 0.5), {}, {}};
    const NoiseModel noise{0.5, m.w};
    // Wide box for the exact hinge keeps every sample away from the kink.
    const PriorBox prior = beta > 0.0 ? PriorBox{Vector::Constant(3, -0.5), Vector::Constant(3, 0.5), 10.0}
                                      : PriorBox{Vector::Constant(3, -50.0), Vector::Constant(3, 50.0), 10.0};
    const LossOptions opt{beta};
    Rng rng(9);
    auto flow = build_flow(FlowShape{3, 2, 8, 2, 2.0}, rng);
    randomize(flow, rng, 0.3);
    const Matrix xi = standard_normal(3, 6, rng);
    const auto l = inn_loss_batch(flow, f, m, noise, prior, xi, opt);
    if (beta > 0.0) CHECK(l.boundary > 1e-3);

    auto value = [&] { return inn_loss_batch(flow, f, m, noise, prior, xi, opt).loss; };
    const double h = 1e-5;
    double worst = 0.0;
    long probed = 0;
    for (std::size_t b = 0; b < flow.blocks.size(); ++b) {
      auto& blk = flow.blocks[b];
      const auto& g = l.grads.blocks[b];
      const std::vector<std::pair<MlpParams*, const std::vector<DenseLayer>*>> nets = {
          {&blk.s2, &g.s2}, {&blk.t2, &g.t2}, {&blk.s1, &g.s1}, {&blk.t1, &g.t1}};
      for (auto [net, grad] : nets)
        for (std::size_t k = 0; k < net->layers.size(); ++k) {
          auto probe = [&](double& p, double analytic) {
            const double p0 = p;
            p = p0 + h;
            const double fp = value();
            p = p0 - h;
            const double fm = value();
            p = p0;
            const double fd = (fp - fm) / (2 * h);
            worst = std::max(worst, std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-6}));
            ++probed;
          };
          auto& W = net->layers[k].weights;
          for (Eigen::Index i = 0; i < W.size(); ++i) probe(W.data()[i], (*grad)[k].weights.data()[i]);
          auto& bias = net->layers[k].bias;
          for (Eigen::Index i = 0; i < bias.size(); ++i) probe(bias[i], (*grad)[k].bias[i]);
        }
    }
    CHECK(probed == static_cast<long>(flow.num_parameters()));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("nonlinear forward gradient") {
  // Curve model restricted to 7 coordinates exercises the forward vjp path.
  const auto f = ForwardModel::synthetic_curve();
  const auto prior = PriorBox::grating();
  Rng rng(2);
  const auto m = synthesize_measurement(f, 0.5 * (prior.lo + prior.hi), 0.05, rng);
  auto flow = build_flow(FlowShape{7, 2, 8, 2, 2.0}, rng);
  randomize(flow, rng, 0.1);
  const Matrix xi = 0.3 * standard_normal(7, 4, rng);
  const NoiseModel noise{0.05, m.w};
  const auto l = inn_loss_batch(flow, f, m, noise, prior, xi);
  auto& bias = flow.blocks[1].t1.layers.back().bias;
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < bias.size(); ++i) {
    const double b0 = bias[i];
    bias[i] = b0 + h;
    const double fp = inn_loss_batch(flow, f, m, noise, prior, xi).loss;
    bias[i] = b0 - h;
    const double fm = inn_loss_batch(flow, f, m, noise, prior, xi).loss;
    bias[i] = b0;
    const double fd = (fp - fm) / (2 * h);
    const double an = l.grads.blocks[1].t1.back().bias[i];
    CHECK(std::abs(fd - an) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("train config defaults and validation") {
  const TrainConfig cfg;
  CHECK(cfg.epochs == 80);
  CHECK(cfg.updates_per_epoch == 40);
  CHECK(cfg.batch_size == 200);
  CHECK(cfg.lr_decay_every == 20);
  CHECK(cfg.lr_decay_factor == 0.1);
  CHECK_NOTHROW(cfg.validate());

  TrainConfig bad = cfg;
  bad.lr_decay_factor = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  TrainConfig custom = cfg;
  custom.epochs = 7;
  custom.lr = 2.5e-4;
  custom.seed = 99;
  custom.boundary_smooth_beta = 10.0;
  const auto back = train_config_from_json(nlohmann::json::parse(to_json(custom).dump()));
  CHECK(to_json(back) == to_json(custom));
  CHECK(train_config_from_json(nlohmann::json::object()).epochs == 80);
}

TEST_CASE("zero epochs leaves the flow untouched") {
  const auto lg = linear_gaussian(0.1);
  const auto flow = small_flow(3, 1);
  TrainConfig cfg = quick_train(0);
  const auto t = train_inn(flow, lg.forward, lg.measurement, lg.noise, lg.prior, cfg);
  CHECK(t.trace.empty());
  CHECK_FALSE(t.diverged);
  CHECK(to_json(t.flow) == to_json(flow));
}

TEST_CASE("training on the linear Gaussian benchmark") {
  const auto lg = linear_gaussian(0.1);
  const auto t = train_inn(small_flow(3, 2), lg.forward, lg.measurement, lg.noise, lg.prior, quick_train());
  REQUIRE_FALSE(t.diverged);
  REQUIRE(t.trace.size() == 800);
  CHECK(t.trace.front().update == 0);
  CHECK(t.trace.back().update == 799);
  CHECK(t.trace[399].lr == doctest::Approx(3e-3));
  CHECK(t.trace[400].lr == doctest::Approx(3e-4));

  const auto smooth = smoothed_losses(t.trace, 50);
  CHECK(smooth.back() <= smooth[49]);

  const auto s = sample_posterior_inn(t, 20000, 5);
  CHECK(s.count() == 20000);
  CHECK(s.provenance.method == "inn");
  CHECK(s.provenance.seed == 5);
  CHECK(s.provenance.config_hash == t.config_hash);
  long inside = 0;
  for (Eigen::Index i = 0; i < s.count(); ++i) inside += lg.prior.contains(s.values.row(i).transpose());
  CHECK(inside >= 0.99 * s.count());

  const Vector mean = s.mean(), sd = s.stddev(), ps = lg.post_std();
  for (int i = 0; i < 3; ++i) {
    CAPTURE(i);
    CHECK(std::abs(mean[i] - lg.post_mean[i]) < 0.2 * ps[i]);
    CHECK(std::abs(sd[i] / ps[i] - 1.0) < 0.2);
  }
}

TEST_CASE("posterior width shrinks with b") {
  Vector prev;
  for (double b : {0.1, 0.03, 0.01}) {
    CAPTURE(b);
    const auto lg = linear_gaussian(b);
    const auto t = train_inn(small_flow(3, 2), lg.forward, lg.measurement, lg.noise, lg.prior, quick_train());
    REQUIRE_FALSE(t.diverged);
    const Vector sd = sample_posterior_inn(t, 20000, 1).stddev();
    if (prev.size())
      for (int i = 0; i < 3; ++i) CHECK(sd[i] <= 1.1 * prev[i]);
    prev = sd;
  }
}

TEST_CASE("sampling an untrained flow") {
  Rng rng(1);
  TrainedInn t;
  t.flow = build_flow(FlowShape{3, 4, 8, 2, 2.0}, rng);
  t.coords = BoxCoordinates(cube(3));
  const auto s = sample_posterior_inn(t, 20000, 42);
  for (int i = 0; i < 3; ++i) CHECK(ks_standard_normal(column(s, i)) < 0.02);

  const auto again = sample_posterior_inn(t, 20000, 42);
  CHECK(again.values == s.values);
  CHECK(again.names == s.names);

  const auto none = sample_posterior_inn(t, 0, 3);
  CHECK(none.count() == 0);
  CHECK(none.dim() == 3);
  CHECK(none.names.size() == 3);
  CHECK(none.provenance.method == "inn");
}

TEST_CASE("divergence rolls back and stops") {
  const auto lg = linear_gaussian(0.1);
  Rng rng(2);
  auto flow = build_flow(FlowShape{3, 2, 8, 2, kNoClamp}, rng);
  TrainConfig cfg = quick_train(5);
  cfg.lr = 50.0;
  cfg.grad_clip = 0.0;
  const auto t = train_inn(flow, lg.forward, lg.measurement, lg.noise, lg.prior, cfg);
  CHECK(t.diverged);
  CHECK_FALSE(t.message.empty());
  CHECK(t.trace.size() < 200);
  for (const auto& e : t.trace) CHECK(std::isfinite(e.loss));
  // The returned flow is the last finite state and still evaluates.
  CHECK_NOTHROW(inn_loss_batch(t.flow, lg.forward, lg.measurement, lg.noise, lg.prior, standard_normal(3, 8, rng)));
}

TEST_CASE("trace csv and smoothing") {
  std::vector<TraceEntry> trace = {{0, 4.0, 1e-3}, {1, 2.0, 1e-3}, {2, 0.5, 1e-4}};
  const auto s = smoothed_losses(trace, 2);
  CHECK(s == std::vector<double>{4.0, 3.0, 1.25});
  CHECK(smoothed_losses(trace, 10).back() == doctest::Approx(6.5 / 3));
  CHECK_THROWS_AS(smoothed_losses(trace, 0), std::invalid_argument);

  const auto path = (std::filesystem::temp_directory_path() / "invflow_trace_test.csv").string();
  write_trace_csv(path, trace);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "update,loss,lr");
  std::getline(in, line);
  CHECK(line == "0,4,0.001");
  std::filesystem::remove(path);
}
