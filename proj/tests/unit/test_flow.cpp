#include <cmath>
#include <numeric>

#include "doctest.h"

#include "invflow/flow.hpp"

using namespace invflow;

namespace {

// Replaces the zero last layers with random weights so blocks are not the identity.
void randomize(FlowModel& f, Rng& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& b : f.blocks)
    for (auto* net : {&b.s2, &b.t2, &b.s1, &b.t1})
      for (auto& l : net->layers) {
        for (Eigen::Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] += u(rng);
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] += u(rng);
      }
}

FlowModel random_flow(int d, int blocks, int width, std::uint64_t seed, double scale = 0.3,
                      double clamp = 2.0) {
  Rng rng(seed);
  auto f = build_flow(FlowShape{d, blocks, width, 2, clamp}, rng);
  randomize(f, rng, scale);
  return f;
}

MlpParams constant_net(int in, int out, double value) {
  MlpParams p;
  p.layer_dims = {in, out};
  p.layers = {{Matrix::Zero(out, in), Vector::Constant(out, value)}};
  return p;
}

Matrix fd_jacobian(const FlowModel& f, const Vector& xi, double h) {
  const int d = f.dim;
  Matrix J(d, d);
  for (int j = 0; j < d; ++j) {
    Vector p = xi, m = xi;
    p[j] += h;
    m[j] -= h;
    J.col(j) = (flow_forward(f, p).output - flow_forward(f, m).output) / (2 * h);
  }
  return J;
}

double objective(const FlowModel& f, const Matrix& xi, const Matrix& d_out, const Vector& d_ld) {
  const auto e = flow_apply(f, xi);
  return (e.output.array() * d_out.array()).sum() + e.log_det.dot(d_ld);
}

}  // namespace

TEST_CASE("fresh flow is a permutation with zero log-det") {
  Rng rng(0);
  const auto f = build_flow(FlowShape{5, 4, 8, 2, 2.0}, rng);
  Rng r(1);
  const Matrix xi = standard_normal(5, 6, r);
  const auto e = flow_forward(f, xi);
  Matrix expect = xi;
  for (const auto& perm : f.perms) {
    Matrix next(5, 6);
    for (int i = 0; i < 5; ++i) next.row(i) = expect.row(perm[i]);
    expect = next;
  }
  CHECK(e.output == expect);
  CHECK(e.log_det.isZero(0.0));
  for (const auto& t : e.tapes) CHECK(t.log_det.isZero(0.0));
}

TEST_CASE("identity permutations and zero subnets give the identity map") {
  Rng rng(0);
  auto f = build_flow(FlowShape{4, 3, 6, 2, 2.0}, rng);
  for (auto& p : f.perms) std::iota(p.begin(), p.end(), 0);
  Vector xi(4);
  xi << 0.3, -1.2, 2.5, 0.0;
  const auto e = flow_forward(f, xi);
  CHECK(Vector(e.output.col(0)) == xi);
  CHECK(e.log_det[0] == 0.0);
  CHECK(flow_inverse(f, xi) == xi);
}

TEST_CASE("constant-scale block algebra") {
  FlowModel f;
  f.dim = 2;
  f.clamp = kNoClamp;
  f.perms = {{0, 1}};
  CouplingBlock b;
  b.d1 = 1;
  b.d2 = 1;
  b.s2 = constant_net(1, 1, std::log(2.0));
  b.t2 = constant_net(1, 1, 0.0);
  b.s1 = constant_net(1, 1, 0.0);
  b.t1 = constant_net(1, 1, 5.0);
  f.blocks = {b};
  f.validate();
  const auto e = flow_forward(f, Vector(Vector::Ones(2)));
  CHECK(e.output(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(e.output(1, 0) == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(e.log_det[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  Vector x(2);
  x << 2.0, 6.0;
  const Vector xi = flow_inverse(f, x);
  CHECK(xi[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(xi[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("clamp is the soft tanh form") {
  CHECK(clamp_scale(0.0, 2.0) == 0.0);
  CHECK(clamp_scale(1.0, 2.0) == doctest::Approx(2.0 * std::tanh(0.5)));
  CHECK(std::abs(clamp_scale(1e3, 2.0)) <= 2.0);
  CHECK(clamp_scale(7.5, kNoClamp) == 7.5);
  CHECK(clamp_scale_derivative(0.0, 2.0) == 1.0);
  const double h = 1e-6;
  CHECK(clamp_scale_derivative(0.8, 2.0) ==
        doctest::Approx((clamp_scale(0.8 + h, 2.0) - clamp_scale(0.8 - h, 2.0)) / (2 * h)).epsilon(1e-8));
}

TEST_CASE("round trip on the paper-sized flow") {
  const auto f = random_flow(7, 10, 32, 0, 0.05);
  Rng rng(5);
  const Matrix xi = standard_normal(7, 1000, rng);
  const Matrix x = flow_forward(f, xi).output;
  CHECK((flow_inverse(f, x) - xi).cwiseAbs().maxCoeff() < 1e-8);
  const Matrix x2 = flow_forward(f, flow_inverse(f, xi)).output;
  CHECK((x2 - xi).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("round trip without clamping") {
  const auto f = random_flow(4, 3, 8, 2, 0.2, kNoClamp);
  Rng rng(3);
  const Matrix xi = standard_normal(4, 200, rng);
  CHECK((flow_inverse(f, flow_apply(f, xi).output) - xi).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("log-det matches the finite-difference Jacobian") {
  const auto f = random_flow(4, 3, 8, 0);
  Rng rng(0);
  for (int rep = 0; rep < 10; ++rep) {
    const Vector xi = standard_normal(4, 1, rng).col(0);
    const double det = std::abs(fd_jacobian(f, xi, 1e-6).determinant());
    const double ld = flow_forward(f, xi).log_det[0];
    CHECK(std::abs(std::exp(ld) - det) / det < 1e-5);
  }
}

TEST_CASE("log-det is the sum of block contributions") {
  const auto f = random_flow(6, 5, 8, 3);
  Rng rng(1);
  const auto e = flow_forward(f, standard_normal(6, 8, rng));
  Vector sum = Vector::Zero(8);
  for (const auto& t : e.tapes) sum += t.log_det;
  CHECK((sum - e.log_det).cwiseAbs().maxCoeff() < 1e-13);
  for (const auto& t : e.tapes) {
    const Vector block = t.s2_hat.colwise().sum().transpose() + t.s1_hat.colwise().sum().transpose();
    CHECK((block - t.log_det).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("backward with zero cotangents is zero") {
  const auto f = random_flow(3, 2, 8, 4);
  Rng rng(2);
  const Matrix xi = standard_normal(3, 5, rng);
  const auto e = flow_forward(f, xi);
  const auto g = flow_backward(f, e, Matrix::Zero(3, 5), Vector(Vector::Zero(5)));
  CHECK(g.squared_norm() == 0.0);
  CHECK(g.d_input.isZero(0.0));
}

TEST_CASE("identity flow: log-det gradient w.r.t. scale biases is the batch size") {
  Rng rng(0);
  const auto f = build_flow(FlowShape{5, 3, 8, 2, 2.0}, rng);
  Rng r(9);
  const int batch = 7;
  const auto e = flow_forward(f, standard_normal(5, batch, r));
  const auto g = flow_backward(f, e, Matrix::Zero(5, batch), Vector::Ones(batch));
  for (const auto& bg : g.blocks) {
    CHECK(bg.s2.back().bias.isApproxToConstant(batch));
    CHECK(bg.s1.back().bias.isApproxToConstant(batch));
    CHECK(bg.t2.back().bias.isZero(0.0));
    CHECK(bg.t1.back().bias.isZero(0.0));
  }
}

TEST_CASE("backward matches central differences") {
  for (double clamp : {2.0, kNoClamp}) {
    CAPTURE(clamp);
    auto f = random_flow(3, 2, 8, 7, 0.3, clamp);
    Rng rng(8);
    const int batch = 4;
    const Matrix xi = standard_normal(3, batch, rng);
    const Matrix d_out = standard_normal(3, batch, rng);
    const Vector d_ld = standard_normal(batch, 1, rng).col(0);
    const auto g = flow_backward(f, flow_forward(f, xi), d_out, d_ld);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t l = 0; l < f.blocks.size(); ++l) {
      auto& b = f.blocks[l];
      const auto& bg = g.blocks[l];
      const std::vector<std::pair<MlpParams*, const std::vector<DenseLayer>*>> nets = {
          {&b.s2, &bg.s2}, {&b.t2, &bg.t2}, {&b.s1, &bg.s1}, {&b.t1, &bg.t1}};
      for (auto [net, grad] : nets)
        for (std::size_t k = 0; k < net->layers.size(); ++k) {
          auto probe = [&](double& p, double analytic) {
            const double p0 = p;
            p = p0 + h;
            const double fp = objective(f, xi, d_out, d_ld);
            p = p0 - h;
            const double fm = objective(f, xi, d_out, d_ld);
            p = p0;
            const double fd = (fp - fm) / (2 * h);
            const double scale = std::max({std::abs(fd), std::abs(analytic), 1e-6});
            worst = std::max(worst, std::abs(fd - analytic) / scale);
          };
          auto& W = net->layers[k].weights;
          for (Eigen::Index i = 0; i < W.size(); ++i) probe(W.data()[i], (*grad)[k].weights.data()[i]);
          auto& bias = net->layers[k].bias;
          for (Eigen::Index i = 0; i < bias.size(); ++i) probe(bias[i], (*grad)[k].bias[i]);
        }
    }
    CHECK(worst < 1e-4);

    // Input gradient.
    Matrix fd(3, batch);
    for (int c = 0; c < batch; ++c)
      for (int i = 0; i < 3; ++i) {
        Matrix p = xi, m = xi;
        p(i, c) += h;
        m(i, c) -= h;
        fd(i, c) = (objective(f, p, d_out, d_ld) - objective(f, m, d_out, d_ld)) / (2 * h);
      }
    CHECK((fd - g.d_input).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, fd.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("stale tapes are rejected") {
  const auto f = random_flow(4, 2, 6, 1);
  const auto g = random_flow(4, 3, 6, 1);
  Rng rng(3);
  const auto e = flow_forward(f, standard_normal(4, 2, rng));
  CHECK_THROWS_AS(flow_backward(g, e, Matrix::Zero(4, 2), Vector(Vector::Zero(2))), ShapeError);
  CHECK_THROWS_AS(flow_backward(f, e, Matrix::Zero(4, 3), Vector(Vector::Zero(3))), ShapeError);
  const auto applied = flow_apply(f, standard_normal(4, 2, rng));
  CHECK_THROWS_AS(flow_backward(f, applied, Matrix::Zero(4, 2), Vector(Vector::Zero(2))), ShapeError);
}

TEST_CASE("non-finite intermediates name the block") {
  auto f = random_flow(2, 2, 4, 1, 0.3, kNoClamp);
  f.blocks[1].s2.layers.back().bias.setConstant(800.0);
  try {
    flow_forward(f, Vector(Vector::Ones(2)));
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("block 1") != std::string::npos);
  }
}

TEST_CASE("build rules") {
  Rng a(4);
  CHECK_THROWS_AS(build_flow(FlowShape{1, 2, 4, 2, 2.0}, a), ShapeError);
  const auto f = build_flow(FlowShape{7, 3, 4, 2, 2.0}, a);
  CHECK(f.blocks[0].d1 == 3);
  CHECK(f.blocks[0].d2 == 4);
  CHECK(f.perms.size() == 3);
  Rng b1(12), b2(12);
  const auto g1 = build_flow(FlowShape{7, 3, 4, 2, 2.0}, b1);
  const auto g2 = build_flow(FlowShape{7, 3, 4, 2, 2.0}, b2);
  CHECK(g1.perms == g2.perms);
  CHECK(g1.blocks[2].s1.layers[0].weights == g2.blocks[2].s1.layers[0].weights);
  for (const auto& b : g1.blocks) {
    CHECK(b.s2.layers.back().weights.isZero(0.0));
    CHECK(b.t1.layers.back().bias.isZero(0.0));
  }
}

TEST_CASE("json round trip is value exact") {
  for (double clamp : {2.0, kNoClamp}) {
    const auto f = random_flow(5, 3, 6, 9, 0.3, clamp);
    const auto text = to_json(f).dump();
    const auto g = flow_from_json(nlohmann::json::parse(text));
    CHECK(g.perms == f.perms);
    CHECK(g.clamp == f.clamp);
    Rng rng(1);
    const Matrix xi = standard_normal(5, 10, rng);
    CHECK(flow_apply(f, xi).output == flow_apply(g, xi).output);
  }
  auto doc = to_json(random_flow(3, 1, 4, 1));
  doc["blocks"][0]["perm"] = {0, 0, 1};
  CHECK_THROWS_AS(flow_from_json(doc), ShapeError);
}
