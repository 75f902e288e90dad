#include "invflow/mcmc.hpp"

#include <cmath>
#include <limits>

namespace invflow {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

TargetDensity make_posterior_target(const ForwardModel& forward, const Measurement& measurement,
                                    const NoiseModel& noise, const PriorBox& prior) {
  prior.validate();
  noise.validate();
  require_shape(prior.dim() == forward.input_dim(), "posterior target: prior and forward model dims differ");
  require_shape(measurement.y.size() == forward.output_dim() && noise.w.size() == forward.output_dim(),
                "posterior target: measurement length differs from forward output");
  TargetDensity t;
  t.dim = forward.input_dim();
  t.log_density = [&forward, &measurement, noise, prior](const Vector& x) {
    const double lp = log_prior(prior, x);
    if (!std::isfinite(lp)) return kNegInf;
    return log_likelihood(noise, eval_forward(forward, x), measurement.y) + lp;
  };
  return t;
}

double augmented_log_density(const Vector& x_b, const ForwardModel& forward, const Measurement& measurement,
                             const PriorBox& prior, double b_lo, double b_hi) {
  const Eigen::Index d = prior.dim();
  require_shape(x_b.size() == d + 1, "augmented_log_density: expected d + 1 coordinates");
  const double b = x_b[d];
  if (!(b >= b_lo && b <= b_hi)) return kNegInf;
  const Vector x = x_b.head(d);
  if (!std::isfinite(log_prior(prior, x))) return kNegInf;
  return log_likelihood(NoiseModel{b, measurement.w}, eval_forward(forward, x), measurement.y);
}

TargetDensity make_augmented_target(const ForwardModel& forward, const Measurement& measurement,
                                    const PriorBox& prior, double b_lo, double b_hi) {
  prior.validate();
  if (!(b_lo > 0.0 && b_lo < b_hi)) throw std::invalid_argument("augmented target: need 0 < b_lo < b_hi");
  require_shape(prior.dim() == forward.input_dim(), "augmented target: prior and forward model dims differ");
  require_shape(measurement.y.size() == forward.output_dim(),
                "augmented target: measurement length differs from forward output");
  TargetDensity t;
  t.dim = forward.input_dim() + 1;
  t.augmented_b = true;
  t.b_lo = b_lo;
  t.b_hi = b_hi;
  t.log_density = [&forward, &measurement, prior, b_lo, b_hi](const Vector& x_b) {
    return augmented_log_density(x_b, forward, measurement, prior, b_lo, b_hi);
  };
  return t;
}

Ensemble make_ensemble(const Matrix& walkers, const TargetDensity& target, std::uint64_t seed) {
  const Eigen::Index D = walkers.rows();
  const Eigen::Index K = walkers.cols();
  require_shape(D == target.dim, "ensemble: walker dimension differs from target");
  require_shape(K % 2 == 0, "ensemble: number of walkers must be even");
  require_shape(K >= 2 * D + 2, "ensemble: need K >= 2D + 2 walkers");
  Ensemble e;
  e.walkers = walkers;
  e.log_probs.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    e.log_probs[k] = target.log_density(walkers.col(k));
    if (!std::isfinite(e.log_probs[k]))
      throw std::invalid_argument("ensemble: walker " + std::to_string(k) + " is outside the support");
  }
  e.rng.seed(seed);
  return e;
}

double stretch_factor(double a, double u) {
  const double s = (a - 1.0) * u + 1.0;
  return s * s / a;
}

Vector stretch_proposal(const Vector& x_k, const Vector& x_j, double z) { return x_k + (z - 1.0) * (x_k - x_j); }

double stretch_acceptance(double z, int dim, double logp_new, double logp_old) {
  if (!std::isfinite(logp_new)) return 0.0;
  const double log_ratio = (dim - 1) * std::log(z) + logp_new - logp_old;
  return log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
}

void stretch_move(Ensemble& e, const TargetDensity& target, double a) {
  if (!(a > 1.0)) throw std::invalid_argument("stretch_move: a must exceed 1");
  const Eigen::Index K = e.num_walkers();
  const Eigen::Index D = e.dim();
  require_shape(D == target.dim, "stretch_move: ensemble dimension differs from target");
  require_shape(K % 2 == 0 && K >= 2 * D + 2, "stretch_move: invalid walker count");
  bool all_same = true;
  for (Eigen::Index k = 1; k < K && all_same; ++k) all_same = e.walkers.col(k) == e.walkers.col(0);
  if (all_same) throw std::invalid_argument("stretch_move: degenerate ensemble (all walkers identical)");

  const Eigen::Index half = K / 2;
  std::uniform_int_distribution<Eigen::Index> pick(0, half - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int h = 0; h < 2; ++h) {
    const Eigen::Index begin = h * half;
    const Eigen::Index other = (1 - h) * half;
    for (Eigen::Index k = begin; k < begin + half; ++k) {
      const Eigen::Index j = other + pick(e.rng);
      const double z = stretch_factor(a, unit(e.rng));
      const double u = unit(e.rng);
      Vector y = stretch_proposal(e.walkers.col(k), e.walkers.col(j), z);
      const double lp = target.log_density(y);
      ++e.proposed;
      if (std::isfinite(lp) && std::log(u) < (D - 1) * std::log(z) + lp - e.log_probs[k]) {
        e.walkers.col(k) = y;
        e.log_probs[k] = lp;
        ++e.accepted;
      }
    }
  }
  ++e.step_count;
}

namespace {

SamplerRun run_from_ensemble(Ensemble e, const TargetDensity& target, const SamplerConfig& cfg) {
  const Eigen::Index K = e.num_walkers();
  const Eigen::Index D = e.dim();
  const long kept = cfg.steps > cfg.burn_in ? (cfg.steps - cfg.burn_in) / cfg.thin : 0;

  SamplerRun run;
  run.walkers = static_cast<int>(K);
  run.kept_steps = kept;
  run.samples.names = target.augmented_b ? default_names(D - 1, true) : default_names(D);
  run.samples.values.resize(kept * K, D);
  long row_step = 0;
  for (int s = 1; s <= cfg.steps; ++s) {
    stretch_move(e, target, cfg.a);
    if (s > cfg.burn_in && (s - cfg.burn_in) % cfg.thin == 0 && row_step < kept) {
      run.samples.values.middleRows(row_step * K, K) = e.walkers.transpose();
      ++row_step;
    }
  }
  run.acceptance_rate = e.acceptance_rate();
  auto& p = run.samples.provenance;
  p.method = "mcmc";
  p.seed = cfg.seed;
  p.extra = {{"acceptance_rate", run.acceptance_rate},
             {"walkers", static_cast<double>(K)},
             {"a", cfg.a},
             {"steps", static_cast<double>(cfg.steps)},
             {"burn_in", static_cast<double>(cfg.burn_in)},
             {"thin", static_cast<double>(cfg.thin)}};
  return run;
}

void check_config(const SamplerConfig& cfg) {
  if (cfg.steps < 0 || cfg.burn_in < 0 || cfg.burn_in > cfg.steps || cfg.thin < 1)
    throw std::invalid_argument("sampler: need 0 <= burn_in <= steps and thin >= 1");
  if (!(cfg.a > 1.0)) throw std::invalid_argument("sampler: a must exceed 1");
}

}  // namespace

SamplerRun run_sampler_from(const TargetDensity& target, const Matrix& initial, const SamplerConfig& cfg) {
  check_config(cfg);
  // Distinct stream from the one used to draw initial walkers.
  return run_from_ensemble(make_ensemble(initial, target, cfg.seed ^ 0x9e3779b97f4a7c15ULL), target, cfg);
}

SamplerRun run_sampler(const TargetDensity& target, const PriorBox& box, const SamplerConfig& cfg) {
  check_config(cfg);
  box.validate();
  const Eigen::Index D = target.dim;
  const Eigen::Index d = box.dim();
  require_shape(D == (target.augmented_b ? d + 1 : d), "run_sampler: box dimension differs from target");
  require_shape(cfg.walkers % 2 == 0 && cfg.walkers >= 2 * D + 2, "run_sampler: need even K >= 2D + 2");

  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&] {
    Vector w(D);
    for (Eigen::Index i = 0; i < d; ++i) w[i] = box.lo[i] + (box.hi[i] - box.lo[i]) * unit(rng);
    if (target.augmented_b) w[d] = target.b_lo + (target.b_hi - target.b_lo) * unit(rng);
    return w;
  };
  Matrix initial(D, cfg.walkers);
  int finite_first_try = 0;
  std::vector<int> pending;
  for (int k = 0; k < cfg.walkers; ++k) {
    initial.col(k) = draw();
    if (std::isfinite(target.log_density(initial.col(k))))
      ++finite_first_try;
    else
      pending.push_back(k);
  }
  if (finite_first_try == 0)
    throw std::invalid_argument("run_sampler: no initial walker has a finite log density");
  constexpr int kMaxRedraws = 1000;
  for (int k : pending) {
    int tries = 0;
    do {
      initial.col(k) = draw();
    } while (!std::isfinite(target.log_density(initial.col(k))) && ++tries < kMaxRedraws);
    if (tries >= kMaxRedraws)
      throw std::invalid_argument("run_sampler: could not place walker " + std::to_string(k) + " in the support");
  }
  return run_from_ensemble(make_ensemble(initial, target, rng()), target, cfg);
}

std::vector<Matrix> walker_chains(const SampleSet& flat, int walkers) {
  require_shape(walkers > 0 && flat.count() % walkers == 0, "walker_chains: row count is not a multiple of K");
  const Eigen::Index n = flat.count() / walkers;
  std::vector<Matrix> chains(static_cast<std::size_t>(walkers), Matrix(n, flat.dim()));
  for (Eigen::Index s = 0; s < n; ++s)
    for (int k = 0; k < walkers; ++k) chains[static_cast<std::size_t>(k)].row(s) = flat.values.row(s * walkers + k);
  return chains;
}

DiagnosticsReport diagnostics(const std::vector<Matrix>& chains, std::optional<double> acceptance_rate,
                              double window_c) {
  require_shape(!chains.empty() && chains.front().rows() > 1, "diagnostics: need nonempty chains");
  const Eigen::Index n = chains.front().rows();
  const Eigen::Index D = chains.front().cols();
  for (const auto& c : chains)
    require_shape(c.rows() == n && c.cols() == D, "diagnostics: chains must share a shape");
  const double m = static_cast<double>(chains.size());

  DiagnosticsReport r;
  r.acceptance_rate = acceptance_rate;
  r.iact.resize(D);
  r.ess.resize(D);
  r.mean.resize(D);
  r.stddev.resize(D);
  r.window.assign(static_cast<std::size_t>(D), 0);

  for (Eigen::Index i = 0; i < D; ++i) {
    double sum = 0.0, sum_sq = 0.0;
    std::vector<Vector> centered;
    std::vector<double> variance;
    bool zero_var = false;
    for (const auto& c : chains) {
      const Vector col = c.col(i);
      sum += col.sum();
      const double mu = col.mean();
      Vector cc = col.array() - mu;
      const double var = cc.squaredNorm() / static_cast<double>(n);
      if (!(var > 0.0)) zero_var = true;
      centered.push_back(std::move(cc));
      variance.push_back(var);
    }
    const double total = m * static_cast<double>(n);
    r.mean[i] = sum / total;
    for (const auto& c : chains) sum_sq += (c.col(i).array() - r.mean[i]).square().sum();
    r.stddev[i] = std::sqrt(sum_sq / (total - 1.0));
    if (zero_var) {
      r.degenerate = true;
      r.iact[i] = std::nan("");
      r.ess[i] = 0.0;
      continue;
    }

    // tau(M) = 1 + 2 sum_{t=1}^{M} rho(t), smallest M with M >= c tau(M)
    double tau = 1.0;
    Eigen::Index lag = 1;
    bool found = false;
    for (; lag < n; ++lag) {
      double rho = 0.0;
      for (std::size_t k = 0; k < centered.size(); ++k) {
        const auto& cc = centered[k];
        rho += cc.head(n - lag).dot(cc.tail(n - lag)) / (static_cast<double>(n) * variance[k]);
      }
      tau += 2.0 * rho / m;
      if (static_cast<double>(lag) >= window_c * tau) {
        found = true;
        break;
      }
    }
    if (!found) lag = n - 1;
    r.window[static_cast<std::size_t>(i)] = static_cast<int>(lag);
    r.iact[i] = tau;
    r.ess[i] = total / tau;
    if (!found || n < 10 * lag) r.short_chain = true;
  }
  if (acceptance_rate && *acceptance_rate <= 0.0) r.degenerate = true;
  if (r.degenerate) r.flags.push_back("degenerate: zero variance or zero acceptance");
  if (r.short_chain) r.flags.push_back("short chain: fewer than 10 autocorrelation windows");
  return r;
}

nlohmann::json to_json(const DiagnosticsReport& report) {
  auto vec = [](const Vector& v) {
    auto a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i)
      a.push_back(std::isfinite(v[i]) ? nlohmann::json(v[i]) : nlohmann::json(nullptr));
    return a;
  };
  nlohmann::json doc{{"acceptance_rate", report.acceptance_rate ? nlohmann::json(*report.acceptance_rate)
                                                                 : nlohmann::json(nullptr)},
                     {"iact", vec(report.iact)},
                     {"ess", vec(report.ess)},
                     {"mean", vec(report.mean)},
                     {"std", vec(report.stddev)},
                     {"window", report.window},
                     {"degenerate", report.degenerate},
                     {"short_chain", report.short_chain},
                     {"flags", report.flags}};
  return doc;
}

}  // namespace invflow
