#include "invflow/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include "invflow/csv.hpp"

namespace fs = std::filesystem;

namespace invflow {

double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

double ks_standard_normal(std::vector<double> a) {
  if (a.empty()) throw std::invalid_argument("ks_standard_normal: empty sample");
  std::sort(a.begin(), a.end());
  const double n = static_cast<double>(a.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-a[i] / std::sqrt(2.0));
    d = std::max({d, static_cast<double>(i + 1) / n - cdf, cdf - static_cast<double>(i) / n});
  }
  return d;
}

namespace {

std::vector<double> column(const SampleSet& s, Eigen::Index c) {
  std::vector<double> out(static_cast<std::size_t>(s.count()));
  for (Eigen::Index r = 0; r < s.count(); ++r) out[static_cast<std::size_t>(r)] = s.values(r, c);
  return out;
}

nlohmann::json vec_json(const Vector& v) {
  auto a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i)
    a.push_back(std::isfinite(v[i]) ? nlohmann::json(v[i]) : nlohmann::json(nullptr));
  return a;
}

std::vector<double> to_std(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

ComparisonReport compare(const SampleSet& a, const SampleSet& b, const std::optional<Vector>& x_true) {
  if (a.count() == 0 || b.count() == 0) throw std::invalid_argument("compare: empty sample set");
  require_shape(a.dim() == b.dim(), "compare: sample sets differ in dimension");
  require_shape(a.names == b.names, "compare: sample sets differ in parameter naming");
  ComparisonReport r;
  r.label_a = a.provenance.method.empty() ? "a" : a.provenance.method;
  r.label_b = b.provenance.method.empty() ? "b" : b.provenance.method;
  r.names = a.names;
  r.mean_a = a.mean();
  r.std_a = a.stddev();
  r.mean_b = b.mean();
  r.std_b = b.stddev();
  const Eigen::Index d = a.dim();
  r.ks.resize(d);
  r.mean_diff_pooled.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    r.ks[i] = ks_two_sample(column(a, i), column(b, i));
    const double pooled = std::sqrt(0.5 * (r.std_a[i] * r.std_a[i] + r.std_b[i] * r.std_b[i]));
    const double diff = r.mean_a[i] - r.mean_b[i];
    r.mean_diff_pooled[i] = pooled > 0.0 ? diff / pooled : (diff == 0.0 ? 0.0 : std::copysign(INFINITY, diff));
  }
  if (x_true) {
    require_shape(x_true->size() == d, "compare: x_true has wrong dimension");
    r.truth_dist_a = ((r.mean_a - *x_true).array() / r.std_a.array()).matrix();
    r.truth_dist_b = ((r.mean_b - *x_true).array() / r.std_b.array()).matrix();
  }
  r.b = a.provenance.b;
  return r;
}

nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json doc{{"labels", {r.label_a, r.label_b}},
                     {"names", r.names},
                     {"mean_a", vec_json(r.mean_a)},
                     {"std_a", vec_json(r.std_a)},
                     {"mean_b", vec_json(r.mean_b)},
                     {"std_b", vec_json(r.std_b)},
                     {"ks", vec_json(r.ks)},
                     {"mean_diff_pooled", vec_json(r.mean_diff_pooled)},
                     {"runtimes", r.runtimes}};
  if (r.truth_dist_a) doc["truth_dist_a"] = vec_json(*r.truth_dist_a);
  if (r.truth_dist_b) doc["truth_dist_b"] = vec_json(*r.truth_dist_b);
  if (r.b) doc["b"] = *r.b;
  return doc;
}

MarginalTable export_marginals(const SampleSet& samples, const Vector& lo, const Vector& hi, int bins) {
  if (bins < 2) throw std::invalid_argument("export_marginals: need at least 2 bins");
  const Eigen::Index d = samples.dim();
  require_shape(lo.size() == d && hi.size() == d, "export_marginals: box dimension mismatch");
  MarginalTable t;
  t.names = samples.names;
  t.edges.resize(d, bins + 1);
  t.counts = Eigen::MatrixXi::Zero(d, bins);
  t.outside = Eigen::VectorXi::Zero(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    if (!(lo[i] < hi[i])) throw std::invalid_argument("export_marginals: empty range");
    const double width = (hi[i] - lo[i]) / bins;
    for (int k = 0; k <= bins; ++k) t.edges(i, k) = lo[i] + k * width;
    t.edges(i, bins) = hi[i];
    for (Eigen::Index r = 0; r < samples.count(); ++r) {
      const double v = samples.values(r, i);
      if (!(v >= lo[i] && v <= hi[i])) {
        ++t.outside[i];
        continue;
      }
      int k = static_cast<int>((v - lo[i]) / width);
      k = std::clamp(k, 0, bins - 1);
      ++t.counts(i, k);
    }
  }
  return t;
}

void write_marginals_csv(const std::string& path, const MarginalTable& t) {
  std::ostringstream out;
  out << "param,bin,lower,upper,count\n";
  for (Eigen::Index i = 0; i < t.counts.rows(); ++i)
    for (Eigen::Index k = 0; k < t.counts.cols(); ++k)
      out << csv::quote(t.names[static_cast<std::size_t>(i)]) << "," << k << "," << csv::format_double(t.edges(i, k))
          << "," << csv::format_double(t.edges(i, k + 1)) << "," << t.counts(i, k) << "\n";
  csv::write_file(path, out.str());
}

// --- configuration -----------------------------------------------------------

void ExperimentConfig::validate() const {
  prior.validate();
  require_shape(static_cast<Eigen::Index>(names.size()) == prior.dim(), "config: names must match prior dimension");
  if (x_true) require_shape(x_true->size() == prior.dim(), "config: x_true has wrong dimension");
  if (b_values.empty()) throw std::invalid_argument("config: b list is empty");
  for (double b : b_values)
    if (!(b > 0.0)) throw std::invalid_argument("config: every b must be positive (the likelihood needs b > 0)");
  if (inn_samples <= 0 || mcmc_samples < 0) throw std::invalid_argument("config: sample counts must be positive");
  if (marginal_bins < 2) throw std::invalid_argument("config: marginal_bins must be at least 2");
  inn.train.validate();
  if (mcmc.augment_b && !(mcmc.b_lo > 0.0 && mcmc.b_lo < mcmc.b_hi))
    throw std::invalid_argument("config: need 0 < b_lo < b_hi");
  if (surrogate.enabled && surrogate.pairs < 2) throw std::invalid_argument("config: surrogate needs >= 2 pairs");
}

void ExperimentConfig::reseed(std::uint64_t base) {
  seed_data = base;
  seed_inn = base + 1;
  seed_mcmc = base + 2;
}

ExperimentConfig config_from_json(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  if (doc.contains("forward")) cfg.forward = doc.at("forward");
  if (doc.contains("prior")) {
    const auto& p = doc.at("prior");
    if (p.contains("lo")) cfg.prior.lo = from_std(p.at("lo").get<std::vector<double>>());
    if (p.contains("hi")) cfg.prior.hi = from_std(p.at("hi").get<std::vector<double>>());
    cfg.prior.lambda_bd = p.value("lambda_bd", cfg.prior.lambda_bd);
    if (!doc.contains("names") && cfg.prior.dim() != 7) cfg.names = default_names(cfg.prior.dim());
  }
  if (doc.contains("names")) cfg.names = doc.at("names").get<std::vector<std::string>>();
  if (doc.contains("x_true") && !doc.at("x_true").is_null())
    cfg.x_true = from_std(doc.at("x_true").get<std::vector<double>>());
  if (doc.contains("b_values")) cfg.b_values = doc.at("b_values").get<std::vector<double>>();
  if (doc.contains("weights")) {
    const auto w = doc.at("weights").get<std::string>();
    if (w == "measured")
      cfg.weights = WeightConvention::measured;
    else if (w == "unit")
      cfg.weights = WeightConvention::unit;
    else
      throw std::invalid_argument("config: weights must be 'measured' or 'unit'");
  }
  if (doc.contains("surrogate")) {
    const auto& s = doc.at("surrogate");
    cfg.surrogate.enabled = s.value("enabled", cfg.surrogate.enabled);
    cfg.surrogate.pairs = s.value("pairs", cfg.surrogate.pairs);
    auto& t = cfg.surrogate.train;
    t.width = s.value("width", t.width);
    t.epochs = s.value("epochs", t.epochs);
    t.batch_size = s.value("batch_size", t.batch_size);
    t.lr = s.value("lr", t.lr);
    t.lr_decay_every = s.value("lr_decay_every", t.lr_decay_every);
    t.lr_decay_factor = s.value("lr_decay_factor", t.lr_decay_factor);
    t.seed = s.value("seed", t.seed);
  }
  if (doc.contains("inn")) {
    const auto& j = doc.at("inn");
    auto& sh = cfg.inn.shape;
    sh.blocks = j.value("blocks", sh.blocks);
    sh.subnet_width = j.value("subnet_width", sh.subnet_width);
    sh.subnet_depth = j.value("subnet_depth", sh.subnet_depth);
    if (j.contains("clamp")) sh.clamp = j.at("clamp").is_null() ? kNoClamp : j.at("clamp").get<double>();
    if (j.contains("train")) cfg.inn.train = train_config_from_json(j.at("train"));
  }
  bool burn_in_given = false;
  if (doc.contains("mcmc")) {
    const auto& j = doc.at("mcmc");
    auto& s = cfg.mcmc.sampler;
    s.walkers = j.value("walkers", s.walkers);
    s.steps = j.value("steps", s.steps);
    burn_in_given = j.contains("burn_in");
    s.burn_in = j.value("burn_in", s.burn_in);
    s.thin = j.value("thin", s.thin);
    s.a = j.value("a", s.a);
    cfg.mcmc.augment_b = j.value("augment_b", cfg.mcmc.augment_b);
    if (j.contains("b_range")) {
      const auto r = j.at("b_range").get<std::vector<double>>();
      require_shape(r.size() == 2, "config: b_range needs two entries");
      cfg.mcmc.b_lo = r[0];
      cfg.mcmc.b_hi = r[1];
    }
  }
  if (!burn_in_given) cfg.mcmc.sampler.burn_in = cfg.mcmc.sampler.steps / 5;
  if (doc.contains("samples")) {
    cfg.inn_samples = doc.at("samples").value("inn", cfg.inn_samples);
    cfg.mcmc_samples = doc.at("samples").value("mcmc", cfg.mcmc_samples);
  }
  cfg.marginal_bins = doc.value("marginal_bins", cfg.marginal_bins);
  if (doc.contains("seeds")) {
    const auto& s = doc.at("seeds");
    cfg.seed_data = s.value("data", cfg.seed_data);
    cfg.seed_inn = s.value("inn", cfg.seed_inn);
    cfg.seed_mcmc = s.value("mcmc", cfg.seed_mcmc);
  }
  cfg.output_dir = doc.value("output_dir", cfg.output_dir);
  cfg.inn.shape.dim = static_cast<int>(cfg.prior.dim());
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  const auto& sh = cfg.inn.shape;
  const auto& s = cfg.mcmc.sampler;
  const auto& st = cfg.surrogate.train;
  nlohmann::json doc{
      {"forward", cfg.forward},
      {"surrogate",
       {{"enabled", cfg.surrogate.enabled},
        {"pairs", cfg.surrogate.pairs},
        {"width", st.width},
        {"epochs", st.epochs},
        {"batch_size", st.batch_size},
        {"lr", st.lr},
        {"lr_decay_every", st.lr_decay_every},
        {"lr_decay_factor", st.lr_decay_factor},
        {"seed", st.seed}}},
      {"prior", {{"lo", to_std(cfg.prior.lo)}, {"hi", to_std(cfg.prior.hi)}, {"lambda_bd", cfg.prior.lambda_bd}}},
      {"names", cfg.names},
      {"x_true", cfg.x_true ? nlohmann::json(to_std(*cfg.x_true)) : nlohmann::json(nullptr)},
      {"b_values", cfg.b_values},
      {"weights", cfg.weights == WeightConvention::measured ? "measured" : "unit"},
      {"inn",
       {{"blocks", sh.blocks},
        {"subnet_width", sh.subnet_width},
        {"subnet_depth", sh.subnet_depth},
        {"clamp", std::isinf(sh.clamp) ? nlohmann::json(nullptr) : nlohmann::json(sh.clamp)},
        {"train", to_json(cfg.inn.train)}}},
      {"mcmc",
       {{"walkers", s.walkers},
        {"steps", s.steps},
        {"burn_in", s.burn_in},
        {"thin", s.thin},
        {"a", s.a},
        {"augment_b", cfg.mcmc.augment_b},
        {"b_range", {cfg.mcmc.b_lo, cfg.mcmc.b_hi}}}},
      {"samples", {{"inn", cfg.inn_samples}, {"mcmc", cfg.mcmc_samples}}},
      {"marginal_bins", cfg.marginal_bins},
      {"seeds", {{"data", cfg.seed_data}, {"inn", cfg.seed_inn}, {"mcmc", cfg.seed_mcmc}}}};
  return doc;
}

std::string config_hash(const ExperimentConfig& cfg) { return hash_hex(fnv1a64(to_json(cfg).dump())); }

ForwardModel make_forward(const ExperimentConfig& cfg, const std::string& base_dir) {
  const auto& f = cfg.forward;
  if (f.contains("path")) {
    fs::path p = f.at("path").get<std::string>();
    if (p.is_relative()) p = fs::path(base_dir) / p;
    return forward_from_json(nlohmann::json::parse(csv::read_file(p.string())));
  }
  return forward_from_json(f);
}

SampleSet thin_rows(const SampleSet& s, Eigen::Index count) {
  if (count <= 0 || count >= s.count()) return s;
  SampleSet out;
  out.names = s.names;
  out.provenance = s.provenance;
  out.values.resize(count, s.dim());
  const double stride = static_cast<double>(s.count()) / static_cast<double>(count);
  for (Eigen::Index r = 0; r < count; ++r)
    out.values.row(r) = s.values.row(static_cast<Eigen::Index>(std::floor(r * stride)));
  return out;
}

// --- artifacts -------------------------------------------------------------

OutputLock::OutputLock(const std::string& dir) : path_((fs::path(dir) / ".invflow.lock").string()) {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw std::runtime_error("output directory " + dir + " is locked by another process (" + path_ + ")");
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void write_json_artifact(const std::string& path, nlohmann::json doc, const std::string& hash) {
  doc["config_hash"] = hash;
  csv::write_file(path, doc.dump(2) + "\n");
}

nlohmann::json read_json_artifact(const std::string& path, const std::string& expected_hash) {
  auto doc = nlohmann::json::parse(csv::read_file(path));
  if (!expected_hash.empty()) {
    const std::string got = doc.value("config_hash", std::string());
    if (got != expected_hash)
      throw std::runtime_error(path + ": config hash " + got + " does not match expected " + expected_hash);
  }
  return doc;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename F>
auto run_stage(const std::string& stage, double b, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    std::ostringstream msg;
    msg << "stage '" << stage << "' failed (b=" << b << "): " << e.what();
    throw std::runtime_error(msg.str());
  }
}

std::string b_tag(double b) {
  std::ostringstream s;
  s << "b_" << b;
  return s.str();
}

}  // namespace

Measurement experiment_measurement(const ExperimentConfig& cfg, const ForwardModel& truth, std::size_t b_index) {
  require_shape(b_index < cfg.b_values.size(), "experiment: b index out of range");
  const Vector x_true = cfg.x_true ? *cfg.x_true : Vector(0.5 * (cfg.prior.lo + cfg.prior.hi));
  Rng rng(cfg.seed_data + b_index);
  return synthesize_measurement(truth, x_true, cfg.b_values[b_index], rng, cfg.weights);
}

TrainedInn experiment_train_inn(const ExperimentConfig& cfg, const ForwardModel& forward,
                                const Measurement& measurement, std::size_t b_index) {
  require_shape(b_index < cfg.b_values.size(), "experiment: b index out of range");
  const double b = cfg.b_values[b_index];
  Rng rng(cfg.seed_inn + 7919 * b_index);
  FlowShape shape = cfg.inn.shape;
  shape.dim = static_cast<int>(cfg.prior.dim());
  TrainConfig tc = cfg.inn.train;
  tc.seed = cfg.inn.train.seed + cfg.seed_inn + b_index;
  auto trained = train_inn(build_flow(shape, rng), forward, measurement, NoiseModel{b, measurement.w}, cfg.prior, tc);
  if (trained.diverged) throw NumericalError("training diverged: " + trained.message);
  trained.names = cfg.names;
  trained.config_hash = config_hash(cfg);
  return trained;
}

SampleSet experiment_sample_inn(const ExperimentConfig& cfg, const TrainedInn& trained, std::size_t b_index) {
  auto s = sample_posterior_inn(trained, cfg.inn_samples, cfg.seed_inn + 104729 * (b_index + 1));
  s.provenance.b = cfg.b_values.at(b_index);
  return s;
}

SamplerRun experiment_mcmc(const ExperimentConfig& cfg, const ForwardModel& forward, const Measurement& measurement,
                           std::size_t b_index) {
  require_shape(b_index < cfg.b_values.size(), "experiment: b index out of range");
  const double b = cfg.b_values[b_index];
  const TargetDensity target =
      cfg.mcmc.augment_b ? make_augmented_target(forward, measurement, cfg.prior, cfg.mcmc.b_lo, cfg.mcmc.b_hi)
                         : make_posterior_target(forward, measurement, NoiseModel{b, measurement.w}, cfg.prior);
  SamplerConfig sc = cfg.mcmc.sampler;
  sc.seed = cfg.seed_mcmc + b_index;
  auto run = run_sampler(target, cfg.prior, sc);
  run.samples.provenance.config_hash = config_hash(cfg);
  run.samples.provenance.b = b;
  run.samples.names = cfg.names;
  if (cfg.mcmc.augment_b) run.samples.names.push_back("b");
  return run;
}

SurrogateFit experiment_surrogate(const ExperimentConfig& cfg, const ForwardModel& truth) {
  Rng rng(cfg.seed_data ^ 0x5eedULL);
  const auto pairs = sample_pairs(truth, cfg.prior.lo, cfg.prior.hi, cfg.surrogate.pairs, rng);
  return train_surrogate(pairs.x, pairs.y, cfg.surrogate.train, cfg.prior.lo, cfg.prior.hi);
}

StudyResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  StudyResult study;
  study.config_hash = config_hash(cfg);
  const std::string& hash = study.config_hash;
  const bool write = !out_dir.empty();
  if (write) {
    fs::create_directories(out_dir);
    write_json_artifact((fs::path(out_dir) / "config.json").string(), to_json(cfg), hash);
  }

  const ForwardModel truth_model = make_forward(cfg, cfg.base_dir);
  require_shape(truth_model.input_dim() == cfg.prior.dim(), "run_experiment: forward model and prior dims differ");
  std::optional<ForwardModel> surrogate;
  if (cfg.surrogate.enabled) {
    surrogate = run_stage("train-surrogate", 0.0, [&] {
      auto fit = experiment_surrogate(cfg, truth_model);
      if (write) {
        auto doc = to_json(fit.model);
        doc["holdout_relative_l2"] = fit.holdout_relative_l2;
        doc["holdout_rmse"] = fit.holdout_rmse;
        write_json_artifact((fs::path(out_dir) / "surrogate.json").string(), doc, hash);
      }
      study.surrogate = fit;
      return fit.model;
    });
  }
  const ForwardModel& inversion_model = surrogate ? *surrogate : truth_model;
  const Vector x_true = cfg.x_true ? *cfg.x_true : Vector(0.5 * (cfg.prior.lo + cfg.prior.hi));

  std::ostringstream study_csv;
  study_csv << "b,param,inn_mean,inn_std,mcmc_mean,mcmc_std,ks,x_true\n";

  for (std::size_t ib = 0; ib < cfg.b_values.size(); ++ib) {
    const double b = cfg.b_values[ib];
    const std::string dir = write ? (fs::path(out_dir) / b_tag(b)).string() : std::string();
    if (write) fs::create_directories(dir);
    auto at = [&](const std::string& name) { return (fs::path(dir) / name).string(); };

    BRunResult run;
    run.b = b;
    run.measurement = run_stage("synth-data", b, [&] { return experiment_measurement(cfg, truth_model, ib); });
    if (write) write_json_artifact(at("measurement.json"), to_json(run.measurement), hash);

    const auto t_train = Clock::now();
    run.inn = run_stage("train-inn", b,
                        [&] { return experiment_train_inn(cfg, inversion_model, run.measurement, ib); });
    const double train_seconds = seconds_since(t_train);
    if (write) {
      write_json_artifact(at("flow.json"), to_json(run.inn.flow), hash);
      write_trace_csv(at("trace.csv"), run.inn.trace);
    }

    const auto t_inn = Clock::now();
    run.inn_samples = run_stage("sample-inn", b, [&] { return experiment_sample_inn(cfg, run.inn, ib); });
    const double inn_sample_seconds = seconds_since(t_inn);
    if (write) write_sample_set(at("inn_samples"), run.inn_samples);

    const auto t_mcmc = Clock::now();
    SamplerRun mcmc =
        run_stage("sample-mcmc", b, [&] { return experiment_mcmc(cfg, inversion_model, run.measurement, ib); });
    const double mcmc_seconds = seconds_since(t_mcmc);

    run_stage("compare", b, [&] {
      run.mcmc_diagnostics = diagnostics(walker_chains(mcmc.samples, mcmc.walkers), mcmc.acceptance_rate);
      run.mcmc_samples = thin_rows(mcmc.samples, cfg.mcmc_samples);
      const SampleSet mcmc_x = run.mcmc_samples.leading_columns(cfg.prior.dim());
      run.report = compare(run.inn_samples, mcmc_x, x_true);
      run.report.b = b;
      run.report.runtimes = {{"inn_train_s", train_seconds},
                             {"inn_sample_s", inn_sample_seconds},
                             {"mcmc_s", mcmc_seconds}};
      if (write) {
        write_sample_set(at("mcmc_samples"), run.mcmc_samples);
        write_json_artifact(at("mcmc_diagnostics.json"), to_json(run.mcmc_diagnostics), hash);
        write_marginals_csv(at("marginals_inn.csv"),
                            export_marginals(run.inn_samples, cfg.prior.lo, cfg.prior.hi, cfg.marginal_bins));
        write_marginals_csv(at("marginals_mcmc.csv"),
                            export_marginals(mcmc_x, cfg.prior.lo, cfg.prior.hi, cfg.marginal_bins));
        write_json_artifact(at("report.json"), to_json(run.report), hash);
      }
      return 0;
    });

    for (Eigen::Index i = 0; i < cfg.prior.dim(); ++i) {
      study_csv << csv::format_double(b) << "," << csv::quote(cfg.names[static_cast<std::size_t>(i)]) << ","
                << csv::format_double(run.report.mean_a[i]) << "," << csv::format_double(run.report.std_a[i]) << ","
                << csv::format_double(run.report.mean_b[i]) << "," << csv::format_double(run.report.std_b[i]) << ","
                << csv::format_double(run.report.ks[i]) << "," << csv::format_double(x_true[i]) << "\n";
    }
    study.runs.push_back(std::move(run));
  }
  if (write) csv::write_file((fs::path(out_dir) / "study.csv").string(), study_csv.str());
  return study;
}

}  // namespace invflow
