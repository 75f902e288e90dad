#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "invflow/bayes.hpp"
#include "invflow/mcmc.hpp"

namespace invflow {

/// Exact two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|.
double ks_two_sample(std::vector<double> a, std::vector<double> b);

/// One-sample KS statistic against the standard normal CDF.
double ks_standard_normal(std::vector<double> a);

struct ComparisonReport {
  std::string label_a = "a", label_b = "b";
  std::vector<std::string> names;
  Vector mean_a, std_a, mean_b, std_b;
  Vector ks;
  /// (mean_a - mean_b) / sqrt((std_a^2 + std_b^2) / 2)
  Vector mean_diff_pooled;
  /// (mean - x_true) / std, when a ground truth is known.
  std::optional<Vector> truth_dist_a, truth_dist_b;
  std::map<std::string, double> runtimes;
  std::optional<double> b;
};

ComparisonReport compare(const SampleSet& a, const SampleSet& b, const std::optional<Vector>& x_true = {});

nlohmann::json to_json(const ComparisonReport& r);

struct MarginalTable {
  std::vector<std::string> names;
  Matrix edges;         // D x (bins + 1)
  Eigen::MatrixXi counts;  // D x bins
  Eigen::VectorXi outside; // draws outside [lo, hi] per coordinate
};

/// Per-coordinate histogram over [lo_i, hi_i]; a draw equal to hi_i lands in
/// the last bin.
MarginalTable export_marginals(const SampleSet& samples, const Vector& lo, const Vector& hi, int bins);
void write_marginals_csv(const std::string& path, const MarginalTable& table);

struct FlowSettings {
  FlowShape shape;
  TrainConfig train;
};

struct McmcSettings {
  SamplerConfig sampler;
  bool augment_b = true;
  double b_lo = 1e-3;
  double b_hi = 0.3;
};

struct SurrogateSettings {
  bool enabled = false;
  int pairs = 10000;
  SurrogateConfig train;
};

struct ExperimentConfig {
  nlohmann::json forward = {{"kind", "synthetic-curve"}};
  SurrogateSettings surrogate;
  PriorBox prior = PriorBox::grating();
  std::vector<std::string> names = grating_parameter_names();
  std::optional<Vector> x_true;  // box centre when unset
  std::vector<double> b_values{0.1, 0.03, 0.01};
  WeightConvention weights = WeightConvention::measured;
  FlowSettings inn;
  McmcSettings mcmc;
  int inn_samples = 20000;
  int mcmc_samples = 20000;  // evenly thinned from the flattened chain; 0 keeps all
  int marginal_bins = 50;
  std::uint64_t seed_data = 1;
  std::uint64_t seed_inn = 2;
  std::uint64_t seed_mcmc = 3;
  std::string output_dir;
  std::string base_dir = ".";  // resolves relative file references; not part of the hash

  void validate() const;
  /// Overrides the three seeds from one base value.
  void reseed(std::uint64_t base);
};

ExperimentConfig config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

ForwardModel make_forward(const ExperimentConfig& cfg, const std::string& base_dir = ".");

/// Evenly spaced subset of `count` rows (all rows when count is 0 or larger).
SampleSet thin_rows(const SampleSet& s, Eigen::Index count);

struct BRunResult {
  double b = 0.0;
  Measurement measurement;
  ComparisonReport report;
  DiagnosticsReport mcmc_diagnostics;
  SampleSet inn_samples;
  SampleSet mcmc_samples;  // includes the b column when augmented
  TrainedInn inn;
};

struct StudyResult {
  std::string config_hash;
  std::optional<SurrogateFit> surrogate;
  std::vector<BRunResult> runs;
};

// Single stages of the pipeline for the b at position b_index of cfg.b_values.
// Seeds are derived from cfg and b_index so stages run separately reproduce
// the corresponding parts of run_experiment.
Measurement experiment_measurement(const ExperimentConfig& cfg, const ForwardModel& truth, std::size_t b_index);
TrainedInn experiment_train_inn(const ExperimentConfig& cfg, const ForwardModel& forward,
                                const Measurement& measurement, std::size_t b_index);
SampleSet experiment_sample_inn(const ExperimentConfig& cfg, const TrainedInn& trained, std::size_t b_index);
SamplerRun experiment_mcmc(const ExperimentConfig& cfg, const ForwardModel& forward, const Measurement& measurement,
                           std::size_t b_index);
/// Trains the surrogate on pairs drawn uniformly from the prior box.
SurrogateFit experiment_surrogate(const ExperimentConfig& cfg, const ForwardModel& truth);

/// Full pipeline for every b: synthesize data, train and sample the INN, run
/// the ensemble sampler, compare. Artifacts go to out_dir (if non-empty),
/// one sub-directory per b.
StudyResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

/// Exclusive ownership of an output directory for the lifetime of the object.
class OutputLock {
 public:
  explicit OutputLock(const std::string& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string path_;
};

/// Writes a JSON document with a "config_hash" field stamped in.
void write_json_artifact(const std::string& path, nlohmann::json doc, const std::string& hash);
/// Reads a JSON artifact; throws if its config_hash differs from a non-empty expected hash.
nlohmann::json read_json_artifact(const std::string& path, const std::string& expected_hash = "");

}  // namespace invflow
