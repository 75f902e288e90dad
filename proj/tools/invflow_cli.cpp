// invflow command line: one subcommand per pipeline stage plus the full study.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "invflow/csv.hpp"
#include "invflow/harness.hpp"

namespace fs = std::filesystem;
using namespace invflow;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "experiment configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out_dir, "output directory (default: $INVFLOW_OUTPUT_ROOT/<command>)");
  cmd->add_option("--seed", c.seed, "base seed overriding the configuration's seeds");
}

std::string resolve_out(const Common& c, const ExperimentConfig& cfg, const std::string& command) {
  if (!c.out_dir.empty()) return c.out_dir;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  const char* root = std::getenv("INVFLOW_OUTPUT_ROOT");
  return (fs::path(root && *root ? root : "invflow-out") / command).string();
}

ExperimentConfig load_config(const Common& c) {
  auto cfg = config_from_json(nlohmann::json::parse(csv::read_file(c.config_path)));
  const auto parent = fs::path(c.config_path).parent_path();
  cfg.base_dir = parent.empty() ? "." : parent.string();
  if (c.seed) cfg.reseed(*c.seed);
  return cfg;
}

std::size_t b_index_of(const ExperimentConfig& cfg, std::optional<double> b) {
  if (!b) return 0;
  for (std::size_t i = 0; i < cfg.b_values.size(); ++i)
    if (cfg.b_values[i] == *b) return i;
  throw std::invalid_argument("--b " + csv::format_double(*b) + " is not in the configuration's b_values");
}

std::string stem(const std::string& dir, const std::string& name, double b) {
  return (fs::path(dir) / (name + "_b" + csv::format_double(b))).string();
}

Measurement measurement_for(const ExperimentConfig& cfg, const ForwardModel& truth, std::size_t ib,
                            const std::string& path) {
  if (!path.empty()) return measurement_from_json(read_json_artifact(path));
  return experiment_measurement(cfg, truth, ib);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Posterior sampling with invertible networks and ensemble MCMC"};
  app.require_subcommand(1);

  Common synth_c, surr_c, inn_c, mcmc_c, cmp_c, run_c;
  std::optional<double> inn_b, mcmc_b;
  std::string inn_meas, mcmc_meas, surr_pairs, cmp_a, cmp_b, cmp_hash;

  auto* synth = app.add_subcommand("synth-data", "synthesize a noisy measurement for every b");
  add_common(synth, synth_c);

  auto* surr = app.add_subcommand("train-surrogate", "fit a one-hidden-layer surrogate of the forward model");
  add_common(surr, surr_c);
  surr->add_option("--pairs", surr_pairs, "training pairs CSV (x1..xd,y1..yn); drawn from the box if omitted");

  auto* inn = app.add_subcommand("sample-inn", "train the invertible network and draw posterior samples");
  add_common(inn, inn_c);
  inn->add_option("--b", inn_b, "noise level (one of b_values; default the first)");
  inn->add_option("--measurement", inn_meas, "measurement JSON (synthesized if omitted)");

  auto* mcmc = app.add_subcommand("sample-mcmc", "run the ensemble sampler");
  add_common(mcmc, mcmc_c);
  mcmc->add_option("--b", mcmc_b, "noise level (one of b_values; default the first)");
  mcmc->add_option("--measurement", mcmc_meas, "measurement JSON (synthesized if omitted)");

  auto* cmp = app.add_subcommand("compare", "compare two sample sets");
  add_common(cmp, cmp_c);
  cmp->add_option("--a", cmp_a, "first sample set stem (<stem>.csv + <stem>.json)")->required();
  cmp->add_option("--b", cmp_b, "second sample set stem")->required();
  cmp->add_option("--expect-hash", cmp_hash, "reject sample sets whose config hash differs");

  auto* run = app.add_subcommand("run-experiment", "full study over all b values");
  add_common(run, run_c);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const auto cfg = load_config(synth_c);
      const auto out = resolve_out(synth_c, cfg, "synth-data");
      OutputLock lock(out);
      const auto hash = config_hash(cfg);
      const auto truth = make_forward(cfg, cfg.base_dir);
      for (std::size_t i = 0; i < cfg.b_values.size(); ++i) {
        const auto m = experiment_measurement(cfg, truth, i);
        write_json_artifact(stem(out, "measurement", cfg.b_values[i]) + ".json", to_json(m), hash);
      }
      std::cout << "wrote " << cfg.b_values.size() << " measurements to " << out << "\n";
    } else if (surr->parsed()) {
      auto cfg = load_config(surr_c);
      const auto out = resolve_out(surr_c, cfg, "train-surrogate");
      OutputLock lock(out);
      const auto hash = config_hash(cfg);
      SurrogateFit fit = [&] {
        if (!surr_pairs.empty()) {
          const auto pairs = read_pairs_csv(surr_pairs);
          return train_surrogate(pairs.x, pairs.y, cfg.surrogate.train, cfg.prior.lo, cfg.prior.hi);
        }
        return experiment_surrogate(cfg, make_forward(cfg, cfg.base_dir));
      }();
      auto doc = to_json(fit.model);
      doc["holdout_rmse"] = fit.holdout_rmse;
      doc["holdout_relative_l2"] = fit.holdout_relative_l2;
      doc["initial_holdout_rmse"] = fit.initial_holdout_rmse;
      write_json_artifact((fs::path(out) / "surrogate.json").string(), doc, hash);
      std::cout << "held-out relative L2 error " << fit.holdout_relative_l2 << "\n";
    } else if (inn->parsed()) {
      const auto cfg = load_config(inn_c);
      const auto out = resolve_out(inn_c, cfg, "sample-inn");
      OutputLock lock(out);
      const auto hash = config_hash(cfg);
      const auto ib = b_index_of(cfg, inn_b);
      const auto forward = make_forward(cfg, cfg.base_dir);
      const auto m = measurement_for(cfg, forward, ib, inn_meas);
      const auto trained = experiment_train_inn(cfg, forward, m, ib);
      const auto samples = experiment_sample_inn(cfg, trained, ib);
      const double b = cfg.b_values[ib];
      write_json_artifact(stem(out, "flow", b) + ".json", to_json(trained.flow), hash);
      write_trace_csv(stem(out, "trace", b) + ".csv", trained.trace);
      write_sample_set(stem(out, "inn_samples", b), samples);
      std::cout << "wrote " << samples.count() << " samples to " << stem(out, "inn_samples", b) << ".csv\n";
    } else if (mcmc->parsed()) {
      const auto cfg = load_config(mcmc_c);
      const auto out = resolve_out(mcmc_c, cfg, "sample-mcmc");
      OutputLock lock(out);
      const auto hash = config_hash(cfg);
      const auto ib = b_index_of(cfg, mcmc_b);
      const auto forward = make_forward(cfg, cfg.base_dir);
      const auto m = measurement_for(cfg, forward, ib, mcmc_meas);
      const auto r = experiment_mcmc(cfg, forward, m, ib);
      const double b = cfg.b_values[ib];
      const auto diag = diagnostics(walker_chains(r.samples, r.walkers), r.acceptance_rate);
      write_sample_set(stem(out, "mcmc_samples", b), thin_rows(r.samples, cfg.mcmc_samples));
      write_json_artifact(stem(out, "mcmc_diagnostics", b) + ".json", to_json(diag), hash);
      std::cout << "acceptance " << r.acceptance_rate << ", max IACT " << diag.iact.maxCoeff() << "\n";
    } else if (cmp->parsed()) {
      const auto cfg = load_config(cmp_c);
      const auto out = resolve_out(cmp_c, cfg, "compare");
      OutputLock lock(out);
      const auto hash = config_hash(cfg);
      const auto a = read_sample_set(cmp_a, cmp_hash);
      const auto b = read_sample_set(cmp_b, cmp_hash);
      const auto d = cfg.prior.dim();
      const auto ax = a.dim() > d ? a.leading_columns(d) : a;
      const auto bx = b.dim() > d ? b.leading_columns(d) : b;
      const auto report = compare(ax, bx, cfg.x_true);
      write_json_artifact((fs::path(out) / "report.json").string(), to_json(report), hash);
      write_marginals_csv((fs::path(out) / "marginals_a.csv").string(),
                          export_marginals(ax, cfg.prior.lo, cfg.prior.hi, cfg.marginal_bins));
      write_marginals_csv((fs::path(out) / "marginals_b.csv").string(),
                          export_marginals(bx, cfg.prior.lo, cfg.prior.hi, cfg.marginal_bins));
      std::cout << "max KS " << report.ks.maxCoeff() << "\n";
    } else if (run->parsed()) {
      const auto cfg = load_config(run_c);
      const auto out = resolve_out(run_c, cfg, "run-experiment");
      OutputLock lock(out);
      const auto study = run_experiment(cfg, out);
      for (const auto& r : study.runs)
        std::cout << "b=" << r.b << " max KS " << r.report.ks.maxCoeff() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "invflow: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
