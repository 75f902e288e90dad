#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "invflow/common.hpp"

namespace invflow {

struct Provenance {
  std::string method;  // "inn" or "mcmc"
  std::uint64_t seed = 0;
  std::string config_hash;
  std::optional<double> b;
  /// Method-specific numbers (acceptance rate, walkers, stretch a, ...).
  std::map<std::string, double> extra;
};

/// Posterior draws; one row per draw, one column per named parameter.
struct SampleSet {
  std::vector<std::string> names;
  Matrix values;
  Provenance provenance;

  Eigen::Index count() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
  Vector mean() const;
  /// Unbiased (n-1) standard deviation per column.
  Vector stddev() const;
  /// Keeps the first k columns (drops e.g. an appended noise column).
  SampleSet leading_columns(Eigen::Index k) const;
};

std::vector<std::string> default_names(Eigen::Index d, bool with_b = false);

nlohmann::json sidecar_json(const SampleSet& s);

/// Writes `<stem>.csv` and the `<stem>.json` sidecar.
void write_sample_set(const std::string& stem, const SampleSet& s);
/// Reads `<stem>.csv` and its sidecar. A non-empty expected_hash must match
/// the sidecar's config_hash.
SampleSet read_sample_set(const std::string& stem, const std::string& expected_hash = "");

}  // namespace invflow
