#include "invflow/samples.hpp"

#include <cmath>
#include <sstream>

#include "invflow/csv.hpp"

namespace invflow {

Vector SampleSet::mean() const {
  if (values.rows() == 0) return Vector::Constant(values.cols(), std::nan(""));
  return values.colwise().mean().transpose();
}

Vector SampleSet::stddev() const {
  const Eigen::Index n = values.rows();
  if (n < 2) return Vector::Constant(values.cols(), std::nan(""));
  const Eigen::RowVectorXd mu = values.colwise().mean();
  const Matrix centered = values.rowwise() - mu;
  return (centered.colwise().squaredNorm() / static_cast<double>(n - 1)).cwiseSqrt().transpose();
}

SampleSet SampleSet::leading_columns(Eigen::Index k) const {
  require_shape(k <= dim(), "leading_columns: k exceeds dimension");
  SampleSet out;
  out.names.assign(names.begin(), names.begin() + k);
  out.values = values.leftCols(k);
  out.provenance = provenance;
  return out;
}

std::vector<std::string> default_names(Eigen::Index d, bool with_b) {
  std::vector<std::string> names;
  for (Eigen::Index i = 0; i < d; ++i) names.push_back("x" + std::to_string(i + 1));
  if (with_b) names.push_back("b");
  return names;
}

nlohmann::json sidecar_json(const SampleSet& s) {
  nlohmann::json doc{{"method", s.provenance.method},
                     {"seed", s.provenance.seed},
                     {"config_hash", s.provenance.config_hash},
                     {"b", s.provenance.b ? nlohmann::json(*s.provenance.b) : nlohmann::json(nullptr)},
                     {"count", s.count()},
                     {"names", s.names}};
  if (!s.provenance.extra.empty()) doc["extra"] = s.provenance.extra;
  return doc;
}

void write_sample_set(const std::string& stem, const SampleSet& s) {
  require_shape(static_cast<Eigen::Index>(s.names.size()) == s.dim(), "write_sample_set: names/columns mismatch");
  std::ostringstream out;
  for (std::size_t i = 0; i < s.names.size(); ++i) out << (i ? "," : "") << csv::quote(s.names[i]);
  out << "\n";
  for (Eigen::Index r = 0; r < s.count(); ++r) {
    for (Eigen::Index c = 0; c < s.dim(); ++c) out << (c ? "," : "") << csv::format_double(s.values(r, c));
    out << "\n";
  }
  csv::write_file(stem + ".csv", out.str());
  csv::write_file(stem + ".json", sidecar_json(s).dump(2) + "\n");
}

SampleSet read_sample_set(const std::string& stem, const std::string& expected_hash) {
  const auto side = nlohmann::json::parse(csv::read_file(stem + ".json"));
  SampleSet s;
  s.provenance.method = side.value("method", std::string());
  s.provenance.seed = side.value("seed", std::uint64_t{0});
  s.provenance.config_hash = side.value("config_hash", std::string());
  if (side.contains("b") && !side.at("b").is_null()) s.provenance.b = side.at("b").get<double>();
  if (side.contains("extra")) s.provenance.extra = side.at("extra").get<std::map<std::string, double>>();
  if (!expected_hash.empty() && s.provenance.config_hash != expected_hash)
    throw std::runtime_error("read_sample_set: " + stem + " has config hash " + s.provenance.config_hash +
                             ", expected " + expected_hash);

  const auto rows = csv::read_rows(stem + ".csv");
  if (rows.empty()) throw std::invalid_argument("read_sample_set: " + stem + ".csv has no header");
  s.names = rows.front();
  const auto d = static_cast<Eigen::Index>(s.names.size());
  s.values.resize(static_cast<Eigen::Index>(rows.size() - 1), d);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    require_shape(static_cast<Eigen::Index>(rows[r].size()) == d,
                  "read_sample_set: row " + std::to_string(r + 1) + " has wrong field count");
    for (Eigen::Index c = 0; c < d; ++c)
      s.values(static_cast<Eigen::Index>(r - 1), c) = csv::parse_double(rows[r][static_cast<std::size_t>(c)]);
  }
  const auto declared = side.value("count", static_cast<long>(s.count()));
  if (declared != s.count()) throw std::runtime_error("read_sample_set: row count differs from sidecar");
  return s;
}

}  // namespace invflow
