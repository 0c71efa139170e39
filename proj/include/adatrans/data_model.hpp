#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "adatrans/errors.hpp"

namespace adatrans {

enum class OutcomeKind { Continuous, Binary };
enum class ProxyType { Continuous, Binary };

struct DataSchema {
  std::vector<ProxyType> proxy_types;
  OutcomeKind outcome_kind = OutcomeKind::Continuous;

  int d_x() const { return static_cast<int>(proxy_types.size()); }
};

// One population's observational records. Immutable by convention after
// construction; all consumers take it by const reference.
struct PopulationData {
  std::string pop_id;
  Eigen::MatrixXd x;  // n x d_x proxies
  Eigen::VectorXd w;  // n, binary treatments stored as 0.0/1.0
  Eigen::VectorXd y;  // n
  std::optional<Eigen::VectorXd> y0_true;  // generator-only ground truth
  std::optional<Eigen::VectorXd> y1_true;

  int n() const { return static_cast<int>(y.size()); }
  int d_x() const { return static_cast<int>(x.cols()); }
  bool has_truth() const { return y0_true.has_value() && y1_true.has_value(); }

  PopulationData take_rows(const std::vector<int>& rows) const;
};

struct MultiSourceDataset {
  PopulationData target;
  std::vector<PopulationData> sources;
  DataSchema schema;

  int m() const { return static_cast<int>(sources.size()); }
  int d_x() const { return schema.d_x(); }
  int total_n() const;
  // Population d: 0 = target, 1..m = sources in order.
  const PopulationData& population(int d) const {
    return d == 0 ? target : sources[static_cast<std::size_t>(d - 1)];
  }
};

struct SplitSpec {
  int n_train = 0;
  int n_val = 0;
  int n_test = 0;
  std::uint64_t seed = 0;
};

// Disjoint seeded partition of the target. Sources ride with the train view
// only; val/test views carry the target rows alone.
struct TargetSplit {
  MultiSourceDataset train;
  MultiSourceDataset val;
  MultiSourceDataset test;
};

struct Finding {
  std::string pop_id;
  long row = -1;  // -1 when not row-specific
  long col = -1;
  std::string kind;
  std::string message;
};

struct ValidationReport {
  std::vector<Finding> findings;
  bool ok() const { return findings.empty(); }
};

// Manifest-driven load. The manifest is a flat key-value file that names the
// target population, maps pop ids to CSV paths, and carries the column
// schema; see save_dataset for the exact keys. Column types always come from
// the schema, never from the data.
MultiSourceDataset load_dataset(const std::string& manifest_path);

// Writes one CSV per population plus a manifest into `dir`. `extra_keys`
// lines (already "key = value" formatted) are appended verbatim, which the
// generators use to record ground-truth parameters and seeds.
void save_dataset(const MultiSourceDataset& data, const std::string& dir,
                  const std::vector<std::string>& extra_keys = {});

TargetSplit split_target(const MultiSourceDataset& data, const SplitSpec& spec);

ValidationReport validate(const MultiSourceDataset& data);

// Lossless double formatting (shortest round-trip representation).
std::string format_double(double v);

}  // namespace adatrans
