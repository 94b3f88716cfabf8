#pragma once

#include <Eigen/Dense>
#include <json.hpp>
#include <string>
#include <vector>

namespace bidmix {

// One subject's panel block.
//   y : T_i observed responses (occasions 1..T_i)
//   X : T_i x p outcome design rows aligned with y
//   V : m x q dropout design rows, m = min(T, T_i + 1)
//   r : m event indicators; all zero for completers, trailing one otherwise
// A non-completer carries one more dropout row than outcome rows because the
// terminating event happens in the interval after the last observed response.
struct SubjectRecord {
  std::string id;
  Eigen::VectorXd y;
  Eigen::MatrixXd X;
  Eigen::MatrixXd V;
  Eigen::VectorXi r;
  int T_i = 0;
  bool completer = false;
  std::string status;  // optional label for the terminating event ("" if none)

  int risk_rows() const { return static_cast<int>(r.size()); }
};

struct PanelDataset {
  std::vector<SubjectRecord> subjects;
  int T = 0;
  int p = 0;
  int q = 0;
  std::vector<std::string> x_names;
  std::vector<std::string> v_names;

  int n() const { return static_cast<int>(subjects.size()); }
  int total_obs() const;        // sum of T_i
  int total_risk_rows() const;  // sum of min(T, T_i + 1)
  void validate() const;        // throws DataError on invariant violations
};

// Column roles for the long-format CSV layout. Occasions are 1-based and must
// be contiguous within a subject; a trailing row with an empty response cell
// carries the dropout-design covariates for the event interval. A column name
// may appear in both x_columns and v_columns. T == 0 means "infer T from the
// largest occasion present".
struct CsvSchema {
  std::string id_column = "id";
  std::string occasion_column = "occasion";
  std::string response_column = "y";
  std::vector<std::string> x_columns;
  std::vector<std::string> v_columns;
  std::string status_column;  // optional ("" disables)
  int T = 0;

  static CsvSchema from_json(const nlohmann::json& j);
  static CsvSchema from_json_file(const std::string& path);
  nlohmann::json to_json() const;
};

// Monotone decreasing recode of a bounded 0..30 cognitive score onto the real
// line: k -> log(1 + (30 - k)). 30 maps to 0 (no deficit), 0 maps to log(31).
double transform_response(double score);

// Event-indicator vector of length min(T, T_i + 1): zeros with a trailing one
// when T_i < T, all zeros for completers.
Eigen::VectorXi build_dropout_indicators(int T_i, int T);

PanelDataset load_csv(const std::string& path, const CsvSchema& schema);
void write_csv(const PanelDataset& data, const CsvSchema& schema,
               const std::string& path);

// Occasion-by-occasion retention/attrition table plus completer counts, with
// a per-status breakdown of terminating events when statuses are present.
nlohmann::json ingest_summary(const PanelDataset& data);

}  // namespace bidmix
