#include "bidmix/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "bidmix/errors.hpp"
#include "bidmix/util.hpp"

namespace bidmix {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& raw, const std::string& what) {
  std::string s = trim(raw);
  if (s.empty()) throw DataError("empty numeric cell for " + what);
  const char* c = s.c_str();
  char* end = nullptr;
  double v = std::strtod(c, &end);
  if (end != c + s.size())
    throw DataError("cannot parse number '" + s + "' for " + what);
  if (!std::isfinite(v))
    throw DataError("non-finite value '" + s + "' for " + what);
  return v;
}

long parse_long(const std::string& raw, const std::string& what) {
  std::string s = trim(raw);
  if (s.empty()) throw DataError("empty integer cell for " + what);
  const char* c = s.c_str();
  char* end = nullptr;
  long v = std::strtol(c, &end, 10);
  if (end != c + s.size())
    throw DataError("cannot parse integer '" + s + "' for " + what);
  return v;
}

struct RawRow {
  long occasion = 0;
  bool has_y = false;
  double y = 0.0;
  std::vector<double> x;  // NaN-free, only meaningful when has_y
  std::vector<double> v;
  std::string status;
};

int find_column(const std::vector<std::string>& header, const std::string& name,
                const std::string& path) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  throw DataError("column '" + name + "' not found in " + path);
}

}  // namespace

double transform_response(double score) {
  if (!(score >= 0.0 && score <= 30.0))
    throw DataError("score outside [0, 30]: " + format_g17(score));
  return std::log1p(30.0 - score);
}

Eigen::VectorXi build_dropout_indicators(int T_i, int T) {
  if (T < 1) throw DataError("build_dropout_indicators: T must be >= 1");
  if (T_i < 0 || T_i > T)
    throw DataError("build_dropout_indicators: T_i must lie in [0, T]");
  int m = std::min(T, T_i + 1);
  Eigen::VectorXi r = Eigen::VectorXi::Zero(m);
  if (T_i < T) r[m - 1] = 1;
  return r;
}

int PanelDataset::total_obs() const {
  int s = 0;
  for (const auto& subj : subjects) s += subj.T_i;
  return s;
}

int PanelDataset::total_risk_rows() const {
  int s = 0;
  for (const auto& subj : subjects) s += subj.risk_rows();
  return s;
}

void PanelDataset::validate() const {
  if (subjects.empty()) throw DataError("dataset has no subjects");
  if (T < 1) throw DataError("dataset has T < 1");
  if (static_cast<int>(x_names.size()) != p || static_cast<int>(v_names.size()) != q)
    throw DataError("covariate name lists do not match p/q");
  for (const auto& s : subjects) {
    const std::string where = " (subject '" + s.id + "')";
    if (s.T_i < 1 || s.T_i > T) throw DataError("T_i outside [1, T]" + where);
    int m = std::min(T, s.T_i + 1);
    if (s.y.size() != s.T_i) throw DataError("y length != T_i" + where);
    if (s.X.rows() != s.T_i || s.X.cols() != p)
      throw DataError("X shape mismatch" + where);
    if (s.V.rows() != m || s.V.cols() != q)
      throw DataError("V shape mismatch" + where);
    if (s.r.size() != m) throw DataError("r length mismatch" + where);
    if (s.completer != (s.T_i == T))
      throw DataError("completer flag inconsistent with T_i" + where);
    for (int t = 0; t < m; ++t) {
      int expect = (!s.completer && t == m - 1) ? 1 : 0;
      if (s.r[t] != expect)
        throw DataError("event indicators must be a trailing-one pattern" + where);
    }
    if (!s.y.allFinite() || !s.X.allFinite() || !s.V.allFinite())
      throw DataError("non-finite values" + where);
  }
}

CsvSchema CsvSchema::from_json(const nlohmann::json& j) {
  CsvSchema s;
  s.id_column = j.value("id_column", s.id_column);
  s.occasion_column = j.value("occasion_column", s.occasion_column);
  s.response_column = j.value("response_column", s.response_column);
  if (j.contains("x_columns")) s.x_columns = j.at("x_columns").get<std::vector<std::string>>();
  if (j.contains("v_columns")) s.v_columns = j.at("v_columns").get<std::vector<std::string>>();
  s.status_column = j.value("status_column", std::string());
  s.T = j.value("T", 0);
  if (s.T < 0) throw DataError("schema: T must be >= 0");
  return s;
}

CsvSchema CsvSchema::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("invalid schema JSON in " + path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json CsvSchema::to_json() const {
  nlohmann::json j;
  j["id_column"] = id_column;
  j["occasion_column"] = occasion_column;
  j["response_column"] = response_column;
  j["x_columns"] = x_columns;
  j["v_columns"] = v_columns;
  if (!status_column.empty()) j["status_column"] = status_column;
  if (T > 0) j["T"] = T;
  return j;
}

PanelDataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw DataError("empty data file: " + path);
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  const int id_idx = find_column(header, schema.id_column, path);
  const int occ_idx = find_column(header, schema.occasion_column, path);
  const int y_idx = find_column(header, schema.response_column, path);
  std::vector<int> x_idx, v_idx;
  for (const auto& name : schema.x_columns) x_idx.push_back(find_column(header, name, path));
  for (const auto& name : schema.v_columns) v_idx.push_back(find_column(header, name, path));
  int status_idx = -1;
  if (!schema.status_column.empty())
    status_idx = find_column(header, schema.status_column, path);

  // Group rows by subject, keeping first-appearance order.
  std::vector<std::string> id_order;
  std::map<std::string, std::vector<RawRow>> by_id;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " cells, got " +
                      std::to_string(cells.size()));
    const std::string where = path + ":" + std::to_string(line_no);
    std::string id = trim(cells[id_idx]);
    if (id.empty()) throw DataError(where + ": empty subject id");

    RawRow row;
    row.occasion = parse_long(cells[occ_idx], where + " occasion");
    if (row.occasion < 1) throw DataError(where + ": occasion must be >= 1");
    std::string ycell = trim(cells[y_idx]);
    row.has_y = !ycell.empty();
    if (row.has_y) row.y = parse_double(ycell, where + " response");
    if (row.has_y)
      for (std::size_t j = 0; j < x_idx.size(); ++j)
        row.x.push_back(parse_double(cells[x_idx[j]], where + " " + schema.x_columns[j]));
    for (std::size_t j = 0; j < v_idx.size(); ++j)
      row.v.push_back(parse_double(cells[v_idx[j]], where + " " + schema.v_columns[j]));
    if (status_idx >= 0) row.status = trim(cells[status_idx]);

    auto it = by_id.find(id);
    if (it == by_id.end()) {
      id_order.push_back(id);
      it = by_id.emplace(id, std::vector<RawRow>()).first;
    }
    it->second.push_back(row);
  }
  if (id_order.empty()) throw DataError("no data rows in " + path);

  // Sort each subject's rows by occasion and check contiguity from 1.
  long max_occ = 0;
  for (auto& [id, rows] : by_id) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const RawRow& a, const RawRow& b) { return a.occasion < b.occasion; });
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k].occasion != static_cast<long>(k + 1)) {
        if (k > 0 && rows[k].occasion == rows[k - 1].occasion)
          throw DataError("duplicate occasion " + std::to_string(rows[k].occasion) +
                          " for subject '" + id + "'");
        throw DataError("non-contiguous occasions for subject '" + id +
                        "' (intermittent missingness is unsupported)");
      }
    }
    max_occ = std::max(max_occ, rows.back().occasion);
  }

  int T = schema.T;
  if (T == 0) T = static_cast<int>(max_occ);
  if (max_occ > T)
    throw DataError("occasion " + std::to_string(max_occ) +
                    " exceeds the declared study length T=" + std::to_string(T));

  PanelDataset data;
  data.T = T;
  data.p = static_cast<int>(schema.x_columns.size());
  data.q = static_cast<int>(schema.v_columns.size());
  data.x_names = schema.x_columns;
  data.v_names = schema.v_columns;

  for (const auto& id : id_order) {
    const auto& rows = by_id[id];
    // The response must cover a prefix of the occasions; one optional
    // response-free row at the end carries the event-interval covariates.
    int T_i = 0;
    while (T_i < static_cast<int>(rows.size()) && rows[T_i].has_y) ++T_i;
    for (std::size_t k = T_i; k < rows.size(); ++k)
      if (rows[k].has_y)
        throw DataError("non-contiguous responses for subject '" + id +
                        "' (intermittent missingness is unsupported)");
    if (T_i == 0)
      throw DataError("subject '" + id + "' has no observed responses");
    int extra = static_cast<int>(rows.size()) - T_i;
    if (extra > 1)
      throw DataError("subject '" + id + "' has " + std::to_string(extra) +
                      " rows beyond the last observed response; at most one "
                      "event row is allowed");
    if (T_i == T && extra == 1)
      throw DataError("subject '" + id + "' completed the study but has an event row");

    SubjectRecord s;
    s.id = id;
    s.T_i = T_i;
    s.completer = (T_i == T);
    const int m = std::min(T, T_i + 1);
    s.y.resize(T_i);
    s.X.resize(T_i, data.p);
    s.V.resize(m, data.q);
    for (int t = 0; t < T_i; ++t) {
      s.y[t] = rows[t].y;
      for (int j = 0; j < data.p; ++j) s.X(t, j) = rows[t].x[j];
      for (int j = 0; j < data.q; ++j) s.V(t, j) = rows[t].v[j];
    }
    if (m == T_i + 1) {
      if (extra == 1) {
        for (int j = 0; j < data.q; ++j) s.V(T_i, j) = rows[T_i].v[j];
      } else {
        // No explicit event row: extend each dropout covariate one occasion.
        // Constant and affine-in-occasion columns extend exactly; anything
        // else cannot be reconstructed and must be supplied explicitly.
        for (int j = 0; j < data.q; ++j) {
          if (T_i == 1) {
            s.V(1, j) = s.V(0, j);
            continue;
          }
          double step = s.V(1, j) - s.V(0, j);
          double scale = 1.0;
          for (int t = 0; t < T_i; ++t) scale = std::max(scale, std::abs(s.V(t, j)));
          for (int t = 2; t < T_i; ++t) {
            if (std::abs((s.V(t, j) - s.V(t - 1, j)) - step) > 1e-9 * scale)
              throw DataError("cannot extend dropout covariate '" + data.v_names[j] +
                              "' past the last response for subject '" + id +
                              "': values are not affine in the occasion; supply an "
                              "explicit event row");
          }
          s.V(T_i, j) = s.V(T_i - 1, j) + step;
        }
      }
    }
    s.r = build_dropout_indicators(T_i, T);
    if (!rows.empty()) s.status = rows.back().status;
    data.subjects.push_back(std::move(s));
  }

  data.validate();
  return data;
}

void write_csv(const PanelDataset& data, const CsvSchema& schema,
               const std::string& path) {
  data.validate();
  if (static_cast<int>(schema.x_columns.size()) != data.p ||
      static_cast<int>(schema.v_columns.size()) != data.q)
    throw DataError("write_csv: schema covariate lists do not match the dataset");

  bool any_status = false;
  for (const auto& s : data.subjects) any_status |= !s.status.empty();
  const bool with_status = any_status && !schema.status_column.empty();

  // Shared column names appear once; dropout-design values win for occasions
  // that carry both (the loader reads the same cell into X and V).
  std::vector<std::string> cols;      // covariate columns, in output order
  std::vector<int> col_x(data.p + data.q, -1), col_v(data.p + data.q, -1);
  for (int j = 0; j < data.p; ++j) {
    cols.push_back(schema.x_columns[j]);
    col_x[j] = j;
  }
  int ncols = data.p;
  for (int j = 0; j < data.q; ++j) {
    auto it = std::find(cols.begin(), cols.end(), schema.v_columns[j]);
    int slot;
    if (it == cols.end()) {
      cols.push_back(schema.v_columns[j]);
      slot = ncols++;
    } else {
      slot = static_cast<int>(it - cols.begin());
    }
    col_v[slot] = j;
  }
  cols.resize(ncols);

  std::ofstream out(path);
  if (!out) throw DataError("cannot open output file: " + path);
  out << schema.id_column << ',' << schema.occasion_column << ','
      << schema.response_column;
  for (const auto& c : cols) out << ',' << c;
  if (with_status) out << ',' << schema.status_column;
  out << '\n';

  for (const auto& s : data.subjects) {
    const int m = s.risk_rows();
    const int rows = s.completer ? s.T_i : m;  // event row written explicitly
    for (int t = 0; t < rows; ++t) {
      const bool has_y = t < s.T_i;
      out << s.id << ',' << (t + 1) << ',';
      if (has_y) out << format_g17(s.y[t]);
      for (int c = 0; c < ncols; ++c) {
        out << ',';
        if (col_v[c] >= 0 && t < m)
          out << format_g17(s.V(t, col_v[c]));
        else if (col_x[c] >= 0 && has_y)
          out << format_g17(s.X(t, col_x[c]));
      }
      if (with_status) {
        out << ',';
        if (t == rows - 1) out << s.status;
      }
      out << '\n';
    }
  }
  if (!out) throw DataError("failed while writing " + path);
}

nlohmann::json ingest_summary(const PanelDataset& data) {
  data.validate();
  nlohmann::json j;
  j["n"] = data.n();
  j["T"] = data.T;
  j["p"] = data.p;
  j["q"] = data.q;
  j["total_observations"] = data.total_obs();

  int completers = 0;
  for (const auto& s : data.subjects) completers += s.completer ? 1 : 0;
  j["completers"] = completers;
  j["completer_pct"] = 100.0 * completers / data.n();

  nlohmann::json occasions = nlohmann::json::array();
  for (int t = 1; t < data.T; ++t) {
    int at_risk = 0, continued = 0, dropped = 0;
    std::map<std::string, int> by_status;
    for (const auto& s : data.subjects) {
      if (s.T_i >= t) ++at_risk;
      if (s.T_i >= t + 1) ++continued;
      if (s.T_i == t) {
        ++dropped;
        ++by_status[s.status.empty() ? std::string("unspecified") : s.status];
      }
    }
    nlohmann::json row;
    row["occasion"] = t;
    row["at_risk"] = at_risk;
    row["continued"] = continued;
    row["dropped"] = dropped;
    row["continued_pct"] = at_risk > 0 ? 100.0 * continued / at_risk : 0.0;
    row["dropped_pct"] = at_risk > 0 ? 100.0 * dropped / at_risk : 0.0;
    if (!by_status.empty() && !(by_status.size() == 1 && by_status.count("unspecified")))
      row["by_status"] = by_status;
    occasions.push_back(row);
  }
  j["attrition"] = occasions;
  return j;
}

}  // namespace bidmix
