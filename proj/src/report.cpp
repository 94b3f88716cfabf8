#include "bidmix/report.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bidmix/errors.hpp"
#include "bidmix/util.hpp"

namespace bidmix {

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  return out;
}

// CSV field quoting for the rare non-numeric cells (ids, names).
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  quoted += '"';
  return quoted;
}

std::string covariate_name(const std::vector<std::string>& names, int j,
                           const char* prefix) {
  if (j < static_cast<int>(names.size()) && !names[j].empty()) return names[j];
  return prefix + std::to_string(j + 1);
}

}  // namespace

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out = open_out(path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("failed writing '" + path + "'");
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
  return j;
}

void write_se_table_csv(const std::string& path, const PanelDataset& data,
                        const FitResult& fit, const CovarianceEstimate& cov) {
  const Theta& th = fit.theta;
  const FreeParamLayout& lay = cov.layout;
  const MomentSummaries ms = moment_summaries(th, cov);
  std::ofstream out = open_out(path);
  out << "process,variable,estimate,se\n";
  auto row = [&](const char* process, const std::string& variable, double est,
                 double se) {
    out << process << ',' << csv_field(variable) << ',' << format_g17(est) << ','
        << format_g17(se) << '\n';
  };
  // Outcome block.
  row("outcome", "Intercept", ms.moments.mean1, ms.se_mean1);
  for (int j = 0; j < lay.p; ++j)
    row("outcome", covariate_name(data.x_names, j, "x"), th.beta(j),
        cov.se(lay.beta_offset() + j));
  row("outcome", "sigma_y", ms.sigma_y, ms.se_sigma_y);
  row("outcome", "sigma_b1", ms.moments.sd1, ms.se_sd1);
  // Dropout block.
  row("dropout", "Intercept", ms.moments.mean2, ms.se_mean2);
  for (int j = 0; j < lay.q; ++j)
    row("dropout", covariate_name(data.v_names, j, "v"), th.gamma(j),
        cov.se(lay.gamma_offset() + j));
  row("dropout", "sigma_b2", ms.moments.sd2, ms.se_sd2);
  // Joint mixing rows only when the mass matrix can couple the processes.
  if (fit.mode == FitMode::MNAR) {
    row("joint", "sigma_b1b2", ms.moments.cov12, ms.se_cov12);
    row("joint", "rho_b1b2", ms.moments.rho12, ms.se_rho12);
  }
  out << "summary,logLik," << format_g17(fit.loglik) << ",\n";
  out << "summary,BIC," << format_g17(fit.bic) << ",\n";
  if (!out) throw DataError("failed writing '" + path + "'");
}

void write_isni_table_csv(const std::string& path, const IsniResult& isni) {
  const std::vector<IsniRow> rows = isni_summaries(isni);
  std::ofstream out = open_out(path);
  out << "variable,se,isni_norm,isni_norm_over_se,isni_min,isni_min_over_se,"
         "isni_max,isni_max_over_se\n";
  for (const IsniRow& r : rows) {
    out << csv_field(r.name) << ',' << format_g17(r.se) << ','
        << format_g17(r.norm) << ',' << format_g17(r.norm_over_se) << ','
        << format_g17(r.min) << ',' << format_g17(r.min_over_se) << ','
        << format_g17(r.max) << ',' << format_g17(r.max_over_se) << '\n';
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

void write_selection_csv(const std::string& path, const SelectionResult& sel) {
  std::ofstream out = open_out(path);
  out << "K1,K2,loglik,n_params,aic,bic,converged\n";
  for (const SelectionCell& c : sel.cells) {
    out << c.K1 << ',' << c.K2 << ',' << format_g17(c.loglik) << ','
        << c.n_params << ',' << format_g17(c.aic) << ',' << format_g17(c.bic)
        << ',' << (c.converged ? 1 : 0) << '\n';
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

void write_weights_csv(const std::string& path, const PanelDataset& data,
                       const PosteriorWeights& weights) {
  const int n = static_cast<int>(weights.W.rows());
  if (n != static_cast<int>(data.subjects.size()))
    throw DataError("weights table: row count does not match the dataset");
  std::ofstream out = open_out(path);
  out << "id";
  for (int g = 0; g < weights.K1; ++g)
    for (int l = 0; l < weights.K2; ++l)
      out << ",w_" << (g + 1) << '_' << (l + 1);
  out << '\n';
  for (int i = 0; i < n; ++i) {
    out << csv_field(data.subjects[i].id);
    for (int c = 0; c < weights.K1 * weights.K2; ++c)
      out << ',' << format_g17(weights.W(i, c));
    out << '\n';
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

void write_trace_csv(const std::string& path, const std::vector<double>& trace) {
  std::ofstream out = open_out(path);
  out << "iteration,loglik\n";
  for (std::size_t k = 0; k < trace.size(); ++k)
    out << (k + 1) << ',' << format_g17(trace[k]) << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

void write_scenario_csv(const std::string& path, const ScenarioResult& sc) {
  std::ofstream out = open_out(path);
  out << "draw";
  if (sc.scenario == 2) out << ",c";
  for (const std::string& name : sc.lambda_names) out << ',' << csv_field(name);
  for (const std::string& name : sc.phi_names) out << ',' << csv_field(name);
  if (sc.scenario == 2) out << ",rho12";
  out << '\n';
  for (int b = 0; b < sc.B; ++b) {
    out << (b + 1);
    if (sc.scenario == 2) out << ',' << format_g17(sc.c_draws(b));
    for (int k = 0; k < sc.lambda_draws.cols(); ++k)
      out << ',' << format_g17(sc.lambda_draws(b, k));
    for (int d = 0; d < sc.phi_approx.cols(); ++d)
      out << ',' << format_g17(sc.phi_approx(b, d));
    if (sc.scenario == 2) out << ',' << format_g17(sc.rho12(b));
    out << '\n';
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

nlohmann::json RunManifest::to_json() const {
  auto entries = [](const std::vector<ManifestEntry>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const ManifestEntry& e : v)
      a.push_back({{"role", e.role}, {"path", e.path}, {"fnv1a64", e.fnv1a64}});
    return a;
  };
  nlohmann::json j;
  j["schema_version"] = 1;
  j["tool"] = tool;
  j["version"] = version;
  j["command"] = command;
  j["args"] = args;
  j["config"] = config;
  j["inputs"] = entries(inputs);
  j["outputs"] = entries(outputs);
  j["seed"] = seed;
  j["wall_time_s"] = wall_time_s;
  return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    auto entries = [](const nlohmann::json& a) {
      std::vector<ManifestEntry> v;
      for (const nlohmann::json& e : a)
        v.push_back({e.at("role").get<std::string>(),
                     e.at("path").get<std::string>(),
                     e.at("fnv1a64").get<std::string>()});
      return v;
    };
    m.tool = j.at("tool").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.args = j.at("args").get<std::vector<std::string>>();
    m.config = j.at("config");
    m.inputs = entries(j.at("inputs"));
    m.outputs = entries(j.at("outputs"));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.wall_time_s = j.at("wall_time_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: missing or malformed field: ") +
                    e.what());
  }
  if (m.tool != "bidmix") throw DataError("manifest: unrecognized tool '" + m.tool + "'");
  return m;
}

ManifestEntry hash_entry(const std::string& role, const std::string& path) {
  return ManifestEntry{role, path, to_hex(fnv1a64_file(path))};
}

void save_manifest(const std::string& dir, const RunManifest& m) {
  write_json_file((std::filesystem::path(dir) / "manifest.json").string(),
                  m.to_json());
}

RunManifest load_manifest(const std::string& dir) {
  const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
  if (!std::filesystem::exists(path))
    throw DataError("'" + dir + "' has no manifest.json; not a tool output directory");
  return RunManifest::from_json(read_json_file(path));
}

const ManifestEntry* find_entry(const std::vector<ManifestEntry>& entries,
                                const std::string& role) {
  for (const ManifestEntry& e : entries)
    if (e.role == role) return &e;
  return nullptr;
}

void check_entry(const std::string& dir, const ManifestEntry& entry) {
  std::filesystem::path p(entry.path);
  if (p.is_relative()) p = std::filesystem::path(dir) / p;
  if (!std::filesystem::exists(p))
    throw DataError("manifest references missing file '" + p.string() + "'");
  const std::string digest = to_hex(fnv1a64_file(p.string()));
  if (digest != entry.fnv1a64)
    throw DataError("'" + p.string() + "' does not match the digest in '" + dir +
                    "/manifest.json' (file changed since it was produced)");
}

}  // namespace bidmix
