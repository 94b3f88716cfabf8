#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "bidmix/data.hpp"
#include "bidmix/em.hpp"
#include "bidmix/inference.hpp"
#include "bidmix/selection.hpp"
#include "bidmix/sensitivity.hpp"

namespace bidmix {

// Serializes `j` with two-space indent, sorted keys, and a trailing newline,
// so equal content always produces byte-identical files.
void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);  // throws DataError

// Coefficient/SE table. Header: process,variable,estimate,se. Rows: outcome
// block (mixing-mean Intercept, covariate slopes, sigma_y, mixing SD
// sigma_b1), dropout block (Intercept, slopes, sigma_b2), then — when the
// fit carries a full mass matrix — joint rows sigma_b1b2 and rho_b1b2, and a
// trailing summary block with logLik and BIC (empty se cells).
void write_se_table_csv(const std::string& path, const PanelDataset& data,
                        const FitResult& fit, const CovarianceEstimate& cov);

// Sensitivity table, one row per outcome parameter. Header: variable,se,
// isni_norm,isni_norm_over_se,isni_min,isni_min_over_se,isni_max,isni_max_over_se.
void write_isni_table_csv(const std::string& path, const IsniResult& isni);

// Grid table in the result's order. Header: K1,K2,loglik,n_params,aic,bic,converged.
void write_selection_csv(const std::string& path, const SelectionResult& sel);

// Posterior cell memberships, one row per subject: id,w_1_1,...,w_K1_K2
// (cells row-major in the outcome component).
void write_weights_csv(const std::string& path, const PanelDataset& data,
                       const PosteriorWeights& weights);

// Log-likelihood path of the winning start. Header: iteration,loglik (1-based).
void write_trace_csv(const std::string& path, const std::vector<double>& trace);

// Per-draw table: draw, c (scenario 2 only), one column per lambda element,
// one per outcome parameter, and rho12 (scenario 2 only).
void write_scenario_csv(const std::string& path, const ScenarioResult& sc);

// Provenance stamp each command writes next to its artifacts. Downstream
// commands recompute the digests recorded here and refuse stale or
// mismatched inputs, so a pipeline can only be assembled from artifacts
// that were actually produced from one another.
struct ManifestEntry {
  std::string role;     // what the file is to the command ("data", "fit", ...)
  std::string path;     // as passed on the command line
  std::string fnv1a64;  // hex digest of the file bytes
};

struct RunManifest {
  std::string tool = "bidmix";
  std::string version = "0.1.0";
  std::string command;                 // subcommand name
  std::vector<std::string> args;       // argv after the program name
  nlohmann::json config;               // effective options echo
  std::vector<ManifestEntry> inputs;   // files read, hashed before the run
  std::vector<ManifestEntry> outputs;  // files written, hashed after writing
  std::uint64_t seed = 0;
  double wall_time_s = 0;  // the only non-reproducible field

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

ManifestEntry hash_entry(const std::string& role, const std::string& path);
void save_manifest(const std::string& dir, const RunManifest& m);
RunManifest load_manifest(const std::string& dir);  // throws DataError

// First entry with the given role, or nullptr.
const ManifestEntry* find_entry(const std::vector<ManifestEntry>& entries,
                                const std::string& role);

// Recomputes the digest of `entry`'s file (resolved against `dir` when the
// recorded path is relative) and throws DataError on mismatch or absence.
void check_entry(const std::string& dir, const ManifestEntry& entry);

}  // namespace bidmix
