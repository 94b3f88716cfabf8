// bidmix — command-line front end for the bi-dimensional finite mixture
// model of a longitudinal outcome observed under possibly informative
// dropout. Subcommands cover the whole pipeline: simulate / ingest data,
// fit one model, search a (K1, K2) grid, compute the dropout-sensitivity
// index of a MAR fit, and run perturbation scenarios around it.
//
// Every command writes its artifacts plus a manifest.json recording the
// digests of everything it read and wrote; downstream commands verify those
// digests and refuse inputs that do not chain back to the same dataset.
//
// Exit codes: 0 success, 2 usage error, 3 data/model error, 4 convergence
// failure. Errors are mirrored as one-line JSON on stderr.

#include <CLI11.hpp>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "bidmix/data.hpp"
#include "bidmix/em.hpp"
#include "bidmix/errors.hpp"
#include "bidmix/inference.hpp"
#include "bidmix/model.hpp"
#include "bidmix/report.hpp"
#include "bidmix/selection.hpp"
#include "bidmix/sensitivity.hpp"
#include "bidmix/simulate.hpp"
#include "bidmix/util.hpp"

namespace {

using nlohmann::json;

void print_error(const std::string& type, const std::string& message) {
  json j;
  j["error"] = {{"type", type}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

// "3" -> {3}; "1..4" -> {1,2,3,4}; "1,2,5" -> {1,2,5}.
std::vector<int> parse_grid(const std::string& text, const std::string& flag) {
  auto fail = [&](const std::string& why) -> std::vector<int> {
    throw CLI::ValidationError(flag, why + " (use N, A..B, or a comma list)");
  };
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      return fail("'" + s + "' is not an integer")[0];
    }
    if (used != s.size()) fail("'" + s + "' is not an integer");
    if (v < 1) fail("grid values must be >= 1");
    return v;
  };
  if (text.empty()) return fail("empty grid");
  const std::size_t dots = text.find("..");
  if (dots != std::string::npos) {
    const int a = to_int(text.substr(0, dots));
    const int b = to_int(text.substr(dots + 2));
    if (b < a) return fail("range is decreasing");
    std::vector<int> grid;
    for (int k = a; k <= b; ++k) grid.push_back(k);
    return grid;
  }
  std::vector<int> grid;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string piece =
        text.substr(start, comma == std::string::npos ? std::string::npos
                                                      : comma - start);
    grid.push_back(to_int(piece));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return grid;
}

bidmix::FitMode parse_mode(const std::string& mode) {
  if (mode == "mar") return bidmix::FitMode::MAR;
  if (mode == "mnar") return bidmix::FitMode::MNAR;
  throw CLI::ValidationError("--mode", "must be 'mar' or 'mnar'");
}

bidmix::CsvSchema load_schema(const std::string& schema_path) {
  if (schema_path.empty()) return bidmix::CsvSchema{};
  return bidmix::CsvSchema::from_json_file(schema_path);
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw bidmix::DataError("cannot create output directory '" + dir +
                            "': " + ec.message());
}

// Tracks what a command reads and writes and assembles its manifest.
class ManifestBuilder {
 public:
  ManifestBuilder(std::string command, std::string out_dir,
                  std::vector<std::string> args)
      : out_dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
    manifest_.command = std::move(command);
    manifest_.args = std::move(args);
  }

  void input(const std::string& role, const std::string& path) {
    manifest_.inputs.push_back(bidmix::hash_entry(role, path));
  }
  void output(const std::string& role, const std::string& name) {
    bidmix::ManifestEntry e = bidmix::hash_entry(role, join_path(out_dir_, name));
    e.path = name;  // relative, so the directory stays relocatable
    manifest_.outputs.push_back(std::move(e));
  }
  void config(json cfg) { manifest_.config = std::move(cfg); }
  void seed(std::uint64_t s) { manifest_.seed = s; }

  const bidmix::RunManifest& manifest() const { return manifest_; }

  void save() {
    manifest_.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
            .count();
    bidmix::save_manifest(out_dir_, manifest_);
  }

 private:
  std::string out_dir_;
  std::chrono::steady_clock::time_point start_;
  bidmix::RunManifest manifest_;
};

// Digest recorded for `role` in `entries`, or a DataError naming the manifest.
std::string recorded_digest(const bidmix::RunManifest& m,
                            const std::vector<bidmix::ManifestEntry>& entries,
                            const std::string& role, const std::string& dir) {
  const bidmix::ManifestEntry* e = bidmix::find_entry(entries, role);
  if (!e)
    throw bidmix::DataError("'" + dir + "/manifest.json' (command '" +
                            m.command + "') records no '" + role + "' entry");
  return e->fnv1a64;
}

// Loads <dir>/manifest.json, requires it to come from `command`, verifies the
// digest of the artifact named `role`/`file`, and returns the parsed manifest.
bidmix::RunManifest checked_manifest(const std::string& dir,
                                     const std::string& command,
                                     const std::string& role,
                                     const std::string& file) {
  bidmix::RunManifest m = bidmix::load_manifest(dir);
  if (m.command != command)
    throw bidmix::DataError("'" + dir + "' holds output of command '" +
                            m.command + "', expected '" + command + "'");
  const bidmix::ManifestEntry* e = bidmix::find_entry(m.outputs, role);
  if (!e)
    throw bidmix::DataError("'" + dir + "/manifest.json' records no '" + role +
                            "' output (" + file + ")");
  bidmix::check_entry(dir, *e);
  return m;
}

// Verifies that this command's data/schema pair is byte-identical to the one
// the upstream run consumed.
void check_same_dataset(const bidmix::RunManifest& upstream,
                        const std::string& upstream_dir,
                        const std::string& data_path,
                        const std::string& schema_path) {
  const std::string want =
      recorded_digest(upstream, upstream.inputs, "data", upstream_dir);
  const std::string got = bidmix::to_hex(bidmix::fnv1a64_file(data_path));
  if (got != want)
    throw bidmix::DataError(
        "'" + data_path + "' is not the dataset the run in '" + upstream_dir +
        "' used (digest " + got + ", expected " + want + ")");
  const bidmix::ManifestEntry* se = bidmix::find_entry(upstream.inputs, "schema");
  if ((se != nullptr) != !schema_path.empty())
    throw bidmix::DataError(
        "schema usage differs from the run in '" + upstream_dir +
        "' (one run used --schema, the other did not)");
  if (se) {
    const std::string sgot = bidmix::to_hex(bidmix::fnv1a64_file(schema_path));
    if (sgot != se->fnv1a64)
      throw bidmix::DataError("'" + schema_path +
                              "' is not the schema the run in '" +
                              upstream_dir + "' used (digest mismatch)");
  }
}

struct FitOpts {
  std::string data, schema, out;
  int k1 = 1, k2 = 1;
  std::string mode = "mar";
  int starts = 50;
  int max_iter = 2000;
  double tol = 1e-8;
  std::uint64_t seed = 1;
  int threads = 1;
};

json fit_config_echo(const FitOpts& o) {
  return json{{"data", o.data},       {"schema", o.schema},
              {"out", o.out},         {"k1", o.k1},
              {"k2", o.k2},           {"mode", o.mode},
              {"starts", o.starts},   {"max_iter", o.max_iter},
              {"tol", o.tol},         {"seed", o.seed},
              {"threads", o.threads}};
}

int cmd_fit(const FitOpts& o, const std::vector<std::string>& args) {
  const bidmix::CsvSchema schema = load_schema(o.schema);
  const bidmix::PanelDataset data = bidmix::load_csv(o.data, schema);

  bidmix::FitConfig cfg;
  cfg.K1 = o.k1;
  cfg.K2 = o.k2;
  cfg.mode = parse_mode(o.mode);
  cfg.n_starts = o.starts;
  cfg.max_iter = o.max_iter;
  cfg.rel_tol = o.tol;
  cfg.seed = o.seed;
  cfg.threads = o.threads;

  const bidmix::FitResult fit = bidmix::fit(data, cfg);
  const bidmix::CovarianceEstimate cov = bidmix::sandwich_covariance(data, fit);

  make_out_dir(o.out);
  ManifestBuilder mb("fit", o.out, args);
  mb.input("data", o.data);
  if (!o.schema.empty()) mb.input("schema", o.schema);
  mb.config(fit_config_echo(o));
  mb.seed(o.seed);

  json fj = fit.to_json();
  fj["covariance"] = {
      {"param_names", cov.param_names},
      {"se", cov.se_vector()},
      {"used_pseudo_inverse", cov.used_pseudo_inverse},
      {"warnings", cov.warnings},
  };
  bidmix::write_json_file(join_path(o.out, "fit.json"), fj);
  bidmix::write_se_table_csv(join_path(o.out, "se.csv"), data, fit, cov);
  bidmix::write_weights_csv(join_path(o.out, "weights.csv"), data, fit.weights);
  bidmix::write_trace_csv(join_path(o.out, "trace.csv"), fit.loglik_trace);
  mb.output("fit", "fit.json");
  mb.output("se_table", "se.csv");
  mb.output("weights", "weights.csv");
  mb.output("trace", "trace.csv");
  mb.save();

  for (const std::string& w : cov.warnings) std::cerr << "warning: " << w << "\n";
  if (!fit.converged) {
    print_error("convergence",
                "EM stopped after " + std::to_string(fit.iterations) +
                    " iterations without meeting the tolerance; outputs were "
                    "still written to '" + o.out + "'");
    return 4;
  }
  std::cout << "fit: K1=" << fit.theta.K1() << " K2=" << fit.theta.K2()
            << " mode=" << o.mode << " loglik=" << bidmix::format_g17(fit.loglik)
            << " bic=" << bidmix::format_g17(fit.bic) << " -> " << o.out << "\n";
  return 0;
}

struct SelectOpts {
  std::string data, schema, out;
  std::string k1 = "1..3", k2 = "1..2";
  std::string mode = "mnar";
  int starts = 50;
  int max_iter = 2000;
  double tol = 1e-8;
  std::uint64_t seed = 1;
  int threads = 1;
  bool warm_start = false;
};

int cmd_select(const SelectOpts& o, const std::vector<std::string>& args) {
  const std::vector<int> k1_grid = parse_grid(o.k1, "--k1");
  const std::vector<int> k2_grid = parse_grid(o.k2, "--k2");
  const bidmix::CsvSchema schema = load_schema(o.schema);
  const bidmix::PanelDataset data = bidmix::load_csv(o.data, schema);

  bidmix::FitConfig cfg;
  cfg.mode = parse_mode(o.mode);
  cfg.n_starts = o.starts;
  cfg.max_iter = o.max_iter;
  cfg.rel_tol = o.tol;
  cfg.seed = o.seed;
  cfg.threads = o.threads;

  const bidmix::SelectionResult sel =
      bidmix::grid_search(data, cfg, k1_grid, k2_grid, o.warm_start);

  make_out_dir(o.out);
  ManifestBuilder mb("select", o.out, args);
  mb.input("data", o.data);
  if (!o.schema.empty()) mb.input("schema", o.schema);
  mb.config(json{{"data", o.data},
                 {"schema", o.schema},
                 {"out", o.out},
                 {"k1", o.k1},
                 {"k2", o.k2},
                 {"mode", o.mode},
                 {"starts", o.starts},
                 {"max_iter", o.max_iter},
                 {"tol", o.tol},
                 {"seed", o.seed},
                 {"threads", o.threads},
                 {"warm_start", o.warm_start}});
  mb.seed(o.seed);
  bidmix::write_selection_csv(join_path(o.out, "selection.csv"), sel);
  bidmix::write_json_file(join_path(o.out, "selection.json"), sel.to_json());
  mb.output("selection", "selection.csv");
  mb.output("selection_json", "selection.json");
  mb.save();

  for (const std::string& w : sel.warnings) std::cerr << "warning: " << w << "\n";
  if (sel.best_by_bic < 0) {
    print_error("convergence",
                "no grid cell converged; selection table written to '" + o.out +
                    "'");
    return 4;
  }
  const bidmix::SelectionCell& best = sel.cells[sel.best_by_bic];
  std::cout << "select: best by BIC K1=" << best.K1 << " K2=" << best.K2
            << " bic=" << bidmix::format_g17(best.bic) << " -> " << o.out
            << "\n";
  return 0;
}

struct IsniOpts {
  std::string fit_dir, data, schema, out;
  bool profile_nuisance = false;
};

int cmd_isni(const IsniOpts& o, const std::vector<std::string>& args) {
  const bidmix::RunManifest fm =
      checked_manifest(o.fit_dir, "fit", "fit", "fit.json");
  check_same_dataset(fm, o.fit_dir, o.data, o.schema);

  const json fj = bidmix::read_json_file(join_path(o.fit_dir, "fit.json"));
  bidmix::FitResult fit;
  fit.mode = fj.at("mode").get<std::string>() == "mar" ? bidmix::FitMode::MAR
                                                       : bidmix::FitMode::MNAR;
  fit.theta = bidmix::Theta::from_json(fj.at("theta"));
  if (fit.mode != bidmix::FitMode::MAR)
    throw bidmix::DataError(
        "'" + o.fit_dir +
        "' holds an mnar fit; the sensitivity index is defined at a mar fit");

  const bidmix::CsvSchema schema = load_schema(o.schema);
  const bidmix::PanelDataset data = bidmix::load_csv(o.data, schema);
  const bidmix::IsniResult isni =
      bidmix::isni_matrix(data, fit, o.profile_nuisance);

  make_out_dir(o.out);
  ManifestBuilder mb("isni", o.out, args);
  mb.input("fit", join_path(o.fit_dir, "fit.json"));
  mb.input("data", o.data);
  if (!o.schema.empty()) mb.input("schema", o.schema);
  mb.config(json{{"fit", o.fit_dir},
                 {"data", o.data},
                 {"schema", o.schema},
                 {"out", o.out},
                 {"profile_nuisance", o.profile_nuisance}});
  mb.seed(fm.seed);
  bidmix::write_json_file(join_path(o.out, "isni.json"), isni.to_json());
  bidmix::write_isni_table_csv(join_path(o.out, "isni.csv"), isni);
  mb.output("isni", "isni.json");
  mb.output("isni_table", "isni.csv");
  mb.save();

  std::cout << "isni: " << isni.n_phi() << " outcome parameters x "
            << isni.n_lambda() << " perturbation directions -> " << o.out
            << "\n";
  return 0;
}

struct ScenarioOpts {
  std::string isni_dir, mnar_fit_dir, out;
  int scenario = 1;
  int B = 1000;
  std::vector<double> range{-3.0, 3.0};
  std::uint64_t seed = 1;
};

int cmd_scenario(const ScenarioOpts& o, const std::vector<std::string>& args) {
  const bidmix::RunManifest im =
      checked_manifest(o.isni_dir, "isni", "isni", "isni.json");
  const bidmix::IsniResult isni = bidmix::IsniResult::from_json(
      bidmix::read_json_file(join_path(o.isni_dir, "isni.json")));
  const double lo = o.range[0], hi = o.range[1];
  if (!(lo < hi))
    throw CLI::ValidationError("--range", "needs lo < hi");

  bidmix::ScenarioResult sc;
  if (o.scenario == 1) {
    if (!o.mnar_fit_dir.empty())
      throw CLI::ValidationError("--mnar-fit", "only applies to --scenario 2");
    sc = bidmix::scenario1(isni, o.B, lo, hi, o.seed);
  } else {
    if (o.mnar_fit_dir.empty())
      throw CLI::ValidationError(
          "--mnar-fit", "scenario 2 scales the mnar fit's interaction; pass "
                        "the fit directory");
    const bidmix::RunManifest mm =
        checked_manifest(o.mnar_fit_dir, "fit", "fit", "fit.json");
    const std::string isni_data =
        recorded_digest(im, im.inputs, "data", o.isni_dir);
    const std::string mnar_data =
        recorded_digest(mm, mm.inputs, "data", o.mnar_fit_dir);
    if (isni_data != mnar_data)
      throw bidmix::DataError(
          "the sensitivity results in '" + o.isni_dir +
          "' and the fit in '" + o.mnar_fit_dir +
          "' come from different datasets (data digest mismatch)");
    const json fj = bidmix::read_json_file(join_path(o.mnar_fit_dir, "fit.json"));
    if (fj.at("mode").get<std::string>() != "mnar")
      throw bidmix::DataError("'" + o.mnar_fit_dir +
                              "' holds a mar fit; scenario 2 needs the mnar "
                              "fit whose interaction sets the direction");
    const bidmix::Theta theta_mnar = bidmix::Theta::from_json(fj.at("theta"));
    sc = bidmix::scenario2(isni, theta_mnar, o.B, lo, hi, o.seed);
  }

  make_out_dir(o.out);
  ManifestBuilder mb("scenario", o.out, args);
  mb.input("isni", join_path(o.isni_dir, "isni.json"));
  if (!o.mnar_fit_dir.empty())
    mb.input("mnar_fit", join_path(o.mnar_fit_dir, "fit.json"));
  mb.config(json{{"isni", o.isni_dir},
                 {"mnar_fit", o.mnar_fit_dir},
                 {"out", o.out},
                 {"scenario", o.scenario},
                 {"B", o.B},
                 {"range", o.range},
                 {"seed", o.seed}});
  mb.seed(o.seed);
  bidmix::write_scenario_csv(join_path(o.out, "scenario.csv"), sc);
  bidmix::write_json_file(join_path(o.out, "coverage.json"), sc.coverage_json());
  mb.output("scenario", "scenario.csv");
  mb.output("coverage", "coverage.json");
  mb.save();

  if (sc.overflow)
    std::cerr << "warning: a perturbed mass logit left [-700, 700]; the "
                 "implied mass matrix saturated\n";
  std::cout << "scenario " << o.scenario << ": B=" << sc.B << " range=["
            << bidmix::format_g17(lo) << ", " << bidmix::format_g17(hi)
            << "] -> " << o.out << "\n";
  return 0;
}

struct SimulateOpts {
  std::string spec, out;
};

int cmd_simulate(const SimulateOpts& o, const std::vector<std::string>& args) {
  const bidmix::SimSpec spec =
      bidmix::SimSpec::from_json(bidmix::read_json_file(o.spec));
  const bidmix::SimOutput sim = bidmix::generate(spec);

  bidmix::CsvSchema schema;
  schema.x_columns = sim.data.x_names;
  schema.v_columns = sim.data.v_names;
  schema.T = spec.T;

  make_out_dir(o.out);
  ManifestBuilder mb("simulate", o.out, args);
  mb.input("spec", o.spec);
  mb.config(json{{"spec", o.spec}, {"out", o.out}});
  mb.seed(spec.seed);
  bidmix::write_csv(sim.data, schema, join_path(o.out, "data.csv"));
  json truth;
  truth["schema_version"] = 1;
  truth["theta"] = spec.theta.to_json();
  truth["spec"] = spec.to_json();
  truth["metadata"] = sim.metadata();
  truth["cell_outcome"] = sim.cell_g;
  truth["cell_dropout"] = sim.cell_l;
  bidmix::write_json_file(join_path(o.out, "truth.json"), truth);
  mb.output("data", "data.csv");
  mb.output("truth", "truth.json");
  mb.save();

  std::cout << "simulate: n=" << spec.n << " T=" << spec.T << " redraws="
            << sim.redraw_count << " -> " << o.out << "\n";
  return 0;
}

struct IngestOpts {
  std::string data, schema, out;
};

int cmd_ingest(const IngestOpts& o, const std::vector<std::string>& args) {
  const bidmix::CsvSchema schema = load_schema(o.schema);
  const bidmix::PanelDataset data = bidmix::load_csv(o.data, schema);

  // Rewrite under canonical column names so downstream runs can use the
  // default schema (covariate columns keep their names).
  bidmix::CsvSchema out_schema;
  out_schema.x_columns = data.x_names;
  out_schema.v_columns = data.v_names;
  out_schema.T = data.T;
  if (!schema.status_column.empty()) out_schema.status_column = "status";

  make_out_dir(o.out);
  ManifestBuilder mb("ingest", o.out, args);
  mb.input("data", o.data);
  if (!o.schema.empty()) mb.input("schema", o.schema);
  mb.config(json{{"data", o.data}, {"schema", o.schema}, {"out", o.out}});
  bidmix::write_csv(data, out_schema, join_path(o.out, "data.csv"));
  bidmix::write_json_file(join_path(o.out, "summary.json"),
                          bidmix::ingest_summary(data));
  bidmix::write_json_file(join_path(o.out, "schema.json"),
                          out_schema.to_json());
  mb.output("data", "data.csv");
  mb.output("summary", "summary.json");
  mb.output("schema", "schema.json");
  mb.save();

  std::cout << "ingest: n=" << data.n() << " T=" << data.T << " -> " << o.out
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "bidmix: bi-dimensional finite mixtures for a longitudinal outcome "
      "with informative dropout"};
  app.set_version_flag("--version", "bidmix 0.1.0");
  app.require_subcommand(1);
  const std::vector<std::string> args(argv + 1, argv + argc);

  int rc = 0;
  auto guard = [&rc](auto fn) {
    return [&rc, fn]() {
      try {
        rc = fn();
      } catch (const bidmix::DataError& e) {
        print_error("data", e.what());
        rc = 3;
      } catch (const bidmix::ModelError& e) {
        print_error("model", e.what());
        rc = 3;
      } catch (const bidmix::ConvergenceError& e) {
        print_error("convergence", e.what());
        rc = 4;
      }
    };
  };

  FitOpts fo;
  CLI::App* fit = app.add_subcommand("fit", "Estimate one (K1, K2) model");
  fit->add_option("--data", fo.data, "Long-format CSV")->required();
  fit->add_option("--schema", fo.schema, "Column-role JSON (optional)");
  fit->add_option("--k1", fo.k1, "Outcome mixture components")->required();
  fit->add_option("--k2", fo.k2, "Dropout mixture components")->required();
  fit->add_option("--mode", fo.mode, "mar | mnar (default mar)");
  fit->add_option("--starts", fo.starts, "Random starts (default 50)");
  fit->add_option("--max-iter", fo.max_iter, "EM iteration cap (default 2000)");
  fit->add_option("--tol", fo.tol, "Relative loglik tolerance (default 1e-8)");
  fit->add_option("--seed", fo.seed, "RNG seed (default 1)");
  fit->add_option("--threads", fo.threads, "Worker threads (default 1)");
  fit->add_option("--out", fo.out, "Output directory")->required();
  fit->callback(guard([&]() { return cmd_fit(fo, args); }));

  SelectOpts so;
  CLI::App* sel = app.add_subcommand("select", "Rank a (K1, K2) grid by BIC");
  sel->add_option("--data", so.data, "Long-format CSV")->required();
  sel->add_option("--schema", so.schema, "Column-role JSON (optional)");
  sel->add_option("--k1", so.k1, "Grid, e.g. 1..5 or 1,2,4")->required();
  sel->add_option("--k2", so.k2, "Grid, e.g. 1..3")->required();
  sel->add_option("--mode", so.mode, "mar | mnar (default mnar)");
  sel->add_option("--starts", so.starts, "Random starts per cell (default 50)");
  sel->add_option("--max-iter", so.max_iter, "EM iteration cap (default 2000)");
  sel->add_option("--tol", so.tol, "Relative loglik tolerance (default 1e-8)");
  sel->add_option("--seed", so.seed, "RNG seed (default 1)");
  sel->add_option("--threads", so.threads, "Worker threads (default 1)");
  sel->add_flag("--warm-start", so.warm_start,
                "Seed each cell from the best smaller fitted cell");
  sel->add_option("--out", so.out, "Output directory")->required();
  sel->callback(guard([&]() { return cmd_select(so, args); }));

  IsniOpts io;
  CLI::App* isni = app.add_subcommand(
      "isni", "Sensitivity index of a mar fit to informative dropout");
  isni->add_option("--fit", io.fit_dir, "Directory of the mar fit")->required();
  isni->add_option("--data", io.data, "The CSV the fit used")->required();
  isni->add_option("--schema", io.schema, "Column-role JSON (if the fit used one)");
  isni->add_flag("--profile-nuisance", io.profile_nuisance,
                 "Re-optimize dropout/mass nuisance along the perturbation");
  isni->add_option("--out", io.out, "Output directory")->required();
  isni->callback(guard([&]() { return cmd_isni(io, args); }));

  ScenarioOpts sco;
  CLI::App* scen = app.add_subcommand(
      "scenario", "Monte Carlo perturbation study around a mar fit");
  scen->add_option("--isni", sco.isni_dir, "Directory of the isni output")
      ->required();
  scen->add_option("--scenario", sco.scenario, "1: iid uniform elements; "
                   "2: uniform multiples of the mnar interaction")
      ->check(CLI::Range(1, 2));
  scen->add_option("--B", sco.B, "Number of draws (default 1000)")
      ->check(CLI::PositiveNumber);
  scen->add_option("--range", sco.range, "lo hi of the uniform law")
      ->expected(2);
  scen->add_option("--mnar-fit", sco.mnar_fit_dir,
                   "Directory of the mnar fit (scenario 2)");
  scen->add_option("--seed", sco.seed, "RNG seed (default 1)");
  scen->add_option("--out", sco.out, "Output directory")->required();
  scen->callback(guard([&]() { return cmd_scenario(sco, args); }));

  SimulateOpts simo;
  CLI::App* sim = app.add_subcommand("simulate", "Draw a dataset from the model");
  sim->add_option("--spec", simo.spec, "Generator spec JSON")->required();
  sim->add_option("--out", simo.out, "Output directory")->required();
  sim->callback(guard([&]() { return cmd_simulate(simo, args); }));

  IngestOpts ino;
  CLI::App* ing = app.add_subcommand(
      "ingest", "Validate a CSV and write it back in canonical form");
  ing->add_option("--data", ino.data, "Long-format CSV")->required();
  ing->add_option("--schema", ino.schema, "Column-role JSON (optional)");
  ing->add_option("--out", ino.out, "Output directory")->required();
  ing->callback(guard([&]() { return cmd_ingest(ino, args); }));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }
  return rc;
}
