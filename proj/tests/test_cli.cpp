#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bidmix/data.hpp>
#include <bidmix/model.hpp>
#include <bidmix/report.hpp>
#include <bidmix/simulate.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "bidmix_cli_XXXXXX").string();
    REQUIRE(mkdtemp(tmpl.data()) != nullptr);
    path = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RunOut {
  int rc = -1;
  std::string out, err;
};

// Runs the CLI with the given argument string, capturing streams.
RunOut run(const TempDir& d, const std::string& args) {
  const std::string out_f = d.sub(".stdout"), err_f = d.sub(".stderr");
  const std::string cmd = std::string("'") + BIDMIX_CLI_PATH + "' " + args +
                          " >'" + out_f + "' 2>'" + err_f + "'";
  const int st = std::system(cmd.c_str());
  RunOut r;
  r.rc = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  r.out = slurp(out_f);
  r.err = slurp(err_f);
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

std::string first_line(const std::string& text) {
  return text.substr(0, text.find('\n'));
}

bidmix::SimSpec pipeline_spec() {
  bidmix::Theta t;
  t.beta.resize(1);
  t.beta << 0.6;
  t.zeta1.resize(2);
  t.zeta1 << 1.0, 2.4;
  t.sigma_y = 0.7;
  t.gamma.resize(1);
  t.gamma << 0.25;
  t.zeta2.resize(2);
  t.zeta2 << -2.2, -0.7;
  t.Pi.resize(2, 2);
  t.Pi << 0.32, 0.08, 0.12, 0.48;

  bidmix::SimSpec spec;
  spec.theta = t;
  spec.n = 300;
  spec.T = 4;
  spec.seed = 101;
  bidmix::CovariateSpec trt;
  trt.kind = bidmix::CovariateSpec::Kind::Bernoulli;
  trt.name = "trt";
  trt.prob = 0.5;
  bidmix::CovariateSpec occ;
  occ.kind = bidmix::CovariateSpec::Kind::TimeLinear;
  occ.name = "occ";
  occ.intercept = 1.0;
  occ.slope = 0.5;
  spec.x_covariates = {trt};
  spec.v_covariates = {occ};
  return spec;
}

}  // namespace

TEST_CASE("help, version, and usage errors") {
  TempDir d;
  CHECK(run(d, "--help").rc == 0);
  CHECK(contains(run(d, "--help").out, "bidmix"));
  const RunOut ver = run(d, "--version");
  CHECK(ver.rc == 0);
  CHECK(contains(ver.out, "bidmix 0.1.0"));
  CHECK(run(d, "fit --help").rc == 0);

  // Missing subcommand / missing required options / bad values: rc 2 with a
  // one-line JSON error on stderr.
  const RunOut none = run(d, "");
  CHECK(none.rc == 2);
  CHECK(contains(none.err, "\"type\":\"usage\""));
  CHECK(run(d, "fit --k1 2 --k2 1 --out x").rc == 2);
  CHECK(run(d, "select --data x.csv --k1 3..1 --k2 1 --out y").rc == 2);
  CHECK(run(d, "select --data x.csv --k1 1..2 --k2 0 --out y").rc == 2);
  CHECK(run(d, "scenario --isni x --scenario 3 --out y").rc == 2);
  CHECK(run(d, "bogus-subcommand").rc == 2);
}

TEST_CASE("the pipeline runs end to end with verified provenance") {
  TempDir d;

  // ---- simulate
  const bidmix::SimSpec spec = pipeline_spec();
  bidmix::write_json_file(d.sub("spec.json"), spec.to_json());
  const RunOut sim =
      run(d, "simulate --spec '" + d.sub("spec.json") + "' --out '" + d.sub("sim") + "'");
  CHECK(sim.rc == 0);
  CHECK(contains(sim.out, "simulate: n=300 T=4"));
  CHECK(fs::exists(d.sub("sim") + "/data.csv"));
  CHECK(fs::exists(d.sub("sim") + "/truth.json"));
  const bidmix::RunManifest sim_m = bidmix::load_manifest(d.sub("sim"));
  CHECK(sim_m.command == "simulate");
  CHECK(sim_m.seed == 101);
  for (const auto& e : sim_m.outputs) bidmix::check_entry(d.sub("sim"), e);

  // ---- ingest (canonical rewrite is idempotent on canonical input)
  bidmix::CsvSchema schema;
  schema.x_columns = {"trt"};
  schema.v_columns = {"occ"};
  schema.T = 4;
  bidmix::write_json_file(d.sub("schema.json"), schema.to_json());
  const RunOut ing = run(d, "ingest --data '" + d.sub("sim") + "/data.csv' --schema '" +
                                d.sub("schema.json") + "' --out '" + d.sub("ing") + "'");
  CHECK(ing.rc == 0);
  CHECK(contains(ing.out, "ingest: n=300 T=4"));
  CHECK(slurp(d.sub("ing") + "/data.csv") == slurp(d.sub("sim") + "/data.csv"));
  const nlohmann::json summary = bidmix::read_json_file(d.sub("ing") + "/summary.json");
  CHECK(summary["n"] == 300);
  CHECK(summary["T"] == 4);
  CHECK(summary["p"] == 1);
  CHECK(summary["q"] == 1);
  CHECK(summary["attrition"].size() == 3);

  const std::string data_arg = "--data '" + d.sub("ing") + "/data.csv' --schema '" +
                               d.sub("ing") + "/schema.json'";

  // ---- fit (MAR)
  const std::string fit_args = " --k1 2 --k2 2 --starts 4 --max-iter 3000 "
                               "--tol 1e-10 --seed 7 ";
  const RunOut fmar = run(d, "fit " + data_arg + fit_args + "--mode mar --out '" +
                                 d.sub("fitmar") + "'");
  CHECK(fmar.rc == 0);
  CHECK(contains(first_line(fmar.out), "fit: K1=2 K2=2 mode=mar loglik="));
  const nlohmann::json fj = bidmix::read_json_file(d.sub("fitmar") + "/fit.json");
  CHECK(fj["mode"] == "mar");
  CHECK(fj["converged"] == true);
  CHECK(fj["covariance"]["param_names"].size() == 9);  // 1+2+1+1+2 + margins
  (void)bidmix::Theta::from_json(fj["theta"]);         // parses and validates

  const std::string se_csv = slurp(d.sub("fitmar") + "/se.csv");
  CHECK(first_line(se_csv) == "process,variable,estimate,se");
  CHECK(contains(se_csv, "outcome,Intercept,"));
  CHECK(contains(se_csv, "outcome,trt,"));
  CHECK(contains(se_csv, "outcome,sigma_y,"));
  CHECK(contains(se_csv, "dropout,occ,"));
  CHECK(contains(se_csv, "summary,logLik,"));
  CHECK(contains(se_csv, "summary,BIC,"));
  CHECK_FALSE(contains(se_csv, "joint,"));  // MAR carries no joint mixing rows

  const std::string weights_csv = slurp(d.sub("fitmar") + "/weights.csv");
  CHECK(first_line(weights_csv) == "id,w_1_1,w_1_2,w_2_1,w_2_2");
  int weight_lines = 0;
  for (char c : weights_csv) weight_lines += (c == '\n');
  CHECK(weight_lines == 301);

  // The trace is the winner's log-likelihood path and never decreases.
  {
    std::istringstream tr(slurp(d.sub("fitmar") + "/trace.csv"));
    std::string line;
    std::getline(tr, line);
    CHECK(line == "iteration,loglik");
    double prev = -std::numeric_limits<double>::infinity();
    int rows = 0;
    while (std::getline(tr, line)) {
      const double ll = std::stod(line.substr(line.find(',') + 1));
      CHECK(ll >= prev);
      prev = ll;
      ++rows;
    }
    CHECK(rows >= 2);
  }

  // Re-running the same command elsewhere reproduces fit.json byte for byte.
  const RunOut fmar2 = run(d, "fit " + data_arg + fit_args + "--mode mar --out '" +
                                  d.sub("fitmar2") + "'");
  CHECK(fmar2.rc == 0);
  CHECK(slurp(d.sub("fitmar2") + "/fit.json") == slurp(d.sub("fitmar") + "/fit.json"));
  CHECK(slurp(d.sub("fitmar2") + "/se.csv") == se_csv);

  // ---- fit (MNAR) for scenario 2
  const RunOut fmnar = run(d, "fit " + data_arg + fit_args + "--mode mnar --out '" +
                                  d.sub("fitmnar") + "'");
  CHECK(fmnar.rc == 0);
  const std::string se_mnar = slurp(d.sub("fitmnar") + "/se.csv");
  CHECK(contains(se_mnar, "joint,sigma_b1b2,"));
  CHECK(contains(se_mnar, "joint,rho_b1b2,"));

  // ---- isni
  const RunOut isni = run(d, "isni --fit '" + d.sub("fitmar") + "' " + data_arg +
                                 " --out '" + d.sub("isni") + "'");
  CHECK(isni.rc == 0);
  CHECK(contains(isni.out, "isni: 4 outcome parameters x 1 perturbation"));
  const std::string isni_csv = slurp(d.sub("isni") + "/isni.csv");
  CHECK(first_line(isni_csv) ==
        "variable,se,isni_norm,isni_norm_over_se,isni_min,isni_min_over_se,"
        "isni_max,isni_max_over_se");
  CHECK(contains(isni_csv, "zeta1_1,"));
  CHECK(contains(isni_csv, "sigma_y,"));

  // Pointing isni at the MNAR fit is a data error (rc 3).
  const RunOut wrong = run(d, "isni --fit '" + d.sub("fitmnar") + "' " + data_arg +
                                  " --out '" + d.sub("isni_bad") + "'");
  CHECK(wrong.rc == 3);
  CHECK(contains(wrong.err, "\"type\":\"data\""));
  CHECK(contains(wrong.err, "holds an mnar fit"));

  // ---- scenario 1
  const RunOut sc1 = run(d, "scenario --isni '" + d.sub("isni") +
                                "' --scenario 1 --B 200 --range -1 1 --seed 3 "
                                "--out '" + d.sub("sc1") + "'");
  CHECK(sc1.rc == 0);
  const nlohmann::json cov1 = bidmix::read_json_file(d.sub("sc1") + "/coverage.json");
  CHECK(cov1["scenario"] == 1);
  CHECK(cov1["B"] == 200);
  CHECK(cov1["coverage"].contains("zeta1_1"));
  CHECK(cov1["coverage"].contains("sigma_y"));
  const std::string sc1_csv = slurp(d.sub("sc1") + "/scenario.csv");
  CHECK(first_line(sc1_csv) == "draw,lambda_1_1,zeta1_1,zeta1_2,trt,sigma_y");
  int sc1_lines = 0;
  for (char c : sc1_csv) sc1_lines += (c == '\n');
  CHECK(sc1_lines == 201);

  // ---- scenario 2 (needs the MNAR fit; both must share the dataset)
  const RunOut sc2 = run(d, "scenario --isni '" + d.sub("isni") +
                                "' --scenario 2 --mnar-fit '" + d.sub("fitmnar") +
                                "' --B 100 --range 0 2 --seed 5 --out '" +
                                d.sub("sc2") + "'");
  CHECK(sc2.rc == 0);
  const std::string sc2_csv = slurp(d.sub("sc2") + "/scenario.csv");
  CHECK(first_line(sc2_csv) == "draw,c,lambda_1_1,zeta1_1,zeta1_2,trt,sigma_y,rho12");
  CHECK(bidmix::read_json_file(d.sub("sc2") + "/coverage.json")["scenario"] == 2);

  // Scenario/flag mismatches are usage errors.
  CHECK(run(d, "scenario --isni '" + d.sub("isni") + "' --scenario 2 --out '" +
                   d.sub("x1") + "'")
            .rc == 2);
  CHECK(run(d, "scenario --isni '" + d.sub("isni") + "' --scenario 1 --mnar-fit '" +
                   d.sub("fitmnar") + "' --out '" + d.sub("x2") + "'")
            .rc == 2);

  // ---- select
  const RunOut sel = run(d, "select " + data_arg +
                                " --k1 1,2 --k2 1,2 --mode mar --starts 3 "
                                "--seed 11 --out '" + d.sub("sel") + "'");
  CHECK(sel.rc == 0);
  CHECK(contains(sel.out, "select: best by BIC"));
  const std::string sel_csv = slurp(d.sub("sel") + "/selection.csv");
  CHECK(first_line(sel_csv) == "K1,K2,loglik,n_params,aic,bic,converged");
  int sel_lines = 0;
  for (char c : sel_csv) sel_lines += (c == '\n');
  CHECK(sel_lines == 5);
  const nlohmann::json sel_j = bidmix::read_json_file(d.sub("sel") + "/selection.json");
  CHECK(sel_j["best_by_bic"].get<int>() >= 0);
  CHECK(sel_j["cells"].size() == 4);

  // ---- provenance: relocated artifacts still verify; tampered ones do not
  fs::copy(d.sub("fitmar"), d.sub("fitmoved"), fs::copy_options::recursive);
  CHECK(run(d, "isni --fit '" + d.sub("fitmoved") + "' " + data_arg + " --out '" +
                   d.sub("isni_moved") + "'")
            .rc == 0);

  fs::copy(d.sub("fitmar"), d.sub("fittamper"), fs::copy_options::recursive);
  {
    std::ofstream f(d.sub("fittamper") + "/fit.json", std::ios::app);
    f << " ";
  }
  const RunOut tampered = run(d, "isni --fit '" + d.sub("fittamper") + "' " + data_arg +
                                     " --out '" + d.sub("isni_t") + "'");
  CHECK(tampered.rc == 3);
  CHECK(contains(tampered.err, "file changed since it was produced"));

  // A different dataset than the fit consumed is refused by digest.
  {
    std::ofstream f(d.sub("other.csv"), std::ios::binary);
    f << slurp(d.sub("ing") + "/data.csv") << "S999,1,2.5,0,1.0\n";
  }
  const RunOut swapped = run(d, "isni --fit '" + d.sub("fitmar") + "' --data '" +
                                    d.sub("other.csv") + "' --schema '" + d.sub("ing") +
                                    "/schema.json' --out '" + d.sub("isni_s") + "'");
  CHECK(swapped.rc == 3);
  CHECK(contains(swapped.err, "is not the dataset"));

  // Dropping the schema the fit used is refused before any digest math.
  const RunOut noschema = run(d, "isni --fit '" + d.sub("fitmar") + "' --data '" +
                                     d.sub("ing") + "/data.csv' --out '" +
                                     d.sub("isni_n") + "'");
  CHECK(noschema.rc == 3);
  CHECK(contains(noschema.err, "schema usage differs"));

  // A directory produced by another command is rejected by its manifest.
  const RunOut wrongcmd = run(d, "scenario --isni '" + d.sub("fitmar") +
                                     "' --scenario 1 --out '" + d.sub("sc_bad") + "'");
  CHECK(wrongcmd.rc == 3);
  CHECK(contains(wrongcmd.err, "holds output of command 'fit'"));

  // No manifest at all.
  fs::create_directories(d.sub("empty"));
  const RunOut nomani = run(d, "isni --fit '" + d.sub("empty") + "' " + data_arg +
                                   " --out '" + d.sub("isni_e") + "'");
  CHECK(nomani.rc == 3);
  CHECK(contains(nomani.err, "no manifest.json"));
}

TEST_CASE("failure exit codes distinguish data from convergence") {
  TempDir d;

  // Unreadable data: rc 3.
  const RunOut missing =
      run(d, "fit --data '" + d.sub("nope.csv") + "' --k1 1 --k2 1 --out '" +
                 d.sub("f") + "'");
  CHECK(missing.rc == 3);
  CHECK(contains(missing.err, "\"type\":\"data\""));
  CHECK(contains(missing.err, "cannot open data file"));

  // EM out of iterations: rc 4, outputs still written.
  bidmix::SimSpec spec = pipeline_spec();
  spec.n = 80;
  bidmix::write_json_file(d.sub("spec.json"), spec.to_json());
  REQUIRE(run(d, "simulate --spec '" + d.sub("spec.json") + "' --out '" +
                     d.sub("sim") + "'").rc == 0);
  bidmix::CsvSchema schema;
  schema.x_columns = {"trt"};
  schema.v_columns = {"occ"};
  schema.T = 4;
  bidmix::write_json_file(d.sub("schema.json"), schema.to_json());
  const RunOut stalled =
      run(d, "fit --data '" + d.sub("sim") + "/data.csv' --schema '" +
                 d.sub("schema.json") +
                 "' --k1 2 --k2 2 --mode mar --starts 1 --max-iter 1 "
                 "--tol 1e-12 --seed 1 --out '" + d.sub("stall") + "'");
  CHECK(stalled.rc == 4);
  CHECK(contains(stalled.err, "\"type\":\"convergence\""));
  CHECK(fs::exists(d.sub("stall") + "/fit.json"));
  CHECK(bidmix::read_json_file(d.sub("stall") + "/fit.json")["converged"] == false);

  // Impossible generator (always-firing first hazard): rc 4.
  bidmix::SimSpec bad;
  bad.theta.beta.resize(0);
  bad.theta.zeta1 = Eigen::VectorXd::Constant(1, 0.0);
  bad.theta.sigma_y = 1.0;
  bad.theta.gamma.resize(0);
  bad.theta.zeta2 = Eigen::VectorXd::Constant(1, 40.0);
  bad.theta.Pi = Eigen::MatrixXd::Constant(1, 1, 1.0);
  bad.n = 1;
  bad.T = 3;
  bad.seed = 1;
  bidmix::write_json_file(d.sub("bad_spec.json"), bad.to_json());
  const RunOut capped = run(d, "simulate --spec '" + d.sub("bad_spec.json") +
                                   "' --out '" + d.sub("simbad") + "'");
  CHECK(capped.rc == 4);
  CHECK(contains(capped.err, "\"type\":\"convergence\""));
  CHECK(contains(capped.err, "redraw cap"));
}
