#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bidmix/errors.hpp>
#include <bidmix/model.hpp>
#include <bidmix/simulate.hpp>
#include <bidmix/util.hpp>

#include <cmath>
#include <vector>

using bidmix::ConvergenceError;
using bidmix::CovariateSpec;
using bidmix::ModelError;
using bidmix::SimOutput;
using bidmix::SimSpec;
using bidmix::SubjectRecord;
using bidmix::Theta;

namespace {

Theta theta_1x1(double zeta1, double sigma, double zeta2) {
  Theta t;
  t.beta.resize(0);
  t.zeta1 = Eigen::VectorXd::Constant(1, zeta1);
  t.sigma_y = sigma;
  t.gamma.resize(0);
  t.zeta2 = Eigen::VectorXd::Constant(1, zeta2);
  t.Pi = Eigen::MatrixXd::Constant(1, 1, 1.0);
  return t;
}

CovariateSpec bern(const std::string& name, double prob) {
  CovariateSpec s;
  s.kind = CovariateSpec::Kind::Bernoulli;
  s.name = name;
  s.prob = prob;
  return s;
}

CovariateSpec timelin(const std::string& name, double intercept, double slope) {
  CovariateSpec s;
  s.kind = CovariateSpec::Kind::TimeLinear;
  s.name = name;
  s.intercept = intercept;
  s.slope = slope;
  return s;
}

CovariateSpec consta(const std::string& name, double value) {
  CovariateSpec s;
  s.kind = CovariateSpec::Kind::Constant;
  s.name = name;
  s.value = value;
  return s;
}

// Bitwise equality that tolerates zero-size matrices (maxCoeff on an empty
// matrix is undefined).
template <typename A, typename B>
bool same(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  if (a.size() == 0) return true;
  return (a - b).cwiseAbs().maxCoeff() == 0.0;
}

}  // namespace

TEST_CASE("a vanishing hazard yields a complete panel") {
  SimSpec spec;
  spec.theta = theta_1x1(2.0, 0.5, -40.0);
  spec.n = 200;
  spec.T = 5;
  spec.seed = 3;
  SimOutput out = bidmix::generate(spec);

  CHECK(out.data.n() == 200);
  CHECK(out.data.T == 5);
  CHECK(out.redraw_count == 0);
  for (const SubjectRecord& s : out.data.subjects) {
    CHECK(s.completer);
    CHECK(s.T_i == 5);
    CHECK(s.r.sum() == 0);
    CHECK(s.y.size() == 5);
  }
  CHECK(out.cell_g == std::vector<int>(200, 0));
  CHECK(out.cell_l == std::vector<int>(200, 0));

  nlohmann::json meta = out.metadata();
  CHECK(meta["n"] == 200);
  CHECK(meta["T"] == 5);
  CHECK(meta["redraw_count"] == 0);
  CHECK(meta.contains("note"));
}

TEST_CASE("a hazard ramp drops every subject after the first occasion") {
  // Occasion 1: eta = -40 (never fires). Occasion 2: eta = 40 (always fires).
  Theta t = theta_1x1(1.0, 0.3, -40.0);
  t.gamma.resize(1);
  t.gamma << 80.0;
  SimSpec spec;
  spec.theta = t;
  spec.n = 100;
  spec.T = 4;
  spec.seed = 9;
  spec.v_covariates = {timelin("ramp", 0.0, 1.0)};
  SimOutput out = bidmix::generate(spec);

  CHECK(out.redraw_count == 0);
  for (const SubjectRecord& s : out.data.subjects) {
    CHECK(s.T_i == 1);
    CHECK_FALSE(s.completer);
    REQUIRE(s.r.size() == 2);
    CHECK(s.r[1] == 1);
    // The event-interval covariate row is the occasion-2 profile value.
    CHECK(s.V(0, 0) == 0.0);
    CHECK(s.V(1, 0) == 1.0);
  }
}

TEST_CASE("latent cells are drawn from the mass matrix") {
  Theta t;
  t.beta.resize(0);
  t.zeta1.resize(2);
  t.zeta1 << 0.0, 3.0;
  t.sigma_y = 1.0;
  t.gamma.resize(0);
  t.zeta2.resize(2);
  t.zeta2 << -40.0, -39.0;  // hazard ~ 0: no truncation bias on the cells
  t.Pi.resize(2, 2);
  t.Pi << 0.32, 0.08, 0.12, 0.48;

  SimSpec spec;
  spec.theta = t;
  spec.n = 100000;
  spec.T = 2;
  spec.seed = 13;
  SimOutput out = bidmix::generate(spec);
  CHECK(out.redraw_count == 0);

  Eigen::MatrixXd freq = Eigen::MatrixXd::Zero(2, 2);
  for (int i = 0; i < spec.n; ++i) freq(out.cell_g[i], out.cell_l[i]) += 1.0;
  freq /= spec.n;
  for (int g = 0; g < 2; ++g)
    for (int l = 0; l < 2; ++l) {
      const double se = std::sqrt(t.Pi(g, l) * (1 - t.Pi(g, l)) / spec.n);
      CAPTURE(g);
      CAPTURE(l);
      CHECK(std::abs(freq(g, l) - t.Pi(g, l)) < 4.0 * se + 1e-12);
    }

  // Outcome draws follow the component normal law: within each realized
  // outcome group the residuals have the right location and spread.
  for (int g = 0; g < 2; ++g) {
    double sum = 0.0, ss = 0.0;
    int cnt = 0;
    for (int i = 0; i < spec.n; ++i) {
      if (out.cell_g[i] != g) continue;
      const SubjectRecord& s = out.data.subjects[i];
      for (int u = 0; u < s.T_i; ++u) {
        const double resid = s.y[u] - t.zeta1[g];
        sum += resid;
        ss += resid * resid;
        ++cnt;
      }
    }
    const double mean = sum / cnt;
    const double sd = std::sqrt(ss / cnt - mean * mean);
    CAPTURE(g);
    CHECK(std::abs(mean) < 4.0 / std::sqrt((double)cnt));
    CHECK(sd == doctest::Approx(1.0).epsilon(0.02));
  }
}

TEST_CASE("per-component hazards match the logistic law") {
  Theta t;
  t.beta.resize(0);
  t.zeta1 = Eigen::VectorXd::Constant(1, 0.0);
  t.sigma_y = 1.0;
  t.gamma.resize(0);
  t.zeta2.resize(2);
  t.zeta2 << -2.2, -0.7;
  t.Pi.resize(1, 2);
  t.Pi << 0.5, 0.5;

  SimSpec spec;
  spec.theta = t;
  spec.n = 20000;
  spec.T = 2;
  spec.seed = 17;
  SimOutput out = bidmix::generate(spec);

  // Some subjects drew an occasion-1 event and were redrawn.
  CHECK(out.redraw_count > 0);
  CHECK(out.metadata()["redraw_count"] == out.redraw_count);

  // Realized subjects all survived occasion 1, so within component l the
  // fraction leaving after the first occasion estimates logistic(zeta2[l]).
  for (int l = 0; l < 2; ++l) {
    int left = 0, total = 0;
    for (int i = 0; i < spec.n; ++i) {
      if (out.cell_l[i] != l) continue;
      ++total;
      if (out.data.subjects[i].T_i == 1) ++left;
    }
    const double want = bidmix::logistic(t.zeta2[l]);
    const double got = (double)left / total;
    const double se = std::sqrt(want * (1 - want) / total);
    CAPTURE(l);
    CHECK(std::abs(got - want) < 4.0 * se);
  }
}

TEST_CASE("generation is reproducible and stable in the subject index") {
  Theta t = theta_1x1(1.5, 0.8, -1.0);
  t.beta.resize(1);
  t.beta << 0.5;
  SimSpec spec;
  spec.theta = t;
  spec.n = 50;
  spec.T = 3;
  spec.seed = 29;
  spec.x_covariates = {bern("grp", 0.4)};

  SimOutput a = bidmix::generate(spec);
  SimOutput b = bidmix::generate(spec);
  REQUIRE(a.data.n() == b.data.n());
  CHECK(a.redraw_count == b.redraw_count);
  for (int i = 0; i < a.data.n(); ++i) {
    const SubjectRecord& u = a.data.subjects[i];
    const SubjectRecord& w = b.data.subjects[i];
    CHECK(u.id == w.id);
    CHECK(u.T_i == w.T_i);
    CHECK(same(u.y, w.y));
    CHECK(same(u.X, w.X));
    CHECK(same(u.V, w.V));
  }
  CHECK(a.cell_g == b.cell_g);
  CHECK(a.cell_l == b.cell_l);

  // Each subject has its own stream, so extending the population leaves the
  // existing subjects' draws untouched.
  SimSpec wider = spec;
  wider.n = 99;
  SimOutput c = bidmix::generate(wider);
  for (int i = 0; i < spec.n; ++i) {
    CHECK(c.data.subjects[i].T_i == a.data.subjects[i].T_i);
    CHECK(same(c.data.subjects[i].y, a.data.subjects[i].y));
  }

  // Subject ids are zero-padded to a fixed width.
  CHECK(a.data.subjects[0].id == "S01");
  CHECK(a.data.subjects[49].id == "S50");
}

TEST_CASE("covariate kinds drive both design matrices") {
  Theta t = theta_1x1(0.5, 0.4, -2.0);
  t.beta.resize(2);
  t.beta << 1.0, 0.25;
  t.gamma.resize(2);
  t.gamma << 0.5, -0.5;

  SimSpec spec;
  spec.theta = t;
  spec.n = 60;
  spec.T = 4;
  spec.seed = 31;
  // "grp" is shared between the two lists: drawn once per subject.
  spec.x_covariates = {bern("grp", 0.5), consta("base", 2.5)};
  spec.v_covariates = {bern("grp", 0.5), timelin("occ", 1.0, 0.5)};
  SimOutput out = bidmix::generate(spec);

  CHECK(out.data.x_names == std::vector<std::string>{"grp", "base"});
  CHECK(out.data.v_names == std::vector<std::string>{"grp", "occ"});

  int ones = 0;
  for (const SubjectRecord& s : out.data.subjects) {
    // Shared Bernoulli: one subject-level value, equal in X and V.
    const double g0 = s.X(0, 0);
    CHECK((g0 == 0.0 || g0 == 1.0));
    ones += (g0 == 1.0);
    for (int u = 0; u < s.T_i; ++u) {
      CHECK(s.X(u, 0) == g0);
      CHECK(s.V(u, 0) == g0);
      CHECK(s.X(u, 1) == 2.5);
      CHECK(s.V(u, 1) == 1.0 + 0.5 * u);  // occasion u+1
    }
    if (!s.completer) {
      CHECK(s.V(s.T_i, 0) == g0);
      CHECK(s.V(s.T_i, 1) == 1.0 + 0.5 * s.T_i);
    }
  }
  CHECK(ones > 10);  // both Bernoulli levels occur
  CHECK(ones < 50);
}

TEST_CASE("an always-firing first hazard exhausts the redraw cap") {
  SimSpec spec;
  spec.theta = theta_1x1(0.0, 1.0, 40.0);  // occasion-1 event almost surely
  spec.n = 1;
  spec.T = 3;
  spec.seed = 37;
  CHECK_THROWS_WITH_AS((void)bidmix::generate(spec),
                       doctest::Contains("redraw cap"), ConvergenceError);
}

TEST_CASE("simulation spec JSON round-trips") {
  Theta t = theta_1x1(1.0, 0.6, -1.5);
  t.beta.resize(2);
  t.beta << 0.7, -0.2;
  t.gamma.resize(1);
  t.gamma << 0.9;

  SimSpec spec;
  spec.theta = t;
  spec.n = 12;
  spec.T = 5;
  spec.seed = 123456789012345ULL;
  spec.x_covariates = {bern("grp", 0.35), timelin("wave", -1.0, 2.0)};
  spec.v_covariates = {consta("site", 3.25)};
  spec.validate();

  SimSpec back = SimSpec::from_json(spec.to_json());
  CHECK(back.n == spec.n);
  CHECK(back.T == spec.T);
  CHECK(back.seed == spec.seed);
  CHECK(back.theta.sigma_y == spec.theta.sigma_y);
  CHECK(same(back.theta.zeta1, spec.theta.zeta1));
  REQUIRE(back.x_covariates.size() == 2);
  CHECK(back.x_covariates[0].kind == CovariateSpec::Kind::Bernoulli);
  CHECK(back.x_covariates[0].name == "grp");
  CHECK(back.x_covariates[0].prob == 0.35);
  CHECK(back.x_covariates[1].kind == CovariateSpec::Kind::TimeLinear);
  CHECK(back.x_covariates[1].intercept == -1.0);
  CHECK(back.x_covariates[1].slope == 2.0);
  REQUIRE(back.v_covariates.size() == 1);
  CHECK(back.v_covariates[0].kind == CovariateSpec::Kind::Constant);
  CHECK(back.v_covariates[0].value == 3.25);

  // The generated data are identical under the round-tripped spec.
  SimOutput a = bidmix::generate(spec);
  SimOutput b = bidmix::generate(back);
  for (int i = 0; i < a.data.n(); ++i)
    CHECK(same(a.data.subjects[i].y, b.data.subjects[i].y));

  SUBCASE("unknown covariate kind is rejected") {
    nlohmann::json j = bern("g", 0.5).to_json();
    j["kind"] = "uniform";
    CHECK_THROWS_WITH_AS((void)CovariateSpec::from_json(j),
                         doctest::Contains("unknown kind"), ModelError);
  }
}

TEST_CASE("simulation spec validation pins the contract") {
  Theta t = theta_1x1(1.0, 0.6, -1.5);
  SimSpec spec;
  spec.theta = t;
  spec.n = 10;
  spec.T = 3;
  CHECK_NOTHROW(spec.validate());

  SimSpec bad = spec;
  bad.n = 0;
  CHECK_THROWS_AS(bad.validate(), ModelError);

  bad = spec;
  bad.T = 0;
  CHECK_THROWS_AS(bad.validate(), ModelError);

  bad = spec;
  bad.x_covariates = {bern("extra", 0.5)};  // theta has no beta entry
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("beta length"), ModelError);

  bad = spec;
  bad.theta.gamma.resize(2);
  bad.theta.gamma << 0.5, 0.5;
  bad.v_covariates = {bern("a", 0.5), bern("a", 0.5)};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("duplicate covariate"),
                       ModelError);

  bad = spec;
  bad.theta.beta.resize(1);
  bad.theta.beta << 1.0;
  bad.x_covariates = {bern("", 0.5)};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("unnamed"), ModelError);

  bad = spec;
  bad.theta.beta.resize(1);
  bad.theta.beta << 1.0;
  bad.x_covariates = {bern("g", 1.5)};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("outside [0, 1]"),
                       ModelError);

  bad = spec;
  bad.theta.beta.resize(1);
  bad.theta.beta << 1.0;
  bad.theta.gamma.resize(1);
  bad.theta.gamma << 1.0;
  bad.x_covariates = {bern("g", 0.5)};
  bad.v_covariates = {bern("g", 0.6)};  // same name, different law
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("conflicting"),
                       ModelError);
}
