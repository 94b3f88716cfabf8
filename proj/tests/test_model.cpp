#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bidmix/data.hpp>
#include <bidmix/errors.hpp>
#include <bidmix/model.hpp>

#include <cmath>
#include <vector>

using bidmix::FreeParamLayout;
using bidmix::MassLogits;
using bidmix::MassParam;
using bidmix::ModelError;
using bidmix::PanelDataset;
using bidmix::SubjectRecord;
using bidmix::Theta;

namespace {

SubjectRecord make_subject(const std::string& id, int T, std::vector<double> y,
                           std::vector<double> x, std::vector<double> v) {
  SubjectRecord s;
  s.id = id;
  s.T_i = static_cast<int>(y.size());
  s.completer = (s.T_i == T);
  const int m = std::min(T, s.T_i + 1);
  REQUIRE(static_cast<int>(x.size()) == s.T_i);
  REQUIRE(static_cast<int>(v.size()) == m);
  s.y = Eigen::Map<Eigen::VectorXd>(y.data(), y.size());
  s.X.resize(s.T_i, 1);
  for (int t = 0; t < s.T_i; ++t) s.X(t, 0) = x[t];
  s.V.resize(m, 1);
  for (int t = 0; t < m; ++t) s.V(t, 0) = v[t];
  s.r = bidmix::build_dropout_indicators(s.T_i, T);
  return s;
}

// Six subjects over T = 3 occasions with one outcome and one dropout
// covariate; values chosen to be unremarkable but fully deterministic.
PanelDataset small_dataset() {
  PanelDataset data;
  data.T = 3;
  data.p = 1;
  data.q = 1;
  data.x_names = {"x1"};
  data.v_names = {"v1"};
  data.subjects.push_back(make_subject("a", 3, {2.1, 1.7, 1.3}, {0.5, 0.5, 0.5}, {1, 2, 3}));
  data.subjects.push_back(make_subject("b", 3, {3.4}, {-0.2}, {1, 2}));
  data.subjects.push_back(make_subject("c", 3, {0.8, 1.1}, {1.5, 1.5}, {1, 2, 3}));
  data.subjects.push_back(make_subject("d", 3, {2.9, 2.5, 2.2}, {0.0, 0.1, 0.2}, {1, 2, 3}));
  data.subjects.push_back(make_subject("e", 3, {1.9}, {0.7}, {1, 2}));
  data.subjects.push_back(make_subject("f", 3, {2.4, 2.6, 2.8}, {-1.0, -1.0, -1.0}, {1, 2, 3}));
  data.validate();
  return data;
}

Theta small_theta() {
  Theta t;
  t.beta.resize(1);
  t.beta << 0.4;
  t.zeta1.resize(2);
  t.zeta1 << 1.0, 2.5;
  t.sigma_y = 0.8;
  t.gamma.resize(1);
  t.gamma << -0.3;
  t.zeta2.resize(2);
  t.zeta2 << -1.5, 0.5;
  t.Pi.resize(2, 2);
  t.Pi << 0.35, 0.15, 0.10, 0.40;
  t.validate();
  return t;
}

// Extended-precision re-derivation of the observed log likelihood, written
// independently of the library implementation.
long double reference_loglik(const PanelDataset& data, const Theta& theta) {
  const long double log2pi = 1.837877066409345483560659472811L;
  long double total = 0.0L;
  for (const auto& s : data.subjects) {
    long double acc = 0.0L;
    for (int g = 0; g < theta.K1(); ++g) {
      long double lf1 = 0.0L;
      for (int t = 0; t < s.T_i; ++t) {
        long double mu = theta.zeta1[g];
        for (int j = 0; j < theta.p(); ++j) mu += (long double)theta.beta[j] * s.X(t, j);
        const long double z = ((long double)s.y[t] - mu) / theta.sigma_y;
        lf1 += -0.5L * log2pi - logl((long double)theta.sigma_y) - 0.5L * z * z;
      }
      for (int l = 0; l < theta.K2(); ++l) {
        if (!(theta.Pi(g, l) > 0.0)) continue;
        long double lf2 = 0.0L;
        for (int t = 0; t < s.risk_rows(); ++t) {
          long double eta = theta.zeta2[l];
          for (int j = 0; j < theta.q(); ++j) eta += (long double)theta.gamma[j] * s.V(t, j);
          lf2 += (long double)s.r[t] * eta - logl(1.0L + expl(eta));
        }
        acc += (long double)theta.Pi(g, l) * expl(lf1 + lf2);
      }
    }
    total += logl(acc);
  }
  return total;
}

}  // namespace

TEST_CASE("outcome component log density matches the normal closed form") {
  SubjectRecord one = make_subject("u", 2, {0.0}, {0.0}, {0.0, 0.0});
  Eigen::VectorXd beta1 = Eigen::VectorXd::Zero(1);
  const double half_log_2pi = 0.91893853320467274178;
  CHECK(bidmix::loglik_longitudinal_component(one, beta1, 0.0, 1.0) ==
        doctest::Approx(-half_log_2pi).epsilon(1e-15));

  SubjectRecord two = make_subject("w", 2, {0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0});
  CHECK(bidmix::loglik_longitudinal_component(two, beta1, 0.0, 1.0) ==
        doctest::Approx(-2.0 * half_log_2pi).epsilon(1e-15));

  // General case against an independent extended-precision evaluation.
  SubjectRecord s = make_subject("g", 3, {1.3, -0.4}, {2.0, -1.0}, {0.0, 0.0, 0.0});
  Eigen::VectorXd beta(1);
  beta << 0.5;
  const double zeta = 0.7, sigma = 1.7;
  long double want = 0.0L;
  for (int t = 0; t < 2; ++t) {
    const long double z = ((long double)s.y[t] - zeta - 0.5L * s.X(t, 0)) / sigma;
    want += -0.5L * 1.837877066409345483560659472811L - logl(1.7L) - 0.5L * z * z;
  }
  CHECK(bidmix::loglik_longitudinal_component(s, beta, zeta, sigma) ==
        doctest::Approx((double)want).epsilon(1e-14));

  CHECK_THROWS_AS(
      (void)bidmix::loglik_longitudinal_component(s, beta, zeta, 0.0), ModelError);
  CHECK_THROWS_AS(
      (void)bidmix::loglik_longitudinal_component(s, beta, zeta, -1.0), ModelError);
}

TEST_CASE("dropout component log probability matches the Bernoulli closed form") {
  Eigen::VectorXd gamma0;  // no covariates
  SubjectRecord completer = make_subject("u", 1, {1.0}, {0.0}, {0.0});
  completer.V.resize(1, 0);
  CHECK(bidmix::loglik_dropout_component(completer, gamma0, 0.0) ==
        doctest::Approx(std::log(0.5)).epsilon(1e-15));

  SubjectRecord leaver = make_subject("w", 2, {1.0}, {0.0}, {0.0, 0.0});
  leaver.V.resize(2, 0);
  CHECK(bidmix::loglik_dropout_component(leaver, gamma0, 0.0) ==
        doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-15));

  // Continue twice, then leave, with a covariate: independent re-derivation.
  SubjectRecord s = make_subject("g", 4, {1.0, 1.0}, {0, 0}, {0.3, -1.2, 2.0});
  Eigen::VectorXd gamma(1);
  gamma << 0.8;
  const double zeta2 = -0.4;
  long double want = 0.0L;
  const long double etas[3] = {-0.4L + 0.8L * 0.3L, -0.4L + 0.8L * -1.2L,
                               -0.4L + 0.8L * 2.0L};
  for (int t = 0; t < 3; ++t)
    want += (long double)s.r[t] * etas[t] - logl(1.0L + expl(etas[t]));
  CHECK(bidmix::loglik_dropout_component(s, gamma, zeta2) ==
        doctest::Approx((double)want).epsilon(1e-14));
}

TEST_CASE("log density tables agree with the per-subject components") {
  PanelDataset data = small_dataset();
  Theta t = small_theta();
  Eigen::MatrixXd lf1 = bidmix::longitudinal_logdens(data, t.beta, t.zeta1, t.sigma_y);
  Eigen::MatrixXd lf2 = bidmix::dropout_logdens(data, t.gamma, t.zeta2);
  REQUIRE(lf1.rows() == data.n());
  REQUIRE(lf1.cols() == t.K1());
  REQUIRE(lf2.rows() == data.n());
  REQUIRE(lf2.cols() == t.K2());
  for (int i = 0; i < data.n(); ++i) {
    for (int g = 0; g < t.K1(); ++g)
      CHECK(lf1(i, g) == bidmix::loglik_longitudinal_component(
                             data.subjects[i], t.beta, t.zeta1[g], t.sigma_y));
    for (int l = 0; l < t.K2(); ++l)
      CHECK(lf2(i, l) == bidmix::loglik_dropout_component(data.subjects[i],
                                                          t.gamma, t.zeta2[l]));
  }
}

TEST_CASE("observed log likelihood matches extended-precision enumeration") {
  PanelDataset data = small_dataset();
  Theta t = small_theta();

  const double got = bidmix::observed_loglik(data, t);
  const long double want = reference_loglik(data, t);
  CHECK(got == doctest::Approx((double)want).epsilon(1e-12));

  // Sum of per-subject contributions equals the total.
  double acc = 0.0;
  for (const auto& s : data.subjects) acc += bidmix::subject_loglik(s, t);
  CHECK(acc == doctest::Approx(got).epsilon(1e-13));

  SUBCASE("single cell reduces to the sum of the two process likelihoods") {
    Theta u;
    u.beta = t.beta;
    u.zeta1.resize(1);
    u.zeta1 << 1.4;
    u.sigma_y = t.sigma_y;
    u.gamma = t.gamma;
    u.zeta2.resize(1);
    u.zeta2 << -0.6;
    u.Pi = Eigen::MatrixXd::Constant(1, 1, 1.0);
    double direct = 0.0;
    for (const auto& s : data.subjects)
      direct += bidmix::loglik_longitudinal_component(s, u.beta, u.zeta1[0], u.sigma_y) +
                bidmix::loglik_dropout_component(s, u.gamma, u.zeta2[0]);
    CHECK(bidmix::observed_loglik(data, u) ==
          doctest::Approx(direct).epsilon(1e-13));
  }

  SUBCASE("empty mass cells are excluded rather than poisoning the sum") {
    Theta z = t;
    z.Pi << 0.0, 0.5, 0.1, 0.4;
    CHECK(bidmix::observed_loglik(data, z) ==
          doctest::Approx((double)reference_loglik(data, z)).epsilon(1e-12));
  }

  SUBCASE("a rank-one mass matrix factorizes the joint likelihood") {
    Theta f = t;
    Eigen::VectorXd prow(2), pcol(2);
    prow << 0.55, 0.45;
    pcol << 0.3, 0.7;
    f.Pi = prow * pcol.transpose();
    double margins = 0.0;
    for (const auto& s : data.subjects) {
      double m1[2], m2[2];
      for (int g = 0; g < 2; ++g)
        m1[g] = bidmix::loglik_longitudinal_component(s, f.beta, f.zeta1[g], f.sigma_y);
      for (int l = 0; l < 2; ++l)
        m2[l] = bidmix::loglik_dropout_component(s, f.gamma, f.zeta2[l]);
      const double s1 = std::log(prow[0] * std::exp(m1[0]) + prow[1] * std::exp(m1[1]));
      const double s2 = std::log(pcol[0] * std::exp(m2[0]) + pcol[1] * std::exp(m2[1]));
      margins += s1 + s2;
    }
    CHECK(bidmix::observed_loglik(data, f) ==
          doctest::Approx(margins).epsilon(1e-10));
  }

  SUBCASE("relabeling the cells leaves the likelihood unchanged") {
    Theta perm = t;
    perm.zeta1.reverseInPlace();
    perm.zeta2.reverseInPlace();
    perm.Pi = t.Pi.reverse().eval();  // flip both dimensions
    // Sorted-order validation no longer holds, but the likelihood must match.
    CHECK(bidmix::observed_loglik(data, perm) ==
          doctest::Approx(got).epsilon(1e-13));
  }
}

TEST_CASE("mass matrix and logit coordinates convert back and forth") {
  SUBCASE("uniform table has all-zero coordinates") {
    Eigen::MatrixXd Pi = Eigen::MatrixXd::Constant(3, 2, 1.0 / 6.0);
    MassLogits lg = bidmix::masses_to_logits(Pi);
    CHECK(lg.K1() == 3);
    CHECK(lg.K2() == 2);
    CHECK(lg.alpha_row.cwiseAbs().maxCoeff() == 0.0);
    CHECK(lg.alpha_col.cwiseAbs().maxCoeff() == 0.0);
    CHECK(lg.lambda.cwiseAbs().maxCoeff() == 0.0);
    CHECK((bidmix::logits_to_masses(lg) - Pi).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("rank-one table has zero interaction") {
    Eigen::VectorXd a(3), b(2);
    a << 0.2, 0.3, 0.5;
    b << 0.6, 0.4;
    Eigen::MatrixXd Pi = a * b.transpose();
    MassLogits lg = bidmix::masses_to_logits(Pi);
    CHECK(lg.lambda.cwiseAbs().maxCoeff() < 1e-14);
    CHECK((bidmix::logits_to_masses(lg) - Pi).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("general table round-trips") {
    Eigen::MatrixXd Pi(3, 2);
    Pi << 0.05, 0.20, 0.30, 0.10, 0.15, 0.20;
    MassLogits lg = bidmix::masses_to_logits(Pi);
    CHECK(lg.lambda.cwiseAbs().maxCoeff() > 0.1);  // genuinely not rank one
    CHECK((bidmix::logits_to_masses(lg) - Pi).cwiseAbs().maxCoeff() < 1e-15);

    // xi has a zero reference cell and reproduces the log ratios.
    Eigen::MatrixXd xi = lg.xi();
    CHECK(xi(2, 1) == 0.0);
    for (int g = 0; g < 3; ++g)
      for (int l = 0; l < 2; ++l)
        CHECK(xi(g, l) ==
              doctest::Approx(std::log(Pi(g, l) / Pi(2, 1))).epsilon(1e-12));
    CHECK((bidmix::xi_to_masses(xi) - Pi).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("softmax is shift-stable for extreme coordinates") {
    Eigen::MatrixXd xi(2, 2);
    xi << 800.0, 799.0, 798.0, 0.0;
    Eigen::MatrixXd Pi = bidmix::xi_to_masses(xi);
    CHECK(Pi.allFinite());
    CHECK(Pi.sum() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(Pi(0, 0) > Pi(0, 1));
    CHECK(Pi(1, 1) < 1e-300);
  }
  SUBCASE("non-positive cells are rejected") {
    Eigen::MatrixXd Pi(2, 2);
    Pi << 0.5, 0.5, 0.0, 0.0;
    CHECK_THROWS_WITH_AS((void)bidmix::masses_to_logits(Pi),
                         doctest::Contains("strictly positive"), ModelError);
  }
}

TEST_CASE("mixing moments summarize the bivariate location mixture") {
  Theta t = small_theta();
  t.zeta1 << -1.0, 1.0;
  t.zeta2 << 0.0, 2.0;
  t.Pi << 0.3, 0.2, 0.1, 0.4;
  bidmix::MixingMoments m = bidmix::mixing_moments(t);
  CHECK(m.mean1 == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(m.mean2 == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(m.sd1 == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.sd2 == doctest::Approx(std::sqrt(0.96)).epsilon(1e-15));
  CHECK(m.cov12 == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(m.rho12 == doctest::Approx(0.4 / std::sqrt(0.96)).epsilon(1e-14));

  SUBCASE("independent processes have zero correlation") {
    Eigen::VectorXd prow(2), pcol(2);
    prow << 0.35, 0.65;
    pcol << 0.8, 0.2;
    t.Pi = prow * pcol.transpose();
    bidmix::MixingMoments ind = bidmix::mixing_moments(t);
    CHECK(std::abs(ind.cov12) < 1e-15);
    CHECK(ind.rho12 == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("a degenerate margin yields zero spread and zero correlation") {
    Theta u = small_theta();
    u.zeta1.resize(1);
    u.zeta1 << 2.0;
    u.Pi.resize(1, 2);
    u.Pi << 0.25, 0.75;
    bidmix::MixingMoments d = bidmix::mixing_moments(u);
    CHECK(d.mean1 == 2.0);
    CHECK(d.sd1 == 0.0);
    CHECK(d.rho12 == 0.0);
  }
}

TEST_CASE("shared-profile decomposition distinguishes rank-one from coupled tables") {
  SUBCASE("rank-one table is feasible with a single profile") {
    Eigen::VectorXd a(3), b(2);
    a << 0.2, 0.3, 0.5;
    b << 0.6, 0.4;
    bidmix::SharedProfileFit fit = bidmix::dunson_decomposition_check(a * b.transpose(), 1);
    CHECK(fit.feasible);
    CHECK(fit.residual < 1e-8);
    REQUIRE(fit.tau.size() == 1);
    CHECK(fit.tau.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fit.row_profiles.colwise().sum().maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fit.col_profiles.colwise().sum().maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("diagonal-heavy table needs more than one profile") {
    Eigen::MatrixXd Pi(2, 2);
    Pi << 0.4, 0.1, 0.1, 0.4;
    bidmix::SharedProfileFit one = bidmix::dunson_decomposition_check(Pi, 1);
    CHECK_FALSE(one.feasible);
    CHECK(one.residual > 1e-3);

    bidmix::SharedProfileFit two = bidmix::dunson_decomposition_check(Pi, 2);
    CHECK(two.feasible);
    CHECK(two.residual < 1e-8);
    // Reconstruction from the returned factors matches the table.
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(2, 2);
    for (int h = 0; h < 2; ++h)
      Q += two.tau[h] * two.row_profiles.col(h) * two.col_profiles.col(h).transpose();
    CHECK((Q - Pi).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("invalid arguments are rejected") {
    Eigen::MatrixXd Pi = Eigen::MatrixXd::Constant(2, 2, 0.25);
    CHECK_THROWS_AS((void)bidmix::dunson_decomposition_check(Pi, 0), ModelError);
    CHECK_THROWS_AS(
        (void)bidmix::dunson_decomposition_check(Eigen::MatrixXd::Constant(2, 2, 0.5), 1),
        ModelError);
  }
}

TEST_CASE("free-parameter layout packs and unpacks losslessly") {
  Theta t;
  t.beta.resize(2);
  t.beta << 0.4, -1.1;
  t.zeta1.resize(3);
  t.zeta1 << -0.5, 1.0, 2.25;
  t.sigma_y = 0.65;
  t.gamma.resize(1);
  t.gamma << 0.8;
  t.zeta2.resize(2);
  t.zeta2 << -2.0, -0.25;
  t.Pi.resize(3, 2);
  t.Pi << 0.05, 0.20, 0.30, 0.10, 0.15, 0.20;
  t.validate();

  SUBCASE("offsets and dimensions") {
    FreeParamLayout full = FreeParamLayout::for_theta(t, MassParam::FullLogits);
    CHECK(full.beta_offset() == 0);
    CHECK(full.zeta1_offset() == 2);
    CHECK(full.logsigma_offset() == 5);
    CHECK(full.gamma_offset() == 6);
    CHECK(full.zeta2_offset() == 7);
    CHECK(full.mass_offset() == 9);
    CHECK(full.mass_dim() == 5);
    CHECK(full.dim() == 14);

    FreeParamLayout rank1 = FreeParamLayout::for_theta(t, MassParam::RankOne);
    CHECK(rank1.mass_dim() == 3);
    CHECK(rank1.dim() == 12);
  }

  SUBCASE("coordinate names are unique and aligned with the packing") {
    FreeParamLayout full = FreeParamLayout::for_theta(t, MassParam::FullLogits);
    std::vector<std::string> names = full.names({"age", "dose"}, {"time"});
    REQUIRE(static_cast<int>(names.size()) == full.dim());
    CHECK(names[0] == "age");
    CHECK(names[1] == "dose");
    CHECK(names[2] == "zeta1_1");
    CHECK(names[5] == "log_sigma_y");
    CHECK(names[6] == "dropout_time");
    CHECK(names[7] == "zeta2_1");
    CHECK(names[9] == "xi_1_1");
    CHECK(names[13] == "xi_3_1");  // reference cell (3,2) is skipped

    FreeParamLayout rank1 = FreeParamLayout::for_theta(t, MassParam::RankOne);
    std::vector<std::string> rnames = rank1.names({"age", "dose"}, {"time"});
    REQUIRE(static_cast<int>(rnames.size()) == rank1.dim());
    CHECK(rnames[9] == "alpha_row_1");
    CHECK(rnames[11] == "alpha_col_1");
  }

  SUBCASE("full-logit packing round-trips") {
    FreeParamLayout full = FreeParamLayout::for_theta(t, MassParam::FullLogits);
    Eigen::VectorXd v = bidmix::pack_free(t, full);
    REQUIRE(v.size() == full.dim());
    CHECK(v[full.logsigma_offset()] == doctest::Approx(std::log(0.65)).epsilon(1e-15));
    Theta back = bidmix::unpack_free(v, full);
    CHECK((back.beta - t.beta).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.zeta1 - t.zeta1).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.gamma - t.gamma).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.zeta2 - t.zeta2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.sigma_y == doctest::Approx(t.sigma_y).epsilon(1e-15));
    CHECK((back.Pi - t.Pi).cwiseAbs().maxCoeff() < 1e-15);
  }

  SUBCASE("rank-one packing preserves the margins") {
    FreeParamLayout rank1 = FreeParamLayout::for_theta(t, MassParam::RankOne);
    Eigen::VectorXd v = bidmix::pack_free(t, rank1);
    Theta back = bidmix::unpack_free(v, rank1);
    const Eigen::VectorXd prow = t.Pi.rowwise().sum();
    const Eigen::VectorXd pcol = t.Pi.colwise().sum();
    CHECK((back.Pi - prow * pcol.transpose()).cwiseAbs().maxCoeff() < 1e-15);

    // Starting from a genuinely rank-one table, the trip is lossless.
    Theta f = t;
    f.Pi = prow * pcol.transpose();
    Theta back2 = bidmix::unpack_free(bidmix::pack_free(f, rank1), rank1);
    CHECK((back2.Pi - f.Pi).cwiseAbs().maxCoeff() < 1e-15);
  }

  SUBCASE("free-coordinate likelihood agrees with the structured one") {
    PanelDataset data = small_dataset();
    Theta u = small_theta();
    FreeParamLayout full = FreeParamLayout::for_theta(u, MassParam::FullLogits);
    Eigen::VectorXd v = bidmix::pack_free(u, full);
    CHECK(bidmix::observed_loglik_free(data, v, full) ==
          doctest::Approx(bidmix::observed_loglik(data, u)).epsilon(1e-13));
  }

  SUBCASE("packing rejects invalid input") {
    FreeParamLayout full = FreeParamLayout::for_theta(t, MassParam::FullLogits);
    Theta zero = t;
    zero.Pi(2, 1) = 0.0;
    zero.Pi(0, 0) += t.Pi(2, 1);
    CHECK_THROWS_WITH_AS((void)bidmix::pack_free(zero, full),
                         doctest::Contains("reference mass cell"), ModelError);
    FreeParamLayout wrong = full;
    wrong.p = 1;
    CHECK_THROWS_WITH_AS((void)bidmix::pack_free(t, wrong),
                         doctest::Contains("layout does not match"), ModelError);
    CHECK_THROWS_AS((void)bidmix::unpack_free(Eigen::VectorXd::Zero(3), full),
                    ModelError);
  }
}

TEST_CASE("theta JSON serialization round-trips and validation rejects bad values") {
  Theta t = small_theta();
  Theta back = Theta::from_json(t.to_json());
  CHECK((back.beta - t.beta).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.zeta1 - t.zeta1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.sigma_y == t.sigma_y);
  CHECK((back.gamma - t.gamma).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.zeta2 - t.zeta2).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.Pi - t.Pi).cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("validation failures") {
    Theta bad = t;
    bad.sigma_y = 0.0;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("sigma_y"), ModelError);

    bad = t;
    bad.zeta1 << 2.5, 1.0;  // descending
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("ascending"), ModelError);

    bad = t;
    bad.Pi(0, 0) = -0.1;
    bad.Pi(1, 1) = 0.6;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains(">= 0"), ModelError);

    bad = t;
    bad.Pi(0, 0) += 0.01;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("sum to 1"), ModelError);

    bad = t;
    bad.Pi.resize(2, 1);
    bad.Pi << 0.5, 0.5;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("K1 x K2"), ModelError);

    bad = t;
    bad.beta[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("non-finite"), ModelError);

    Theta empty;
    CHECK_THROWS_AS(empty.validate(), ModelError);
  }

  SUBCASE("deserialization validates") {
    nlohmann::json j = t.to_json();
    j["sigma_y"] = -2.0;
    CHECK_THROWS_AS((void)Theta::from_json(j), ModelError);
  }
}
