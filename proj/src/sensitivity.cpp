#include "bidmix/sensitivity.hpp"

#include <cmath>
#include <limits>

#include "bidmix/errors.hpp"
#include "bidmix/rng.hpp"

namespace bidmix {

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd json_vec(const nlohmann::json& a) {
  Eigen::VectorXd v(a.size());
  for (int i = 0; i < static_cast<int>(a.size()); ++i) v[i] = a[i].get<double>();
  return v;
}

nlohmann::json mat_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i)));
  return rows;
}

Eigen::MatrixXd json_mat(const nlohmann::json& rows, int cols_hint) {
  const int r = static_cast<int>(rows.size());
  const int c = r > 0 ? static_cast<int>(rows[0].size()) : cols_hint;
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i) m.row(i) = json_vec(rows[i]).transpose();
  return m;
}

// Indices of phi (outcome block) in report order given the free layout:
// zeta1_1..zeta1_K1 first, then the covariate slopes, then log sigma_y.
std::vector<int> report_order(const FreeParamLayout& L) {
  std::vector<int> idx;
  for (int g = 0; g < L.K1; ++g) idx.push_back(L.zeta1_offset() + g);
  for (int j = 0; j < L.p; ++j) idx.push_back(L.beta_offset() + j);
  idx.push_back(L.logsigma_offset());
  return idx;
}

}  // namespace

nlohmann::json IsniResult::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["profile_nuisance"] = profile_nuisance;
  j["phi_names"] = phi_names;
  j["lambda_names"] = lambda_names;
  j["phi_hat"] = vec_json(phi_hat);
  j["se"] = vec_json(se);
  j["isni"] = mat_json(isni);
  j["theta_mar"] = theta_mar.to_json();
  return j;
}

IsniResult IsniResult::from_json(const nlohmann::json& j) {
  IsniResult r;
  r.profile_nuisance = j.at("profile_nuisance").get<bool>();
  r.phi_names = j.at("phi_names").get<std::vector<std::string>>();
  r.lambda_names = j.at("lambda_names").get<std::vector<std::string>>();
  r.phi_hat = json_vec(j.at("phi_hat"));
  r.se = json_vec(j.at("se"));
  r.isni = json_mat(j.at("isni"), static_cast<int>(r.lambda_names.size()));
  r.theta_mar = Theta::from_json(j.at("theta_mar"));
  return r;
}

IsniResult isni_matrix(const PanelDataset& data, const FitResult& mar_fit,
                       bool profile_nuisance) {
  if (mar_fit.mode != FitMode::MAR)
    throw ModelError("isni_matrix requires a MAR fit (the index is evaluated at lambda = 0)");
  const Theta& theta = mar_fit.theta;
  const FreeParamLayout L = FreeParamLayout::for_theta(theta, MassParam::FullLogits);
  const int p = L.p, K1 = L.K1, K2 = L.K2, q = L.q, D = L.dim();
  const int Dphi = p + K1 + 1;
  const int Llam = (K1 - 1) * (K2 - 1);

  const Eigen::MatrixXd Io = observed_information(data, theta, L);

  // Directions spanned by the re-optimized block (phi first) and by lambda.
  std::vector<Eigen::VectorXd> eta_cols;
  for (int j = 0; j < Dphi; ++j) eta_cols.push_back(Eigen::VectorXd::Unit(D, j));
  if (profile_nuisance) {
    for (int j = 0; j < q; ++j)
      eta_cols.push_back(Eigen::VectorXd::Unit(D, L.gamma_offset() + j));
    for (int l = 0; l < K2; ++l)
      eta_cols.push_back(Eigen::VectorXd::Unit(D, L.zeta2_offset() + l));
    for (int g = 0; g < K1 - 1; ++g) {  // row-margin logit: whole row of cells
      Eigen::VectorXd c = Eigen::VectorXd::Zero(D);
      for (int l = 0; l < K2; ++l) c[L.mass_offset() + g * K2 + l] = 1.0;
      eta_cols.push_back(c);
    }
    for (int l = 0; l < K2 - 1; ++l) {  // column-margin logit
      Eigen::VectorXd c = Eigen::VectorXd::Zero(D);
      for (int g = 0; g < K1; ++g) c[L.mass_offset() + g * K2 + l] = 1.0;
      eta_cols.push_back(c);
    }
  }
  const int De = static_cast<int>(eta_cols.size());
  Eigen::MatrixXd Jeta(D, De);
  for (int j = 0; j < De; ++j) Jeta.col(j) = eta_cols[j];
  Eigen::MatrixXd Jlam(D, Llam);
  {
    int k = 0;
    for (int g = 0; g < K1 - 1; ++g)
      for (int l = 0; l < K2 - 1; ++l)
        Jlam.col(k++) = Eigen::VectorXd::Unit(D, L.mass_offset() + g * K2 + l);
  }

  const Eigen::MatrixXd Ioee = Jeta.transpose() * Io * Jeta;
  const Eigen::MatrixXd Ioel = Jeta.transpose() * Io * Jlam;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(Ioee);
  if (!lu.isInvertible())
    throw ModelError(
        "singular Hessian block at the MAR solution (boundary fit); the "
        "sensitivity index is undefined");
  const Eigen::MatrixXd isni_eta = -lu.solve(Ioel);

  // Rows in free order within eta: beta, zeta1, log sigma. Reorder for the
  // report and move the scale row to the natural sigma_y scale.
  const CovarianceEstimate cov = sandwich_covariance(data, mar_fit);
  IsniResult out;
  out.profile_nuisance = profile_nuisance;
  out.theta_mar = theta;
  out.isni.resize(Dphi, Llam);
  out.se.resize(Dphi);
  out.phi_hat.resize(Dphi);
  const std::vector<int> order = report_order(L);
  const std::vector<std::string> free_names = L.names(data.x_names, data.v_names);
  for (int r = 0; r < Dphi; ++r) {
    const int j = order[r];  // free index; phi block is the leading D rows
    out.isni.row(r) = isni_eta.row(j);
    out.se[r] = cov.se(j);
    if (j == L.logsigma_offset()) {
      out.isni.row(r) *= theta.sigma_y;
      out.se[r] *= theta.sigma_y;
      out.phi_hat[r] = theta.sigma_y;
      out.phi_names.push_back("sigma_y");
    } else if (j >= L.zeta1_offset()) {
      out.phi_hat[r] = theta.zeta1[j - L.zeta1_offset()];
      out.phi_names.push_back(free_names[j]);
    } else {
      out.phi_hat[r] = theta.beta[j];
      out.phi_names.push_back(free_names[j]);
    }
  }
  for (int g = 0; g < K1 - 1; ++g)
    for (int l = 0; l < K2 - 1; ++l)
      out.lambda_names.push_back("lambda_" + std::to_string(g + 1) + "_" +
                                 std::to_string(l + 1));
  return out;
}

std::vector<IsniRow> isni_summaries(const IsniResult& isni) {
  const double inf = std::numeric_limits<double>::infinity();
  auto ratio = [&](double num, double se) {
    if (se > 0.0) return num / se;
    return num == 0.0 ? 0.0 : inf;
  };
  std::vector<IsniRow> rows;
  for (int r = 0; r < isni.n_phi(); ++r) {
    IsniRow row;
    row.name = isni.phi_names[r];
    row.se = isni.se[r];
    if (isni.n_lambda() > 0) {
      const Eigen::VectorXd abs_row = isni.isni.row(r).cwiseAbs();
      row.norm = isni.isni.row(r).norm();
      row.min = abs_row.minCoeff();
      row.max = abs_row.maxCoeff();
    }
    row.norm_over_se = ratio(row.norm, row.se);
    row.min_over_se = ratio(row.min, row.se);
    row.max_over_se = ratio(row.max, row.se);
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json ScenarioResult::coverage_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["scenario"] = scenario;
  j["B"] = B;
  j["range"] = {lo, hi};
  j["seed"] = seed;
  j["overflow"] = overflow;
  nlohmann::json cov;
  for (int d = 0; d < static_cast<int>(phi_names.size()); ++d)
    cov[phi_names[d]] = coverage[d];
  j["coverage"] = cov;
  return j;
}

namespace {

// Shared tail of both scenarios once the lambda draws are fixed: the exact
// linear map, the per-parameter coverage, and the overflow check on the
// perturbed mass logits (MAR margins plus the drawn interaction).
void finish_scenario(const IsniResult& isni, ScenarioResult* out) {
  const int B = out->B;
  const int Dphi = isni.n_phi();
  const int K1 = isni.theta_mar.K1(), K2 = isni.theta_mar.K2();
  out->phi_names = isni.phi_names;
  out->lambda_names = isni.lambda_names;
  out->phi_approx.resize(B, Dphi);
  out->coverage = Eigen::VectorXd::Zero(Dphi);

  MassLogits base;
  bool have_base = false;
  if (K1 > 1 || K2 > 1) {
    base = masses_to_logits(isni.theta_mar.Pi);
    base.lambda.setZero();  // exact MAR reference point
    have_base = true;
  }

  for (int b = 0; b < B; ++b) {
    const Eigen::VectorXd lam = out->lambda_draws.row(b).transpose();
    const Eigen::VectorXd shift = isni.isni * lam;
    out->phi_approx.row(b) = (isni.phi_hat + shift).transpose();
    for (int d = 0; d < Dphi; ++d)
      if (std::abs(shift[d]) <= 1.96 * isni.se[d]) out->coverage[d] += 1.0;
    if (have_base) {
      MassLogits pert = base;
      int k = 0;
      for (int g = 0; g < K1 - 1; ++g)
        for (int l = 0; l < K2 - 1; ++l) pert.lambda(g, l) = lam[k++];
      if (pert.xi().cwiseAbs().maxCoeff() > 700.0) out->overflow = true;
    }
  }
  out->coverage /= static_cast<double>(B);
}

void check_scenario_args(const IsniResult& isni, int B, double lo, double hi) {
  if (B < 1) throw ModelError("scenario: B must be at least 1");
  if (!(lo < hi)) throw ModelError("scenario: range must satisfy lo < hi");
  if (isni.n_phi() != static_cast<int>(isni.phi_names.size()))
    throw ModelError("scenario: malformed sensitivity index input");
}

}  // namespace

ScenarioResult scenario1(const IsniResult& isni, int B, double lo, double hi,
                         std::uint64_t seed) {
  check_scenario_args(isni, B, lo, hi);
  const int L = isni.n_lambda();
  ScenarioResult out;
  out.scenario = 1;
  out.B = B;
  out.lo = lo;
  out.hi = hi;
  out.seed = seed;
  out.lambda_draws.resize(B, L);
  for (int b = 0; b < B; ++b) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(b));
    for (int k = 0; k < L; ++k)
      out.lambda_draws(b, k) = lo + (hi - lo) * rng.uniform();
  }
  finish_scenario(isni, &out);
  return out;
}

ScenarioResult scenario2(const IsniResult& isni, const Theta& theta_mnar, int B,
                         double lo, double hi, std::uint64_t seed) {
  check_scenario_args(isni, B, lo, hi);
  const int K1 = isni.theta_mar.K1(), K2 = isni.theta_mar.K2();
  if (theta_mnar.K1() != K1 || theta_mnar.K2() != K2)
    throw ModelError("scenario2: the reference fit has a different (K1, K2) shape");
  if ((theta_mnar.Pi.array() <= 0.0).any())
    throw ModelError(
        "scenario2: the reference mass matrix has empty cells, so its "
        "interaction contrast is undefined");
  const MassLogits mnar_logits = masses_to_logits(theta_mnar.Pi);
  const int L = isni.n_lambda();
  Eigen::VectorXd lam_hat(L);
  {
    int k = 0;
    for (int g = 0; g < K1 - 1; ++g)
      for (int l = 0; l < K2 - 1; ++l) lam_hat[k++] = mnar_logits.lambda(g, l);
  }

  ScenarioResult out;
  out.scenario = 2;
  out.B = B;
  out.lo = lo;
  out.hi = hi;
  out.seed = seed;
  out.c_draws.resize(B);
  out.lambda_draws.resize(B, L);
  for (int b = 0; b < B; ++b) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(b));
    out.c_draws[b] = lo + (hi - lo) * rng.uniform();
    out.lambda_draws.row(b) = (out.c_draws[b] * lam_hat).transpose();
  }
  finish_scenario(isni, &out);

  // Implied mixing correlation per draw: perturb the MAR mass logits by the
  // drawn interaction, rebuild the mass matrix, keep the MAR locations.
  out.rho12.resize(B);
  MassLogits base = masses_to_logits(isni.theta_mar.Pi);
  base.lambda.setZero();
  for (int b = 0; b < B; ++b) {
    MassLogits pert = base;
    pert.lambda = out.c_draws[b] * mnar_logits.lambda;
    Theta t = isni.theta_mar;
    t.Pi = xi_to_masses(pert.xi());
    out.rho12[b] = mixing_moments(t).rho12;
  }
  return out;
}

Theta refit_outcome_given_mass(const PanelDataset& data, const Theta& start,
                               double tol, int max_iter) {
  Theta theta = start;
  theta.validate();
  const FreeParamLayout L = FreeParamLayout::for_theta(theta, MassParam::FullLogits);
  const int Dphi = L.p + L.K1 + 1;  // beta, zeta1, log sigma: leading block

  auto loglik_of = [&](const Theta& t) {
    try {
      return observed_loglik(data, t);
    } catch (const ConvergenceError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  double ll = loglik_of(theta);
  if (!std::isfinite(ll))
    throw ConvergenceError("outcome refit: log likelihood not finite at the start");

  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd g_full =
        subject_scores(data, theta, L).colwise().sum().transpose();
    const Eigen::VectorXd g = g_full.head(Dphi);
    if (g.cwiseAbs().maxCoeff() <= tol) return theta;

    const Eigen::MatrixXd H =
        observed_information(data, theta, L).topLeftCorner(Dphi, Dphi);
    Eigen::VectorXd step;
    double ridge = 0.0;
    for (int attempt = 0; attempt < 6; ++attempt) {
      Eigen::MatrixXd Hr = H;
      if (ridge > 0.0) Hr.diagonal().array() += ridge;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(Hr);
      if (ldlt.info() == Eigen::Success) {
        step = ldlt.solve(g);
        if (step.allFinite() && g.dot(step) > 0.0) break;
      }
      step.resize(0);
      ridge = ridge == 0.0 ? 1e-8 * (1.0 + H.diagonal().cwiseAbs().maxCoeff())
                           : ridge * 100.0;
    }
    if (step.size() == 0)
      throw ConvergenceError("outcome refit: could not form an ascent direction");

    double scale = 1.0;
    bool moved = false;
    for (int h = 0; h < 60; ++h) {
      Theta trial = theta;
      trial.beta += scale * step.head(L.p);
      trial.zeta1 += scale * step.segment(L.p, L.K1);
      trial.sigma_y *= std::exp(scale * step[L.p + L.K1]);
      const double ll_trial = loglik_of(trial);
      if (ll_trial >= ll - 1e-13 * std::abs(ll)) {
        theta = trial;
        ll = ll_trial;
        moved = true;
        break;
      }
      scale *= 0.5;
    }
    if (!moved)
      throw ConvergenceError("outcome refit: step halving failed to make progress");
  }
  throw ConvergenceError("outcome refit did not reach the gradient tolerance");
}

}  // namespace bidmix
