#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "bidmix/data.hpp"
#include "bidmix/em.hpp"
#include "bidmix/inference.hpp"
#include "bidmix/model.hpp"

namespace bidmix {

// Local sensitivity of the outcome-model estimates to non-ignorable dropout.
// lambda collects the (K1-1)(K2-1) free interaction contrasts of the mass
// logits (zero on the reference row/column); lambda = 0 is the MAR model.
// The index is the derivative of the constrained outcome-block maximizer
//   d(phi_hat) / d(lambda)  at  lambda = 0,
// computed as -H_pp^-1 H_pl from the full-likelihood Hessian at the MAR
// solution with the dropout block and the mass margins held at their MAR
// estimates (set profile_nuisance to re-optimize them along the path instead).
struct IsniResult {
  Theta theta_mar;
  Eigen::MatrixXd isni;     // Dphi x L, natural sigma_y scale on its row
  Eigen::VectorXd se;       // Dphi sandwich SEs at the MAR fit, natural scale
  Eigen::VectorXd phi_hat;  // Dphi outcome estimates, natural scale
  std::vector<std::string> phi_names;     // zeta1_1..K1, covariates, sigma_y
  std::vector<std::string> lambda_names;  // lambda_g_l, row-major
  bool profile_nuisance = false;

  int n_phi() const { return static_cast<int>(phi_hat.size()); }
  int n_lambda() const { return static_cast<int>(isni.cols()); }

  nlohmann::json to_json() const;
  static IsniResult from_json(const nlohmann::json& j);
};

IsniResult isni_matrix(const PanelDataset& data, const FitResult& mar_fit,
                       bool profile_nuisance = false);

// One row of the sensitivity table: Euclidean norm, smallest and largest
// absolute entry of the index row, each also divided by the parameter's SE
// (infinite when the SE is zero and the numerator is not).
struct IsniRow {
  std::string name;
  double se = 0;
  double norm = 0, norm_over_se = 0;
  double min = 0, min_over_se = 0;
  double max = 0, max_over_se = 0;
};
std::vector<IsniRow> isni_summaries(const IsniResult& isni);

// Monte Carlo perturbation study around the MAR fit. Draws lambda vectors,
// maps them through the index (phi_approx row b = phi_hat + isni * lambda_b,
// exactly), and reports per-parameter coverage: the share of draws whose
// approximate estimate stays inside phi_hat +- 1.96 se.
struct ScenarioResult {
  int scenario = 1;
  int B = 0;
  double lo = 0, hi = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> phi_names;
  std::vector<std::string> lambda_names;
  Eigen::MatrixXd lambda_draws;  // B x L
  Eigen::VectorXd c_draws;       // B (scenario 2), else empty
  Eigen::MatrixXd phi_approx;    // B x Dphi
  Eigen::VectorXd coverage;      // Dphi
  Eigen::VectorXd rho12;         // B (scenario 2): implied mixing correlation
  bool overflow = false;         // a perturbed mass logit left [-700, 700]

  nlohmann::json coverage_json() const;
};

// Scenario 1: every lambda element drawn i.i.d. uniform on (lo, hi).
ScenarioResult scenario1(const IsniResult& isni, int B, double lo, double hi,
                         std::uint64_t seed);

// Scenario 2: lambda_b = c_b * lambda_hat with c_b uniform on (lo, hi) and
// lambda_hat the interaction contrast of the MNAR fit's mass matrix; each
// draw also reports the mixing correlation implied by perturbing the MAR
// mass logits by c_b * lambda_hat.
ScenarioResult scenario2(const IsniResult& isni, const Theta& theta_mnar, int B,
                         double lo, double hi, std::uint64_t seed);

// Newton polish of the outcome block (beta, zeta1, log sigma_y) holding the
// dropout block and the mass matrix fixed at their values in `start`.
// Maximizes the observed log likelihood over that block alone; used to
// evaluate phi_hat(lambda) at perturbed mass matrices. Location order is
// preserved (no re-sorting), so the result is a continuous function of the
// perturbation. Throws ConvergenceError if the gradient does not reach tol.
Theta refit_outcome_given_mass(const PanelDataset& data, const Theta& start,
                               double tol = 1e-10, int max_iter = 200);

}  // namespace bidmix
