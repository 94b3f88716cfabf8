#pragma once

#include <Eigen/Dense>
#include <json.hpp>
#include <string>
#include <vector>

#include "bidmix/data.hpp"

namespace bidmix {

// Parameters of the two-process mixture: a K1-point location mixture for the
// outcome and a K2-point intercept mixture for the discrete-time dropout
// hazard, coupled through the K1 x K2 joint mass matrix Pi.
//
//   y_it | group g  ~ N(zeta1[g] + x_it' beta, sigma_y^2)
//   r_it | group l  ~ Bernoulli(logistic(zeta2[l] + v_it' gamma))
//   P(group = (g, l)) = Pi(g, l)
struct Theta {
  Eigen::VectorXd beta;   // p
  Eigen::VectorXd zeta1;  // K1, ascending
  double sigma_y = 1.0;
  Eigen::VectorXd gamma;  // q
  Eigen::VectorXd zeta2;  // K2, ascending
  Eigen::MatrixXd Pi;     // K1 x K2, nonnegative, sums to 1

  int p() const { return static_cast<int>(beta.size()); }
  int q() const { return static_cast<int>(gamma.size()); }
  int K1() const { return static_cast<int>(zeta1.size()); }
  int K2() const { return static_cast<int>(zeta2.size()); }

  void validate() const;  // throws ModelError
  nlohmann::json to_json() const;
  static Theta from_json(const nlohmann::json& j);
};

// Log-linear coordinates of the mass matrix relative to the last cell:
//   xi(g, l) = log(Pi(g, l) / Pi(K1-1, K2-1)) = ar[g] + ac[l] + lambda(g, l)
// with ar[g] = xi(g, K2-1), ac[l] = xi(K1-1, l), and lambda the interaction
// contrast, zero on the reference row/column. lambda == 0 exactly when Pi has
// rank one (independent processes); lambda is the non-ignorability knob.
struct MassLogits {
  Eigen::VectorXd alpha_row;  // K1-1
  Eigen::VectorXd alpha_col;  // K2-1
  Eigen::MatrixXd lambda;     // (K1-1) x (K2-1)

  int K1() const { return static_cast<int>(alpha_row.size()) + 1; }
  int K2() const { return static_cast<int>(alpha_col.size()) + 1; }
  Eigen::MatrixXd xi() const;  // K1 x K2, reference cell = 0
};

MassLogits masses_to_logits(const Eigen::MatrixXd& Pi);          // requires Pi > 0
Eigen::MatrixXd logits_to_masses(const MassLogits& logits);
Eigen::MatrixXd xi_to_masses(const Eigen::MatrixXd& xi);         // stabilized softmax

// Per-subject log density of the outcome trajectory under one group, and of
// the dropout sequence under one group.
double loglik_longitudinal_component(const SubjectRecord& s, const Eigen::VectorXd& beta,
                                     double zeta1g, double sigma_y);
double loglik_dropout_component(const SubjectRecord& s, const Eigen::VectorXd& gamma,
                                double zeta2l);

// n x K1 / n x K2 tables of the component log densities.
Eigen::MatrixXd longitudinal_logdens(const PanelDataset& data, const Eigen::VectorXd& beta,
                                     const Eigen::VectorXd& zeta1, double sigma_y);
Eigen::MatrixXd dropout_logdens(const PanelDataset& data, const Eigen::VectorXd& gamma,
                                const Eigen::VectorXd& zeta2);

double subject_loglik(const SubjectRecord& s, const Theta& theta);
double observed_loglik(const PanelDataset& data, const Theta& theta);

// Moments of the bivariate mixing distribution (location pairs under Pi):
// means, SDs, covariance and correlation of the two location margins.
struct MixingMoments {
  double mean1 = 0, sd1 = 0, mean2 = 0, sd2 = 0, cov12 = 0, rho12 = 0;
};
MixingMoments mixing_moments(const Theta& theta);

// Best rank-M shared-profile decomposition Pi(g,l) ~ sum_h tau[h] A(g,h) B(l,h)
// fitted by KL-divergence EM. `feasible` when the max-abs residual is below
// 1e-8, i.e. the dependence structure is expressible with M shared profiles.
struct SharedProfileFit {
  bool feasible = false;
  double residual = 0.0;          // max-abs reconstruction error
  Eigen::VectorXd tau;            // M
  Eigen::MatrixXd row_profiles;   // K1 x M, columns sum to 1
  Eigen::MatrixXd col_profiles;   // K2 x M, columns sum to 1
};
SharedProfileFit dunson_decomposition_check(const Eigen::MatrixXd& Pi, int M,
                                            int n_starts = 20, int max_iter = 5000);

// ------------------------------------------------------------------ free
// Unconstrained coordinate packing used by all derivative-based code:
//   [ beta (p) | zeta1 (K1) | log sigma_y | gamma (q) | zeta2 (K2) | mass ]
// mass = all xi cells but the reference (row-major), or the two marginal
// logit blocks when the mass matrix is constrained to rank one.
enum class MassParam { FullLogits, RankOne };

struct FreeParamLayout {
  int p = 0, K1 = 1, K2 = 1, q = 0;
  MassParam mass = MassParam::FullLogits;

  int beta_offset() const { return 0; }
  int zeta1_offset() const { return p; }
  int logsigma_offset() const { return p + K1; }
  int gamma_offset() const { return p + K1 + 1; }
  int zeta2_offset() const { return p + K1 + 1 + q; }
  int mass_offset() const { return p + K1 + 1 + q + K2; }
  int mass_dim() const {
    return mass == MassParam::FullLogits ? K1 * K2 - 1 : (K1 - 1) + (K2 - 1);
  }
  int dim() const { return mass_offset() + mass_dim(); }

  static FreeParamLayout for_theta(const Theta& t, MassParam m) {
    return FreeParamLayout{t.p(), t.K1(), t.K2(), t.q(), m};
  }
  std::vector<std::string> names(const std::vector<std::string>& x_names,
                                 const std::vector<std::string>& v_names) const;
};

Eigen::VectorXd pack_free(const Theta& theta, const FreeParamLayout& layout);
Theta unpack_free(const Eigen::VectorXd& v, const FreeParamLayout& layout);

double observed_loglik_free(const PanelDataset& data, const Eigen::VectorXd& v,
                            const FreeParamLayout& layout);

}  // namespace bidmix
