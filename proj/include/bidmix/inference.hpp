#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bidmix/data.hpp"
#include "bidmix/em.hpp"
#include "bidmix/model.hpp"

namespace bidmix {

// n x D matrix of per-subject gradient contributions to the observed log
// likelihood in the given free parameterization (posterior-weighted average
// of the complete-data scores). Rows sum to the total observed score; the
// column sums vanish at a stationary point. With a RankOne layout the mass
// matrix is replaced by the outer product of its margins before evaluating,
// so the point differentiated is always the one the layout can represent.
Eigen::MatrixXd subject_scores(const PanelDataset& data, const Theta& theta,
                               const FreeParamLayout& layout);

// Exact observed information -d2(loglik)/dtheta2 via the missing-information
// decomposition (Oakes' identity): complete-data information minus the summed
// posterior covariance of the complete-data scores. Analytic and valid at any
// parameter point, not only at a maximizer.
Eigen::MatrixXd observed_information(const PanelDataset& data, const Theta& theta,
                                     const FreeParamLayout& layout);

struct CovarianceEstimate {
  FreeParamLayout layout;
  std::vector<std::string> param_names;
  Eigen::MatrixXd info_observed;  // D x D
  Eigen::MatrixXd score_outer;    // D x D, sum over subjects of s_i s_i'
  Eigen::MatrixXd sandwich;       // D x D, Io^-1 * score_outer * Io^-1
  bool used_pseudo_inverse = false;
  std::vector<std::string> warnings;

  double se(int j) const { return std::sqrt(std::max(0.0, sandwich(j, j))); }
  std::vector<double> se_vector() const {
    std::vector<double> v(sandwich.rows());
    for (int j = 0; j < static_cast<int>(v.size()); ++j) v[j] = se(j);
    return v;
  }
};

// Robust (sandwich) covariance of the free parameters at the fitted point.
// MAR fits use the rank-one mass layout; MNAR fits use the full mass logits.
CovarianceEstimate sandwich_covariance(const PanelDataset& data, const FitResult& fit);

// Natural-scale summaries derived from the fit, with delta-method SEs taken
// through the full free-parameter covariance. SEs are NaN when the map is
// not differentiable at the point (e.g. a zero-variance margin).
struct MomentSummaries {
  MixingMoments moments;
  double se_mean1 = 0, se_mean2 = 0;
  double se_sd1 = 0, se_sd2 = 0;
  double se_cov12 = 0, se_rho12 = 0;
  double sigma_y = 0, se_sigma_y = 0;  // natural scale
};
MomentSummaries moment_summaries(const Theta& theta, const CovarianceEstimate& cov);

}  // namespace bidmix
