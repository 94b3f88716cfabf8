#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <json.hpp>
#include <vector>

#include "bidmix/data.hpp"
#include "bidmix/model.hpp"

namespace bidmix {

// MAR: the two processes are fitted independently and Pi is the outer product
// of the margin masses (rank one). MNAR: the full K1 x K2 mass matrix is free
// (or, with freeze_lambda, its interaction block is pinned while the margins
// stay free).
enum class FitMode { MAR, MNAR };

// Per-subject posterior group probabilities. Cell (g, l) of subject i sits at
// W(i, g*K2 + l); each W row sums to 1. Marginals are the row/column sums.
struct PosteriorWeights {
  int K1 = 0, K2 = 0;
  Eigen::MatrixXd W;             // n x (K1*K2)
  Eigen::MatrixXd row_marginal;  // n x K1
  Eigen::MatrixXd col_marginal;  // n x K2
};

struct FitConfig {
  int K1 = 1, K2 = 1;
  FitMode mode = FitMode::MNAR;
  int n_starts = 50;
  int max_iter = 2000;
  double rel_tol = 1e-8;          // relative loglik change between iterations
  std::uint64_t seed = 1;
  double sigma_floor_factor = 1e-6;  // floor = factor * SD(y)
  double mass_floor = 1e-10;
  int threads = 1;
  bool freeze_lambda = false;     // MNAR only: hold the interaction block fixed
  Eigen::MatrixXd lambda_fixed;   // (K1-1) x (K2-1), used when freeze_lambda
  std::vector<Theta> extra_start_thetas;  // extra MNAR starts (e.g. grid warm starts),
                                          // appended after the built-in ones

  void validate() const;  // throws ModelError
};

struct FitDiagnostics {
  bool sigma_floor_hit = false;
  bool mass_floor_hit = false;
  bool separation_flag = false;          // a dropout intercept was clamped
  int n_starts_converged = 0;
  int n_starts_failed = 0;               // starts that hit a degenerate state
  double min_step_delta = 0.0;           // most negative loglik step seen
  int start_index_dropout_margin = -1;   // MAR mode: winner of margin 2

  nlohmann::json to_json() const;
};

struct FitResult {
  FitMode mode = FitMode::MNAR;
  Theta theta;
  double loglik = 0.0;
  int n_params = 0;
  double aic = 0.0, bic = 0.0;
  bool converged = false;
  int iterations = 0;      // M-steps taken by the winning start
  int start_index = -1;    // which start won (longitudinal margin in MAR mode)
  int n = 0;               // subjects, the BIC sample size
  PosteriorWeights weights;
  std::vector<double> loglik_trace;  // one entry per E-step of the winner
  FitDiagnostics diagnostics;

  nlohmann::json to_json() const;  // everything except the weight matrix
};

// One E-step: posterior cell probabilities under theta. Throws
// ConvergenceError if some subject's density underflows in every cell.
PosteriorWeights e_step(const PanelDataset& data, const Theta& theta);

// Mass update: mean posterior weight per cell, optionally floored (and
// renormalized) at mass_floor; *floored reports whether the floor engaged.
Eigen::MatrixXd m_step_pi(const PosteriorWeights& weights, double mass_floor = 0.0,
                          bool* floored = nullptr);

// Exact weighted-least-squares update of (zeta1, beta) and the pooled residual
// SD, given n x K1 posterior weights. Starting values are ignored (the
// maximizer is closed-form). Throws ModelError when the stacked design is
// rank-deficient (e.g. a constant column in X duplicating the intercepts).
void m_step_longitudinal(const PanelDataset& data, const Eigen::MatrixXd& weights,
                         Eigen::VectorXd* beta, Eigen::VectorXd* zeta1, double* sigma_y,
                         double sigma_floor = 0.0, bool* floored = nullptr);

// Weighted logistic update of (zeta2, gamma) by Newton iterations with step
// halving, warm-started from the passed-in values. Intercepts beyond +-30 are
// clamped (quasi-separation) and reported through *separation; a component
// with positive weight and no weighted events (strictly monotone maximand)
// is pinned to the box face directly and reported the same way.
void m_step_dropout(const PanelDataset& data, const Eigen::MatrixXd& weights,
                    Eigen::VectorXd* gamma, Eigen::VectorXd* zeta2,
                    bool* separation = nullptr);

// Free-parameter count entering AIC/BIC for a fit of this shape.
int n_free_params(FitMode mode, bool freeze_lambda, int p, int q, int K1, int K2);

// Sort both location vectors ascending and permute Pi (and weights) to match.
void canonicalize(Theta* theta, PosteriorWeights* weights = nullptr);

// Multi-start EM fit. Deterministic given (data, config): every start draws
// from its own counter-derived RNG stream and ties break on the start index,
// so the result does not depend on thread scheduling.
FitResult fit(const PanelDataset& data, const FitConfig& config);

}  // namespace bidmix
