#include "bidmix/em.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bidmix/errors.hpp"
#include "bidmix/rng.hpp"
#include "bidmix/util.hpp"

namespace bidmix {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Per-dataset sufficient statistics: everything the E- and M-steps need,
// computed once per fit. The outcome side reduces to per-subject moments
// (Sy, Syy, Sx, Sxy, Sxx); the dropout side keeps a flat row table.
struct Cache {
  int n = 0, p = 0, q = 0, T = 0;
  Eigen::VectorXd Ti, Sy, Syy;
  Eigen::MatrixXd Sx, Sxy;            // n x p
  std::vector<Eigen::MatrixXd> Sxx;   // p x p per subject
  Eigen::MatrixXd Sxx_total;          // p x p
  double total_obs = 0.0;
  Eigen::MatrixXd Vrows;              // R x q (flattened risk rows)
  Eigen::VectorXd rflat;              // R
  std::vector<int> row_begin;         // n + 1 offsets into the flat tables
  double sd_y = 0.0;
  double event_rate = 0.0;
  std::vector<double> subj_mean_y;
};

Cache build_cache(const PanelDataset& data) {
  Cache c;
  c.n = data.n();
  c.p = data.p;
  c.q = data.q;
  c.T = data.T;
  c.Ti.resize(c.n);
  c.Sy.resize(c.n);
  c.Syy.resize(c.n);
  c.Sx.resize(c.n, c.p);
  c.Sxy.resize(c.n, c.p);
  c.Sxx.assign(c.n, Eigen::MatrixXd::Zero(c.p, c.p));
  c.Sxx_total = Eigen::MatrixXd::Zero(c.p, c.p);
  c.subj_mean_y.resize(c.n);
  c.row_begin.assign(c.n + 1, 0);

  int R = data.total_risk_rows();
  c.Vrows.resize(R, c.q);
  c.rflat.resize(R);

  double sum_y = 0.0, sum_yy = 0.0;
  int events = 0, row = 0;
  for (int i = 0; i < c.n; ++i) {
    const SubjectRecord& s = data.subjects[i];
    c.Ti[i] = s.T_i;
    c.Sy[i] = s.y.sum();
    c.Syy[i] = s.y.squaredNorm();
    c.Sx.row(i) = s.X.colwise().sum();
    c.Sxy.row(i) = s.y.transpose() * s.X;
    c.Sxx[i] = s.X.transpose() * s.X;
    c.Sxx_total += c.Sxx[i];
    c.total_obs += s.T_i;
    c.subj_mean_y[i] = s.y.mean();
    sum_y += c.Sy[i];
    sum_yy += c.Syy[i];
    events += s.completer ? 0 : 1;
    c.row_begin[i] = row;
    for (int t = 0; t < s.risk_rows(); ++t, ++row) {
      c.Vrows.row(row) = s.V.row(t);
      c.rflat[row] = s.r[t];
    }
  }
  c.row_begin[c.n] = row;
  const double N = c.total_obs;
  const double mean_y = sum_y / N;
  c.sd_y = N > 1 ? std::sqrt(std::max(0.0, (sum_yy - N * mean_y * mean_y) / (N - 1))) : 1.0;
  c.event_rate = static_cast<double>(events) / std::max(1, data.total_risk_rows());
  return c;
}

// Outcome component log densities from the sufficient statistics.
Eigen::MatrixXd logdens1(const Cache& c, const Eigen::VectorXd& beta,
                         const Eigen::VectorXd& zeta1, double sigma) {
  const int K1 = static_cast<int>(zeta1.size());
  const double inv2s2 = 0.5 / (sigma * sigma);
  const double logs = std::log(sigma);
  Eigen::MatrixXd out(c.n, K1);
  for (int i = 0; i < c.n; ++i) {
    double Qi = c.Syy[i];
    double Li = c.Sy[i];
    if (c.p > 0) {
      Qi += -2.0 * c.Sxy.row(i).dot(beta) + beta.dot(c.Sxx[i] * beta);
      Li -= c.Sx.row(i).dot(beta);
    }
    const double base = -c.Ti[i] * (0.5 * kLog2Pi + logs);
    for (int g = 0; g < K1; ++g) {
      const double ss = Qi - 2.0 * zeta1[g] * Li + c.Ti[i] * zeta1[g] * zeta1[g];
      out(i, g) = base - ss * inv2s2;
    }
  }
  return out;
}

// Dropout component log densities from the flat row table.
Eigen::MatrixXd logdens2(const Cache& c, const Eigen::VectorXd& gamma,
                         const Eigen::VectorXd& zeta2) {
  const int K2 = static_cast<int>(zeta2.size());
  Eigen::VectorXd base = c.q > 0 ? (c.Vrows * gamma).eval()
                                 : Eigen::VectorXd::Zero(c.rflat.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(c.n, K2);
  for (int i = 0; i < c.n; ++i) {
    for (int t = c.row_begin[i]; t < c.row_begin[i + 1]; ++t) {
      const double r = c.rflat[t];
      for (int l = 0; l < K2; ++l) {
        const double eta = base[t] + zeta2[l];
        out(i, l) += r * eta - log1pexp(eta);
      }
    }
  }
  return out;
}

struct EStepOut {
  PosteriorWeights w;
  double loglik = 0.0;
};

EStepOut e_step_core(const Eigen::MatrixXd& lf1, const Eigen::MatrixXd& lf2,
                     const Eigen::MatrixXd& logpi, const PanelDataset& data) {
  const int n = static_cast<int>(lf1.rows());
  const int K1 = static_cast<int>(lf1.cols());
  const int K2 = static_cast<int>(lf2.cols());
  EStepOut out;
  out.w.K1 = K1;
  out.w.K2 = K2;
  out.w.W.resize(n, K1 * K2);
  out.w.row_marginal = Eigen::MatrixXd::Zero(n, K1);
  out.w.col_marginal = Eigen::MatrixXd::Zero(n, K2);
  Eigen::VectorXd cell(K1 * K2);
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l)
        cell[g * K2 + l] = lf1(i, g) + lf2(i, l) + logpi(g, l);
    const double lse = logsumexp(cell);
    if (!std::isfinite(lse))
      throw ConvergenceError("mixture density underflowed to zero for subject '" +
                             data.subjects[i].id + "'");
    out.loglik += lse;
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        const double v = cell[g * K2 + l];
        const double w = std::isfinite(v) ? std::exp(v - lse) : 0.0;
        out.w.W(i, g * K2 + l) = w;
        out.w.row_marginal(i, g) += w;
        out.w.col_marginal(i, l) += w;
      }
  }
  return out;
}

Eigen::MatrixXd log_mass(const Eigen::MatrixXd& Pi) {
  Eigen::MatrixXd lp(Pi.rows(), Pi.cols());
  for (int g = 0; g < Pi.rows(); ++g)
    for (int l = 0; l < Pi.cols(); ++l)
      lp(g, l) = Pi(g, l) > 0.0 ? std::log(Pi(g, l))
                                : -std::numeric_limits<double>::infinity();
  return lp;
}

// ---------------------------------------------------------------- M-steps

void m_step_longitudinal_cached(const Cache& c, const Eigen::MatrixXd& weights,
                                Eigen::VectorXd* beta, Eigen::VectorXd* zeta1,
                                double* sigma_y, double sigma_floor, bool* floored) {
  const int K1 = static_cast<int>(weights.cols());
  const int p = c.p;
  const int d = K1 + p;

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d);
  for (int g = 0; g < K1; ++g) {
    double tw = 0.0, sy = 0.0;
    Eigen::VectorXd sx = Eigen::VectorXd::Zero(p);
    for (int i = 0; i < c.n; ++i) {
      const double w = weights(i, g);
      tw += w * c.Ti[i];
      sy += w * c.Sy[i];
      if (p > 0) sx += w * c.Sx.row(i).transpose();
    }
    M(g, g) = tw;
    if (p > 0) {
      M.block(g, K1, 1, p) = sx.transpose();
      M.block(K1, g, p, 1) = sx;
    }
    rhs[g] = sy;
  }
  if (p > 0) {
    M.block(K1, K1, p, p) = c.Sxx_total;
    rhs.segment(K1, p) = c.Sxy.colwise().sum().transpose();
  }

  Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
  if (lu.rank() < d)
    throw ModelError(
        "m_step_longitudinal: stacked design is rank-deficient (an outcome "
        "covariate is collinear with the group intercepts, or a group has no "
        "posterior mass)");
  Eigen::VectorXd sol = lu.solve(rhs);

  *zeta1 = sol.head(K1);
  *beta = sol.tail(p);

  // Pooled residual variance at the new coefficients.
  double ssr = 0.0;
  for (int i = 0; i < c.n; ++i) {
    double Qi = c.Syy[i];
    double Li = c.Sy[i];
    if (p > 0) {
      Qi += -2.0 * c.Sxy.row(i).dot(*beta) + beta->dot(c.Sxx[i] * (*beta));
      Li -= c.Sx.row(i).dot(*beta);
    }
    for (int g = 0; g < K1; ++g) {
      const double z = (*zeta1)[g];
      ssr += weights(i, g) * (Qi - 2.0 * z * Li + c.Ti[i] * z * z);
    }
  }
  double s = std::sqrt(std::max(ssr, 0.0) / c.total_obs);
  if (s < sigma_floor) {
    s = sigma_floor;
    if (floored) *floored = true;
  }
  *sigma_y = s;
}

double dropout_q_value(const Cache& c, const Eigen::MatrixXd& weights,
                       const Eigen::VectorXd& gamma, const Eigen::VectorXd& zeta2) {
  const int K2 = static_cast<int>(zeta2.size());
  Eigen::VectorXd base = c.q > 0 ? (c.Vrows * gamma).eval()
                                 : Eigen::VectorXd::Zero(c.rflat.size());
  double qv = 0.0;
  for (int i = 0; i < c.n; ++i)
    for (int t = c.row_begin[i]; t < c.row_begin[i + 1]; ++t)
      for (int l = 0; l < K2; ++l) {
        const double eta = base[t] + zeta2[l];
        qv += weights(i, l) * (c.rflat[t] * eta - log1pexp(eta));
      }
  return qv;
}

void m_step_dropout_cached(const Cache& c, const Eigen::MatrixXd& weights,
                           Eigen::VectorXd* gamma, Eigen::VectorXd* zeta2,
                           bool* separation) {
  const int K2 = static_cast<int>(weights.cols());
  const int q = c.q;
  const int d = K2 + q;
  if (zeta2->size() != K2) throw ModelError("m_step_dropout: zeta2 size mismatch");
  if (gamma->size() != q) throw ModelError("m_step_dropout: gamma size mismatch");

  // Quasi-separation guard: past |zeta2| = 30 a hazard is saturated to
  // machine precision, and a near-separated margin would otherwise walk one
  // intercept off to infinity along a ridge that the covariate coefficients
  // compensate. The box is part of this maximization (projected Newton with
  // an active set) rather than an after-the-fact truncation, so the weighted
  // log-likelihood never decreases.
  const double kBound = 30.0;
  const double kGradTol = 1e-9;
  const int kMaxIter = 50;

  Eigen::VectorXd theta(d);
  theta.head(K2) = *zeta2;
  theta.tail(q) = *gamma;
  for (int l = 0; l < K2; ++l) theta[l] = std::clamp(theta[l], -kBound, kBound);

  // A component that carries weight but sees no events has its maximand
  // strictly decreasing in that intercept (all events: strictly increasing),
  // so the constrained maximum sits exactly on a box face. Moving there up
  // front is itself an ascent step; the active-set handling below keeps the
  // coordinate pinned and raises the separation flag.
  {
    Eigen::VectorXd ev = Eigen::VectorXd::Zero(K2);
    Eigen::VectorXd risk = Eigen::VectorXd::Zero(K2);
    for (int i = 0; i < c.n; ++i) {
      double d_i = 0.0;
      for (int t = c.row_begin[i]; t < c.row_begin[i + 1]; ++t) d_i += c.rflat[t];
      const double rows_i = static_cast<double>(c.row_begin[i + 1] - c.row_begin[i]);
      for (int l = 0; l < K2; ++l) {
        ev[l] += weights(i, l) * d_i;
        risk[l] += weights(i, l) * rows_i;
      }
    }
    for (int l = 0; l < K2; ++l) {
      if (risk[l] > 0.0 && ev[l] == 0.0)
        theta[l] = -kBound;
      else if (risk[l] > 0.0 && ev[l] == risk[l])
        theta[l] = kBound;
    }
  }

  const auto project = [&](Eigen::VectorXd v) {
    for (int l = 0; l < K2; ++l) v[l] = std::clamp(v[l], -kBound, kBound);
    return v;
  };

  double qv = dropout_q_value(c, weights, theta.tail(q), theta.head(K2));

  for (int iter = 0; iter < kMaxIter; ++iter) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(d, d);  // negative Hessian (PSD)
    Eigen::VectorXd base = q > 0 ? (c.Vrows * theta.tail(q)).eval()
                                 : Eigen::VectorXd::Zero(c.rflat.size());
    for (int i = 0; i < c.n; ++i) {
      for (int t = c.row_begin[i]; t < c.row_begin[i + 1]; ++t) {
        double s_sum = 0.0, a_sum = 0.0;
        for (int l = 0; l < K2; ++l) {
          const double w = weights(i, l);
          const double phi = logistic(base[t] + theta[l]);
          const double s = w * (c.rflat[t] - phi);
          const double a = w * phi * (1.0 - phi);
          grad[l] += s;
          H(l, l) += a;
          s_sum += s;
          a_sum += a;
          if (q > 0) {
            H.block(l, K2, 1, q) += a * c.Vrows.row(t);
          }
        }
        if (q > 0) {
          grad.tail(q) += s_sum * c.Vrows.row(t).transpose();
          H.block(K2, K2, q, q) +=
              a_sum * c.Vrows.row(t).transpose() * c.Vrows.row(t);
        }
      }
    }
    H.triangularView<Eigen::StrictlyLower>() =
        H.triangularView<Eigen::StrictlyUpper>().transpose();

    // An intercept pinned to the box face with the gradient pointing outward
    // stays put this round; the Newton system is solved for the free
    // coordinates. The stopping rule uses the projected gradient, which is
    // what vanishes at a constrained maximizer.
    Eigen::VectorXd pgrad = grad;
    for (int l = 0; l < K2; ++l) {
      const bool outward = (theta[l] <= -kBound && grad[l] < 0.0) ||
                           (theta[l] >= kBound && grad[l] > 0.0);
      if (outward) {
        pgrad[l] = 0.0;
        H.row(l).setZero();
        H.col(l).setZero();
        H(l, l) = 1.0;
        if (separation) *separation = true;
      }
    }
    if (pgrad.cwiseAbs().maxCoeff() < kGradTol) break;

    Eigen::VectorXd dir;
    double ridge = 0.0;
    for (int attempt = 0; attempt < 4; ++attempt) {
      Eigen::MatrixXd Hr = H;
      if (ridge > 0.0) Hr.diagonal().array() += ridge;
      dir = Hr.ldlt().solve(pgrad);
      if (dir.allFinite()) break;
      ridge = ridge == 0.0 ? 1e-10 * (1.0 + H.diagonal().maxCoeff()) : ridge * 100.0;
    }
    if (!dir.allFinite()) break;

    // Backtracking on the projected candidate keeps the weighted
    // log-likelihood from decreasing even when a step is cut by the box.
    double step = 1.0;
    bool moved = false;
    for (int h = 0; h < 40; ++h) {
      const Eigen::VectorXd cand = project(theta + step * dir);
      const double qc = dropout_q_value(c, weights, cand.tail(q), cand.head(K2));
      if (qc >= qv - 1e-13 * std::abs(qv) &&
          (cand - theta).cwiseAbs().maxCoeff() > 0.0) {
        if (separation && (cand.head(K2).cwiseAbs().array() >= kBound).any())
          *separation = true;
        theta = cand;
        qv = qc;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }

  *zeta2 = theta.head(K2);
  *gamma = theta.tail(q);
}

// Exact mass update with the interaction block pinned: Newton ascent on the
// concave function f(a) = sum(Wbar .* xi) - n * logsumexp(xi) over the free
// margin logits, with xi = ar (+) ac + lambda.
Eigen::MatrixXd m_step_pi_frozen(const Eigen::MatrixXd& Wbar, double n,
                                 const Eigen::MatrixXd& lambda, Eigen::VectorXd* ar,
                                 Eigen::VectorXd* ac) {
  const int K1 = static_cast<int>(Wbar.rows()), K2 = static_cast<int>(Wbar.cols());
  const int d = (K1 - 1) + (K2 - 1);

  auto compose_xi = [&](const Eigen::VectorXd& r, const Eigen::VectorXd& c) {
    Eigen::MatrixXd xi = Eigen::MatrixXd::Zero(K1, K2);
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        if (g < K1 - 1) xi(g, l) += r[g];
        if (l < K2 - 1) xi(g, l) += c[l];
        if (g < K1 - 1 && l < K2 - 1) xi(g, l) += lambda(g, l);
      }
    return xi;
  };
  auto fvalue = [&](const Eigen::MatrixXd& xi) {
    const double m = xi.maxCoeff();
    const double lse = m + std::log((xi.array() - m).exp().sum());
    return (Wbar.array() * xi.array()).sum() - n * lse;
  };

  if (d == 0) return xi_to_masses(compose_xi(*ar, *ac));

  double fv = fvalue(compose_xi(*ar, *ac));
  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::MatrixXd Pi = xi_to_masses(compose_xi(*ar, *ac));
    const Eigen::VectorXd prow = Pi.rowwise().sum();
    const Eigen::VectorXd pcol = Pi.colwise().sum();
    const Eigen::VectorXd wrow = Wbar.rowwise().sum();
    const Eigen::VectorXd wcol = Wbar.colwise().sum();

    Eigen::VectorXd grad(d);
    for (int g = 0; g < K1 - 1; ++g) grad[g] = wrow[g] - n * prow[g];
    for (int l = 0; l < K2 - 1; ++l) grad[K1 - 1 + l] = wcol[l] - n * pcol[l];
    if (grad.cwiseAbs().maxCoeff() < 1e-10 * std::max(1.0, n)) break;

    Eigen::MatrixXd H(d, d);  // negative Hessian
    for (int g = 0; g < K1 - 1; ++g)
      for (int g2 = 0; g2 < K1 - 1; ++g2)
        H(g, g2) = n * (prow[g] * ((g == g2) ? 1.0 : 0.0) - prow[g] * prow[g2]);
    for (int l = 0; l < K2 - 1; ++l)
      for (int l2 = 0; l2 < K2 - 1; ++l2)
        H(K1 - 1 + l, K1 - 1 + l2) =
            n * (pcol[l] * ((l == l2) ? 1.0 : 0.0) - pcol[l] * pcol[l2]);
    for (int g = 0; g < K1 - 1; ++g)
      for (int l = 0; l < K2 - 1; ++l) {
        const double v = n * (Pi(g, l) - prow[g] * pcol[l]);
        H(g, K1 - 1 + l) = v;
        H(K1 - 1 + l, g) = v;
      }
    H.diagonal().array() += 1e-12 * (1.0 + n);

    Eigen::VectorXd dir = H.ldlt().solve(grad);
    if (!dir.allFinite()) break;
    double step = 1.0;
    bool moved = false;
    for (int h = 0; h < 40; ++h) {
      Eigen::VectorXd r2 = *ar, c2 = *ac;
      r2 += step * dir.head(K1 - 1);
      c2 += step * dir.tail(K2 - 1);
      const double f2 = fvalue(compose_xi(r2, c2));
      if (f2 >= fv - 1e-13 * std::abs(fv)) {
        *ar = r2;
        *ac = c2;
        fv = f2;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  return xi_to_masses(compose_xi(*ar, *ac));
}

// ---------------------------------------------------------------- EM drivers

struct StartOutcome {
  bool ok = false;
  std::string error;
  Theta theta;
  double loglik = -std::numeric_limits<double>::infinity();
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  PosteriorWeights weights;
  bool sigma_floor_hit = false;
  bool mass_floor_hit = false;
  bool separation = false;
  double min_step_delta = 0.0;
};

struct EmSettings {
  int max_iter;
  double rel_tol;
  double sigma_floor;
  double mass_floor;
  bool freeze_lambda;
  Eigen::MatrixXd lambda_fixed;
};

StartOutcome run_em_joint(const Cache& cache, const PanelDataset& data, Theta theta,
                          const EmSettings& cfg) {
  StartOutcome out;
  try {
    Eigen::VectorXd ar, ac;
    if (cfg.freeze_lambda) {
      // Maintain the margin logits across iterations; seed from the current
      // mass matrix margins.
      const Eigen::VectorXd prow = theta.Pi.rowwise().sum();
      const Eigen::VectorXd pcol = theta.Pi.colwise().sum();
      const int K1 = theta.K1(), K2 = theta.K2();
      ar.resize(K1 - 1);
      ac.resize(K2 - 1);
      for (int g = 0; g < K1 - 1; ++g) ar[g] = std::log(prow[g] / prow[K1 - 1]);
      for (int l = 0; l < K2 - 1; ++l) ac[l] = std::log(pcol[l] / pcol[K2 - 1]);
    }

    double prev = std::numeric_limits<double>::quiet_NaN();
    for (int iter = 0;; ++iter) {
      const Eigen::MatrixXd lf1 = logdens1(cache, theta.beta, theta.zeta1, theta.sigma_y);
      const Eigen::MatrixXd lf2 = logdens2(cache, theta.gamma, theta.zeta2);
      EStepOut e = e_step_core(lf1, lf2, log_mass(theta.Pi), data);
      out.trace.push_back(e.loglik);
      out.weights = std::move(e.w);
      out.loglik = e.loglik;
      out.iterations = iter;
      if (iter > 0) {
        const double delta = e.loglik - prev;
        out.min_step_delta = std::min(out.min_step_delta, delta);
        if (std::abs(delta) <= cfg.rel_tol * std::max(1.0, std::abs(prev))) {
          out.converged = true;
          break;
        }
      }
      prev = e.loglik;
      if (iter >= cfg.max_iter) break;

      if (cfg.freeze_lambda) {
        Eigen::MatrixXd Wbar = Eigen::MatrixXd::Zero(theta.K1(), theta.K2());
        for (int g = 0; g < theta.K1(); ++g)
          for (int l = 0; l < theta.K2(); ++l)
            Wbar(g, l) = out.weights.W.col(g * theta.K2() + l).sum();
        theta.Pi = m_step_pi_frozen(Wbar, cache.n, cfg.lambda_fixed, &ar, &ac);
      } else {
        theta.Pi = m_step_pi(out.weights, cfg.mass_floor, &out.mass_floor_hit);
      }
      m_step_longitudinal_cached(cache, out.weights.row_marginal, &theta.beta,
                                 &theta.zeta1, &theta.sigma_y, cfg.sigma_floor,
                                 &out.sigma_floor_hit);
      m_step_dropout_cached(cache, out.weights.col_marginal, &theta.gamma,
                            &theta.zeta2, &out.separation);
    }
    out.theta = std::move(theta);
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

// Margin EMs for the factorized (MAR) fit. Margin 1: outcome mixture with
// masses prow; margin 2: dropout mixture with masses pcol.
struct MarginOutcome {
  bool ok = false;
  std::string error;
  Eigen::VectorXd beta, zeta1;  // margin 1 parameters
  double sigma_y = 1.0;
  Eigen::VectorXd gamma, zeta2;  // margin 2 parameters
  Eigen::VectorXd masses;        // the margin's mass vector
  Eigen::MatrixXd w;             // n x K posterior
  double loglik = -std::numeric_limits<double>::infinity();
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  bool sigma_floor_hit = false, mass_floor_hit = false, separation = false;
  double min_step_delta = 0.0;
};

template <typename LogdensFn, typename MstepFn>
MarginOutcome run_em_margin(const PanelDataset& data, int K, Eigen::VectorXd masses,
                            const EmSettings& cfg, LogdensFn logdens, MstepFn mstep) {
  MarginOutcome out;
  try {
    double prev = std::numeric_limits<double>::quiet_NaN();
    const int n = data.n();
    for (int iter = 0;; ++iter) {
      const Eigen::MatrixXd lf = logdens();  // n x K at current parameters
      Eigen::MatrixXd w(n, K);
      double ll = 0.0;
      Eigen::VectorXd cell(K);
      for (int i = 0; i < n; ++i) {
        for (int k = 0; k < K; ++k)
          cell[k] = (masses[k] > 0.0 ? std::log(masses[k])
                                     : -std::numeric_limits<double>::infinity()) +
                    lf(i, k);
        const double lse = logsumexp(cell);
        if (!std::isfinite(lse))
          throw ConvergenceError("margin density underflowed for subject '" +
                                 data.subjects[i].id + "'");
        ll += lse;
        for (int k = 0; k < K; ++k)
          w(i, k) = std::isfinite(cell[k]) ? std::exp(cell[k] - lse) : 0.0;
      }
      out.trace.push_back(ll);
      out.loglik = ll;
      out.w = std::move(w);
      out.iterations = iter;
      if (iter > 0) {
        const double delta = ll - prev;
        out.min_step_delta = std::min(out.min_step_delta, delta);
        if (std::abs(delta) <= cfg.rel_tol * std::max(1.0, std::abs(prev))) {
          out.converged = true;
          break;
        }
      }
      prev = ll;
      if (iter >= cfg.max_iter) break;

      masses = out.w.colwise().mean().transpose();
      if (cfg.mass_floor > 0.0 && masses.minCoeff() < cfg.mass_floor) {
        masses = masses.cwiseMax(cfg.mass_floor);
        masses /= masses.sum();
        out.mass_floor_hit = true;
      }
      mstep(out.w);
    }
    out.masses = masses;
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

Eigen::VectorXd quantile_locations(const Cache& c, int K1) {
  std::vector<double> w(c.n);
  for (int i = 0; i < c.n; ++i) w[i] = c.Ti[i];
  Eigen::VectorXd z(K1);
  for (int g = 0; g < K1; ++g)
    z[g] = weighted_quantile(c.subj_mean_y, w, (g + 0.5) / K1);
  return z;
}

Eigen::VectorXd hazard_locations(const Cache& c, int K2) {
  const double rate = std::min(0.999, std::max(1e-3, c.event_rate));
  const double base = std::log(rate / (1.0 - rate));
  Eigen::VectorXd z(K2);
  for (int l = 0; l < K2; ++l) z[l] = base + (l - 0.5 * (K2 - 1));
  return z;
}

Theta make_start(const Cache& cache, const FitConfig& config, int s) {
  const double sd0 = std::max(cache.sd_y, 1e-8);
  Theta t;
  t.beta = Eigen::VectorXd::Zero(cache.p);
  t.gamma = Eigen::VectorXd::Zero(cache.q);
  t.sigma_y = sd0;
  t.zeta1 = quantile_locations(cache, config.K1);
  t.zeta2 = hazard_locations(cache, config.K2);
  const int K1 = config.K1, K2 = config.K2;
  if (s == 0) {
    t.Pi = Eigen::MatrixXd::Constant(K1, K2, 1.0 / (K1 * K2));
  } else {
    Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(s));
    for (int g = 0; g < K1; ++g) t.zeta1[g] += sd0 * rng.normal();
    for (int l = 0; l < K2; ++l) t.zeta2[l] += 2.0 * rng.normal();
    if (config.freeze_lambda) {
      Eigen::VectorXd prow = rng.dirichlet_ones(K1);
      Eigen::VectorXd pcol = rng.dirichlet_ones(K2);
      t.Pi = prow * pcol.transpose();
    } else {
      Eigen::VectorXd flat = rng.dirichlet_ones(K1 * K2);
      t.Pi = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                      Eigen::RowMajor>>(flat.data(), K1, K2);
    }
  }
  if (config.freeze_lambda && (K1 > 1 && K2 > 1)) {
    // Compose the start's margins with the pinned interaction block.
    const Eigen::VectorXd prow = t.Pi.rowwise().sum();
    const Eigen::VectorXd pcol = t.Pi.colwise().sum();
    Eigen::MatrixXd xi = Eigen::MatrixXd::Zero(K1, K2);
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        if (g < K1 - 1) xi(g, l) += std::log(prow[g] / prow[K1 - 1]);
        if (l < K2 - 1) xi(g, l) += std::log(pcol[l] / pcol[K2 - 1]);
        if (g < K1 - 1 && l < K2 - 1) xi(g, l) += config.lambda_fixed(g, l);
      }
    t.Pi = xi_to_masses(xi);
  }
  return t;
}

FitResult fit_mar(const PanelDataset& data, const Cache& cache, const FitConfig& config);

}  // namespace

void FitConfig::validate() const {
  if (K1 < 1 || K2 < 1) throw ModelError("fit config: K1 and K2 must be >= 1");
  if (n_starts < 1) throw ModelError("fit config: n_starts must be >= 1");
  if (max_iter < 1) throw ModelError("fit config: max_iter must be >= 1");
  if (!(rel_tol > 0.0)) throw ModelError("fit config: rel_tol must be positive");
  if (mass_floor < 0.0 || sigma_floor_factor < 0.0)
    throw ModelError("fit config: floors must be nonnegative");
  if (threads < 0) throw ModelError("fit config: threads must be >= 0");
  if (freeze_lambda) {
    if (mode != FitMode::MNAR)
      throw ModelError("fit config: freeze_lambda applies to MNAR fits only");
    if (lambda_fixed.rows() != K1 - 1 || lambda_fixed.cols() != K2 - 1)
      throw ModelError("fit config: lambda_fixed must be (K1-1) x (K2-1)");
    if (!lambda_fixed.allFinite())
      throw ModelError("fit config: lambda_fixed must be finite");
  }
  for (const Theta& t : extra_start_thetas) {
    t.validate();
    if (t.K1() != K1 || t.K2() != K2)
      throw ModelError("fit config: extra start theta has the wrong (K1, K2) shape");
  }
}

nlohmann::json FitDiagnostics::to_json() const {
  nlohmann::json j;
  j["sigma_floor_hit"] = sigma_floor_hit;
  j["mass_floor_hit"] = mass_floor_hit;
  j["separation_flag"] = separation_flag;
  j["n_starts_converged"] = n_starts_converged;
  j["n_starts_failed"] = n_starts_failed;
  j["min_step_delta"] = min_step_delta;
  if (start_index_dropout_margin >= 0)
    j["start_index_dropout_margin"] = start_index_dropout_margin;
  return j;
}

nlohmann::json FitResult::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["mode"] = mode == FitMode::MAR ? "mar" : "mnar";
  j["K1"] = theta.K1();
  j["K2"] = theta.K2();
  j["theta"] = theta.to_json();
  j["loglik"] = loglik;
  j["n_params"] = n_params;
  j["aic"] = aic;
  j["bic"] = bic;
  j["converged"] = converged;
  j["iterations"] = iterations;
  j["start_index"] = start_index;
  j["n"] = n;
  j["diagnostics"] = diagnostics.to_json();
  const MixingMoments m = mixing_moments(theta);
  j["mixing_moments"] = {{"mean1", m.mean1}, {"sd1", m.sd1},   {"mean2", m.mean2},
                         {"sd2", m.sd2},     {"cov12", m.cov12}, {"rho12", m.rho12}};
  return j;
}

PosteriorWeights e_step(const PanelDataset& data, const Theta& theta) {
  theta.validate();
  const Eigen::MatrixXd lf1 =
      longitudinal_logdens(data, theta.beta, theta.zeta1, theta.sigma_y);
  const Eigen::MatrixXd lf2 = dropout_logdens(data, theta.gamma, theta.zeta2);
  return e_step_core(lf1, lf2, log_mass(theta.Pi), data).w;
}

Eigen::MatrixXd m_step_pi(const PosteriorWeights& weights, double mass_floor,
                          bool* floored) {
  const int K1 = weights.K1, K2 = weights.K2;
  Eigen::MatrixXd Pi(K1, K2);
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l) Pi(g, l) = weights.W.col(g * K2 + l).mean();
  if (mass_floor > 0.0 && Pi.minCoeff() < mass_floor) {
    Pi = Pi.cwiseMax(mass_floor);
    Pi /= Pi.sum();
    if (floored) *floored = true;
  }
  return Pi;
}

void m_step_longitudinal(const PanelDataset& data, const Eigen::MatrixXd& weights,
                         Eigen::VectorXd* beta, Eigen::VectorXd* zeta1, double* sigma_y,
                         double sigma_floor, bool* floored) {
  const Cache cache = build_cache(data);
  if (weights.rows() != cache.n) throw ModelError("m_step_longitudinal: weight rows != n");
  m_step_longitudinal_cached(cache, weights, beta, zeta1, sigma_y, sigma_floor, floored);
}

void m_step_dropout(const PanelDataset& data, const Eigen::MatrixXd& weights,
                    Eigen::VectorXd* gamma, Eigen::VectorXd* zeta2, bool* separation) {
  const Cache cache = build_cache(data);
  if (weights.rows() != cache.n) throw ModelError("m_step_dropout: weight rows != n");
  m_step_dropout_cached(cache, weights, gamma, zeta2, separation);
}

int n_free_params(FitMode mode, bool freeze_lambda, int p, int q, int K1, int K2) {
  const int shared = p + K1 + 1 + q + K2;
  if (mode == FitMode::MNAR && !freeze_lambda) return shared + K1 * K2 - 1;
  return shared + (K1 - 1) + (K2 - 1);
}

void canonicalize(Theta* theta, PosteriorWeights* weights) {
  const int K1 = theta->K1(), K2 = theta->K2();
  std::vector<int> p1(K1), p2(K2);
  std::iota(p1.begin(), p1.end(), 0);
  std::iota(p2.begin(), p2.end(), 0);
  std::stable_sort(p1.begin(), p1.end(),
                   [&](int a, int b) { return theta->zeta1[a] < theta->zeta1[b]; });
  std::stable_sort(p2.begin(), p2.end(),
                   [&](int a, int b) { return theta->zeta2[a] < theta->zeta2[b]; });

  Eigen::VectorXd z1(K1), z2(K2);
  Eigen::MatrixXd Pi(K1, K2);
  for (int g = 0; g < K1; ++g) z1[g] = theta->zeta1[p1[g]];
  for (int l = 0; l < K2; ++l) z2[l] = theta->zeta2[p2[l]];
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l) Pi(g, l) = theta->Pi(p1[g], p2[l]);
  theta->zeta1 = z1;
  theta->zeta2 = z2;
  theta->Pi = Pi;

  if (weights) {
    const int n = static_cast<int>(weights->W.rows());
    Eigen::MatrixXd W(n, K1 * K2), rm(n, K1), cm(n, K2);
    for (int g = 0; g < K1; ++g) rm.col(g) = weights->row_marginal.col(p1[g]);
    for (int l = 0; l < K2; ++l) cm.col(l) = weights->col_marginal.col(p2[l]);
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l)
        W.col(g * K2 + l) = weights->W.col(p1[g] * K2 + p2[l]);
    weights->W = W;
    weights->row_marginal = rm;
    weights->col_marginal = cm;
  }
}

namespace {

FitResult fit_mar(const PanelDataset& data, const Cache& cache, const FitConfig& config) {
  EmSettings em{config.max_iter, config.rel_tol,
                std::max(1e-12, config.sigma_floor_factor * cache.sd_y),
                config.mass_floor, false, {}};
  const int K1 = config.K1, K2 = config.K2;
  const int n = cache.n;

  // ---- margin 1: outcome mixture
  std::vector<MarginOutcome> m1(config.n_starts);
  parallel_for(config.n_starts, config.threads, [&](int s) {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(cache.p);
    Eigen::VectorXd zeta1 = quantile_locations(cache, K1);
    double sigma = std::max(cache.sd_y, 1e-8);
    Eigen::VectorXd prow = Eigen::VectorXd::Constant(K1, 1.0 / K1);
    if (s > 0) {
      Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(s));
      for (int g = 0; g < K1; ++g) zeta1[g] += sigma * rng.normal();
      prow = rng.dirichlet_ones(K1);
    }
    bool floored = false;
    MarginOutcome out = run_em_margin(
        data, K1, prow, em,
        [&]() { return logdens1(cache, beta, zeta1, sigma); },
        [&](const Eigen::MatrixXd& w) {
          m_step_longitudinal_cached(cache, w, &beta, &zeta1, &sigma, em.sigma_floor,
                                     &floored);
        });
    out.beta = beta;
    out.zeta1 = zeta1;
    out.sigma_y = sigma;
    out.sigma_floor_hit = floored;
    m1[s] = std::move(out);
  });

  // ---- margin 2: dropout mixture
  std::vector<MarginOutcome> m2(config.n_starts);
  parallel_for(config.n_starts, config.threads, [&](int s) {
    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(cache.q);
    Eigen::VectorXd zeta2 = hazard_locations(cache, K2);
    Eigen::VectorXd pcol = Eigen::VectorXd::Constant(K2, 1.0 / K2);
    if (s > 0) {
      Rng rng = Rng::stream(config.seed, 1000000ULL + static_cast<std::uint64_t>(s));
      for (int l = 0; l < K2; ++l) zeta2[l] += 2.0 * rng.normal();
      pcol = rng.dirichlet_ones(K2);
    }
    bool sep = false;
    MarginOutcome out = run_em_margin(
        data, K2, pcol, em, [&]() { return logdens2(cache, gamma, zeta2); },
        [&](const Eigen::MatrixXd& w) {
          m_step_dropout_cached(cache, w, &gamma, &zeta2, &sep);
        });
    out.gamma = gamma;
    out.zeta2 = zeta2;
    out.separation = sep;
    m2[s] = std::move(out);
  });

  auto pick = [](const std::vector<MarginOutcome>& outs) {
    int best = -1;
    for (int s = 0; s < static_cast<int>(outs.size()); ++s) {
      if (!outs[s].ok) continue;
      if (best < 0 || outs[s].loglik > outs[best].loglik) best = s;
    }
    return best;
  };
  const int b1 = pick(m1), b2 = pick(m2);
  if (b1 < 0 || b2 < 0) {
    std::string why;
    for (const auto& o : m1)
      if (!o.ok) why = o.error;
    for (const auto& o : m2)
      if (!o.ok) why = o.error;
    throw ConvergenceError("all EM starts failed: " + why);
  }
  const MarginOutcome& r1 = m1[b1];
  const MarginOutcome& r2 = m2[b2];

  FitResult fr;
  fr.mode = FitMode::MAR;
  fr.theta.beta = r1.beta;
  fr.theta.zeta1 = r1.zeta1;
  fr.theta.sigma_y = r1.sigma_y;
  fr.theta.gamma = r2.gamma;
  fr.theta.zeta2 = r2.zeta2;
  fr.theta.Pi = r1.masses * r2.masses.transpose();
  fr.loglik = r1.loglik + r2.loglik;
  fr.converged = r1.converged && r2.converged;
  fr.iterations = std::max(r1.iterations, r2.iterations);
  fr.start_index = b1;
  fr.n = n;

  fr.weights.K1 = K1;
  fr.weights.K2 = K2;
  fr.weights.row_marginal = r1.w;
  fr.weights.col_marginal = r2.w;
  fr.weights.W.resize(n, K1 * K2);
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l)
      fr.weights.W.col(g * K2 + l) = r1.w.col(g).cwiseProduct(r2.w.col(l));

  const std::size_t len = std::max(r1.trace.size(), r2.trace.size());
  fr.loglik_trace.resize(len);
  for (std::size_t k = 0; k < len; ++k) {
    const double a = r1.trace[std::min(k, r1.trace.size() - 1)];
    const double b = r2.trace[std::min(k, r2.trace.size() - 1)];
    fr.loglik_trace[k] = a + b;
  }
  FitDiagnostics& d = fr.diagnostics;
  d.start_index_dropout_margin = b2;
  for (const auto& outs : {std::cref(m1), std::cref(m2)})
    for (const auto& o : outs.get()) {
      if (!o.ok) {
        ++d.n_starts_failed;
        continue;
      }
      d.sigma_floor_hit |= o.sigma_floor_hit;
      d.mass_floor_hit |= o.mass_floor_hit;
      d.separation_flag |= o.separation;
      d.min_step_delta = std::min(d.min_step_delta, o.min_step_delta);
    }
  for (int s = 0; s < config.n_starts; ++s)
    if (m1[s].ok && m1[s].converged && m2[s].ok && m2[s].converged)
      ++d.n_starts_converged;

  fr.n_params = n_free_params(FitMode::MAR, false, cache.p, cache.q, K1, K2);
  fr.aic = -2.0 * fr.loglik + 2.0 * fr.n_params;
  fr.bic = -2.0 * fr.loglik + fr.n_params * std::log(static_cast<double>(n));
  canonicalize(&fr.theta, &fr.weights);
  return fr;
}

}  // namespace

FitResult fit(const PanelDataset& data, const FitConfig& config) {
  data.validate();
  config.validate();
  const Cache cache = build_cache(data);

  // Structural identifiability check: with uniform weights the stacked outcome
  // design must be full-rank, otherwise every M-step would be singular.
  {
    Eigen::VectorXd b(cache.p), z(config.K1);
    double s;
    m_step_longitudinal_cached(cache,
                               Eigen::MatrixXd::Constant(cache.n, config.K1, 1.0 / config.K1),
                               &b, &z, &s, 0.0, nullptr);
  }

  if (config.mode == FitMode::MAR) return fit_mar(data, cache, config);

  EmSettings em{config.max_iter, config.rel_tol,
                std::max(1e-12, config.sigma_floor_factor * cache.sd_y),
                config.mass_floor, config.freeze_lambda, config.lambda_fixed};

  // The factorized solution seeds one extra start, which guarantees the
  // nested-model inequality loglik(MNAR) >= loglik(MAR) by EM monotonicity.
  FitConfig mar_cfg = config;
  mar_cfg.mode = FitMode::MAR;
  mar_cfg.freeze_lambda = false;
  mar_cfg.lambda_fixed.resize(0, 0);
  FitResult mar_fit = fit_mar(data, cache, mar_cfg);

  // Pin a start's mass matrix to the frozen interaction block, keeping its
  // margins (used for the MAR-seeded start and any caller-supplied starts).
  auto apply_frozen_lambda = [&](Theta* t) {
    if (!(config.freeze_lambda && config.K1 > 1 && config.K2 > 1)) return;
    const Eigen::VectorXd prow = t->Pi.rowwise().sum();
    const Eigen::VectorXd pcol = t->Pi.colwise().sum();
    Eigen::MatrixXd xi = Eigen::MatrixXd::Zero(config.K1, config.K2);
    for (int g = 0; g < config.K1; ++g)
      for (int l = 0; l < config.K2; ++l) {
        if (g < config.K1 - 1) xi(g, l) += std::log(prow[g] / prow[config.K1 - 1]);
        if (l < config.K2 - 1) xi(g, l) += std::log(pcol[l] / pcol[config.K2 - 1]);
        if (g < config.K1 - 1 && l < config.K2 - 1) xi(g, l) += config.lambda_fixed(g, l);
      }
    t->Pi = xi_to_masses(xi);
  };
  for (const Theta& t : config.extra_start_thetas)
    if (t.p() != cache.p || t.q() != cache.q)
      throw ModelError("fit config: extra start theta has the wrong (p, q) shape");

  const int total_starts =
      config.n_starts + 1 + static_cast<int>(config.extra_start_thetas.size());
  std::vector<StartOutcome> outs(total_starts);
  parallel_for(total_starts, config.threads, [&](int s) {
    Theta t0;
    if (s > config.n_starts) {
      t0 = config.extra_start_thetas[s - config.n_starts - 1];
      apply_frozen_lambda(&t0);
    } else if (s == config.n_starts) {
      t0 = mar_fit.theta;
      apply_frozen_lambda(&t0);
    } else {
      t0 = make_start(cache, config, s);
    }
    outs[s] = run_em_joint(cache, data, std::move(t0), em);
  });

  int best = -1;
  for (int s = 0; s < total_starts; ++s) {
    if (!outs[s].ok) continue;
    if (best < 0 || outs[s].loglik > outs[best].loglik) best = s;
  }
  if (best < 0) throw ConvergenceError("all EM starts failed: " + outs[0].error);

  FitResult fr;
  fr.mode = FitMode::MNAR;
  fr.theta = outs[best].theta;
  fr.loglik = outs[best].loglik;
  fr.converged = outs[best].converged;
  fr.iterations = outs[best].iterations;
  fr.start_index = best;
  fr.n = cache.n;
  fr.weights = outs[best].weights;
  fr.loglik_trace = outs[best].trace;
  for (const auto& o : outs) {
    if (!o.ok) {
      ++fr.diagnostics.n_starts_failed;
      continue;
    }
    fr.diagnostics.n_starts_converged += o.converged ? 1 : 0;
    fr.diagnostics.sigma_floor_hit |= o.sigma_floor_hit;
    fr.diagnostics.mass_floor_hit |= o.mass_floor_hit;
    fr.diagnostics.separation_flag |= o.separation;
    fr.diagnostics.min_step_delta = std::min(fr.diagnostics.min_step_delta, o.min_step_delta);
  }
  fr.n_params = n_free_params(FitMode::MNAR, config.freeze_lambda, cache.p, cache.q,
                              config.K1, config.K2);
  fr.aic = -2.0 * fr.loglik + 2.0 * fr.n_params;
  fr.bic = -2.0 * fr.loglik + fr.n_params * std::log(static_cast<double>(cache.n));
  canonicalize(&fr.theta, &fr.weights);
  return fr;
}

}  // namespace bidmix
