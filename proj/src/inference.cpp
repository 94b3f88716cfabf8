#include "bidmix/inference.hpp"

#include <cmath>
#include <limits>

#include "bidmix/errors.hpp"
#include "bidmix/util.hpp"

namespace bidmix {

namespace {

// Posterior cell probabilities computed without the canonical-ordering check
// of e_step: derivative evaluation is meaningful at any parameter point, and
// the outcome-refit path must differentiate through momentarily tied or
// crossed locations.
PosteriorWeights posterior_cells(const PanelDataset& data, const Theta& theta) {
  const int K1 = theta.K1(), K2 = theta.K2(), K = K1 * K2;
  const Eigen::MatrixXd lf1 =
      longitudinal_logdens(data, theta.beta, theta.zeta1, theta.sigma_y);
  const Eigen::MatrixXd lf2 = dropout_logdens(data, theta.gamma, theta.zeta2);
  Eigen::MatrixXd logpi(K1, K2);
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l)
      logpi(g, l) = theta.Pi(g, l) > 0.0
                        ? std::log(theta.Pi(g, l))
                        : -std::numeric_limits<double>::infinity();
  PosteriorWeights W;
  W.K1 = K1;
  W.K2 = K2;
  W.W.resize(data.n(), K);
  W.row_marginal = Eigen::MatrixXd::Zero(data.n(), K1);
  W.col_marginal = Eigen::MatrixXd::Zero(data.n(), K2);
  std::vector<double> buf(K);
  for (int i = 0; i < data.n(); ++i) {
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) buf[g * K2 + l] = lf1(i, g) + lf2(i, l) + logpi(g, l);
    const double tot = logsumexp(buf.data(), K);
    if (!std::isfinite(tot))
      throw ConvergenceError("subject " + data.subjects[i].id +
                             ": density underflow in every group");
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        const double w = std::exp(buf[g * K2 + l] - tot);
        W.W(i, g * K2 + l) = w;
        W.row_marginal(i, g) += w;
        W.col_marginal(i, l) += w;
      }
  }
  return W;
}

// Replace the mass matrix by the product of its margins so that a RankOne
// layout differentiates the point it can actually represent.
Theta representable_point(const Theta& theta, const FreeParamLayout& layout) {
  if (layout.mass == MassParam::FullLogits) return theta;
  Theta t = theta;
  const Eigen::VectorXd prow = theta.Pi.rowwise().sum();
  const Eigen::VectorXd pcol = theta.Pi.colwise().sum();
  t.Pi = prow * pcol.transpose();
  return t;
}

// Per-subject ingredients for scores and information, one group at a time.
struct SubjectWork {
  // outcome side, per g
  Eigen::MatrixXd s_beta;   // K1 x p
  Eigen::VectorXd s_zeta1;  // K1
  Eigen::VectorXd s_u;      // K1 (u = log sigma)
  // dropout side, per l
  Eigen::MatrixXd s_gamma;  // K2 x q
  Eigen::VectorXd s_zeta2;  // K2
  // dropout curvature pieces, per l
  std::vector<Eigen::MatrixXd> h_gg;  // q x q
  Eigen::MatrixXd h_gz;               // K2 x q
  Eigen::VectorXd h_zz;               // K2
};

SubjectWork subject_work(const SubjectRecord& s, const Theta& theta) {
  const int K1 = theta.K1(), K2 = theta.K2();
  const int p = theta.p(), q = theta.q();
  const double inv_s2 = 1.0 / (theta.sigma_y * theta.sigma_y);

  SubjectWork w;
  w.s_beta.resize(K1, p);
  w.s_zeta1.resize(K1);
  w.s_u.resize(K1);
  const Eigen::VectorXd fixed = s.X * theta.beta;
  for (int g = 0; g < K1; ++g) {
    Eigen::VectorXd resid = s.y - fixed;
    resid.array() -= theta.zeta1[g];
    if (p > 0) w.s_beta.row(g) = (s.X.transpose() * resid).transpose() * inv_s2;
    w.s_zeta1[g] = resid.sum() * inv_s2;
    w.s_u[g] = resid.squaredNorm() * inv_s2 - s.T_i;
  }

  w.s_gamma.resize(K2, q);
  w.s_zeta2.resize(K2);
  w.h_gg.assign(K2, Eigen::MatrixXd::Zero(q, q));
  w.h_gz = Eigen::MatrixXd::Zero(K2, q);
  w.h_zz = Eigen::VectorXd::Zero(K2);
  const Eigen::VectorXd vbase =
      q > 0 ? (s.V * theta.gamma).eval() : Eigen::VectorXd::Zero(s.risk_rows());
  for (int l = 0; l < K2; ++l) {
    Eigen::VectorXd sg = Eigen::VectorXd::Zero(q);
    double sz = 0.0;
    for (int t = 0; t < s.risk_rows(); ++t) {
      const double phi = logistic(vbase[t] + theta.zeta2[l]);
      const double e = s.r[t] - phi;
      const double a = phi * (1.0 - phi);
      sz += e;
      w.h_zz[l] += a;
      if (q > 0) {
        sg += e * s.V.row(t).transpose();
        w.h_gz.row(l) += a * s.V.row(t);
        w.h_gg[l] += a * s.V.row(t).transpose() * s.V.row(t);
      }
    }
    if (q > 0) w.s_gamma.row(l) = sg.transpose();
    w.s_zeta2[l] = sz;
  }
  return w;
}

// Dense (K1*K2) x D matrix of complete-data scores, one row per group cell.
Eigen::MatrixXd cell_scores(const SubjectWork& w, const Theta& theta,
                            const FreeParamLayout& layout) {
  const int K1 = layout.K1, K2 = layout.K2, p = layout.p, q = layout.q;
  const int D = layout.dim();
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(K1 * K2, D);
  const Eigen::VectorXd prow = theta.Pi.rowwise().sum();
  const Eigen::VectorXd pcol = theta.Pi.colwise().sum();

  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l) {
      const int c = g * K2 + l;
      if (p > 0) S.block(c, layout.beta_offset(), 1, p) = w.s_beta.row(g);
      S(c, layout.zeta1_offset() + g) = w.s_zeta1[g];
      S(c, layout.logsigma_offset()) = w.s_u[g];
      if (q > 0) S.block(c, layout.gamma_offset(), 1, q) = w.s_gamma.row(l);
      S(c, layout.zeta2_offset() + l) = w.s_zeta2[l];
      if (layout.mass == MassParam::FullLogits) {
        // xi coordinates: indicator of the own cell minus the cell masses.
        int k = 0;
        for (int g2 = 0; g2 < K1; ++g2)
          for (int l2 = 0; l2 < K2; ++l2) {
            if (g2 == K1 - 1 && l2 == K2 - 1) continue;
            double v = -theta.Pi(g2, l2);
            if (g2 == g && l2 == l) v += 1.0;
            S(c, layout.mass_offset() + k) = v;
            ++k;
          }
      } else {
        for (int g2 = 0; g2 < K1 - 1; ++g2)
          S(c, layout.mass_offset() + g2) = ((g2 == g) ? 1.0 : 0.0) - prow[g2];
        for (int l2 = 0; l2 < K2 - 1; ++l2)
          S(c, layout.mass_offset() + K1 - 1 + l2) = ((l2 == l) ? 1.0 : 0.0) - pcol[l2];
      }
    }
  return S;
}

}  // namespace

Eigen::MatrixXd subject_scores(const PanelDataset& data, const Theta& theta_in,
                               const FreeParamLayout& layout) {
  if (theta_in.p() != layout.p || theta_in.q() != layout.q ||
      theta_in.K1() != layout.K1 || theta_in.K2() != layout.K2)
    throw ModelError("subject_scores: layout does not match theta");
  const Theta theta = representable_point(theta_in, layout);
  const PosteriorWeights W = posterior_cells(data, theta);
  const int D = layout.dim();
  Eigen::MatrixXd out(data.n(), D);
  for (int i = 0; i < data.n(); ++i) {
    const SubjectWork w = subject_work(data.subjects[i], theta);
    const Eigen::MatrixXd S = cell_scores(w, theta, layout);
    out.row(i) = W.W.row(i) * S;
  }
  return out;
}

Eigen::MatrixXd observed_information(const PanelDataset& data, const Theta& theta_in,
                                     const FreeParamLayout& layout) {
  if (theta_in.p() != layout.p || theta_in.q() != layout.q ||
      theta_in.K1() != layout.K1 || theta_in.K2() != layout.K2)
    throw ModelError("observed_information: layout does not match theta");
  const Theta theta = representable_point(theta_in, layout);
  const PosteriorWeights W = posterior_cells(data, theta);
  const int K1 = layout.K1, K2 = layout.K2, p = layout.p, q = layout.q;
  const int D = layout.dim();
  const double inv_s2 = 1.0 / (theta.sigma_y * theta.sigma_y);

  Eigen::MatrixXd I = Eigen::MatrixXd::Zero(D, D);
  const int ob = layout.beta_offset(), oz1 = layout.zeta1_offset();
  const int ou = layout.logsigma_offset(), og = layout.gamma_offset();
  const int oz2 = layout.zeta2_offset(), om = layout.mass_offset();

  for (int i = 0; i < data.n(); ++i) {
    const SubjectRecord& s = data.subjects[i];
    const SubjectWork w = subject_work(s, theta);

    // ---- complete-data information, averaged over the posterior.
    if (p > 0) {
      const Eigen::MatrixXd xx = s.X.transpose() * s.X * inv_s2;
      I.block(ob, ob, p, p) += xx;
      const Eigen::VectorXd sx = s.X.colwise().sum().transpose() * inv_s2;
      for (int g = 0; g < K1; ++g) {
        const double wg = W.row_marginal(i, g);
        I.block(ob, oz1 + g, p, 1) += wg * sx;
        I.block(oz1 + g, ob, 1, p) += wg * sx.transpose();
      }
    }
    for (int g = 0; g < K1; ++g) {
      const double wg = W.row_marginal(i, g);
      I(oz1 + g, oz1 + g) += wg * s.T_i * inv_s2;
      if (p > 0) {
        const Eigen::VectorXd bu = 2.0 * wg * w.s_beta.row(g).transpose();
        I.block(ob, ou, p, 1) += bu;
        I.block(ou, ob, 1, p) += bu.transpose();
      }
      I(oz1 + g, ou) += 2.0 * wg * w.s_zeta1[g];
      I(ou, oz1 + g) += 2.0 * wg * w.s_zeta1[g];
      I(ou, ou) += 2.0 * wg * (w.s_u[g] + s.T_i);
    }
    for (int l = 0; l < K2; ++l) {
      const double wl = W.col_marginal(i, l);
      if (q > 0) {
        I.block(og, og, q, q) += wl * w.h_gg[l];
        I.block(og, oz2 + l, q, 1) += wl * w.h_gz.row(l).transpose();
        I.block(oz2 + l, og, 1, q) += wl * w.h_gz.row(l);
      }
      I(oz2 + l, oz2 + l) += wl * w.h_zz[l];
    }

    // ---- minus the posterior covariance of the complete-data scores.
    const Eigen::MatrixXd S = cell_scores(w, theta, layout);
    const Eigen::VectorXd wrow = W.W.row(i).transpose();
    const Eigen::VectorXd mean = S.transpose() * wrow;
    I -= S.transpose() * wrow.asDiagonal() * S;
    I += mean * mean.transpose();
  }

  // Mass-block complete-data information (identical for every subject).
  const double n = data.n();
  if (layout.mass == MassParam::FullLogits) {
    Eigen::VectorXd pf(K1 * K2 - 1);
    int k = 0;
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        if (g == K1 - 1 && l == K2 - 1) continue;
        pf[k++] = theta.Pi(g, l);
      }
    I.block(om, om, pf.size(), pf.size()) +=
        n * (Eigen::MatrixXd(pf.asDiagonal()) - pf * pf.transpose());
  } else {
    const Eigen::VectorXd prow = theta.Pi.rowwise().sum();
    const Eigen::VectorXd pcol = theta.Pi.colwise().sum();
    const Eigen::VectorXd pr = prow.head(K1 - 1);
    const Eigen::VectorXd pc = pcol.head(K2 - 1);
    I.block(om, om, K1 - 1, K1 - 1) +=
        n * (Eigen::MatrixXd(pr.asDiagonal()) - pr * pr.transpose());
    I.block(om + K1 - 1, om + K1 - 1, K2 - 1, K2 - 1) +=
        n * (Eigen::MatrixXd(pc.asDiagonal()) - pc * pc.transpose());
  }

  return 0.5 * (I + I.transpose());
}

CovarianceEstimate sandwich_covariance(const PanelDataset& data, const FitResult& fit) {
  CovarianceEstimate cov;
  cov.layout = FreeParamLayout::for_theta(
      fit.theta, fit.mode == FitMode::MAR ? MassParam::RankOne : MassParam::FullLogits);
  cov.param_names = cov.layout.names(data.x_names, data.v_names);
  cov.info_observed = observed_information(data, fit.theta, cov.layout);
  const Eigen::MatrixXd S = subject_scores(data, fit.theta, cov.layout);
  cov.score_outer = S.transpose() * S;

  const int D = cov.layout.dim();
  Eigen::MatrixXd Io_inv;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cov.info_observed);
  bool ok = ldlt.info() == Eigen::Success && ldlt.isPositive();
  if (ok) {
    Io_inv = ldlt.solve(Eigen::MatrixXd::Identity(D, D));
    ok = Io_inv.allFinite();
  }
  if (!ok) {
    // Spectral pseudo-inverse for singular / indefinite information.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov.info_observed);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(D);
    for (int j = 0; j < D; ++j)
      if (std::abs(ev[j]) > tol) inv[j] = 1.0 / ev[j];
    Io_inv = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    cov.used_pseudo_inverse = true;
    cov.warnings.push_back(
        "observed information is singular or indefinite; SEs use a spectral "
        "pseudo-inverse and may be unreliable");
  }
  cov.sandwich = Io_inv * cov.score_outer * Io_inv;
  cov.sandwich = 0.5 * (cov.sandwich + cov.sandwich.transpose()).eval();
  for (int j = 0; j < D; ++j)
    if (cov.sandwich(j, j) < 0.0) {
      cov.warnings.push_back("sandwich covariance has a negative diagonal entry");
      break;
    }
  return cov;
}

MomentSummaries moment_summaries(const Theta& theta, const CovarianceEstimate& cov) {
  const FreeParamLayout& L = cov.layout;
  const int K1 = L.K1, K2 = L.K2, D = L.dim();
  const Eigen::VectorXd prow = theta.Pi.rowwise().sum();
  const Eigen::VectorXd pcol = theta.Pi.colwise().sum();

  MomentSummaries out;
  out.moments = mixing_moments(theta);
  const MixingMoments& m = out.moments;
  out.sigma_y = theta.sigma_y;

  // d(Pi)/d(mass coordinate), one K1 x K2 table per coordinate.
  std::vector<Eigen::MatrixXd> dPi(L.mass_dim());
  if (L.mass == MassParam::FullLogits) {
    int k = 0;
    for (int ga = 0; ga < K1; ++ga)
      for (int la = 0; la < K2; ++la) {
        if (ga == K1 - 1 && la == K2 - 1) continue;
        Eigen::MatrixXd d = -theta.Pi(ga, la) * theta.Pi;
        d(ga, la) += theta.Pi(ga, la);
        dPi[k++] = d;
      }
  } else {
    for (int ga = 0; ga < K1 - 1; ++ga) {
      Eigen::MatrixXd d(K1, K2);
      for (int g = 0; g < K1; ++g) {
        const double dr = prow[g] * (((g == ga) ? 1.0 : 0.0) - prow[ga]);
        for (int l = 0; l < K2; ++l) d(g, l) = dr * pcol[l];
      }
      dPi[ga] = d;
    }
    for (int la = 0; la < K2 - 1; ++la) {
      Eigen::MatrixXd d(K1, K2);
      for (int l = 0; l < K2; ++l) {
        const double dc = pcol[l] * (((l == la) ? 1.0 : 0.0) - pcol[la]);
        for (int g = 0; g < K1; ++g) d(g, l) = prow[g] * dc;
      }
      dPi[K1 - 1 + la] = d;
    }
  }

  // Gradient rows for each summary in the free coordinates.
  Eigen::VectorXd g_mean1 = Eigen::VectorXd::Zero(D), g_mean2 = Eigen::VectorXd::Zero(D);
  Eigen::VectorXd g_v1 = Eigen::VectorXd::Zero(D), g_v2 = Eigen::VectorXd::Zero(D);
  Eigen::VectorXd g_cov = Eigen::VectorXd::Zero(D);

  for (int g = 0; g < K1; ++g) {
    const int j = L.zeta1_offset() + g;
    g_mean1[j] = prow[g];
    g_v1[j] = 2.0 * prow[g] * (theta.zeta1[g] - m.mean1);
    double acc = 0.0;
    for (int l = 0; l < K2; ++l) acc += theta.Pi(g, l) * (theta.zeta2[l] - m.mean2);
    g_cov[j] = acc;
  }
  for (int l = 0; l < K2; ++l) {
    const int j = L.zeta2_offset() + l;
    g_mean2[j] = pcol[l];
    g_v2[j] = 2.0 * pcol[l] * (theta.zeta2[l] - m.mean2);
    double acc = 0.0;
    for (int g = 0; g < K1; ++g) acc += theta.Pi(g, l) * (theta.zeta1[g] - m.mean1);
    g_cov[j] = acc;
  }
  for (int k = 0; k < L.mass_dim(); ++k) {
    const int j = L.mass_offset() + k;
    double dm1 = 0, dm2 = 0, dv1 = 0, dv2 = 0, dc = 0;
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        const double d = dPi[k](g, l);
        const double z1 = theta.zeta1[g] - m.mean1;
        const double z2 = theta.zeta2[l] - m.mean2;
        dm1 += d * theta.zeta1[g];
        dm2 += d * theta.zeta2[l];
        dv1 += d * z1 * z1;
        dv2 += d * z2 * z2;
        dc += d * z1 * z2;
      }
    g_mean1[j] = dm1;
    g_mean2[j] = dm2;
    g_v1[j] = dv1;
    g_v2[j] = dv2;
    g_cov[j] = dc;
  }

  auto quad_se = [&](const Eigen::VectorXd& grad) {
    return std::sqrt(std::max(0.0, grad.dot(cov.sandwich * grad)));
  };
  out.se_mean1 = quad_se(g_mean1);
  out.se_mean2 = quad_se(g_mean2);
  out.se_cov12 = quad_se(g_cov);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd g_sd1, g_sd2;
  if (m.sd1 > 0.0) {
    g_sd1 = g_v1 / (2.0 * m.sd1);
    out.se_sd1 = quad_se(g_sd1);
  } else {
    out.se_sd1 = nan;
  }
  if (m.sd2 > 0.0) {
    g_sd2 = g_v2 / (2.0 * m.sd2);
    out.se_sd2 = quad_se(g_sd2);
  } else {
    out.se_sd2 = nan;
  }
  if (m.sd1 > 0.0 && m.sd2 > 0.0) {
    const Eigen::VectorXd g_rho = g_cov / (m.sd1 * m.sd2) -
                                  (m.rho12 / m.sd1) * g_sd1 -
                                  (m.rho12 / m.sd2) * g_sd2;
    out.se_rho12 = quad_se(g_rho);
  } else {
    out.se_rho12 = nan;
  }

  // sigma_y on the natural scale: d(sigma)/d(log sigma) = sigma.
  out.se_sigma_y = theta.sigma_y * cov.se(L.logsigma_offset());
  return out;
}

}  // namespace bidmix
