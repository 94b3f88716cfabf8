#include "bidmix/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "bidmix/errors.hpp"
#include "bidmix/rng.hpp"
#include "bidmix/util.hpp"

namespace bidmix {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

Eigen::VectorXd json_to_vec(const nlohmann::json& j) {
  Eigen::VectorXd v(j.size());
  int i = 0;
  for (const auto& x : j) v[i++] = x.get<double>();
  return v;
}

nlohmann::json vec_to_json(const Eigen::VectorXd& v) {
  nlohmann::json j = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) j.push_back(v[i]);
  return j;
}
}  // namespace

void Theta::validate() const {
  if (K1() < 1 || K2() < 1) throw ModelError("theta: need at least one group per margin");
  if (!(sigma_y > 0.0)) throw ModelError("theta: sigma_y must be positive");
  if (Pi.rows() != K1() || Pi.cols() != K2())
    throw ModelError("theta: Pi must be K1 x K2");
  if (!beta.allFinite() || !zeta1.allFinite() || !gamma.allFinite() ||
      !zeta2.allFinite() || !Pi.allFinite() || !std::isfinite(sigma_y))
    throw ModelError("theta: non-finite parameter");
  for (int g = 1; g < K1(); ++g)
    if (zeta1[g] < zeta1[g - 1]) throw ModelError("theta: zeta1 must be ascending");
  for (int l = 1; l < K2(); ++l)
    if (zeta2[l] < zeta2[l - 1]) throw ModelError("theta: zeta2 must be ascending");
  if ((Pi.array() < 0.0).any()) throw ModelError("theta: Pi entries must be >= 0");
  if (std::abs(Pi.sum() - 1.0) > 1e-12)
    throw ModelError("theta: Pi must sum to 1 (|sum - 1| <= 1e-12)");
}

nlohmann::json Theta::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["beta"] = vec_to_json(beta);
  j["zeta1"] = vec_to_json(zeta1);
  j["sigma_y"] = sigma_y;
  j["gamma"] = vec_to_json(gamma);
  j["zeta2"] = vec_to_json(zeta2);
  nlohmann::json rows = nlohmann::json::array();
  for (int g = 0; g < K1(); ++g) rows.push_back(vec_to_json(Pi.row(g)));
  j["Pi"] = rows;
  return j;
}

Theta Theta::from_json(const nlohmann::json& j) {
  Theta t;
  t.beta = json_to_vec(j.at("beta"));
  t.zeta1 = json_to_vec(j.at("zeta1"));
  t.sigma_y = j.at("sigma_y").get<double>();
  t.gamma = json_to_vec(j.at("gamma"));
  t.zeta2 = json_to_vec(j.at("zeta2"));
  const auto& rows = j.at("Pi");
  t.Pi.resize(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (int g = 0; g < t.Pi.rows(); ++g) t.Pi.row(g) = json_to_vec(rows[g]);
  t.validate();
  return t;
}

Eigen::MatrixXd MassLogits::xi() const {
  const int k1 = K1(), k2 = K2();
  Eigen::MatrixXd x(k1, k2);
  for (int g = 0; g < k1; ++g)
    for (int l = 0; l < k2; ++l) {
      double v = 0.0;
      if (g < k1 - 1) v += alpha_row[g];
      if (l < k2 - 1) v += alpha_col[l];
      if (g < k1 - 1 && l < k2 - 1) v += lambda(g, l);
      x(g, l) = v;
    }
  return x;
}

MassLogits masses_to_logits(const Eigen::MatrixXd& Pi) {
  const int k1 = static_cast<int>(Pi.rows()), k2 = static_cast<int>(Pi.cols());
  if (k1 < 1 || k2 < 1) throw ModelError("masses_to_logits: empty matrix");
  if ((Pi.array() <= 0.0).any())
    throw ModelError("masses_to_logits: requires strictly positive masses");
  const double ref = Pi(k1 - 1, k2 - 1);
  Eigen::MatrixXd xi = (Pi.array() / ref).log().matrix();
  MassLogits out;
  out.alpha_row.resize(k1 - 1);
  out.alpha_col.resize(k2 - 1);
  out.lambda.resize(std::max(k1 - 1, 0), std::max(k2 - 1, 0));
  for (int g = 0; g < k1 - 1; ++g) out.alpha_row[g] = xi(g, k2 - 1);
  for (int l = 0; l < k2 - 1; ++l) out.alpha_col[l] = xi(k1 - 1, l);
  for (int g = 0; g < k1 - 1; ++g)
    for (int l = 0; l < k2 - 1; ++l)
      out.lambda(g, l) = xi(g, l) - out.alpha_row[g] - out.alpha_col[l];
  return out;
}

Eigen::MatrixXd xi_to_masses(const Eigen::MatrixXd& xi) {
  const double m = xi.maxCoeff();
  Eigen::MatrixXd P = (xi.array() - m).exp().matrix();
  return P / P.sum();
}

Eigen::MatrixXd logits_to_masses(const MassLogits& logits) {
  return xi_to_masses(logits.xi());
}

double loglik_longitudinal_component(const SubjectRecord& s, const Eigen::VectorXd& beta,
                                     double zeta1g, double sigma_y) {
  if (!(sigma_y > 0.0)) throw ModelError("sigma_y must be positive");
  Eigen::VectorXd resid = s.y - s.X * beta;
  resid.array() -= zeta1g;
  const double T_i = static_cast<double>(s.T_i);
  return -0.5 * T_i * (kLog2Pi + 2.0 * std::log(sigma_y)) -
         0.5 * resid.squaredNorm() / (sigma_y * sigma_y);
}

double loglik_dropout_component(const SubjectRecord& s, const Eigen::VectorXd& gamma,
                                double zeta2l) {
  Eigen::VectorXd eta = s.V * gamma;
  eta.array() += zeta2l;
  double ll = 0.0;
  for (int t = 0; t < s.risk_rows(); ++t)
    ll += s.r[t] * eta[t] - log1pexp(eta[t]);
  return ll;
}

Eigen::MatrixXd longitudinal_logdens(const PanelDataset& data, const Eigen::VectorXd& beta,
                                     const Eigen::VectorXd& zeta1, double sigma_y) {
  Eigen::MatrixXd out(data.n(), zeta1.size());
  for (int i = 0; i < data.n(); ++i)
    for (int g = 0; g < zeta1.size(); ++g)
      out(i, g) = loglik_longitudinal_component(data.subjects[i], beta, zeta1[g], sigma_y);
  return out;
}

Eigen::MatrixXd dropout_logdens(const PanelDataset& data, const Eigen::VectorXd& gamma,
                                const Eigen::VectorXd& zeta2) {
  Eigen::MatrixXd out(data.n(), zeta2.size());
  for (int i = 0; i < data.n(); ++i)
    for (int l = 0; l < zeta2.size(); ++l)
      out(i, l) = loglik_dropout_component(data.subjects[i], gamma, zeta2[l]);
  return out;
}

double subject_loglik(const SubjectRecord& s, const Theta& theta) {
  const int K1 = theta.K1(), K2 = theta.K2();
  Eigen::VectorXd cell(K1 * K2);
  for (int g = 0; g < K1; ++g) {
    const double lf1 = loglik_longitudinal_component(s, theta.beta, theta.zeta1[g], theta.sigma_y);
    for (int l = 0; l < K2; ++l) {
      const double pi = theta.Pi(g, l);
      cell[g * K2 + l] =
          pi > 0.0 ? lf1 + loglik_dropout_component(s, theta.gamma, theta.zeta2[l]) + std::log(pi)
                   : -std::numeric_limits<double>::infinity();
    }
  }
  const double ll = logsumexp(cell);
  if (!std::isfinite(ll))
    throw ConvergenceError("mixture density underflowed to zero for subject '" + s.id + "'");
  return ll;
}

double observed_loglik(const PanelDataset& data, const Theta& theta) {
  const int K1 = theta.K1(), K2 = theta.K2();
  const Eigen::MatrixXd lf1 = longitudinal_logdens(data, theta.beta, theta.zeta1, theta.sigma_y);
  const Eigen::MatrixXd lf2 = dropout_logdens(data, theta.gamma, theta.zeta2);
  Eigen::VectorXd logpi(K1 * K2);
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l)
      logpi[g * K2 + l] = theta.Pi(g, l) > 0.0
                              ? std::log(theta.Pi(g, l))
                              : -std::numeric_limits<double>::infinity();
  double total = 0.0;
  Eigen::VectorXd cell(K1 * K2);
  for (int i = 0; i < data.n(); ++i) {
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l)
        cell[g * K2 + l] = lf1(i, g) + lf2(i, l) + logpi[g * K2 + l];
    const double ll = logsumexp(cell);
    if (!std::isfinite(ll))
      throw ConvergenceError("mixture density underflowed to zero for subject '" +
                             data.subjects[i].id + "'");
    total += ll;
  }
  return total;
}

MixingMoments mixing_moments(const Theta& theta) {
  const int K1 = theta.K1(), K2 = theta.K2();
  const Eigen::VectorXd prow = theta.Pi.rowwise().sum();
  const Eigen::VectorXd pcol = theta.Pi.colwise().sum();
  MixingMoments m;
  m.mean1 = prow.dot(theta.zeta1);
  m.mean2 = pcol.dot(theta.zeta2);
  double v1 = 0.0, v2 = 0.0;
  for (int g = 0; g < K1; ++g) v1 += prow[g] * (theta.zeta1[g] - m.mean1) * (theta.zeta1[g] - m.mean1);
  for (int l = 0; l < K2; ++l) v2 += pcol[l] * (theta.zeta2[l] - m.mean2) * (theta.zeta2[l] - m.mean2);
  m.sd1 = std::sqrt(std::max(v1, 0.0));
  m.sd2 = std::sqrt(std::max(v2, 0.0));
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l)
      m.cov12 += theta.Pi(g, l) * (theta.zeta1[g] - m.mean1) * (theta.zeta2[l] - m.mean2);
  m.rho12 = (m.sd1 > 0.0 && m.sd2 > 0.0) ? m.cov12 / (m.sd1 * m.sd2) : 0.0;
  return m;
}

namespace {

// One KL-divergence EM pass for the shared-profile decomposition; returns the
// KL value at the updated factors.
double shared_profile_em_pass(const Eigen::MatrixXd& Pi, Eigen::VectorXd& tau,
                              Eigen::MatrixXd& A, Eigen::MatrixXd& B) {
  const int K1 = static_cast<int>(Pi.rows()), K2 = static_cast<int>(Pi.cols());
  const int M = static_cast<int>(tau.size());
  const double tiny = 1e-300;

  Eigen::VectorXd new_tau = Eigen::VectorXd::Zero(M);
  Eigen::MatrixXd new_A = Eigen::MatrixXd::Zero(K1, M);
  Eigen::MatrixXd new_B = Eigen::MatrixXd::Zero(K2, M);
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l) {
      if (Pi(g, l) <= 0.0) continue;
      double q = tiny;
      for (int h = 0; h < M; ++h) q += tau[h] * A(g, h) * B(l, h);
      for (int h = 0; h < M; ++h) {
        const double resp = Pi(g, l) * tau[h] * A(g, h) * B(l, h) / q;
        new_tau[h] += resp;
        new_A(g, h) += resp;
        new_B(l, h) += resp;
      }
    }
  for (int h = 0; h < M; ++h) {
    if (new_tau[h] > 0.0) {
      new_A.col(h) /= new_tau[h];
      new_B.col(h) /= new_tau[h];
    } else {
      new_A.col(h).setConstant(1.0 / K1);
      new_B.col(h).setConstant(1.0 / K2);
    }
  }
  const double total = new_tau.sum();
  if (total > 0.0) new_tau /= total;
  tau = new_tau;
  A = new_A;
  B = new_B;

  double kl = 0.0;
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l) {
      if (Pi(g, l) <= 0.0) continue;
      double q = tiny;
      for (int h = 0; h < M; ++h) q += tau[h] * A(g, h) * B(l, h);
      kl += Pi(g, l) * (std::log(Pi(g, l)) - std::log(q));
    }
  return kl;
}

}  // namespace

SharedProfileFit dunson_decomposition_check(const Eigen::MatrixXd& Pi, int M,
                                            int n_starts, int max_iter) {
  const int K1 = static_cast<int>(Pi.rows()), K2 = static_cast<int>(Pi.cols());
  if (M < 1) throw ModelError("shared-profile check: M must be >= 1");
  if (K1 < 1 || K2 < 1) throw ModelError("shared-profile check: empty mass matrix");
  if (std::abs(Pi.sum() - 1.0) > 1e-10 || (Pi.array() < 0.0).any())
    throw ModelError("shared-profile check: Pi must be a probability table");

  SharedProfileFit best;
  double best_kl = std::numeric_limits<double>::infinity();
  Rng rng(0x5eedULL);

  auto run = [&](Eigen::VectorXd tau, Eigen::MatrixXd A, Eigen::MatrixXd B) {
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
      double kl = shared_profile_em_pass(Pi, tau, A, B);
      if (std::isfinite(prev) && std::abs(prev - kl) < 1e-15) break;
      prev = kl;
    }
    if (prev < best_kl) {
      best_kl = prev;
      best.tau = tau;
      best.row_profiles = A;
      best.col_profiles = B;
    }
  };

  // Exact construction when M can index the smaller margin: one profile per
  // row (or column) reproduces Pi with zero residual, so seed it directly.
  if (M >= std::min(K1, K2)) {
    Eigen::VectorXd tau = Eigen::VectorXd::Zero(M);
    Eigen::MatrixXd A = Eigen::MatrixXd::Constant(K1, M, 1.0 / K1);
    Eigen::MatrixXd B = Eigen::MatrixXd::Constant(K2, M, 1.0 / K2);
    if (K1 <= K2) {
      for (int h = 0; h < std::min(M, K1); ++h) {
        const double rowmass = Pi.row(h).sum();
        tau[h] = rowmass;
        A.col(h).setZero();
        A(h, h) = 1.0;
        if (rowmass > 0.0)
          B.col(h) = Pi.row(h).transpose() / rowmass;
      }
    } else {
      for (int h = 0; h < std::min(M, K2); ++h) {
        const double colmass = Pi.col(h).sum();
        tau[h] = colmass;
        B.col(h).setZero();
        B(h, h) = 1.0;
        if (colmass > 0.0)
          A.col(h) = Pi.col(h) / colmass;
      }
    }
    run(tau, A, B);
  }

  for (int s = 0; s < n_starts; ++s) {
    Eigen::VectorXd tau = rng.dirichlet_ones(M);
    Eigen::MatrixXd A(K1, M), B(K2, M);
    for (int h = 0; h < M; ++h) {
      A.col(h) = rng.dirichlet_ones(K1);
      B.col(h) = rng.dirichlet_ones(K2);
    }
    run(tau, A, B);
  }

  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(K1, K2);
  for (int h = 0; h < M; ++h)
    Q += best.tau[h] * best.row_profiles.col(h) * best.col_profiles.col(h).transpose();
  best.residual = (Pi - Q).cwiseAbs().maxCoeff();
  best.feasible = best.residual < 1e-8;
  return best;
}

std::vector<std::string> FreeParamLayout::names(const std::vector<std::string>& x_names,
                                                const std::vector<std::string>& v_names) const {
  std::vector<std::string> out;
  out.reserve(dim());
  for (int j = 0; j < p; ++j)
    out.push_back(j < static_cast<int>(x_names.size()) ? x_names[j]
                                                       : "x" + std::to_string(j + 1));
  for (int g = 0; g < K1; ++g) out.push_back("zeta1_" + std::to_string(g + 1));
  out.push_back("log_sigma_y");
  for (int j = 0; j < q; ++j)
    out.push_back(j < static_cast<int>(v_names.size()) ? "dropout_" + v_names[j]
                                                       : "v" + std::to_string(j + 1));
  for (int l = 0; l < K2; ++l) out.push_back("zeta2_" + std::to_string(l + 1));
  if (mass == MassParam::FullLogits) {
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        if (g == K1 - 1 && l == K2 - 1) continue;
        out.push_back("xi_" + std::to_string(g + 1) + "_" + std::to_string(l + 1));
      }
  } else {
    for (int g = 0; g < K1 - 1; ++g) out.push_back("alpha_row_" + std::to_string(g + 1));
    for (int l = 0; l < K2 - 1; ++l) out.push_back("alpha_col_" + std::to_string(l + 1));
  }
  return out;
}

Eigen::VectorXd pack_free(const Theta& theta, const FreeParamLayout& layout) {
  if (theta.p() != layout.p || theta.q() != layout.q || theta.K1() != layout.K1 ||
      theta.K2() != layout.K2)
    throw ModelError("pack_free: layout does not match theta");
  Eigen::VectorXd v(layout.dim());
  v.segment(layout.beta_offset(), layout.p) = theta.beta;
  v.segment(layout.zeta1_offset(), layout.K1) = theta.zeta1;
  v[layout.logsigma_offset()] = std::log(theta.sigma_y);
  v.segment(layout.gamma_offset(), layout.q) = theta.gamma;
  v.segment(layout.zeta2_offset(), layout.K2) = theta.zeta2;
  const int K1 = layout.K1, K2 = layout.K2;
  if (layout.mass == MassParam::FullLogits) {
    const double ref = theta.Pi(K1 - 1, K2 - 1);
    if (!(ref > 0.0))
      throw ModelError("pack_free: reference mass cell must be positive");
    int c = 0;
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        if (g == K1 - 1 && l == K2 - 1) continue;
        if (!(theta.Pi(g, l) > 0.0))
          throw ModelError("pack_free: mass cells must be positive for the logit packing");
        v[layout.mass_offset() + c++] = std::log(theta.Pi(g, l) / ref);
      }
  } else {
    const Eigen::VectorXd prow = theta.Pi.rowwise().sum();
    const Eigen::VectorXd pcol = theta.Pi.colwise().sum();
    if (!(prow.minCoeff() > 0.0) || !(pcol.minCoeff() > 0.0))
      throw ModelError("pack_free: marginal masses must be positive for the logit packing");
    for (int g = 0; g < K1 - 1; ++g)
      v[layout.mass_offset() + g] = std::log(prow[g] / prow[K1 - 1]);
    for (int l = 0; l < K2 - 1; ++l)
      v[layout.mass_offset() + K1 - 1 + l] = std::log(pcol[l] / pcol[K2 - 1]);
  }
  return v;
}

Theta unpack_free(const Eigen::VectorXd& v, const FreeParamLayout& layout) {
  if (v.size() != layout.dim()) throw ModelError("unpack_free: wrong length");
  Theta t;
  t.beta = v.segment(layout.beta_offset(), layout.p);
  t.zeta1 = v.segment(layout.zeta1_offset(), layout.K1);
  t.sigma_y = std::exp(v[layout.logsigma_offset()]);
  t.gamma = v.segment(layout.gamma_offset(), layout.q);
  t.zeta2 = v.segment(layout.zeta2_offset(), layout.K2);
  const int K1 = layout.K1, K2 = layout.K2;
  if (layout.mass == MassParam::FullLogits) {
    Eigen::MatrixXd xi(K1, K2);
    int c = 0;
    for (int g = 0; g < K1; ++g)
      for (int l = 0; l < K2; ++l) {
        if (g == K1 - 1 && l == K2 - 1)
          xi(g, l) = 0.0;
        else
          xi(g, l) = v[layout.mass_offset() + c++];
      }
    t.Pi = xi_to_masses(xi);
  } else {
    Eigen::VectorXd ar(K1), ac(K2);
    ar.head(K1 - 1) = v.segment(layout.mass_offset(), K1 - 1);
    ar[K1 - 1] = 0.0;
    ac.head(K2 - 1) = v.segment(layout.mass_offset() + K1 - 1, K2 - 1);
    ac[K2 - 1] = 0.0;
    ar.array() -= ar.maxCoeff();
    ac.array() -= ac.maxCoeff();
    Eigen::VectorXd prow = ar.array().exp();
    Eigen::VectorXd pcol = ac.array().exp();
    prow /= prow.sum();
    pcol /= pcol.sum();
    t.Pi = prow * pcol.transpose();
  }
  return t;
}

double observed_loglik_free(const PanelDataset& data, const Eigen::VectorXd& v,
                            const FreeParamLayout& layout) {
  return observed_loglik(data, unpack_free(v, layout));
}

}  // namespace bidmix
