#include "bidmix/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "bidmix/errors.hpp"

namespace bidmix {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

SelectionCell failed_cell(int K1, int K2, const std::string& why) {
  SelectionCell c;
  c.K1 = K1;
  c.K2 = K2;
  c.loglik = kNaN;
  c.aic = kNaN;
  c.bic = kNaN;
  c.converged = false;
  c.error = why;
  return c;
}

// Grow a fitted theta to a larger shape by splitting the heaviest component
// of each margin (tiny location offset, halved mass) until the target size is
// reached. Used only to seed warm starts; EM does the real work.
Theta expand_theta(Theta t, int K1, int K2) {
  while (t.K1() < K1) {
    const Eigen::VectorXd prow = t.Pi.rowwise().sum();
    int g = 0;
    prow.maxCoeff(&g);
    const int K = t.K1();
    const double eps = 1e-3 * (1.0 + std::abs(t.zeta1[g]));
    Eigen::VectorXd z(K + 1);
    Eigen::MatrixXd P(K + 1, t.K2());
    for (int a = 0, b = 0; a < K; ++a, ++b) {
      z[b] = t.zeta1[a];
      P.row(b) = t.Pi.row(a);
      if (a == g) {
        P.row(b) *= 0.5;
        ++b;
        z[b] = t.zeta1[a] + eps;
        P.row(b) = P.row(b - 1);
      }
    }
    t.zeta1 = z;
    t.Pi = P;
  }
  while (t.K2() < K2) {
    const Eigen::VectorXd pcol = t.Pi.colwise().sum();
    int l = 0;
    pcol.maxCoeff(&l);
    const int K = t.K2();
    const double eps = 1e-3 * (1.0 + std::abs(t.zeta2[l]));
    Eigen::VectorXd z(K + 1);
    Eigen::MatrixXd P(t.K1(), K + 1);
    for (int a = 0, b = 0; a < K; ++a, ++b) {
      z[b] = t.zeta2[a];
      P.col(b) = t.Pi.col(a);
      if (a == l) {
        P.col(b) *= 0.5;
        ++b;
        z[b] = t.zeta2[a] + eps;
        P.col(b) = P.col(b - 1);
      }
    }
    t.zeta2 = z;
    t.Pi = P;
  }
  canonicalize(&t);  // the offset may pass a neighboring location
  return t;
}

}  // namespace

nlohmann::json SelectionResult::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["mode"] = mode == FitMode::MAR ? "mar" : "mnar";
  nlohmann::json rows = nlohmann::json::array();
  for (const SelectionCell& c : cells) {
    nlohmann::json r;
    r["K1"] = c.K1;
    r["K2"] = c.K2;
    r["loglik"] = c.loglik;
    r["n_params"] = c.n_params;
    r["aic"] = c.aic;
    r["bic"] = c.bic;
    r["converged"] = c.converged;
    if (!c.error.empty()) r["error"] = c.error;
    rows.push_back(r);
  }
  j["cells"] = rows;
  j["best_by_bic"] = best_by_bic;
  j["best_by_aic"] = best_by_aic;
  j["warnings"] = warnings;
  return j;
}

SelectionResult grid_search(const PanelDataset& data, const FitConfig& base_config,
                            const std::vector<int>& K1_grid,
                            const std::vector<int>& K2_grid, bool warm_start) {
  if (K1_grid.empty() || K2_grid.empty())
    throw ModelError("grid_search: both component grids must be nonempty");
  for (int k : K1_grid)
    if (k < 1) throw ModelError("grid_search: K1 values must be >= 1");
  for (int k : K2_grid)
    if (k < 1) throw ModelError("grid_search: K2 values must be >= 1");

  SelectionResult out;
  out.mode = base_config.mode;
  const int n = data.n();

  auto criteria = [&](SelectionCell* c) {
    c->aic = -2.0 * c->loglik + 2.0 * c->n_params;
    c->bic = -2.0 * c->loglik + c->n_params * std::log(static_cast<double>(n));
  };

  if (base_config.mode == FitMode::MAR) {
    // The MAR likelihood factorizes over margins, so fit each margin size
    // once and compose the grid from the margin fits.
    std::map<int, FitResult> fit1, fit2;
    std::map<int, std::string> err1, err2;
    auto margin_fit = [&](int K1, int K2) -> const FitResult* {
      auto& cache = K2 == 1 ? fit1 : fit2;
      auto& errs = K2 == 1 ? err1 : err2;
      const int key = K2 == 1 ? K1 : K2;
      if (cache.count(key)) return &cache.at(key);
      if (errs.count(key)) return nullptr;
      FitConfig cfg = base_config;
      cfg.K1 = K1;
      cfg.K2 = K2;
      cfg.extra_start_thetas.clear();
      try {
        cache.emplace(key, fit(data, cfg));
        return &cache.at(key);
      } catch (const std::exception& e) {
        errs.emplace(key, e.what());
        return nullptr;
      }
    };
    for (int K1 : K1_grid)
      for (int K2 : K2_grid) {
        const FitResult* f1 = margin_fit(K1, 1);
        const FitResult* f2 = margin_fit(1, K2);
        const FitResult* f0 = margin_fit(1, 1);
        if (!f1 || !f2 || !f0) {
          const std::string why = !f1 ? err1.at(K1) : (!f2 ? err2.at(K2) : err1.at(1));
          out.cells.push_back(failed_cell(K1, K2, why));
          continue;
        }
        SelectionCell c;
        c.K1 = K1;
        c.K2 = K2;
        c.loglik = f1->loglik + f2->loglik - f0->loglik;
        c.n_params = n_free_params(FitMode::MAR, false, data.p, data.q, K1, K2);
        c.converged = f1->converged && f2->converged;
        criteria(&c);
        out.cells.push_back(c);
      }
  } else {
    std::map<std::pair<int, int>, Theta> fitted;
    for (int K1 : K1_grid)
      for (int K2 : K2_grid) {
        FitConfig cfg = base_config;
        cfg.K1 = K1;
        cfg.K2 = K2;
        cfg.extra_start_thetas.clear();
        if (cfg.freeze_lambda) {
          cfg.lambda_fixed = Eigen::MatrixXd::Zero(K1 - 1, K2 - 1);
          if (base_config.lambda_fixed.rows() == K1 - 1 &&
              base_config.lambda_fixed.cols() == K2 - 1)
            cfg.lambda_fixed = base_config.lambda_fixed;
        }
        if (warm_start) {
          // Seed from the largest already-fitted shape that fits inside.
          const Theta* donor = nullptr;
          int donor_size = -1;
          for (const auto& [shape, theta] : fitted)
            if (shape.first <= K1 && shape.second <= K2 &&
                shape.first * shape.second > donor_size) {
              donor = &theta;
              donor_size = shape.first * shape.second;
            }
          if (donor) cfg.extra_start_thetas.push_back(expand_theta(*donor, K1, K2));
        }
        try {
          const FitResult f = fit(data, cfg);
          SelectionCell c;
          c.K1 = K1;
          c.K2 = K2;
          c.loglik = f.loglik;
          c.n_params = f.n_params;
          c.aic = f.aic;
          c.bic = f.bic;
          c.converged = f.converged;
          out.cells.push_back(c);
          fitted.emplace(std::make_pair(K1, K2), f.theta);
        } catch (const std::exception& e) {
          out.cells.push_back(failed_cell(K1, K2, e.what()));
        }
      }
  }

  // Nested-model sanity: loglik should not drop when a margin grows.
  std::map<std::pair<int, int>, double> ll;
  for (const SelectionCell& c : out.cells)
    if (std::isfinite(c.loglik)) ll[{c.K1, c.K2}] = c.loglik;
  for (const auto& [shape, value] : ll)
    for (const auto& [shape2, value2] : ll) {
      if (shape2.first < shape.first || shape2.second < shape.second) continue;
      if (shape2 == shape) continue;
      if (value2 < value - 1e-4) {
        std::ostringstream msg;
        msg << "loglik decreased from (" << shape.first << "," << shape.second
            << ") to (" << shape2.first << "," << shape2.second << ") by "
            << (value - value2) << "; multi-start optimization noise";
        out.warnings.push_back(msg.str());
      }
    }

  // Rank: finite BIC ascending, failures last; ties by smaller K1*K2 then K1.
  std::stable_sort(out.cells.begin(), out.cells.end(),
                   [](const SelectionCell& a, const SelectionCell& b) {
                     const bool fa = std::isfinite(a.bic), fb = std::isfinite(b.bic);
                     if (fa != fb) return fa;
                     if (fa && a.bic != b.bic) return a.bic < b.bic;
                     if (a.K1 * a.K2 != b.K1 * b.K2) return a.K1 * a.K2 < b.K1 * b.K2;
                     return a.K1 < b.K1;
                   });
  for (int i = 0; i < static_cast<int>(out.cells.size()); ++i) {
    const SelectionCell& c = out.cells[i];
    if (!c.converged || !std::isfinite(c.bic)) continue;
    if (out.best_by_bic < 0 || c.bic < out.cells[out.best_by_bic].bic) out.best_by_bic = i;
    if (out.best_by_aic < 0 || c.aic < out.cells[out.best_by_aic].aic) out.best_by_aic = i;
  }
  return out;
}

}  // namespace bidmix
