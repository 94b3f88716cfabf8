#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "bidmix/data.hpp"
#include "bidmix/em.hpp"

namespace bidmix {

// One grid cell of the (K1, K2) search. A cell that threw is kept with
// converged = false, NaN criteria, and the error message; the grid never
// aborts because one shape failed.
struct SelectionCell {
  int K1 = 1, K2 = 1;
  double loglik = 0.0;
  int n_params = 0;
  double aic = 0.0, bic = 0.0;
  bool converged = false;
  std::string error;
};

struct SelectionResult {
  FitMode mode = FitMode::MNAR;
  std::vector<SelectionCell> cells;  // sorted by BIC; failures last
  int best_by_bic = -1;              // index into cells among converged, -1 if none
  int best_by_aic = -1;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

// Fits every (K1, K2) combination of the two grids under base_config (its
// K1/K2 are overridden per cell) and ranks by BIC, ties broken by smaller
// K1*K2 then smaller K1. MAR cells factorize, so each margin is fitted once
// and the grid is composed from margin log likelihoods. With warm_start,
// each MNAR cell adds a start expanded from the best already-fitted smaller
// cell. Nested cells whose loglik decreases by more than 1e-4 are flagged in
// warnings (multi-start optimization noise).
SelectionResult grid_search(const PanelDataset& data, const FitConfig& base_config,
                            const std::vector<int>& K1_grid,
                            const std::vector<int>& K2_grid, bool warm_start = false);

}  // namespace bidmix
