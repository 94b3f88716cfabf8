#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "bidmix/data.hpp"
#include "bidmix/model.hpp"

namespace bidmix {

// One generated covariate column. Constant and Bernoulli are subject-level;
// TimeLinear is the deterministic profile intercept + slope * (t - 1). A name
// shared between the outcome and dropout lists is drawn once per subject and
// fed to both design matrices.
struct CovariateSpec {
  enum class Kind { Constant, Bernoulli, TimeLinear };
  Kind kind = Kind::Constant;
  std::string name;
  double value = 0.0;      // Constant
  double prob = 0.5;       // Bernoulli
  double intercept = 0.0;  // TimeLinear
  double slope = 1.0;      // TimeLinear

  nlohmann::json to_json() const;
  static CovariateSpec from_json(const nlohmann::json& j);
};

struct SimSpec {
  Theta theta;
  int n = 0;
  int T = 0;
  std::uint64_t seed = 1;
  std::vector<CovariateSpec> x_covariates;  // theta.p() entries
  std::vector<CovariateSpec> v_covariates;  // theta.q() entries

  void validate() const;  // throws ModelError
  nlohmann::json to_json() const;
  static SimSpec from_json(const nlohmann::json& j);
};

struct SimOutput {
  PanelDataset data;
  std::vector<int> cell_g, cell_l;  // realized latent cell per subject
  int redraw_count = 0;             // subjects redrawn for an occasion-1 event

  nlohmann::json metadata() const;
};

// Draws each subject from its own seed-derived stream: latent cell from the
// mass matrix, discrete-time dropout walk, then Gaussian responses for the
// observed occasions. A subject whose very first hazard draw fires would have
// no responses at all, which the likelihood cannot represent; such subjects
// are redrawn (capped), so the realized population is truncated to T_i >= 1
// and the redraw count is reported in the metadata.
SimOutput generate(const SimSpec& spec);

}  // namespace bidmix
