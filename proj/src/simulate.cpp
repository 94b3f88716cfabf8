#include "bidmix/simulate.hpp"

#include <cmath>
#include <map>
#include <set>

#include "bidmix/errors.hpp"
#include "bidmix/rng.hpp"
#include "bidmix/util.hpp"

namespace bidmix {

namespace {

std::string kind_name(CovariateSpec::Kind k) {
  switch (k) {
    case CovariateSpec::Kind::Constant: return "constant";
    case CovariateSpec::Kind::Bernoulli: return "bernoulli";
    case CovariateSpec::Kind::TimeLinear: return "time_linear";
  }
  return "constant";
}

bool same_spec(const CovariateSpec& a, const CovariateSpec& b) {
  return a.kind == b.kind && a.name == b.name && a.value == b.value &&
         a.prob == b.prob && a.intercept == b.intercept && a.slope == b.slope;
}

}  // namespace

nlohmann::json CovariateSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = kind_name(kind);
  j["name"] = name;
  switch (kind) {
    case Kind::Constant: j["value"] = value; break;
    case Kind::Bernoulli: j["prob"] = prob; break;
    case Kind::TimeLinear:
      j["intercept"] = intercept;
      j["slope"] = slope;
      break;
  }
  return j;
}

CovariateSpec CovariateSpec::from_json(const nlohmann::json& j) {
  CovariateSpec s;
  const std::string k = j.at("kind").get<std::string>();
  s.name = j.at("name").get<std::string>();
  if (k == "constant") {
    s.kind = Kind::Constant;
    s.value = j.value("value", 0.0);
  } else if (k == "bernoulli") {
    s.kind = Kind::Bernoulli;
    s.prob = j.value("prob", 0.5);
  } else if (k == "time_linear") {
    s.kind = Kind::TimeLinear;
    s.intercept = j.value("intercept", 0.0);
    s.slope = j.value("slope", 1.0);
  } else {
    throw ModelError("covariate spec: unknown kind '" + k +
                     "' (expected constant, bernoulli, or time_linear)");
  }
  return s;
}

void SimSpec::validate() const {
  theta.validate();
  if (n < 1) throw ModelError("simulation spec: n must be >= 1");
  if (T < 1) throw ModelError("simulation spec: T must be >= 1");
  if (static_cast<int>(x_covariates.size()) != theta.p())
    throw ModelError("simulation spec: x_covariates must match theta's beta length");
  if (static_cast<int>(v_covariates.size()) != theta.q())
    throw ModelError("simulation spec: v_covariates must match theta's gamma length");
  auto check_list = [](const std::vector<CovariateSpec>& list, const char* which) {
    std::set<std::string> seen;
    for (const CovariateSpec& s : list) {
      if (s.name.empty())
        throw ModelError(std::string("simulation spec: unnamed ") + which + " covariate");
      if (!seen.insert(s.name).second)
        throw ModelError("simulation spec: duplicate covariate name '" + s.name + "'");
      if (s.kind == CovariateSpec::Kind::Bernoulli && (s.prob < 0.0 || s.prob > 1.0))
        throw ModelError("simulation spec: Bernoulli probability outside [0, 1] for '" +
                         s.name + "'");
    }
  };
  check_list(x_covariates, "outcome");
  check_list(v_covariates, "dropout");
  for (const CovariateSpec& a : x_covariates)
    for (const CovariateSpec& b : v_covariates)
      if (a.name == b.name && !same_spec(a, b))
        throw ModelError("simulation spec: covariate '" + a.name +
                         "' has conflicting definitions in the two lists");
}

nlohmann::json SimSpec::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["theta"] = theta.to_json();
  j["n"] = n;
  j["T"] = T;
  j["seed"] = seed;
  nlohmann::json xs = nlohmann::json::array(), vs = nlohmann::json::array();
  for (const auto& s : x_covariates) xs.push_back(s.to_json());
  for (const auto& s : v_covariates) vs.push_back(s.to_json());
  j["x_covariates"] = xs;
  j["v_covariates"] = vs;
  return j;
}

SimSpec SimSpec::from_json(const nlohmann::json& j) {
  SimSpec s;
  s.theta = Theta::from_json(j.at("theta"));
  s.n = j.at("n").get<int>();
  s.T = j.at("T").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& c : j.value("x_covariates", nlohmann::json::array()))
    s.x_covariates.push_back(CovariateSpec::from_json(c));
  for (const auto& c : j.value("v_covariates", nlohmann::json::array()))
    s.v_covariates.push_back(CovariateSpec::from_json(c));
  s.validate();
  return s;
}

nlohmann::json SimOutput::metadata() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["n"] = data.n();
  j["T"] = data.T;
  j["redraw_count"] = redraw_count;
  j["note"] =
      "subjects whose first hazard draw fired were redrawn, so the realized "
      "population is truncated to subjects with at least one observed occasion";
  return j;
}

SimOutput generate(const SimSpec& spec) {
  spec.validate();
  const Theta& th = spec.theta;
  const int p = th.p(), q = th.q(), K1 = th.K1(), K2 = th.K2();
  const int T = spec.T;

  // Unified draw order for subject-level covariates: outcome list first, then
  // dropout-only names. Shared names are drawn once and reused.
  std::vector<const CovariateSpec*> subject_draws;
  {
    std::set<std::string> seen;
    for (const auto& s : spec.x_covariates)
      if (s.kind == CovariateSpec::Kind::Bernoulli && seen.insert(s.name).second)
        subject_draws.push_back(&s);
    for (const auto& s : spec.v_covariates)
      if (s.kind == CovariateSpec::Kind::Bernoulli && seen.insert(s.name).second)
        subject_draws.push_back(&s);
  }

  // Flattened row-major cell probabilities.
  std::vector<double> cell_probs(K1 * K2);
  for (int g = 0; g < K1; ++g)
    for (int l = 0; l < K2; ++l) cell_probs[g * K2 + l] = th.Pi(g, l);

  const int id_width = static_cast<int>(std::to_string(spec.n).size());
  SimOutput out;
  out.data.T = T;
  out.data.p = p;
  out.data.q = q;
  for (const auto& s : spec.x_covariates) out.data.x_names.push_back(s.name);
  for (const auto& s : spec.v_covariates) out.data.v_names.push_back(s.name);
  out.data.subjects.resize(spec.n);
  out.cell_g.resize(spec.n);
  out.cell_l.resize(spec.n);

  for (int i = 0; i < spec.n; ++i) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(i));
    constexpr int kMaxRedraws = 10000;
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt >= kMaxRedraws)
        throw ConvergenceError(
            "simulation: a subject exceeded the redraw cap; the occasion-1 "
            "hazard is too close to 1");
      std::map<std::string, double> drawn;
      for (const CovariateSpec* s : subject_draws)
        drawn[s->name] = rng.bernoulli(s->prob) ? 1.0 : 0.0;
      auto value_at = [&](const CovariateSpec& s, int t) {
        switch (s.kind) {
          case CovariateSpec::Kind::Constant: return s.value;
          case CovariateSpec::Kind::Bernoulli: return drawn.at(s.name);
          case CovariateSpec::Kind::TimeLinear: return s.intercept + s.slope * (t - 1);
        }
        return 0.0;
      };

      const int cell = rng.categorical(cell_probs.data(), K1 * K2);
      const int g = cell / K2, l = cell % K2;

      // Discrete-time dropout walk: first event at occasion t censors the
      // response series at T_i = t - 1.
      int T_i = T;
      for (int t = 1; t <= T; ++t) {
        double eta = th.zeta2[l];
        for (int j = 0; j < q; ++j) eta += th.gamma[j] * value_at(spec.v_covariates[j], t);
        if (rng.bernoulli(logistic(eta))) {
          T_i = t - 1;
          break;
        }
      }
      if (T_i == 0) {
        ++out.redraw_count;
        continue;
      }

      SubjectRecord& rec = out.data.subjects[i];
      std::string num = std::to_string(i + 1);
      rec.id = "S" + std::string(id_width - static_cast<int>(num.size()), '0') + num;
      rec.T_i = T_i;
      rec.completer = T_i == T;
      rec.y.resize(T_i);
      rec.X.resize(T_i, p);
      for (int t = 1; t <= T_i; ++t) {
        double mu = th.zeta1[g];
        for (int j = 0; j < p; ++j) {
          rec.X(t - 1, j) = value_at(spec.x_covariates[j], t);
          mu += th.beta[j] * rec.X(t - 1, j);
        }
        rec.y[t - 1] = mu + th.sigma_y * rng.normal();
      }
      const int m = std::min(T, T_i + 1);
      rec.V.resize(m, q);
      for (int t = 1; t <= m; ++t)
        for (int j = 0; j < q; ++j) rec.V(t - 1, j) = value_at(spec.v_covariates[j], t);
      rec.r = build_dropout_indicators(T_i, T);
      out.cell_g[i] = g;
      out.cell_l[i] = l;
      break;
    }
  }
  out.data.validate();
  return out;
}

}  // namespace bidmix
