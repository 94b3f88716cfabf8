// Python extension exposing the main operations of the bidmix library:
// data ingestion, likelihood evaluation, EM fitting, grid selection,
// sandwich covariance, the dropout-sensitivity index, perturbation
// scenarios, and the data generator. JSON-shaped values cross the boundary
// as JSON strings so Python callers can use the standard json module.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>

#include "bidmix/data.hpp"
#include "bidmix/em.hpp"
#include "bidmix/errors.hpp"
#include "bidmix/inference.hpp"
#include "bidmix/model.hpp"
#include "bidmix/selection.hpp"
#include "bidmix/sensitivity.hpp"
#include "bidmix/simulate.hpp"

namespace py = pybind11;
using namespace bidmix;

namespace {

nlohmann::json parse_json(const std::string& text, const char* what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string(what) + ": invalid JSON: " + e.what());
  }
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "Bi-dimensional finite mixture model for a longitudinal outcome with "
      "informative dropout";
  m.attr("__version__") = "0.1.0";

  py::register_exception<DataError>(m, "DataError");
  py::register_exception<ModelError>(m, "ModelError");
  py::register_exception<ConvergenceError>(m, "ConvergenceError");

  // ------------------------------------------------------------------ data
  m.def("transform_response", &transform_response, py::arg("score"),
        "log(1 + (30 - score)) recode of a bounded 0..30 score");
  m.def("build_dropout_indicators", &build_dropout_indicators, py::arg("T_i"),
        py::arg("T"));

  py::class_<SubjectRecord>(m, "SubjectRecord")
      .def(py::init<>())
      .def_readwrite("id", &SubjectRecord::id)
      .def_readwrite("y", &SubjectRecord::y)
      .def_readwrite("X", &SubjectRecord::X)
      .def_readwrite("V", &SubjectRecord::V)
      .def_readwrite("r", &SubjectRecord::r)
      .def_readwrite("T_i", &SubjectRecord::T_i)
      .def_readwrite("completer", &SubjectRecord::completer)
      .def_readwrite("status", &SubjectRecord::status)
      .def("risk_rows", &SubjectRecord::risk_rows);

  py::class_<PanelDataset>(m, "PanelDataset")
      .def(py::init<>())
      .def_readwrite("subjects", &PanelDataset::subjects)
      .def_readwrite("T", &PanelDataset::T)
      .def_readwrite("p", &PanelDataset::p)
      .def_readwrite("q", &PanelDataset::q)
      .def_readwrite("x_names", &PanelDataset::x_names)
      .def_readwrite("v_names", &PanelDataset::v_names)
      .def("n", &PanelDataset::n)
      .def("total_obs", &PanelDataset::total_obs)
      .def("total_risk_rows", &PanelDataset::total_risk_rows)
      .def("validate", &PanelDataset::validate);

  py::class_<CsvSchema>(m, "CsvSchema")
      .def(py::init<>())
      .def_readwrite("id_column", &CsvSchema::id_column)
      .def_readwrite("occasion_column", &CsvSchema::occasion_column)
      .def_readwrite("response_column", &CsvSchema::response_column)
      .def_readwrite("x_columns", &CsvSchema::x_columns)
      .def_readwrite("v_columns", &CsvSchema::v_columns)
      .def_readwrite("status_column", &CsvSchema::status_column)
      .def_readwrite("T", &CsvSchema::T)
      .def("to_json", [](const CsvSchema& s) { return s.to_json().dump(); })
      .def_static("from_json", [](const std::string& text) {
        return CsvSchema::from_json(parse_json(text, "schema"));
      });

  m.def("load_csv", &load_csv, py::arg("path"), py::arg("schema") = CsvSchema{});
  m.def("write_csv", &write_csv, py::arg("data"), py::arg("schema"),
        py::arg("path"));
  m.def(
      "ingest_summary",
      [](const PanelDataset& d) { return ingest_summary(d).dump(); },
      "Attrition/retention summary as a JSON string");

  // ----------------------------------------------------------------- model
  py::class_<Theta>(m, "Theta")
      .def(py::init<>())
      .def_readwrite("beta", &Theta::beta)
      .def_readwrite("zeta1", &Theta::zeta1)
      .def_readwrite("sigma_y", &Theta::sigma_y)
      .def_readwrite("gamma", &Theta::gamma)
      .def_readwrite("zeta2", &Theta::zeta2)
      .def_readwrite("Pi", &Theta::Pi)
      .def("p", &Theta::p)
      .def("q", &Theta::q)
      .def("K1", &Theta::K1)
      .def("K2", &Theta::K2)
      .def("validate", &Theta::validate)
      .def("to_json", [](const Theta& t) { return t.to_json().dump(); })
      .def_static("from_json", [](const std::string& text) {
        return Theta::from_json(parse_json(text, "theta"));
      });

  py::class_<MassLogits>(m, "MassLogits")
      .def(py::init<>())
      .def_readwrite("alpha_row", &MassLogits::alpha_row)
      .def_readwrite("alpha_col", &MassLogits::alpha_col)
      .def_readwrite("lambda_", &MassLogits::lambda)
      .def("K1", &MassLogits::K1)
      .def("K2", &MassLogits::K2)
      .def("xi", &MassLogits::xi);
  m.def("masses_to_logits", &masses_to_logits, py::arg("Pi"));
  m.def("logits_to_masses", &logits_to_masses, py::arg("logits"));
  m.def("xi_to_masses", &xi_to_masses, py::arg("xi"));

  m.def("observed_loglik", &observed_loglik, py::arg("data"), py::arg("theta"));

  py::class_<MixingMoments>(m, "MixingMoments")
      .def_readonly("mean1", &MixingMoments::mean1)
      .def_readonly("sd1", &MixingMoments::sd1)
      .def_readonly("mean2", &MixingMoments::mean2)
      .def_readonly("sd2", &MixingMoments::sd2)
      .def_readonly("cov12", &MixingMoments::cov12)
      .def_readonly("rho12", &MixingMoments::rho12);
  m.def("mixing_moments", &mixing_moments, py::arg("theta"));

  py::class_<SharedProfileFit>(m, "SharedProfileFit")
      .def_readonly("feasible", &SharedProfileFit::feasible)
      .def_readonly("residual", &SharedProfileFit::residual)
      .def_readonly("tau", &SharedProfileFit::tau)
      .def_readonly("row_profiles", &SharedProfileFit::row_profiles)
      .def_readonly("col_profiles", &SharedProfileFit::col_profiles);
  m.def("dunson_decomposition_check", &dunson_decomposition_check,
        py::arg("Pi"), py::arg("M"), py::arg("n_starts") = 20,
        py::arg("max_iter") = 5000);

  // -------------------------------------------------------------------- em
  py::enum_<FitMode>(m, "FitMode")
      .value("MAR", FitMode::MAR)
      .value("MNAR", FitMode::MNAR);

  py::class_<PosteriorWeights>(m, "PosteriorWeights")
      .def_readonly("K1", &PosteriorWeights::K1)
      .def_readonly("K2", &PosteriorWeights::K2)
      .def_readonly("W", &PosteriorWeights::W)
      .def_readonly("row_marginal", &PosteriorWeights::row_marginal)
      .def_readonly("col_marginal", &PosteriorWeights::col_marginal);

  py::class_<FitConfig>(m, "FitConfig")
      .def(py::init<>())
      .def_readwrite("K1", &FitConfig::K1)
      .def_readwrite("K2", &FitConfig::K2)
      .def_readwrite("mode", &FitConfig::mode)
      .def_readwrite("n_starts", &FitConfig::n_starts)
      .def_readwrite("max_iter", &FitConfig::max_iter)
      .def_readwrite("rel_tol", &FitConfig::rel_tol)
      .def_readwrite("seed", &FitConfig::seed)
      .def_readwrite("sigma_floor_factor", &FitConfig::sigma_floor_factor)
      .def_readwrite("mass_floor", &FitConfig::mass_floor)
      .def_readwrite("threads", &FitConfig::threads)
      .def_readwrite("freeze_lambda", &FitConfig::freeze_lambda)
      .def_readwrite("lambda_fixed", &FitConfig::lambda_fixed)
      .def_readwrite("extra_start_thetas", &FitConfig::extra_start_thetas)
      .def("validate", &FitConfig::validate);

  py::class_<FitDiagnostics>(m, "FitDiagnostics")
      .def_readonly("sigma_floor_hit", &FitDiagnostics::sigma_floor_hit)
      .def_readonly("mass_floor_hit", &FitDiagnostics::mass_floor_hit)
      .def_readonly("separation_flag", &FitDiagnostics::separation_flag)
      .def_readonly("n_starts_converged", &FitDiagnostics::n_starts_converged)
      .def_readonly("n_starts_failed", &FitDiagnostics::n_starts_failed)
      .def_readonly("min_step_delta", &FitDiagnostics::min_step_delta)
      .def_readonly("start_index_dropout_margin",
                    &FitDiagnostics::start_index_dropout_margin);

  py::class_<FitResult>(m, "FitResult")
      .def(py::init<>())
      .def_readwrite("mode", &FitResult::mode)
      .def_readwrite("theta", &FitResult::theta)
      .def_readwrite("loglik", &FitResult::loglik)
      .def_readwrite("n_params", &FitResult::n_params)
      .def_readwrite("aic", &FitResult::aic)
      .def_readwrite("bic", &FitResult::bic)
      .def_readwrite("converged", &FitResult::converged)
      .def_readwrite("iterations", &FitResult::iterations)
      .def_readwrite("start_index", &FitResult::start_index)
      .def_readwrite("n", &FitResult::n)
      .def_readonly("weights", &FitResult::weights)
      .def_readonly("loglik_trace", &FitResult::loglik_trace)
      .def_readonly("diagnostics", &FitResult::diagnostics)
      .def("to_json", [](const FitResult& f) { return f.to_json().dump(); });

  m.def("e_step", &e_step, py::arg("data"), py::arg("theta"));
  m.def("fit", &fit, py::arg("data"), py::arg("config"),
        py::call_guard<py::gil_scoped_release>());

  // -------------------------------------------------------------- selection
  py::class_<SelectionCell>(m, "SelectionCell")
      .def_readonly("K1", &SelectionCell::K1)
      .def_readonly("K2", &SelectionCell::K2)
      .def_readonly("loglik", &SelectionCell::loglik)
      .def_readonly("n_params", &SelectionCell::n_params)
      .def_readonly("aic", &SelectionCell::aic)
      .def_readonly("bic", &SelectionCell::bic)
      .def_readonly("converged", &SelectionCell::converged)
      .def_readonly("error", &SelectionCell::error);

  py::class_<SelectionResult>(m, "SelectionResult")
      .def_readonly("mode", &SelectionResult::mode)
      .def_readonly("cells", &SelectionResult::cells)
      .def_readonly("best_by_bic", &SelectionResult::best_by_bic)
      .def_readonly("best_by_aic", &SelectionResult::best_by_aic)
      .def_readonly("warnings", &SelectionResult::warnings)
      .def("to_json",
           [](const SelectionResult& s) { return s.to_json().dump(); });

  m.def("grid_search", &grid_search, py::arg("data"), py::arg("base_config"),
        py::arg("K1_grid"), py::arg("K2_grid"), py::arg("warm_start") = false,
        py::call_guard<py::gil_scoped_release>());

  // -------------------------------------------------------------- inference
  py::class_<CovarianceEstimate>(m, "CovarianceEstimate")
      .def_readonly("param_names", &CovarianceEstimate::param_names)
      .def_readonly("info_observed", &CovarianceEstimate::info_observed)
      .def_readonly("score_outer", &CovarianceEstimate::score_outer)
      .def_readonly("sandwich", &CovarianceEstimate::sandwich)
      .def_readonly("used_pseudo_inverse",
                    &CovarianceEstimate::used_pseudo_inverse)
      .def_readonly("warnings", &CovarianceEstimate::warnings)
      .def("se", &CovarianceEstimate::se, py::arg("j"))
      .def("se_vector", &CovarianceEstimate::se_vector);

  m.def("subject_scores", &subject_scores, py::arg("data"), py::arg("theta"),
        py::arg("layout"));
  m.def("observed_information", &observed_information, py::arg("data"),
        py::arg("theta"), py::arg("layout"));
  m.def("sandwich_covariance", &sandwich_covariance, py::arg("data"),
        py::arg("fit"));

  py::enum_<MassParam>(m, "MassParam")
      .value("FullLogits", MassParam::FullLogits)
      .value("RankOne", MassParam::RankOne);
  py::class_<FreeParamLayout>(m, "FreeParamLayout")
      .def(py::init<>())
      .def_readwrite("p", &FreeParamLayout::p)
      .def_readwrite("K1", &FreeParamLayout::K1)
      .def_readwrite("K2", &FreeParamLayout::K2)
      .def_readwrite("q", &FreeParamLayout::q)
      .def_readwrite("mass", &FreeParamLayout::mass)
      .def("dim", &FreeParamLayout::dim)
      .def_static("for_theta", &FreeParamLayout::for_theta, py::arg("theta"),
                  py::arg("mass"));

  py::class_<MomentSummaries>(m, "MomentSummaries")
      .def_readonly("moments", &MomentSummaries::moments)
      .def_readonly("se_mean1", &MomentSummaries::se_mean1)
      .def_readonly("se_mean2", &MomentSummaries::se_mean2)
      .def_readonly("se_sd1", &MomentSummaries::se_sd1)
      .def_readonly("se_sd2", &MomentSummaries::se_sd2)
      .def_readonly("se_cov12", &MomentSummaries::se_cov12)
      .def_readonly("se_rho12", &MomentSummaries::se_rho12)
      .def_readonly("sigma_y", &MomentSummaries::sigma_y)
      .def_readonly("se_sigma_y", &MomentSummaries::se_sigma_y);
  m.def("moment_summaries", &moment_summaries, py::arg("theta"), py::arg("cov"));

  // ------------------------------------------------------------ sensitivity
  py::class_<IsniResult>(m, "IsniResult")
      .def(py::init<>())
      .def_readwrite("theta_mar", &IsniResult::theta_mar)
      .def_readwrite("isni", &IsniResult::isni)
      .def_readwrite("se", &IsniResult::se)
      .def_readwrite("phi_hat", &IsniResult::phi_hat)
      .def_readwrite("phi_names", &IsniResult::phi_names)
      .def_readwrite("lambda_names", &IsniResult::lambda_names)
      .def_readwrite("profile_nuisance", &IsniResult::profile_nuisance)
      .def("n_phi", &IsniResult::n_phi)
      .def("n_lambda", &IsniResult::n_lambda)
      .def("to_json", [](const IsniResult& r) { return r.to_json().dump(); })
      .def_static("from_json", [](const std::string& text) {
        return IsniResult::from_json(parse_json(text, "isni"));
      });
  m.def("isni_matrix", &isni_matrix, py::arg("data"), py::arg("mar_fit"),
        py::arg("profile_nuisance") = false);

  py::class_<IsniRow>(m, "IsniRow")
      .def_readonly("name", &IsniRow::name)
      .def_readonly("se", &IsniRow::se)
      .def_readonly("norm", &IsniRow::norm)
      .def_readonly("norm_over_se", &IsniRow::norm_over_se)
      .def_readonly("min", &IsniRow::min)
      .def_readonly("min_over_se", &IsniRow::min_over_se)
      .def_readonly("max", &IsniRow::max)
      .def_readonly("max_over_se", &IsniRow::max_over_se);
  m.def("isni_summaries", &isni_summaries, py::arg("isni"));

  py::class_<ScenarioResult>(m, "ScenarioResult")
      .def_readonly("scenario", &ScenarioResult::scenario)
      .def_readonly("B", &ScenarioResult::B)
      .def_readonly("lo", &ScenarioResult::lo)
      .def_readonly("hi", &ScenarioResult::hi)
      .def_readonly("seed", &ScenarioResult::seed)
      .def_readonly("phi_names", &ScenarioResult::phi_names)
      .def_readonly("lambda_names", &ScenarioResult::lambda_names)
      .def_readonly("lambda_draws", &ScenarioResult::lambda_draws)
      .def_readonly("c_draws", &ScenarioResult::c_draws)
      .def_readonly("phi_approx", &ScenarioResult::phi_approx)
      .def_readonly("coverage", &ScenarioResult::coverage)
      .def_readonly("rho12", &ScenarioResult::rho12)
      .def_readonly("overflow", &ScenarioResult::overflow)
      .def("coverage_json",
           [](const ScenarioResult& s) { return s.coverage_json().dump(); });
  m.def("scenario1", &scenario1, py::arg("isni"), py::arg("B"), py::arg("lo"),
        py::arg("hi"), py::arg("seed"));
  m.def("scenario2", &scenario2, py::arg("isni"), py::arg("theta_mnar"),
        py::arg("B"), py::arg("lo"), py::arg("hi"), py::arg("seed"));
  m.def("refit_outcome_given_mass", &refit_outcome_given_mass, py::arg("data"),
        py::arg("start"), py::arg("tol") = 1e-10, py::arg("max_iter") = 200);

  // --------------------------------------------------------------- simulate
  py::class_<CovariateSpec> cov_spec(m, "CovariateSpec");
  py::enum_<CovariateSpec::Kind>(cov_spec, "Kind")
      .value("Constant", CovariateSpec::Kind::Constant)
      .value("Bernoulli", CovariateSpec::Kind::Bernoulli)
      .value("TimeLinear", CovariateSpec::Kind::TimeLinear);
  cov_spec.def(py::init<>())
      .def_readwrite("kind", &CovariateSpec::kind)
      .def_readwrite("name", &CovariateSpec::name)
      .def_readwrite("value", &CovariateSpec::value)
      .def_readwrite("prob", &CovariateSpec::prob)
      .def_readwrite("intercept", &CovariateSpec::intercept)
      .def_readwrite("slope", &CovariateSpec::slope)
      .def("to_json", [](const CovariateSpec& c) { return c.to_json().dump(); })
      .def_static("from_json", [](const std::string& text) {
        return CovariateSpec::from_json(parse_json(text, "covariate spec"));
      });

  py::class_<SimSpec>(m, "SimSpec")
      .def(py::init<>())
      .def_readwrite("theta", &SimSpec::theta)
      .def_readwrite("n", &SimSpec::n)
      .def_readwrite("T", &SimSpec::T)
      .def_readwrite("seed", &SimSpec::seed)
      .def_readwrite("x_covariates", &SimSpec::x_covariates)
      .def_readwrite("v_covariates", &SimSpec::v_covariates)
      .def("validate", &SimSpec::validate)
      .def("to_json", [](const SimSpec& s) { return s.to_json().dump(); })
      .def_static("from_json", [](const std::string& text) {
        return SimSpec::from_json(parse_json(text, "sim spec"));
      });

  py::class_<SimOutput>(m, "SimOutput")
      .def_readonly("data", &SimOutput::data)
      .def_readonly("cell_g", &SimOutput::cell_g)
      .def_readonly("cell_l", &SimOutput::cell_l)
      .def_readonly("redraw_count", &SimOutput::redraw_count)
      .def("metadata", [](const SimOutput& s) { return s.metadata().dump(); });
  m.def("generate", &generate, py::arg("spec"));
}
