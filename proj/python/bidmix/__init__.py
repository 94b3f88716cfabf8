"""Bi-dimensional finite mixture model for a longitudinal outcome under
possibly informative dropout.

The heavy lifting lives in the compiled extension ``bidmix._core``; this
package re-exports its public surface. JSON-shaped values cross the boundary
as JSON strings (pair them with the standard :mod:`json` module).
"""

from bidmix._core import (  # noqa: F401
    ConvergenceError,
    CovarianceEstimate,
    CovariateSpec,
    CsvSchema,
    DataError,
    FitConfig,
    FitDiagnostics,
    FitMode,
    FitResult,
    FreeParamLayout,
    IsniResult,
    IsniRow,
    MassLogits,
    MassParam,
    MixingMoments,
    ModelError,
    MomentSummaries,
    PanelDataset,
    PosteriorWeights,
    ScenarioResult,
    SelectionCell,
    SelectionResult,
    SharedProfileFit,
    SimOutput,
    SimSpec,
    SubjectRecord,
    Theta,
    __version__,
    build_dropout_indicators,
    dunson_decomposition_check,
    e_step,
    fit,
    generate,
    grid_search,
    ingest_summary,
    isni_matrix,
    isni_summaries,
    load_csv,
    logits_to_masses,
    masses_to_logits,
    mixing_moments,
    moment_summaries,
    observed_information,
    observed_loglik,
    refit_outcome_given_mass,
    sandwich_covariance,
    scenario1,
    scenario2,
    subject_scores,
    transform_response,
    write_csv,
    xi_to_masses,
)

__all__ = [name for name in dir() if not name.startswith("_")]
