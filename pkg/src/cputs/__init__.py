"""Conformal prediction sets for a target population under target (label) shift."""

from __future__ import annotations

from .basis import (
    RbfBasis,
    SplineBasis,
    build_rbf_basis,
    build_spline_basis,
    eval_rbf,
    eval_spline,
    rbf_count,
    rbf_gram,
    silverman_bandwidth,
    spline_count,
)
from .conformal import (
    CombinedScore,
    CputsConfig,
    CputsModel,
    PredictionResult,
    SplitPlan,
    baseline_cp,
    blend_weight,
    fit_baseline_cp,
    fit_cputs,
    prediction_intervals,
    scenario1_predict,
    scenario2_predict,
    split_source,
    weighted_p_value,
)
from .density import (
    ConditionalDensity,
    CorrectedDensity,
    QuotientDensity,
    direct_target_density,
    quotient_density,
    target_correct,
)
from .quantile import (
    QuantileProcess,
    eval_quantile,
    fit_linear_quantiles,
    fit_quantile_process,
    hall_sheather_bandwidth,
    level_count,
)
from .simulation import SimDesign, gen_design, gen_skew_noise, run_experiment, true_weight
from .weights import MatchingProblem, WeightModel, assemble_matching, eval_weight, fit_weights, solve_weights

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
