"""Weighted split-conformal prediction under target shift.

Scores are negative estimated target conditional densities, so prediction
sets are (estimated) highest-density regions and may be unions of intervals.
Calibration scores come from held-out source rows and are reweighted by the
likelihood ratio ``w(y)`` so they are comparable with a target test point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .density import (
    CorrectedDensity,
    QuotientDensity,
    direct_target_density,
    normalization_grid,
    target_correct,
)
from .quantile import fit_quantile_process
from .weights import DEFAULT_CLIP, DEFAULT_RIDGE, PENALTIES, WEIGHT_FLOOR, fit_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CputsConfig:
    """Tuning knobs; ``None`` / ``0`` mean "use the sample-size rule"."""

    train_fraction: float = 0.5
    n_splines: int | None = None
    n_rbf: int | None = None
    degree: int = 3
    kappa: int = 0
    kappa_target: int = 0
    delta: float = DEFAULT_RIDGE
    rho: float = DEFAULT_RIDGE
    clip_max: float = DEFAULT_CLIP
    penalty: str = "ridge"
    grid_size: int = 400
    grid_pad: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0,1)")
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if not (self.clip_max > 0 and self.delta > 0 and self.rho > 0):
            raise ValueError("clip_max, delta and rho must be positive")
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}")


@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    calibration: np.ndarray
    train_fraction: float
    seed: int


def split_source(n: int, train_fraction: float = 0.5, seed: int = 0) -> SplitPlan:
    """Random train / calibration split of ``n`` source rows, reproducible from ``seed``."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0,1)")
    if n < 4:
        raise ValueError("need at least 4 source rows")
    n_train = min(n - 1, max(1, int(math.floor(train_fraction * n))))
    perm = np.random.default_rng(seed).permutation(n)
    return SplitPlan(np.sort(perm[:n_train]), np.sort(perm[n_train:]), train_fraction, seed)


def weighted_p_value(cal_scores, cal_weights, test_score: float, test_weight: float) -> float:
    """``[sum_i w_i 1{R_i >= r} + w_test] / [sum_i w_i + w_test]``."""
    cal_scores = np.asarray(cal_scores, dtype=float)
    cal_weights = np.asarray(cal_weights, dtype=float)
    hit = cal_weights[cal_scores >= test_score].sum()
    return float((hit + test_weight) / (cal_weights.sum() + test_weight))


class PValueCalculator:
    """Vectorized weighted p-values against one calibration set.

    Calibration scores are sorted once; the weight mass at or above any test
    score is read off a suffix sum.
    """

    def __init__(self, cal_scores, cal_weights):
        cal_scores = np.asarray(cal_scores, dtype=float).ravel()
        cal_weights = np.asarray(cal_weights, dtype=float).ravel()
        if cal_scores.size == 0 or cal_scores.shape != cal_weights.shape:
            raise ValueError("calibration scores and weights must be nonempty and aligned")
        order = np.argsort(cal_scores, kind="stable")
        self.sorted_scores = cal_scores[order]
        suffix = np.cumsum(cal_weights[order][::-1])[::-1]
        self.suffix = np.append(suffix, 0.0)
        self.total = float(suffix[0])

    def __call__(self, test_scores, test_weights) -> np.ndarray:
        test_scores = np.asarray(test_scores, dtype=float)
        test_weights = np.asarray(test_weights, dtype=float)
        idx = np.searchsorted(self.sorted_scores, test_scores, side="left")
        return (self.suffix[idx] + test_weights) / (self.total + test_weights)


def prediction_intervals(grid, p_values, alpha: float) -> list[tuple[float, float]]:
    """Turn ``{y : p(y) > alpha}`` on a grid into closed intervals.

    Endpoints inside the grid are placed where the linear interpolant of
    ``p`` crosses ``alpha``.
    """
    grid = np.asarray(grid, dtype=float)
    p = np.asarray(p_values, dtype=float)
    inside = p > alpha
    if not inside.any():
        return []
    edges = np.diff(inside.astype(np.int8))
    starts = list(np.flatnonzero(edges == 1) + 1)
    stops = list(np.flatnonzero(edges == -1))
    if inside[0]:
        starts.insert(0, 0)
    if inside[-1]:
        stops.append(len(p) - 1)

    def cross(i_out: int, i_in: int) -> float:
        pa, pb = p[i_out], p[i_in]
        frac = (alpha - pa) / (pb - pa)
        return float(grid[i_out] + frac * (grid[i_in] - grid[i_out]))

    out = []
    for s, e in zip(starts, stops):
        lo = float(grid[0]) if s == 0 else cross(s - 1, s)
        hi = float(grid[-1]) if e == len(p) - 1 else cross(e + 1, e)
        out.append((lo, hi))
    return out


@dataclass(frozen=True)
class PredictionResult:
    """Prediction set for one test row as a list of closed intervals."""

    intervals: list
    alpha: float
    candidate_grid: np.ndarray | None = field(default=None, repr=False)
    p_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def length(self) -> float:
        return float(sum(hi - lo for lo, hi in self.intervals))

    def contains(self, y: float) -> bool:
        return any(lo <= y <= hi for lo, hi in self.intervals)

    def p_value_at(self, y: float) -> float:
        """Linear interpolation of the grid p-values (NaN for interval-only results)."""
        if self.p_values is None:
            return float("nan")
        return float(np.interp(y, self.candidate_grid, self.p_values))

    def format(self, digits: int = 6) -> str:
        return ";".join(f"[{lo:.{digits}g},{hi:.{digits}g}]" for lo, hi in self.intervals)


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    return x[:, None] if x.ndim == 1 else x


def _candidate_grid(y, size: int, pad: float) -> np.ndarray:
    lo, hi = float(np.min(y)), float(np.max(y))
    width = hi - lo
    return np.linspace(lo - pad * width, hi + pad * width, size)


@dataclass(frozen=True, eq=False)
class CombinedScore:
    """``(1 - K) * R1 + K * R2`` with ``R = -density``; ``direct`` may be absent (K = 1)."""

    corrected: CorrectedDensity
    direct: QuotientDensity | None = None
    K: float = 1.0

    def __call__(self, x, y) -> np.ndarray:
        r2 = -self.corrected.pdf(x, y)
        if self.direct is None or self.K == 1.0:
            return r2
        r1 = -self.direct.pdf(x, y)
        return (1.0 - self.K) * r1 + self.K * r2


def blend_weight(n_train: int, n_labeled: int) -> float:
    """Sample-size proxy for the variance-optimal blend, ``|D_t| / (n0 + |D_t|)``."""
    return n_train / (n_labeled + n_train)


@dataclass(frozen=True, eq=False)
class CputsModel:
    """Everything fitted once per data set; ``predict`` is then cheap per test row."""

    score: CombinedScore
    weight: Callable
    calibration: PValueCalculator
    cal_scores: np.ndarray
    cal_weights: np.ndarray
    candidate_grid: np.ndarray
    plan: SplitPlan
    scenario: int

    def p_values(self, x_test) -> np.ndarray:
        """Grid p-values, one row per test covariate row."""
        x_test = _rows(x_test)
        g = np.broadcast_to(self.candidate_grid, (x_test.shape[0], len(self.candidate_grid)))
        scores = self.score(x_test, g)
        w = np.broadcast_to(np.asarray(self.weight(self.candidate_grid)), scores.shape)
        return self.calibration(scores, w)

    def predict(self, x_test, alpha: float) -> list[PredictionResult]:
        _check_alpha(alpha)
        pv = self.p_values(x_test)
        return [PredictionResult(prediction_intervals(self.candidate_grid, row, alpha), alpha,
                                 self.candidate_grid, row) for row in pv]


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0,1)")


def fit_cputs(
    source_x,
    source_y,
    target_x,
    labeled_x=None,
    labeled_y=None,
    config: CputsConfig = CputsConfig(),
    weight: Callable | None = None,
) -> CputsModel:
    """Fit the CPUTS pipeline.

    Args:
        source_x, source_y: labeled source rows.
        target_x: unlabeled target covariates.
        labeled_x, labeled_y: optional labeled target rows.  With at least
            ``p + 2`` of them the blended score is used (scenario 2); their
            covariates always join ``target_x`` for weight estimation.
        config: tuning.
        weight: optional known likelihood ratio ``w(y)`` replacing the
            estimated one (oracle runs).
    """
    source_x, target_x = _rows(source_x), _rows(target_x)
    source_y = np.asarray(source_y, dtype=float).ravel()
    p = source_x.shape[1]
    if labeled_x is not None and len(labeled_y):
        labeled_x = _rows(labeled_x)
        labeled_y = np.asarray(labeled_y, dtype=float).ravel()
        all_target_x = np.vstack([labeled_x, target_x])
    else:
        labeled_x, labeled_y = None, None
        all_target_x = target_x
    n_labeled = 0 if labeled_y is None else len(labeled_y)

    plan = split_source(len(source_y), config.train_fraction, config.seed)
    xt, yt = source_x[plan.train], source_y[plan.train]
    xc, yc = source_x[plan.calibration], source_y[plan.calibration]

    grid = _candidate_grid(source_y, config.grid_size, config.grid_pad)
    if weight is None:
        weight = fit_weights(xt, yt, all_target_x, n_splines=config.n_splines, n_rbf=config.n_rbf,
                             degree=config.degree, delta=config.delta, rho=config.rho,
                             clip_max=config.clip_max, penalty=config.penalty)
        norm_grid = None
    else:
        norm_grid = normalization_grid((float(grid[0]), float(grid[-1])))

    source_density = QuotientDensity(fit_quantile_process(xt, yt, config.kappa))
    corrected = target_correct(source_density, weight, norm_grid)

    if n_labeled >= p + 2:
        direct = direct_target_density(labeled_x, labeled_y, config.kappa_target)
        score = CombinedScore(corrected, direct, blend_weight(len(yt), n_labeled))
        scenario = 2
    else:
        if n_labeled:
            logger.info("only %d labeled target rows; using the unlabeled-target score", n_labeled)
        score = CombinedScore(corrected)
        scenario = 1

    cal_scores = score(xc, yc)
    cal_weights = np.clip(np.asarray(weight(yc), dtype=float), WEIGHT_FLOOR, None)
    calc = PValueCalculator(cal_scores, cal_weights)
    return CputsModel(score, weight, calc, cal_scores, cal_weights, grid, plan, scenario)


def scenario1_predict(source_x, source_y, target_x, x_test, alpha: float,
                      config: CputsConfig = CputsConfig(), weight=None) -> list[PredictionResult]:
    """Prediction sets for target rows when no target labels are available."""
    _check_alpha(alpha)
    model = fit_cputs(source_x, source_y, target_x, config=config, weight=weight)
    return model.predict(x_test, alpha)


def scenario2_predict(source_x, source_y, labeled_x, labeled_y, target_x, x_test, alpha: float,
                      config: CputsConfig = CputsConfig(), weight=None) -> list[PredictionResult]:
    """Prediction sets using a few labeled target rows to sharpen the score.

    Falls back to the unlabeled-target procedure when fewer than ``p + 2``
    labeled rows are given.
    """
    _check_alpha(alpha)
    model = fit_cputs(source_x, source_y, target_x, labeled_x, labeled_y, config=config, weight=weight)
    return model.predict(x_test, alpha)


@dataclass(frozen=True)
class SplitConformalModel:
    """Least-squares fit with a split-conformal absolute-residual band."""

    coef: np.ndarray
    radius: float

    def predict(self, x_test, alpha: float | None = None) -> list[PredictionResult]:
        x_test = _rows(x_test)
        mu = self.coef[0] + x_test @ self.coef[1:]
        return [PredictionResult([(float(m - self.radius), float(m + self.radius))], alpha) for m in mu]


def fit_baseline_cp(x, y, alpha: float, train_fraction: float = 0.5, seed: int = 0) -> SplitConformalModel:
    """Split conformal with least-squares mean and absolute residual score.

    The band half-width is the ``ceil((1 - alpha)(n_cal + 1))``-th smallest
    calibration residual (infinite when that rank exceeds ``n_cal``).
    """
    _check_alpha(alpha)
    x = _rows(x)
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 4:
        raise ValueError("need at least 4 labeled rows for split conformal")
    plan = split_source(len(y), train_fraction, seed)
    X = np.hstack([np.ones((len(y), 1)), x])
    coef = np.linalg.lstsq(X[plan.train], y[plan.train], rcond=None)[0]
    resid = np.sort(np.abs(y[plan.calibration] - X[plan.calibration] @ coef))
    k = math.ceil((1.0 - alpha) * (len(resid) + 1))
    radius = float(resid[k - 1]) if k <= len(resid) else math.inf
    return SplitConformalModel(coef, radius)


def baseline_cp(x, y, x_test, alpha: float, train_fraction: float = 0.5, seed: int = 0) -> list[PredictionResult]:
    """CP-P when fitted on source rows, CP-Q when fitted on labeled target rows."""
    return fit_baseline_cp(x, y, alpha, train_fraction, seed).predict(x_test, alpha)
