"""Conditional density estimators built from a quantile process.

The sparsity quotient ``2h / (xi(tau + h | x) - xi(tau - h | x))`` gives the
density at each anchor ``xi(tau | x)``; anchors are joined linearly and the
density decays to a floor beyond the outermost anchors.  A target density is
obtained from a source density by tilting with the weight ``w(y)`` and
renormalizing per ``x``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .quantile import QuantileProcess, fit_quantile_process

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-8
DENSITY_CAP = 1e6
MIN_SPACING = 1e-6
NORM_GRID_SIZE = 512
NORM_GRID_PAD = 0.10


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    return x[:, None] if x.ndim == 1 else x


def _per_row(x, y) -> tuple[np.ndarray, np.ndarray, bool]:
    """Broadcast ``y`` against the rows of ``x``.

    A 1-D ``y`` pairs one response with each row; a 2-D ``y`` gives each row
    its own set of responses.
    """
    x = _rows(x)
    y = np.asarray(y, dtype=float)
    paired = y.ndim <= 1
    y = np.broadcast_to(y.reshape(-1, 1) if paired else y, (x.shape[0], 1 if paired else y.shape[1]))
    return x, y, paired


@dataclass(frozen=True)
class QuotientAnchors:
    """Per-row anchor locations and densities; ``flagged`` marks capped spacings."""

    locations: np.ndarray
    values: np.ndarray
    flagged: np.ndarray


def quotient_anchors(process: QuantileProcess, x) -> QuotientAnchors:
    mid, lo, hi = process.curves(_rows(x))
    spacing = hi - lo
    flagged = spacing <= 0
    if flagged.any():
        logger.debug("%d degenerate quantile spacings capped", int(flagged.sum()))
    spacing = np.where(flagged, MIN_SPACING, spacing)
    dens = np.clip(2.0 * process.bandwidths[None, :] / spacing, DENSITY_FLOOR, DENSITY_CAP)
    return QuotientAnchors(mid, dens, flagged)


def _interp_rows(y, locs, vals, floor: float) -> np.ndarray:
    """Piecewise-linear density through anchors with linear decay in the tails."""
    n, k = locs.shape
    # strictly increasing anchors for np.interp; ties only arise from rearranged duplicates
    locs = locs + np.arange(k)[None, :] * 1e-12 * (1.0 + np.abs(locs))
    if k > 1:
        s_lo = locs[:, 1] - locs[:, 0]
        s_hi = locs[:, -1] - locs[:, -2]
    else:
        s_lo = s_hi = np.ones(n)
    knots = np.hstack([(locs[:, 0] - s_lo)[:, None], locs, (locs[:, -1] + s_hi)[:, None]])
    pad = np.full((n, 1), floor)
    heights = np.hstack([pad, vals, pad])
    out = np.empty(y.shape)
    for i in range(n):
        out[i] = np.interp(y[i], knots[i], heights[i], left=floor, right=floor)
    return out


class ConditionalDensity:
    """Base class: ``pdf(x, y)`` evaluates ``density(y | x)``."""

    floor = DENSITY_FLOOR

    def pdf(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, y) -> np.ndarray:
        return self.pdf(x, y)


@dataclass(frozen=True, eq=False)
class QuotientDensity(ConditionalDensity):
    """Source (or direct target) density interpolated along a quantile process."""

    process: QuantileProcess

    def anchors(self, x) -> QuotientAnchors:
        return quotient_anchors(self.process, x)

    def pdf(self, x, y) -> np.ndarray:
        x, yy, paired = _per_row(x, y)
        a = self.anchors(x)
        out = _interp_rows(yy, a.locations, a.values, self.floor)
        return out[:, 0] if paired else out


def quotient_density(process: QuantileProcess) -> QuotientDensity:
    return QuotientDensity(process)


def direct_target_density(x, y, kappa: int = 0) -> QuotientDensity:
    """Quotient density fitted directly on labeled target rows."""
    return QuotientDensity(fit_quantile_process(x, y, kappa))


def normalization_grid(span: tuple[float, float], size: int = NORM_GRID_SIZE,
                       pad: float = NORM_GRID_PAD) -> np.ndarray:
    a, b = span
    width = b - a
    return np.linspace(a - pad * width, b + pad * width, size)


@dataclass(frozen=True, eq=False)
class CorrectedDensity(ConditionalDensity):
    """``p(y|x) w(y) / integral p(t|x) w(t) dt``, integral by trapezoid on ``grid``."""

    source: ConditionalDensity
    weight: Callable
    grid: np.ndarray = field(repr=False)

    def normalizer(self, x) -> np.ndarray:
        x = _rows(x)
        g = np.broadcast_to(self.grid, (x.shape[0], len(self.grid)))
        z = trapezoid(self.source.pdf(x, g) * np.asarray(self.weight(self.grid))[None, :],
                      self.grid, axis=1)
        if np.any(z < 1e-12):
            raise ValueError("weight annihilates density")
        return z

    def pdf(self, x, y, normalizer=None) -> np.ndarray:
        x, yy, paired = _per_row(x, y)
        z = self.normalizer(x) if normalizer is None else normalizer
        out = self.source.pdf(x, yy) * np.asarray(self.weight(yy)) / z[:, None]
        out = np.maximum(out, self.floor)
        return out[:, 0] if paired else out


def target_correct(source: ConditionalDensity, weight: Callable, grid=None) -> CorrectedDensity:
    """Tilt a source conditional density by ``weight`` and renormalize per row.

    ``grid`` defaults to 512 points over the weight's knot span widened by 10%
    on each side; it must be given when ``weight`` has no spline basis.
    """
    if isinstance(source, CorrectedDensity):
        raise ValueError("source density is already weight-corrected")
    if grid is None:
        basis = getattr(weight, "basis", None)
        if basis is None:
            raise ValueError("a normalization grid is required for this weight")
        grid = normalization_grid(basis.span)
    grid = np.asarray(grid, dtype=float)
    grid.setflags(write=False)
    return CorrectedDensity(source, weight, grid)


__all__ = [
    "ConditionalDensity",
    "CorrectedDensity",
    "QuotientAnchors",
    "QuotientDensity",
    "direct_target_density",
    "normalization_grid",
    "quotient_anchors",
    "quotient_density",
    "target_correct",
]
