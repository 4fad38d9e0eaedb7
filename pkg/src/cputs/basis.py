"""Basis families used by the weight estimator.

B-splines live on the response axis and model the likelihood-ratio weight;
Gaussian radial basis functions live on the covariate axis and model the
gap between the target covariate density and its reweighted source version.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

KNOT_MARGIN = 0.05


def _clipped_ceil(value: float, lo: int, hi: int) -> int:
    # round first so that e.g. 1000 ** (1/3) = 9.999999999999998 is treated as 10
    return int(min(hi, max(lo, math.ceil(round(value, 9)))))


def spline_count(n_train: int) -> int:
    """Number of B-spline functions, ``ceil(4.5 n^(1/5))`` clipped to [5, 25]."""
    return _clipped_ceil(4.5 * n_train ** 0.2, 5, 25)


def rbf_count(n_train: int) -> int:
    """Number of radial centers, ``ceil(n^(1/5))`` clipped to [5, 25]."""
    return _clipped_ceil(n_train ** 0.2, 5, 25)


@dataclass(frozen=True)
class SplineBasis:
    """B-spline basis of a given degree over a knot vector.

    The number of basis functions is ``len(knots) - degree - 1``.
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self) -> None:
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1:
            raise ValueError("knots must be one-dimensional")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if len(knots) < self.degree + 2:
            raise ValueError("need at least degree + 2 knots")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def count(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    def __call__(self, y) -> np.ndarray:
        return eval_spline(self, y)


def build_spline_basis(sample, count: int, degree: int = 3) -> SplineBasis:
    """Clamped, uniformly knotted B-spline basis covering ``sample``.

    The knot span is the sample range widened by 5% on each side so that
    responses near the edge of the training range still get positive weight.
    """
    sample = np.asarray(sample, dtype=float).ravel()
    if sample.size == 0:
        raise ValueError("empty response sample")
    if count < degree + 1:
        raise ValueError(f"count={count} must be at least degree + 1 = {degree + 1}")
    lo, hi = float(sample.min()), float(sample.max())
    if not hi > lo:
        raise ValueError("zero response range")
    margin = KNOT_MARGIN * (hi - lo)
    a, b = lo - margin, hi + margin
    n_interior = count - degree - 1
    interior = np.linspace(a, b, n_interior + 2)[1:-1]
    knots = np.concatenate([np.full(degree + 1, a), interior, np.full(degree + 1, b)])
    return SplineBasis(knots, degree)


def eval_spline(basis: SplineBasis, y) -> np.ndarray:
    """Evaluate all basis functions at ``y`` by the Cox-de Boor recursion.

    Returns an array of shape ``y.shape + (count,)``. Points outside the knot
    span evaluate to zero; the right end of the span belongs to the last
    nonempty knot interval.
    """
    y = np.asarray(y, dtype=float)
    shape = y.shape
    y = y.reshape(-1, 1)
    t = basis.knots
    d = basis.degree

    B = ((t[:-1] <= y) & (y < t[1:])).astype(float)
    nonempty = np.flatnonzero(t[:-1] < t[1:])
    if nonempty.size:
        at_end = y[:, 0] == t[-1]
        B[at_end, nonempty[-1]] = 1.0

    for k in range(1, d + 1):
        n_k = len(t) - 1 - k
        left_den = t[k:k + n_k] - t[:n_k]
        right_den = t[k + 1:k + 1 + n_k] - t[1:1 + n_k]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (y - t[:n_k]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[k + 1:k + 1 + n_k] - y) / right_den, 0.0)
        B = left * B[:, :n_k] + right * B[:, 1:n_k + 1]

    return B.reshape(shape + (basis.count,))


@dataclass(frozen=True)
class RbfBasis:
    """Gaussian radial basis ``exp(-|x - mu_k|^2 / (2 sigma^2))`` with a common width."""

    centers: np.ndarray
    bandwidth: float

    def __post_init__(self) -> None:
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim == 1:
            centers = centers[:, None]
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if len(np.unique(centers, axis=0)) != len(centers):
            raise ValueError("centers must be distinct")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __call__(self, x) -> np.ndarray:
        return eval_rbf(self, x)


def _as_rows(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None] if dim in (None, 1) else x[None, :]
    return x


def eval_rbf(basis: RbfBasis, x) -> np.ndarray:
    """Evaluate the radial functions at rows of ``x``; shape ``(n, K)``."""
    x = _as_rows(x, basis.dim)
    sq = ((x[:, None, :] - basis.centers[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-sq / (2.0 * basis.bandwidth ** 2))


def silverman_bandwidth(x) -> float:
    """Silverman's rule ``1.06 min(sd, IQR/1.349) n^(-1/5)``.

    For multivariate input the per-coordinate rules are averaged.
    """
    x = _as_rows(x)
    n = x.shape[0]
    sd = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    spread = np.minimum(sd, (q75 - q25) / 1.349)
    # fall back to sd when the IQR collapses (heavily tied data)
    spread = np.where(spread > 0, spread, sd)
    return float(np.mean(1.06 * spread * n ** (-0.2)))


def build_rbf_basis(covariates, count: int, bandwidth_sample=None, seed: int = 0) -> RbfBasis:
    """Place ``count`` centers over pooled covariates and pick a common width.

    Args:
        covariates: pooled source-training and target covariate rows.
        count: number of centers.
        bandwidth_sample: rows used for Silverman's rule (the source training
            covariates); defaults to ``covariates``.
        seed: k-means seed, only used when the covariates are multivariate.
    """
    x = _as_rows(covariates)
    if count < 1:
        raise ValueError("count must be at least 1")
    n_distinct = len(np.unique(x, axis=0))
    if count > n_distinct:
        raise ValueError(f"count={count} exceeds the {n_distinct} distinct covariate rows")
    if x.shape[1] == 1:
        levels = np.arange(1, count + 1) / (count + 1)
        centers = np.quantile(x[:, 0], levels)[:, None]
        if len(np.unique(centers)) < count:
            # heavy ties: fall back to distinct values spread over the sorted support
            uniq = np.unique(x[:, 0])
            idx = ((np.arange(count) + 0.5) * len(uniq) / count).astype(int)
            centers = uniq[idx][:, None]
    else:
        centers, _ = kmeans2(x, count, seed=seed, minit="++")
    sigma = silverman_bandwidth(x if bandwidth_sample is None else bandwidth_sample)
    return RbfBasis(centers, sigma)


def rbf_gram(basis: RbfBasis) -> np.ndarray:
    """Closed-form ``U = integral psi(x) psi(x)^T dx`` over R^p."""
    mu = basis.centers
    s2 = basis.bandwidth ** 2
    sq = ((mu[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
    return (math.pi * s2) ** (basis.dim / 2) * np.exp(-sq / (4.0 * s2))
