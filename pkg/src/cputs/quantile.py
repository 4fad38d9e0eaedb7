"""Linear conditional quantile regression and the fitted quantile process.

All levels are fitted jointly by an MM / IRLS scheme on a smoothed check
loss (Hunter & Lange, 2000), with the smoothing parameter annealed down to
1e-6.  Each IRLS step solves one small weighted least-squares system per level,
batched across levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

LEVEL_MARGIN = 0.005


def level_count(n_train: int) -> int:
    """Number of quantile levels, ``ceil(2 n^(1/3))`` clipped to [9, 25]."""
    return int(min(25, max(9, math.ceil(round(2.0 * n_train ** (1.0 / 3.0), 9)))))


def hall_sheather_bandwidth(n: int, tau, alpha: float = 0.05):
    """Hall-Sheather bandwidth for sparsity estimation at level ``tau``.

    ``h = n^(-1/3) z^(2/3) [1.5 phi(q)^2 / (2 q^2 + 1)]^(1/3)`` with
    ``q = Phi^-1(tau)`` and ``z = Phi^-1(1 - alpha/2)``, capped so that
    ``tau - h >= 0.005`` and ``tau + h <= 0.995``.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    tau = np.asarray(tau, dtype=float)
    q = norm.ppf(tau)
    z = norm.ppf(1.0 - alpha / 2.0)
    h = n ** (-1.0 / 3.0) * z ** (2.0 / 3.0) * (1.5 * norm.pdf(q) ** 2 / (2.0 * q ** 2 + 1.0)) ** (1.0 / 3.0)
    h = np.minimum(h, np.minimum(tau - LEVEL_MARGIN, 1.0 - LEVEL_MARGIN - tau))
    return float(h) if h.ndim == 0 else h


def check_loss(residuals, tau) -> np.ndarray:
    """Koenker-Bassett check loss summed over the last axis."""
    r = np.asarray(residuals, dtype=float)
    tau = np.asarray(tau, dtype=float)[..., None]
    return np.sum(r * (tau - (r < 0)), axis=-1)


def _design(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.hstack([np.ones((x.shape[0], 1)), x])


def fit_linear_quantiles(x, y, taus, eps_final: float = 1e-6, max_iter: int = 150,
                         tol: float = 1e-9) -> np.ndarray:
    """Fit ``y ~ 1 + x`` at each level in ``taus``; returns ``(len(taus), p + 1)``.

    The smoothed loss ``|r| ~ r^2 / (eps + |r|)`` is majorized at the current
    residuals and minimized by weighted least squares.  ``eps`` starts at a
    fraction of the response scale and shrinks geometrically to ``eps_final``.

    Covariate columns that are identically zero get a zero coefficient, so
    ``x = 0`` gives an intercept-only fit; any other rank deficiency is an
    error.
    """
    X_full = _design(x)
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != X_full.shape[0]:
        raise ValueError("x and y differ in length")
    keep = np.any(X_full != 0, axis=0)
    X = X_full[:, keep]
    n, k = X.shape
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} rows for {k - 1} covariates")
    if np.linalg.matrix_rank(X) < k:
        raise ValueError("rank-deficient design")
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if np.any((taus <= 0) | (taus >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")

    beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
    beta = np.tile(beta0, (len(taus), 1))
    offsets = (2.0 * taus - 1.0)[:, None] * X.sum(axis=0)[None, :]
    outer = (X[:, :, None] * X[:, None, :]).reshape(n, k * k)
    scale = float(np.std(y)) or 1.0
    eps = 1e-2 * scale
    eps_final = eps_final * scale
    for _ in range(max_iter):
        r = y[None, :] - beta @ X.T
        w = 1.0 / (eps + np.abs(r))
        lhs = (w @ outer).reshape(-1, k, k)
        rhs = (w * y[None, :]) @ X + offsets
        new = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        delta = np.max(np.abs(new - beta))
        beta = new
        if delta < tol * (1.0 + np.max(np.abs(beta))):
            if eps <= eps_final:
                break
        if eps > eps_final:
            eps = max(eps * 0.5, eps_final)
    out = np.zeros((len(taus), X_full.shape[1]))
    out[:, keep] = _polish(X, y, taus, beta)
    return out


def _polish(X, y, taus, beta) -> np.ndarray:
    """Snap each fit to the exact check-loss optimum near the IRLS solution.

    A linear quantile fit interpolates ``p + 1`` observations.  We take the
    observations with the smallest residuals, solve the interpolating system and
    keep it whenever it does not increase the check loss.
    """
    n, k = X.shape
    out = beta.copy()
    for l, tau in enumerate(taus):
        r = y - X @ beta[l]
        best = check_loss(r, tau)
        order = np.argsort(np.abs(r))
        for start in range(min(3, n - k + 1)):
            idx = order[start:start + k]
            sub = X[idx]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            cand = np.linalg.solve(sub, y[idx])
            loss = check_loss(y - X @ cand, tau)
            if loss <= best:
                out[l], best = cand, loss
                break
    return out


@dataclass(frozen=True)
class QuantileProcess:
    """Estimated conditional quantile curves on a level grid.

    ``levels`` are the anchor levels ``j / (kappa + 1)``; ``bandwidths`` the
    per-level Hall-Sheather widths; ``coef``, ``coef_lo`` and ``coef_hi`` hold
    the fits at ``tau``, ``tau - h`` and ``tau + h`` (intercept first).
    """

    levels: np.ndarray
    bandwidths: np.ndarray
    coef: np.ndarray
    coef_lo: np.ndarray
    coef_hi: np.ndarray
    n_train: int

    @property
    def kappa(self) -> int:
        return len(self.levels)

    def all_levels(self) -> tuple[np.ndarray, np.ndarray]:
        """Levels and coefficients of every fitted regression, sorted by level."""
        taus = np.concatenate([self.levels - self.bandwidths, self.levels, self.levels + self.bandwidths])
        coef = np.vstack([self.coef_lo, self.coef, self.coef_hi])
        order = np.argsort(taus, kind="stable")
        return taus[order], coef[order]

    def curves(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rearranged quantiles at ``tau``, ``tau - h`` and ``tau + h`` for each row of ``x``.

        Every fitted level is evaluated, the values are sorted per row
        (monotone rearrangement) and then read back at their level positions.
        Returns three arrays of shape ``(n_rows, kappa)``.
        """
        X = _design(x)
        taus, coef = self.all_levels()
        vals = np.sort(X @ coef.T, axis=1)
        k = self.kappa
        order = np.argsort(np.concatenate([self.levels - self.bandwidths, self.levels,
                                           self.levels + self.bandwidths]), kind="stable")
        pos = np.empty_like(order)
        pos[order] = np.arange(len(order))
        return vals[:, pos[k:2 * k]], vals[:, pos[:k]], vals[:, pos[2 * k:]]


def fit_quantile_process(x, y, kappa: int = 0) -> QuantileProcess:
    """Fit the quantile process at levels ``j / (kappa + 1)``.

    ``kappa=0`` picks the level count from the sample size.  Each anchor level
    gets two extra fits at ``tau -/+ h`` for the sparsity quotient.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = len(y)
    if kappa == 0:
        kappa = level_count(n)
    if kappa < 3:
        raise ValueError("kappa must be at least 3")
    levels = np.arange(1, kappa + 1) / (kappa + 1)
    h = hall_sheather_bandwidth(n, levels)
    coef = fit_linear_quantiles(x, y, np.concatenate([levels - h, levels, levels + h]))
    return QuantileProcess(levels, h, coef[kappa:2 * kappa], coef[:kappa], coef[2 * kappa:], n)


def eval_quantile(process: QuantileProcess, tau: float, x) -> np.ndarray:
    """Rearranged conditional quantile at a fitted level ``tau`` for rows of ``x``.

    ``tau`` must be one of the anchor levels or an anchor level shifted by its
    bandwidth.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    taus, coef = process.all_levels()
    hit = np.flatnonzero(np.isclose(taus, tau, rtol=0, atol=1e-12))
    if hit.size == 0:
        raise ValueError(f"level {tau} was not fitted")
    vals = np.sort(_design(x) @ coef.T, axis=1)
    return vals[:, hit[0]]


def rearrange(values) -> np.ndarray:
    """Monotone rearrangement of quantile values along the last axis."""
    return np.sort(np.asarray(values, dtype=float), axis=-1)
