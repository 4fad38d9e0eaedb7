"""Likelihood-ratio weight estimation by covariate distribution matching.

Under target shift the ratio ``q(x, y) / p(x, y)`` depends on ``y`` only.  We
expand ``w(y) = alpha^T B(y)`` in B-splines and pick ``alpha`` so that the
reweighted source covariate density matches the target covariate density,
where the mismatch is itself projected onto Gaussian radial functions.
Eliminating the radial coefficients leaves a small quadratic program in
``alpha``.

The matching term only sees ``alpha`` through ``K`` radial moments, so with
more splines than radial functions part of ``alpha`` is fixed by the penalty
alone.  The default ridge ``rho |alpha|^2`` shrinks those directions toward the
minimum-norm solution; ``penalty="difference"`` swaps in a second-difference
roughness penalty that shrinks them toward a straight line instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .basis import (
    RbfBasis,
    SplineBasis,
    build_rbf_basis,
    build_spline_basis,
    eval_rbf,
    eval_spline,
    rbf_count,
    rbf_gram,
    spline_count,
)

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
DEFAULT_RIDGE = 1e-5
DEFAULT_CLIP = 20.0
PENALTIES = ("ridge", "difference")


@dataclass(frozen=True)
class MatchingProblem:
    """Empirical ingredients of the matching objective.

    ``gram`` is U, ``cross`` the K x J matrix V-hat, ``target_mean`` u-hat and
    ``spline_mean`` the source-sample average of B(Y) used in the
    normalization constraint.  ``penalty`` is the matrix P in the
    ``rho * a^T P a`` term (the identity for the plain ridge).
    """

    gram: np.ndarray
    cross: np.ndarray
    target_mean: np.ndarray
    spline_mean: np.ndarray
    delta: float
    rho: float
    spline: SplineBasis
    rbf: RbfBasis
    quad: np.ndarray = field(repr=False)
    lin: np.ndarray = field(repr=False)
    penalty: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.penalty is None:
            object.__setattr__(self, "penalty", np.eye(len(self.spline_mean)))

    def objective(self, alpha) -> float:
        """``a^T V'(U+dI)^-1 V a - 2 u'(U+dI)^-1 V a + rho a^T P a``."""
        alpha = np.asarray(alpha, dtype=float)
        return float(alpha @ self.quad @ alpha - 2.0 * self.lin @ alpha
                     + self.rho * alpha @ self.penalty @ alpha)

    def gradient(self, alpha) -> np.ndarray:
        return 2.0 * (self.quad @ alpha + self.rho * self.penalty @ alpha - self.lin)


def penalty_matrix(kind: str, count: int) -> np.ndarray:
    """Identity for ``"ridge"``; ``D^T D`` with second differences ``D`` for ``"difference"``."""
    if kind == "ridge":
        return np.eye(count)
    if kind == "difference":
        d = np.diff(np.eye(count), 2, axis=0)
        return d.T @ d
    raise ValueError(f"unknown penalty {kind!r}; choose from {PENALTIES}")


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def assemble_matching(
    source_x,
    source_y,
    target_x,
    spline: SplineBasis,
    rbf: RbfBasis,
    delta: float = DEFAULT_RIDGE,
    rho: float = DEFAULT_RIDGE,
    penalty: str = "ridge",
) -> MatchingProblem:
    """Empirical matrices of the matching objective and their reduced QP form."""
    source_x, target_x = _as_2d(source_x), _as_2d(target_x)
    source_y = np.asarray(source_y, dtype=float).ravel()
    if len(source_y) == 0 or len(target_x) == 0:
        raise ValueError("source and target samples must be nonempty")
    if len(source_x) != len(source_y):
        raise ValueError("source covariates and responses differ in length")
    if source_x.shape[1] != rbf.dim or target_x.shape[1] != rbf.dim:
        raise ValueError("covariate dimension does not match the radial basis")
    for name, arr in (("source_x", source_x), ("source_y", source_y), ("target_x", target_x)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")

    psi_src = eval_rbf(rbf, source_x)
    b_src = eval_spline(spline, source_y)
    cross = psi_src.T @ b_src / len(source_y)
    target_mean = eval_rbf(rbf, target_x).mean(axis=0)
    spline_mean = b_src.mean(axis=0)
    gram = rbf_gram(rbf)

    factor = linalg.cho_factor(gram + delta * np.eye(rbf.count))
    solved = linalg.cho_solve(factor, cross)
    quad = cross.T @ solved
    quad = 0.5 * (quad + quad.T)
    lin = solved.T @ target_mean
    if not (np.all(np.isfinite(quad)) and np.all(np.isfinite(lin))):
        raise ValueError("matching objective is not finite")
    return MatchingProblem(gram, cross, target_mean, spline_mean, float(delta), float(rho),
                           spline, rbf, quad, lin, penalty_matrix(penalty, spline.count))


def project_feasible(v, b) -> np.ndarray:
    """Euclidean projection onto ``{a >= 0, b^T a = 1}`` for ``b >= 0``.

    The projection has the form ``a = max(v - lam * b, 0)``; ``lam`` is found
    exactly by scanning the sorted breakpoints ``v_i / b_i``.
    """
    v = np.asarray(v, dtype=float)
    b = np.asarray(b, dtype=float)
    if not np.any(b > 0):
        raise ValueError("normalization vector has no positive entry")
    # entries negligible against max(b) carry no constraint weight
    pos = b > 1e-12 * b.max()
    if not pos.any():
        raise ValueError("normalization vector has no positive entry")
    bp = v[pos] / b[pos]
    order = np.argsort(-bp, kind="stable")
    bs, vs, bps = b[pos][order], v[pos][order], bp[order]
    lam_k = (np.cumsum(bs * vs) - 1.0) / np.cumsum(bs * bs)
    k = np.flatnonzero(bps > lam_k)
    lam = lam_k[k[-1]] if k.size else lam_k[0]
    return np.maximum(v - lam * b, 0.0)


@dataclass(frozen=True)
class WeightModel:
    """Fitted weight ``w(y) = alpha^T B(y)``, clipped to ``[1e-8, clip_max]``."""

    alpha: np.ndarray
    basis: SplineBasis
    clip_max: float = DEFAULT_CLIP
    converged: bool = True
    n_iter: int = 0
    objective_trace: np.ndarray = field(default=None, repr=False)

    def raw(self, y) -> np.ndarray:
        return eval_spline(self.basis, y) @ self.alpha

    def __call__(self, y) -> np.ndarray:
        return eval_weight(self, y)


def eval_weight(model: WeightModel, y):
    out = np.clip(model.raw(y), WEIGHT_FLOOR, model.clip_max)
    return float(out) if np.ndim(out) == 0 else out


def _kkt_solve(hess, lin, b, free):
    """Minimize ``a^T H a - 2 l^T a`` over ``b^T a = 1`` on the ``free`` coordinates."""
    idx = np.flatnonzero(free)
    m = len(idx)
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = 2.0 * hess[np.ix_(idx, idx)]
    kkt[:m, m] = kkt[m, :m] = b[idx]
    rhs = np.append(2.0 * lin[idx], 1.0)
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    out = np.zeros(len(b))
    out[idx] = sol[:m]
    return out, sol[m]


def _active_set_polish(problem: MatchingProblem, alpha: np.ndarray, max_iter: int = 100):
    """Primal active-set refinement started from a feasible ``alpha``.

    The QP has at most a few dozen variables, so solving the equality
    constrained subproblem on the current support is cheap and lands on the
    exact optimum once the support is right.
    """
    hess = problem.quad + problem.rho * problem.penalty
    b = problem.spline_mean
    a = alpha.copy()
    free = a > 0
    for _ in range(max_iter):
        cand, nu = _kkt_solve(hess, problem.lin, b, free)
        if np.all(cand[free] >= 0):
            a = cand
            grad = 2.0 * (hess @ a - problem.lin) + nu * b
            viol = np.where(free, 0.0, grad)
            j = int(np.argmin(viol))
            if viol[j] >= -1e-12 * (1.0 + np.abs(grad).max()):
                return a
            free[j] = True
            continue
        # step toward the subproblem solution until a coordinate hits zero
        d = cand - a
        neg = free & (d < 0)
        ratios = a[neg] / -d[neg]
        t = min(1.0, float(ratios.min()))
        a = np.maximum(a + t * d, 0.0)
        hit = np.flatnonzero(neg)[np.argmin(ratios)]
        a[hit] = 0.0
        free = a > 0
        if not free.any():
            return None
    return None


def solve_weights(
    problem: MatchingProblem,
    clip_max: float = DEFAULT_CLIP,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> WeightModel:
    """Minimize the matching objective over ``{alpha >= 0, alpha^T b = 1}``.

    Projected gradient descent with a backtracking step, started from the
    constant weight function, stops when the objective changes by less than
    ``tol`` between iterations.  The iterate is then refined by an exact
    active-set step, kept only if it is feasible and lowers the objective.
    ``converged`` is false when neither stage reached its stopping rule; the
    best iterate is returned either way.
    """
    b = problem.spline_mean
    J = len(b)
    alpha = project_feasible(np.full(J, 1.0 / max(b.sum(), 1e-300)), b)
    f = problem.objective(alpha)
    trace = [f]
    curvature = 2.0 * np.linalg.eigvalsh(problem.quad + problem.rho * problem.penalty)[-1]
    step = 1.0 / curvature
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = problem.gradient(alpha)
        t = min(step * 2.0, 1e6 / curvature)
        while True:
            cand = project_feasible(alpha - t * g, b)
            diff = cand - alpha
            f_cand = problem.objective(cand)
            if f_cand <= f + g @ diff + (diff @ diff) / (2.0 * t) + 1e-15 or t < 1e-3 / curvature:
                break
            t *= 0.5
        step = t
        if f_cand > f:
            # numerical noise only; keep the monotone sequence
            converged = True
            break
        change = f - f_cand
        alpha, f = cand, f_cand
        trace.append(f)
        if change < tol:
            converged = True
            break

    polished = _active_set_polish(problem, alpha)
    if polished is not None:
        polished = np.maximum(polished, 0.0)
        polished /= polished @ b
        f_pol = problem.objective(polished)
        if f_pol <= f:
            alpha, f = polished, f_pol
            trace.append(f)
            converged = True
    if not converged:
        logger.warning("weight solver stopped after %d iterations without converging", it)
    return WeightModel(alpha, problem.spline, float(clip_max), converged, it, np.asarray(trace))


def fit_weights(
    source_x,
    source_y,
    target_x,
    n_splines: int | None = None,
    n_rbf: int | None = None,
    degree: int = 3,
    delta: float = DEFAULT_RIDGE,
    rho: float = DEFAULT_RIDGE,
    clip_max: float = DEFAULT_CLIP,
    penalty: str = "ridge",
) -> WeightModel:
    """Build both bases with the default sizing rules and solve for the weight.

    ``source_x``/``source_y`` are the source training rows; ``target_x`` holds
    every available target covariate row.
    """
    source_x, target_x = _as_2d(source_x), _as_2d(target_x)
    n = len(source_x)
    J = n_splines or spline_count(n)
    K = n_rbf or rbf_count(n)
    spline = build_spline_basis(source_y, J, degree)
    rbf = build_rbf_basis(np.vstack([source_x, target_x]), K, bandwidth_sample=source_x)
    problem = assemble_matching(source_x, source_y, target_x, spline, rbf, delta, rho, penalty)
    return solve_weights(problem, clip_max=clip_max)
