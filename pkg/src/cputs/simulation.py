"""Synthetic target-shift designs and replicated coverage experiments."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from joblib import Parallel, delayed

from .conformal import CputsConfig, fit_baseline_cp, fit_cputs

logger = logging.getLogger(__name__)

SHIFTS = {
    # (source mean, source sd, target mean, target sd)
    "location": (0.0, 1.0, 1.0, 1.0),
    "location_scale": (0.0, 1.5, 1.0, 0.5),
}
MODELS = ("linear", "nonlinear")
METHODS = ("cputs", "cpp", "cpq")
METHOD_LABELS = {"cputs": "CPUTS", "cpp": "CP-P", "cpq": "CP-Q"}
FAILURE_BUDGET = 0.02


def gen_skew_noise(n: int, shape: float = 15.0, rng=None) -> np.ndarray:
    """Skew-normal draws standardized to mean 0 and variance 1.

    Uses ``Z = d |Z1| + sqrt(1 - d^2) Z2`` with ``d = a / sqrt(1 + a^2)``.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    d = shape / math.sqrt(1.0 + shape * shape)
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    z = d * np.abs(z1) + math.sqrt(1.0 - d * d) * z2
    return (z - d * math.sqrt(2.0 / math.pi)) / math.sqrt(1.0 - 2.0 * d * d / math.pi)


@dataclass(frozen=True)
class SimDesign:
    shift: str = "location"
    model: str = "linear"
    n_p: int = 2000
    n_q_unlabeled: int = 1000
    n_q_labeled: int = 0
    n_test: int = 300
    seed: int = 0

    def __post_init__(self) -> None:
        shift = self.shift.replace("-", "_")
        if shift not in SHIFTS:
            raise ValueError(f"unknown shift {self.shift!r}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.n_p < 4 or self.n_q_unlabeled < 1 or self.n_test < 1 or self.n_q_labeled < 0:
            raise ValueError("invalid sample sizes")
        object.__setattr__(self, "shift", shift)

    @property
    def label(self) -> str:
        return f"{self.shift}/{self.model}"


@dataclass
class SimData:
    source_x: np.ndarray
    source_y: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    target_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def _covariates(y: np.ndarray, model: str, rng: np.random.Generator) -> np.ndarray:
    eps = gen_skew_noise(len(y), rng=rng)
    if model == "linear":
        return y + eps
    u = np.exp(y + rng.standard_normal(len(y)))
    return u + eps


def gen_design(design: SimDesign, rng=None) -> SimData:
    """Draw source, labeled target, unlabeled target and test rows.

    Every stream comes from one generator seeded by ``design.seed`` unless an
    explicit ``rng`` is passed.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(design.seed)
    mp, sp, mq, sq = SHIFTS[design.shift]

    def draw(n, mean, sd):
        y = mean + sd * rng.standard_normal(n)
        return _covariates(y, design.model, rng), y

    sx, sy = draw(design.n_p, mp, sp)
    lx, ly = draw(design.n_q_labeled, mq, sq)
    tx, _ = draw(design.n_q_unlabeled, mq, sq)
    ex, ey = draw(design.n_test, mq, sq)
    return SimData(sx, sy, lx, ly, tx, ex, ey)


def true_weight(shift: str):
    """Analytic ``q(y) / p(y)`` for a design's normal response laws."""
    mp, sp, mq, sq = SHIFTS[shift.replace("-", "_")]

    def w(y):
        y = np.asarray(y, dtype=float)
        return (sp / sq) * np.exp(-0.5 * ((y - mq) / sq) ** 2 + 0.5 * ((y - mp) / sp) ** 2)

    return w


def replication_seed(master: int, index: int) -> np.random.SeedSequence:
    """Counter-based per-replication seed, independent of execution order."""
    return np.random.SeedSequence([int(master), int(index)])


def _coverage(results, y) -> tuple[float, float]:
    covered = np.mean([r.contains(v) for r, v in zip(results, y)])
    length = np.mean([r.length for r in results])
    return float(covered), float(length)


def run_replication(design: SimDesign, methods, alpha: float, index: int, master_seed: int,
                    config: CputsConfig = CputsConfig(), oracle_weight: bool = False) -> dict:
    """One replication; returns ``{method: (coverage, avg_length)}``."""
    ss = replication_seed(master_seed, index)
    data_ss, split_ss = ss.spawn(2)
    data = gen_design(design, np.random.default_rng(data_ss))
    split_seed = int(split_ss.generate_state(1)[0])
    cfg = CputsConfig(**{**asdict(config), "seed": split_seed})
    out = {}
    for m in methods:
        if m == "cputs":
            w = true_weight(design.shift) if oracle_weight else None
            model = fit_cputs(data.source_x, data.source_y, data.target_x,
                              data.labeled_x, data.labeled_y, config=cfg, weight=w)
            res = model.predict(data.test_x, alpha)
        elif m == "cpp":
            res = fit_baseline_cp(data.source_x, data.source_y, alpha, seed=split_seed).predict(data.test_x, alpha)
        elif m == "cpq":
            if len(data.labeled_y) < 4:
                raise ValueError("CP-Q needs at least 4 labeled target rows")
            res = fit_baseline_cp(data.labeled_x, data.labeled_y, alpha, seed=split_seed).predict(data.test_x, alpha)
        else:
            raise ValueError(f"unknown method {m!r}")
        out[m] = _coverage(res, data.test_y)
    return out


def _safe_replication(*args, **kwargs):
    try:
        return run_replication(*args, **kwargs)
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("replication %s failed: %s", args[3], exc)
        return None


@dataclass(frozen=True)
class MethodSummary:
    method: str
    design: str
    n_p: int
    n_labeled: int
    coverage: float
    avg_length: float
    se_length: float
    replications: int
    failures: int

    def row(self) -> dict:
        return {
            "method": METHOD_LABELS.get(self.method, self.method),
            "design": self.design,
            "n_P": self.n_p,
            "n0": self.n_labeled,
            "CovP": round(100.0 * self.coverage, 4),
            "AL": round(self.avg_length, 6),
            "SE(AL)": round(self.se_length, 6),
        }


class ReplicationBudgetError(RuntimeError):
    """Raised when more than 2% of replications fail."""


def run_experiment(design: SimDesign, methods=("cputs", "cpp"), replications: int = 200,
                   alpha: float = 0.1, config: CputsConfig = CputsConfig(), n_jobs: int = 1,
                   oracle_weight: bool = False) -> list[MethodSummary]:
    """Replicate ``design`` and summarize coverage and average set length per method.

    Replication ``i`` is seeded from ``(design.seed, i)``, so serial and parallel
    runs give identical tables.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    methods = tuple(methods)
    jobs = (delayed(_safe_replication)(design, methods, alpha, i, design.seed, config, oracle_weight)
            for i in range(replications))
    if n_jobs == 1:
        results = [f(*a, **k) for f, a, k in jobs]
    else:
        results = Parallel(n_jobs=n_jobs)(jobs)
    ok = [r for r in results if r is not None]
    failures = replications - len(ok)
    if failures > FAILURE_BUDGET * replications or not ok:
        raise ReplicationBudgetError(f"{failures} of {replications} replications failed")
    summaries = []
    for m in methods:
        cov = np.array([r[m][0] for r in ok])
        al = np.array([r[m][1] for r in ok])
        se = float(al.std(ddof=1) / math.sqrt(len(al))) if len(al) > 1 else 0.0
        summaries.append(MethodSummary(m, design.label, design.n_p, design.n_q_labeled,
                                       float(cov.mean()), float(al.mean()), se, len(ok), failures))
    return summaries
