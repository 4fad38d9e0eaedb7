"""Command-line entry point: ``simulate``, ``predict`` and ``fit-weights``.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 when a run
fails (for example too many failed replications).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conformal import CputsConfig, fit_cputs
from .simulation import METHODS, ReplicationBudgetError, SimDesign, run_experiment
from .weights import fit_weights

logger = logging.getLogger("cputs")

MISSING_TOKENS = {"", "na", "nan", "null", "none"}
RIDGE_RANGE = (1e-6, 1e-4)
CURVE_POINTS = 200


class ValidationError(ValueError):
    """Bad flags or input files (exit code 1)."""


@dataclass
class Dataset:
    header: list[str]
    rows: np.ndarray
    response: str | None = None
    dropped: int = 0

    @property
    def covariate_names(self) -> list[str]:
        return [h for h in self.header if h != self.response]

    def covariates(self) -> np.ndarray:
        idx = [self.header.index(h) for h in self.covariate_names]
        return self.rows[:, idx]

    def response_values(self) -> np.ndarray:
        if self.response is None:
            raise ValidationError("dataset has no response column")
        return self.rows[:, self.header.index(self.response)]


def _parse(cell: str) -> float:
    if cell.strip().lower() in MISSING_TOKENS:
        return math.nan
    return float(cell)


def load_csv(path, response_column: str | None = None, optional_response: bool = False) -> Dataset:
    """Read a comma-separated file with a header row.

    Rows with an empty or non-numeric cell are dropped and counted.  With
    ``optional_response`` a missing response cell is kept as NaN instead, so
    a target file may be partly labeled.  A response column that is named
    but absent from the header is an error only when ``optional_response``
    is false.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or not any(h.strip() for h in header):
            raise ValidationError(f"{path}: header row missing")
        header = [h.strip() for h in header]
        try:
            [float(h) for h in header]
        except ValueError:
            pass
        else:
            raise ValidationError(f"{path}: header row missing")
        if response_column is not None and response_column not in header:
            if not optional_response:
                raise ValidationError(f"{path}: response column {response_column!r} not found")
            response_column = None
        resp_idx = header.index(response_column) if response_column is not None else -1
        rows, dropped = [], 0
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                dropped += 1
                continue
            try:
                vals = [_parse(c) for c in line]
            except ValueError:
                dropped += 1
                continue
            bad = [i for i, v in enumerate(vals) if not math.isfinite(v)]
            if bad and not (optional_response and bad == [resp_idx] and math.isnan(vals[resp_idx])):
                dropped += 1
                continue
            rows.append(vals)
    if dropped:
        logger.warning("%s: dropped %d row(s) with missing or non-numeric cells", path, dropped)
    if not rows:
        raise ValidationError(f"{path}: no usable rows")
    return Dataset(header, np.asarray(rows, dtype=float), response_column, dropped)


@dataclass
class RunConfig:
    """Fully resolved settings for one command; embedded in every report."""

    mode: str
    alpha: float = 0.1
    seed: int = 0
    methods: list[str] = field(default_factory=lambda: ["cputs", "cpp"])
    replications: int = 200
    shift: str = "location"
    model: str = "linear"
    n_p: int = 2000
    n_q_unlabeled: int = 1000
    n_q_labeled: int = 0
    n_test: int = 300
    jobs: int = 1
    source: str | None = None
    target: str | None = None
    test: str | None = None
    response: str = "y"
    out: str | None = None
    n_splines: int | None = None
    n_rbf: int | None = None
    kappa: int = 0
    delta: float = 1e-5
    rho: float = 1e-5
    clip_max: float = 20.0
    penalty: str = "ridge"
    train_fraction: float = 0.5
    grid_size: int = 400

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0,1)")
        for name in ("delta", "rho"):
            v = getattr(self, name)
            if not RIDGE_RANGE[0] <= v <= RIDGE_RANGE[1]:
                raise ValidationError(f"{name} must be in [{RIDGE_RANGE[0]:g}, {RIDGE_RANGE[1]:g}]")
        if self.n_splines is not None and self.n_splines < 4:
            raise ValidationError("--jn must be at least 4 for cubic splines")
        if self.n_rbf is not None and self.n_rbf < 1:
            raise ValidationError("--kn must be at least 1")
        if self.kappa != 0 and self.kappa < 3:
            raise ValidationError("--kappa must be 0 (auto) or at least 3")
        if not self.clip_max > 0:
            raise ValidationError("--clip must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("--split must be in (0,1)")
        if self.grid_size < 10:
            raise ValidationError("--grid must be at least 10")
        if self.mode == "simulate":
            unknown = [m for m in self.methods if m not in METHODS]
            if unknown or not self.methods:
                raise ValidationError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
            if self.replications < 1:
                raise ValidationError("--reps must be at least 1")
            if self.n_p < 4 or self.n_q_labeled < 0:
                raise ValidationError("invalid sample sizes")
            if "cpq" in self.methods and self.n_q_labeled < 4:
                raise ValidationError("cpq needs --nq-labeled of at least 4")
        else:
            needed = ("source", "target", "test") if self.mode == "predict" else ("source", "target")
            for name in needed:
                path = getattr(self, name)
                if path is None:
                    raise ValidationError(f"--{name} is required for {self.mode}")
                if not Path(path).is_file():
                    raise ValidationError(f"file not found: {path}")

    def cputs_config(self) -> CputsConfig:
        return CputsConfig(train_fraction=self.train_fraction, n_splines=self.n_splines,
                           n_rbf=self.n_rbf, kappa=self.kappa, kappa_target=self.kappa,
                           delta=self.delta, rho=self.rho, clip_max=self.clip_max,
                           penalty=self.penalty, grid_size=self.grid_size, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _config_line(config: RunConfig) -> str:
    return "# config " + json.dumps(config.to_dict(), sort_keys=True) + "\n"


def _write(path: str | None, text: str) -> None:
    if path is None:
        return
    Path(path).write_text(text, encoding="utf-8")


def cmd_simulate(config: RunConfig) -> int:
    design = SimDesign(config.shift, config.model, config.n_p, config.n_q_unlabeled,
                       config.n_q_labeled, config.n_test, config.seed)
    summaries = run_experiment(design, config.methods, config.replications, config.alpha,
                               config.cputs_config(), n_jobs=config.jobs)
    rows = [s.row() for s in summaries]
    columns = list(rows[0])
    table = _csv_text(columns, [[r[c] for c in columns] for r in rows])
    sys.stdout.write(table)
    failures = summaries[0].failures
    if failures:
        logger.warning("%d of %d replications failed and were excluded", failures, config.replications)
    if config.out:
        if config.out.endswith(".json"):
            # rows keep the table's column order; config keys are sorted for stable output
            report = {"config": dict(sorted(config.to_dict().items())), "failures": failures, "rows": rows}
            _write(config.out, json.dumps(report, indent=2) + "\n")
        else:
            _write(config.out, _config_line(config) + table)
    return 0


def _check_columns(reference: Dataset, other: Dataset, label: str) -> None:
    if other.covariate_names != reference.covariate_names:
        raise ValidationError(f"{label} covariate columns {other.covariate_names} "
                              f"do not match source columns {reference.covariate_names}")


def cmd_predict(config: RunConfig) -> int:
    source = load_csv(config.source, config.response)
    target = load_csv(config.target, config.response, optional_response=True)
    test = load_csv(config.test, config.response, optional_response=True)
    _check_columns(source, target, "target")
    _check_columns(source, test, "test")

    target_x = target.covariates()
    labeled_x = labeled_y = None
    if target.response is not None:
        ty = target.response_values()
        has = np.isfinite(ty)
        labeled_x, labeled_y = target_x[has], ty[has]
        target_x = target_x[~has]
        if len(target_x) == 0:
            target_x = labeled_x
    n_labeled = 0 if labeled_y is None else len(labeled_y)
    model = fit_cputs(source.covariates(), source.response_values(), target_x,
                      labeled_x, labeled_y, config=config.cputs_config())
    logger.info("Scenario %d: %d labeled target row(s), %d unlabeled target row(s)",
                model.scenario, n_labeled, len(target_x))

    results = model.predict(test.covariates(), config.alpha)
    test_y = test.response_values() if test.response is not None else np.full(len(results), np.nan)
    rows = []
    for i, (res, y) in enumerate(zip(results, test_y)):
        pv = "" if not np.isfinite(y) else f"{res.p_value_at(float(y)):.10g}"
        rows.append([i, res.format(), f"{res.length:.10g}", pv])
    text = _csv_text(["row_id", "intervals", "length", "p_value"], rows)
    if config.out:
        _write(config.out, _config_line(config) + text)
    else:
        sys.stdout.write(text)
    labeled = np.isfinite(test_y)
    if labeled.any():
        cov = np.mean([r.contains(float(y)) for r, y in zip(results, test_y) if np.isfinite(y)])
        logger.info("empirical coverage on %d labeled test rows: %.4f", int(labeled.sum()), cov)
    return 0


def cmd_fit_weights(config: RunConfig) -> int:
    source = load_csv(config.source, config.response)
    target = load_csv(config.target, config.response, optional_response=True)
    _check_columns(source, target, "target")
    sx, sy = source.covariates(), source.response_values()
    model = fit_weights(sx, sy, target.covariates(), n_splines=config.n_splines, n_rbf=config.n_rbf,
                        delta=config.delta, rho=config.rho, clip_max=config.clip_max,
                        penalty=config.penalty)
    grid = np.linspace(*model.basis.span, CURVE_POINTS)
    curve = model(grid)
    diag = float(np.mean(model.raw(sy)))
    rows = [[f"{y:.10g}", f"{w:.10g}"] for y, w in zip(grid, curve)]
    text = _csv_text(["y", "w"], rows) + f"# normalization mean_w_source={diag:.12f}\n"
    if config.out:
        _write(config.out, _config_line(config) + text)
    else:
        sys.stdout.write(text)
    logger.info("normalization diagnostic: mean of w over source responses = %.12f", diag)
    if not model.converged:
        logger.warning("weight solver did not converge")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cputs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="mode", required=True)

    def common(p):
        p.add_argument("--alpha", type=float, default=0.1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="report file (.json or .csv)")
        p.add_argument("--jn", dest="n_splines", type=int, default=None, help="number of B-splines")
        p.add_argument("--kn", dest="n_rbf", type=int, default=None, help="number of radial functions")
        p.add_argument("--kappa", type=int, default=0, help="quantile level count, 0 for auto")
        p.add_argument("--delta", type=float, default=1e-5)
        p.add_argument("--rho", type=float, default=1e-5)
        p.add_argument("--clip", dest="clip_max", type=float, default=20.0)
        p.add_argument("--penalty", choices=["ridge", "difference"], default="ridge",
                       help="coefficient penalty in the weight fit")
        p.add_argument("--split", dest="train_fraction", type=float, default=0.5)
        p.add_argument("--grid", dest="grid_size", type=int, default=400)

    sim = sub.add_parser("simulate", help="replicated synthetic experiment")
    common(sim)
    sim.add_argument("--shift", choices=["location", "location-scale", "location_scale"], default="location")
    sim.add_argument("--model", choices=["linear", "nonlinear"], default="linear")
    sim.add_argument("--np", dest="n_p", type=int, default=2000)
    sim.add_argument("--nq-labeled", dest="n_q_labeled", type=int, default=0)
    sim.add_argument("--reps", dest="replications", type=int, default=200)
    sim.add_argument("--methods", default="cputs,cpp")
    sim.add_argument("--jobs", type=int, default=1, help="parallel workers")

    for name, helptext in (("predict", "prediction sets for test rows"),
                           ("fit-weights", "estimated weight curve")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--source", required=True)
        p.add_argument("--target", required=True)
        if name == "predict":
            p.add_argument("--test", required=True)
        p.add_argument("--response", default="y")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {k: v for k, v in vars(args).items() if k != "verbose"}
    if "methods" in values:
        values["methods"] = [m.strip().lower().replace("-", "") for m in values["methods"].split(",") if m.strip()]
    if "shift" in values:
        values["shift"] = values["shift"].replace("-", "_")
    config = RunConfig(**values)
    config.validate()
    return config


def _configure_logging(verbose: bool) -> None:
    # one stderr handler on the package logger; records still propagate to root
    for h in [h for h in logger.handlers if getattr(h, "_cputs_cli", False)]:
        logger.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._cputs_cli = True
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


COMMANDS = {"simulate": cmd_simulate, "predict": cmd_predict, "fit-weights": cmd_fit_weights}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    _configure_logging(args.verbose)
    try:
        config = resolve_config(args)
        return COMMANDS[config.mode](config)
    except ReplicationBudgetError as exc:
        logger.error("%s", exc)
        return 2
    except ValidationError as exc:
        logger.error("%s", exc)
        return 1
    except (ValueError, RuntimeError, np.linalg.LinAlgError, ArithmeticError) as exc:
        logger.error("run failed: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
