from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.stats import norm, skewnorm

from cputs.density import (
    DENSITY_CAP,
    DENSITY_FLOOR,
    MIN_SPACING,
    ConditionalDensity,
    QuotientDensity,
    direct_target_density,
    normalization_grid,
    quotient_anchors,
    quotient_density,
    target_correct,
)
from cputs.quantile import QuantileProcess, fit_quantile_process
from cputs.simulation import gen_skew_noise
from cputs.weights import WeightModel, fit_weights


class GaussianLocation(ConditionalDensity):
    """Exact ``N(x, scale^2)`` conditional density, used as a normalized reference."""

    def __init__(self, scale=1.0, shift=0.0):
        self.scale, self.shift = scale, shift

    def pdf(self, x, y):
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float)
        if y.ndim <= 1:
            return norm.pdf(y, x + self.shift, self.scale)
        return norm.pdf(y, x[:, None] + self.shift, self.scale)


def intercept_process(levels, h, quantile):
    """Process whose quantile curves ignore ``x`` and follow ``quantile``."""
    levels = np.asarray(levels, dtype=float)
    h = np.full(len(levels), h)
    col = lambda t: np.column_stack([quantile(t), np.zeros(len(t))])
    return QuantileProcess(levels, h, col(levels), col(levels - h), col(levels + h), 1000)


class TestQuotient:
    def test_uniform_identity(self):
        proc = intercept_process(np.arange(1, 10) / 10, 0.04, lambda t: t)
        anchors = quotient_anchors(proc, np.zeros(3))
        assert np.allclose(anchors.values, 1.0)
        assert not anchors.flagged.any()

    def test_normal_value(self):
        proc = intercept_process([0.25, 0.5, 0.75], 0.05, norm.ppf)
        val = quotient_density(proc).pdf(np.zeros(1), np.zeros(1))[0]
        expected = 0.1 / (norm.ppf(0.55) - norm.ppf(0.45))
        assert val == pytest.approx(expected, rel=1e-12)
        assert val == pytest.approx(0.3979, abs=1e-4)
        assert norm.ppf(0.55) == pytest.approx(0.12566, abs=1e-5)

    def test_ties_are_capped_and_flagged(self):
        proc = intercept_process([0.25, 0.5, 0.75], 0.05, lambda t: np.where(np.abs(t - 0.5) < 0.06, 0.45, t))
        anchors = quotient_anchors(proc, np.zeros(1))
        assert anchors.flagged[0, 1]
        assert anchors.values[0, 1] == pytest.approx(min(0.1 / MIN_SPACING, DENSITY_CAP))
        assert not anchors.flagged[0, 0]

    def test_interpolation_and_tails(self):
        proc = intercept_process([0.25, 0.5, 0.75], 0.05, norm.ppf)
        dens = quotient_density(proc)
        a = quotient_anchors(proc, np.zeros(1))
        locs, vals = a.locations[0], a.values[0]
        mid = 0.5 * (locs[0] + locs[1])
        assert dens.pdf(np.zeros(1), np.array([mid]))[0] == pytest.approx(0.5 * (vals[0] + vals[1]))
        spacing = locs[2] - locs[1]
        half = locs[2] + 0.5 * spacing
        assert dens.pdf(np.zeros(1), np.array([half]))[0] == pytest.approx(0.5 * (vals[2] + DENSITY_FLOOR), rel=1e-6)
        assert dens.pdf(np.zeros(1), np.array([locs[2] + 2 * spacing]))[0] == DENSITY_FLOOR

    def test_shapes(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=300)
        dens = quotient_density(fit_quantile_process(x, x + rng.normal(size=300)))
        assert dens.pdf(x[:4], x[:4]).shape == (4,)
        assert dens.pdf(x[:4], np.zeros((4, 9))).shape == (4, 9)
        assert dens(x[:4], 0.0).shape == (4,)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(-30, 30))
    def test_bounds(self, seed, y):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=60)
        dens = quotient_density(fit_quantile_process(x, x ** 2 + rng.normal(size=60), kappa=9))
        v = dens.pdf(rng.normal(size=5) * 4, np.full(5, y))
        assert np.all(np.isfinite(v))
        assert np.all((v >= DENSITY_FLOOR) & (v <= DENSITY_CAP))

    def test_converges_for_gaussian_noise(self):
        def error(n, seed):
            rng = np.random.default_rng(seed)
            x = rng.uniform(-2, 2, n)
            dens = quotient_density(fit_quantile_process(x, x + rng.standard_normal(n)))
            xs = np.linspace(-1.5, 1.5, 20)
            errs = []
            for v in xs:
                g = np.linspace(v + norm.ppf(0.05), v + norm.ppf(0.95), 200)
                errs.append(np.max(np.abs(dens.pdf(np.full(1, v), g[None])[0] - norm.pdf(g, v))))
            return np.mean(errs)

        small = np.median([error(500, s) for s in range(5)])
        large = np.median([error(4000, s) for s in range(5)])
        assert large < small


class TestTargetCorrect:
    def test_identity_weight(self):
        src = GaussianLocation()
        grid = normalization_grid((-8.0, 8.0))
        corr = target_correct(src, lambda y: np.ones_like(np.asarray(y, dtype=float)), grid)
        x = np.array([-0.5, 0.0, 0.7])
        y = np.linspace(-3, 3, 50)
        assert np.allclose(corr.pdf(x, np.tile(y, (3, 1))), src.pdf(x, np.tile(y, (3, 1))), atol=1e-9)

    def test_identity_weight_renormalizes_quotient(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=500)
        src = quotient_density(fit_quantile_process(x, x + rng.normal(size=500)))
        ones = WeightModel(np.ones(10), fit_weights(x, x + 0.1, x, n_splines=10).basis)
        corr = target_correct(src, ones)
        xs = np.array([0.0, 0.5])
        y = np.linspace(-1, 1, 20)
        ratio = corr.pdf(xs, np.tile(y, (2, 1))) / src.pdf(xs, np.tile(y, (2, 1)))
        assert np.allclose(ratio, 1.0 / corr.normalizer(xs)[:, None], rtol=1e-9)

    def test_gaussian_tilting(self):
        src = GaussianLocation()
        grid = normalization_grid((-6.0, 7.0))
        corr = target_correct(src, lambda y: np.exp(np.asarray(y) - 0.5), grid)
        y = np.linspace(-3, 4, 141)
        got = corr.pdf(np.zeros(1), y[None])[0]
        assert np.max(np.abs(got - norm.pdf(y, 1.0))) <= 5e-3

    def test_normalizes_for_random_x(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=1000)
        y = x + rng.normal(size=1000)
        src = quotient_density(fit_quantile_process(x, y))
        w = fit_weights(x, y, x + 0.5)
        corr = target_correct(src, w)
        xs = rng.normal(size=100)
        vals = corr.pdf(xs, np.broadcast_to(corr.grid, (100, len(corr.grid))))
        mass = trapezoid(vals, corr.grid, axis=1)
        assert np.max(np.abs(mass - 1.0)) <= 1e-3

    def test_annihilating_weight(self):
        src = GaussianLocation()
        corr = target_correct(src, lambda y: np.full(np.shape(y), 1e-20), normalization_grid((-5, 5)))
        with pytest.raises(ValueError, match="weight annihilates density"):
            corr.pdf(np.zeros(1), np.zeros(1))

    def test_rejects_corrected_source(self):
        grid = normalization_grid((-5, 5))
        once = target_correct(GaussianLocation(), lambda y: np.ones(np.shape(y)), grid)
        with pytest.raises(ValueError):
            target_correct(once, lambda y: np.ones(np.shape(y)), grid)

    def test_grid_required_without_basis(self):
        with pytest.raises(ValueError):
            target_correct(GaussianLocation(), lambda y: np.ones(np.shape(y)))

    def test_default_grid(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=400)
        w = fit_weights(y, y, y)
        corr = target_correct(GaussianLocation(), w)
        lo, hi = w.basis.span
        assert len(corr.grid) == 512
        assert corr.grid[0] == pytest.approx(lo - 0.1 * (hi - lo))
        assert corr.grid[-1] == pytest.approx(hi + 0.1 * (hi - lo))

    def test_identity_weight_from_matched_samples(self):
        # weight fitted on identically distributed samples should leave p(y|x) unchanged
        rng = np.random.default_rng(4)
        n = 4000

        def draw(m):
            yy = rng.standard_normal(m)
            return yy + gen_skew_noise(m, rng=rng), yy

        sx, sy = draw(n)
        tx, _ = draw(n)
        src = quotient_density(fit_quantile_process(sx[:2000], sy[:2000]))
        w = fit_weights(sx[:2000], sy[:2000], tx)
        corr = target_correct(src, w)
        for v in (-1.0, 0.0, 1.0):
            g = corr.grid
            p = src.pdf(np.full(1, v), g[None])[0]
            p = p / trapezoid(p, g)
            q = corr.pdf(np.full(1, v), g[None])[0]
            lo, hi = np.interp([0.05, 0.95], np.cumsum(p) / p.sum(), g)
            central = (g >= lo) & (g <= hi)
            assert np.max(np.abs(q[central] / p[central] - 1.0)) <= 0.15


class TestDirectTarget:
    def test_same_data_same_density(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=300)
        y = x + rng.normal(size=300)
        a = direct_target_density(x, y)
        b = QuotientDensity(fit_quantile_process(x, y))
        g = np.linspace(-4, 4, 30)
        assert np.array_equal(a.pdf(x[:3], np.tile(g, (3, 1))), b.pdf(x[:3], np.tile(g, (3, 1))))

    def test_level_rule(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=100)
        assert direct_target_density(x, x + rng.normal(size=100)).process.kappa == 10

    def test_right_skew_mode(self):
        rng = np.random.default_rng(7)
        n = 4000
        x = rng.normal(size=n)
        y = x + gen_skew_noise(n, rng=rng)
        dens = direct_target_density(x, y)
        g = np.linspace(-3, 4, 2001)
        est_mode = g[np.argmax(dens.pdf(np.zeros(1), g[None])[0])]
        # true density of the standardized skew-normal, maximized on the same grid
        a = 15.0
        d = a / np.sqrt(1 + a * a)
        m, s = d * np.sqrt(2 / np.pi), np.sqrt(1 - 2 * d * d / np.pi)
        true_mode = g[np.argmax(skewnorm.pdf(g * s + m, a))]
        assert true_mode < 0.0
        assert est_mode < 0.0
        assert abs(est_mode - true_mode) < 0.35
