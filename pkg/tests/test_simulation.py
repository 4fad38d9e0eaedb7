from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import skew, skewnorm

import cputs.simulation as sim
from cputs.simulation import (
    MethodSummary,
    ReplicationBudgetError,
    SimDesign,
    gen_design,
    gen_skew_noise,
    replication_seed,
    run_experiment,
    run_replication,
    true_weight,
)


class TestSkewNoise:
    def test_constants(self):
        a = 15.0
        d = a / math.sqrt(1 + a * a)
        assert d == pytest.approx(15 / math.sqrt(226))
        assert d == pytest.approx(0.99779, abs=1e-5)
        mean, var = skewnorm.stats(a, moments="mv")
        assert d * math.sqrt(2 / math.pi) == pytest.approx(float(mean))
        assert math.sqrt(1 - 2 * d * d / math.pi) == pytest.approx(math.sqrt(float(var)))
        assert float(mean) == pytest.approx(0.7961, abs=5e-5)
        assert math.sqrt(float(var)) == pytest.approx(0.60519, abs=1e-4)

    def test_large_sample_moments(self):
        z = gen_skew_noise(10 ** 6, rng=np.random.default_rng(0))
        assert abs(z.mean()) < 0.005
        assert z.var() == pytest.approx(1.0, abs=0.01)
        oracle = float(skewnorm.stats(15.0, moments="s"))
        assert oracle == pytest.approx(0.9773, abs=1e-4)
        assert skew(z) > 0.9

    def test_reproducible(self):
        a = gen_skew_noise(10, rng=3)
        b = gen_skew_noise(10, rng=np.random.default_rng(3))
        assert np.array_equal(a, b)


class TestDesign:
    def test_location_means(self):
        d = gen_design(SimDesign("location", "linear", 1000, 1000, 0, seed=1))
        assert abs(d.target_x.mean() - d.source_x.mean() - 1.0) < 0.1
        assert abs(d.test_y.mean() - d.source_y.mean() - 1.0) < 0.2

    def test_location_scale_sd_ratio(self):
        d = gen_design(SimDesign("location-scale", "linear", 1000, 1000, 1000, seed=2))
        ratio = d.labeled_y.std() / d.source_y.std()
        assert abs(ratio / (1 / 3) - 1.0) < 0.15

    def test_nonlinear_tracks_exponential(self):
        d = gen_design(SimDesign("location", "nonlinear", 20000, 1, 0, seed=3))
        x, y = d.source_x, d.source_y
        assert np.corrcoef(x, np.exp(y))[0, 1] > np.corrcoef(x, y)[0, 1]
        # E[U | Y] = exp(Y + 1/2) for U ~ logNormal(Y, 1)
        slope = np.polyfit(np.exp(y + 0.5), x, 1)[0]
        assert slope == pytest.approx(1.0, abs=0.1)

    def test_sizes(self):
        d = gen_design(SimDesign("location", "linear", 50, 30, 7, n_test=11, seed=4))
        assert d.source_x.shape == (50,) and d.labeled_y.shape == (7,)
        assert d.target_x.shape == (30,) and d.test_y.shape == (11,)

    def test_validation(self):
        with pytest.raises(ValueError):
            SimDesign("scale")
        with pytest.raises(ValueError):
            SimDesign(model="quadratic")
        with pytest.raises(ValueError):
            SimDesign(n_p=2)
        assert SimDesign("location-scale").shift == "location_scale"

    def test_true_weight(self):
        w = true_weight("location")
        y = np.linspace(-3, 3, 13)
        assert np.allclose(w(y), np.exp(y - 0.5))
        ws = true_weight("location_scale")
        from scipy.stats import norm

        assert np.allclose(ws(y), norm.pdf(y, 1, 0.5) / norm.pdf(y, 0, 1.5))


class TestExperiment:
    def test_seed_counter(self):
        a = replication_seed(7, 3).generate_state(2)
        assert np.array_equal(a, replication_seed(7, 3).generate_state(2))
        assert not np.array_equal(a, replication_seed(7, 4).generate_state(2))

    def test_deterministic(self):
        design = SimDesign("location", "linear", 400, 200, 0, n_test=50, seed=5)
        a = run_experiment(design, ("cputs", "cpp"), 3)
        b = run_experiment(design, ("cputs", "cpp"), 3)
        assert [s.row() for s in a] == [s.row() for s in b]

    def test_serial_equals_parallel(self):
        design = SimDesign("location", "linear", 400, 200, 0, n_test=50, seed=6)
        a = run_experiment(design, ("cputs", "cpp"), 4, n_jobs=1)
        b = run_experiment(design, ("cputs", "cpp"), 4, n_jobs=2)
        assert a == b

    def test_summary_statistics(self):
        design = SimDesign("location", "linear", 300, 100, 0, n_test=40, seed=7)
        reps = [run_replication(design, ("cpp",), 0.1, i, design.seed) for i in range(5)]
        (summary,) = run_experiment(design, ("cpp",), 5)
        lengths = np.array([r["cpp"][1] for r in reps])
        assert summary.avg_length == pytest.approx(lengths.mean())
        assert summary.se_length == pytest.approx(lengths.std(ddof=1) / math.sqrt(5))
        assert summary.coverage == pytest.approx(np.mean([r["cpp"][0] for r in reps]))
        assert 0.0 <= summary.coverage <= 1.0

    def test_row_columns(self):
        s = MethodSummary("cputs", "location/linear", 2000, 0, 0.9, 2.2, 0.01, 200, 0)
        assert list(s.row()) == ["method", "design", "n_P", "n0", "CovP", "AL", "SE(AL)"]
        assert s.row()["method"] == "CPUTS"

    def test_failure_budget(self, monkeypatch):
        design = SimDesign("location", "linear", 300, 100, 0, n_test=20, seed=8)
        real = sim.run_replication

        def flaky(design, methods, alpha, index, *args, **kwargs):
            if index in fail:
                raise ValueError("degenerate replication")
            return real(design, methods, alpha, index, *args, **kwargs)

        monkeypatch.setattr(sim, "run_replication", flaky)
        fail = {0}
        (summary,) = run_experiment(design, ("cpp",), 50)
        assert summary.failures == 1 and summary.replications == 49
        fail = {0, 1}
        with pytest.raises(ReplicationBudgetError):
            run_experiment(design, ("cpp",), 50)

    def test_reps_validation(self):
        with pytest.raises(ValueError):
            run_experiment(SimDesign(), ("cpp",), 0)

    def test_cpq_requires_labels(self):
        with pytest.raises(ValueError):
            run_replication(SimDesign(n_p=200, n_q_unlabeled=50, n_test=10), ("cpq",), 0.1, 0, 0)


class TestTrends:
    @pytest.mark.parametrize("shift,bound", [("location", 0.85), ("location_scale", 0.94)])
    def test_cpp_miscalibration_direction(self, shift, bound):
        (s,) = run_experiment(SimDesign(shift, "linear", 2000, 1000, 0, seed=9), ("cpp",), 50)
        if shift == "location":
            assert s.coverage < bound
        else:
            assert s.coverage > bound

    @pytest.mark.slow
    @pytest.mark.parametrize("shift", ["location", "location_scale"])
    @pytest.mark.parametrize("model", ["linear", "nonlinear"])
    def test_length_shrinks_with_source_size(self, shift, model):
        (small,) = run_experiment(SimDesign(shift, model, 500, 1000, 0, seed=10), ("cputs",), 200)
        (large,) = run_experiment(SimDesign(shift, model, 4000, 1000, 0, seed=10), ("cputs",), 200)
        assert large.avg_length < small.avg_length
