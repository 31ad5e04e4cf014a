import json

import numpy as np
import pytest

from kfpkit.coefficients import PiecewiseConstant
from kfpkit.geometry import chain, kolmogorov, parabolic
from kfpkit.kernel import KernelContext, constant_context
from kfpkit.verify import McConfig, SuiteResult, ball_volume_check, moment_check, run_suite, simulate_sde


@pytest.fixture(scope="module")
def pw():
    return KernelContext(kolmogorov(), PiecewiseConstant([0.3, 0.6], [[[0.5]], [[2.0]], [[1.0]]], nu=0.5))


def by_name(res):
    return {c.name: c for c in res.checks}


class TestMonteCarlo:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            McConfig(0, 10, 0, (0.0, 0.0), 0.0, 1.0)
        with pytest.raises(ValueError):
            McConfig(10, 10, 0, (0.0, 0.0), 1.0, 1.0)

    def test_deterministic_flow(self):
        ctx = constant_context(kolmogorov(), 1.0)
        cfg = McConfig(3, 100, 0, (1.0, -0.5), 0.0, 2.0)
        X = simulate_sde(ctx, cfg, noise=False)
        # B^2 = 0, so the Euler flow is exact
        assert np.allclose(X, ctx.drift.propagator(2.0) @ np.array([1.0, -0.5]), atol=1e-13)

    def test_deterministic_flow_first_order(self):
        ds = chain((1, 1, 1))
        ctx = constant_context(ds, 1.0)
        y = (1.0, 0.5, -0.3)
        exact = ds.propagator(1.0) @ np.array(y)
        errs = [np.max(np.abs(simulate_sde(ctx, McConfig(1, n, 0, y, 0.0, 1.0), noise=False)[0] - exact))
                for n in (100, 200, 400)]
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
        assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)

    def test_moments_pass(self, pw):
        cfg = McConfig(40_000, 200, 1, (1.0, -0.5), 0.0, 1.0)
        res = moment_check(simulate_sde(pw, cfg), pw, cfg, rel_cov=0.05)
        assert res.passed, res.dumps()
        assert by_name(res)["mc_ks_whitened"].status == "info"

    def test_wrong_sign_fails(self, pw):
        cfg = McConfig(40_000, 200, 1, (1.0, -0.5), 0.0, 1.0)
        res = moment_check(simulate_sde(pw, cfg, drift_sign=1.0), pw, cfg)
        assert by_name(res)["mc_mean"].status == "fail"

    def test_too_few_samples(self, pw):
        cfg = McConfig(1, 10, 0, (0.0, 0.0), 0.0, 1.0)
        with pytest.raises(ValueError):
            moment_check(np.zeros((0, 2)), pw, cfg)

    def test_batches_reproducible(self, pw):
        cfg = McConfig(5000, 20, 9, (0.0, 0.0), 0.0, 1.0, batch=1000)
        assert np.array_equal(simulate_sde(pw, cfg), simulate_sde(pw, cfg))

    def test_mean_error_rate(self):
        ctx = constant_context(kolmogorov(), 1.0)

        def rms(paths):
            e = [simulate_sde(ctx, McConfig(paths, 20, s, (0.0, 0.0), 0.0, 1.0)).mean(axis=0)
                 for s in range(12)]
            return float(np.sqrt(np.mean(np.square(e))))

        ratio = rms(8000) / rms(2000)
        assert 0.3 <= ratio <= 0.75

    @pytest.mark.slow
    def test_step_bias_within_noise(self, pw):
        a = simulate_sde(pw, McConfig(100_000, 500, 3, (1.0, -0.5), 0.0, 1.0))
        b = simulate_sde(pw, McConfig(100_000, 1000, 4, (1.0, -0.5), 0.0, 1.0))
        se = np.sqrt(a.var(axis=0) / len(a) + b.var(axis=0) / len(b))
        assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) <= 3 * se)
        ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
        assert np.max(np.abs(ca - cb) / np.abs(cb)) <= 0.03


class TestBall:
    def test_parabolic_slope(self):
        res = ball_volume_check(parabolic(1), [0.25, 0.5, 1.0], 500_000, seed=1)
        assert res.passed, res.dumps()
        assert by_name(res)["ball_slope"].value["slope"] == pytest.approx(3.0, abs=0.05)

    def test_kolmogorov_slope(self):
        res = ball_volume_check(kolmogorov(), [0.25, 0.5, 1.0], 1_000_000, seed=2)
        assert res.passed, res.dumps()
        assert by_name(res)["ball_slope"].value["slope"] == pytest.approx(6.0, abs=0.05)

    def test_needs_two_radii(self):
        with pytest.raises(ValueError):
            ball_volume_check(kolmogorov(), [1.0])


class TestSuite:
    def test_geometry_passes(self, pw):
        res = run_suite(pw, "geometry")
        assert res.passed and len(res.checks) > 0

    def test_empty(self, pw):
        res = run_suite(pw, [])
        assert isinstance(res, SuiteResult) and res.checks == [] and res.passed

    def test_unknown(self, pw):
        with pytest.raises(ValueError):
            run_suite(pw, ["nope"])

    def test_broken_nu(self, pw):
        res = run_suite(pw, ["kernel"], nu=0.9)
        bad = res.failures()
        assert not res.passed
        assert any(c.name == "gaussian_sandwich" and c.witness is not None for c in bad)

    def test_deterministic_json(self, pw):
        a = run_suite(pw, ["geometry", "kernel", "holder"], seed=5).dumps(include_timing=False)
        b = run_suite(pw, ["geometry", "kernel", "holder"], seed=5).dumps(include_timing=False)
        assert a == b
        rep = json.loads(a)
        assert rep["status"] == "pass"
        assert {"name", "status", "value", "tolerance"} <= set(rep["checks"][0])

    def test_timing_fields(self, pw):
        rep = run_suite(pw, ["geometry"]).to_json()
        assert all("seconds" in c for c in rep["checks"])

    @pytest.mark.slow
    def test_all(self, pw):
        res = run_suite(pw, "all", seed=0)
        assert res.passed, res.dumps()
