import math
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy.integrate import quad

from kfpkit.coefficients import CallableTime, PiecewiseConstant
from kfpkit.geometry import GroupPoint, chain, compose, dilate, invert, kolmogorov, parabolic
from kfpkit.kernel import (
    KernelContext,
    MultiIndex,
    PrecisionWarning,
    SandwichViolation,
    all_multi_indices,
    bound_envelope,
    constant_context,
    covariance,
    dump_kernel_csv,
    gamma,
    gamma_derivative,
    gamma_drift,
    integral_identity,
    residual_slope,
    sandwich_check,
    second_x_derivatives,
    whitened_nodes,
)


def gp(x, t):
    return GroupPoint(np.asarray(x, dtype=float), t)


def kolmo_cov_oracle(pieces, s, t):
    """Closed form for Kolmogorov: integrate c [[1, -u], [-u, u^2]] over u = t - sigma."""
    C = np.zeros((2, 2))
    for a, b, c in pieces:
        lo, hi = max(a, s), min(b, t)
        if lo >= hi:
            continue
        u0, u1 = t - hi, t - lo
        C += c * np.array([[u1 - u0, -(u1**2 - u0**2) / 2], [-(u1**2 - u0**2) / 2, (u1**3 - u0**3) / 3]])
    return C


@pytest.fixture
def kctx():
    return constant_context(kolmogorov(), 1.0)


@pytest.fixture
def pw_ctx():
    return KernelContext(kolmogorov(), PiecewiseConstant([0.4, 1.1], [[[0.5]], [[2.0]], [[1.0]]], nu=0.5))


class TestMultiIndex:
    def test_order_and_length(self):
        dil = kolmogorov().dilation
        a = MultiIndex((1, 2))
        assert a.length == 3 and a.order(dil) == 7 and a.key() == "1.2"
        assert MultiIndex.parse("2.0").order(dil) == 2

    def test_order_bounds(self):
        ds = chain((2, 1))
        for a in all_multi_indices(3, 3):
            w = a.order(ds.dilation)
            assert w >= a.length
            assert (w == a.length) == all(v == 0 for v in a.alpha[2:])

    def test_negative(self):
        with pytest.raises(ValueError):
            MultiIndex((1, -1))


class TestCovariance:
    @pytest.mark.parametrize("t", [0.1, 1.0, 5.0])
    def test_closed_form(self, kctx, t):
        cov = covariance(kctx, 0.0, t)
        ex = np.array([[t, -t * t / 2], [-t * t / 2, t**3 / 3]])
        assert np.max(np.abs(cov.C - ex) / np.abs(ex)) <= 1e-13
        assert math.exp(cov.log_det) == pytest.approx(t**4 / 12, rel=1e-13)
        assert np.allclose(cov.chol @ cov.chol.T, cov.C, rtol=1e-13, atol=0)

    def test_linear_in_coefficients(self, kctx):
        two = constant_context(kolmogorov(), 2.0)
        assert np.allclose(covariance(two, 0.3, 1.7).C, 2 * covariance(kctx, 0.3, 1.7).C, rtol=1e-15)

    @pytest.mark.parametrize("tau", [0.1, 1.0, 7.0])
    def test_homogeneity(self, tau):
        for ds in (kolmogorov(), chain((2, 1, 1))):
            ctx = constant_context(ds, 1.0)
            D = ds.dilation.matrix(math.sqrt(tau))
            lhs = covariance(ctx, 0.0, tau).C
            rhs = D @ covariance(ctx, 0.0, 1.0).C @ D
            assert np.max(np.abs(lhs - rhs) / np.abs(rhs).max()) <= 1e-12

    def test_piecewise_exact(self, pw_ctx):
        pieces = [(-10, 0.4, 0.5), (0.4, 1.1, 2.0), (1.1, 10, 1.0)]
        for s, t in [(0.0, 2.0), (0.5, 0.9), (-1.0, 0.4), (0.4, 1.1)]:
            C = covariance(pw_ctx, s, t).C
            ex = kolmo_cov_oracle(pieces, s, t)
            assert np.max(np.abs(C - ex)) <= 1e-13 * max(1.0, np.abs(ex).max())

    def test_callable_against_quad(self):
        a = lambda t: 1.0 + 0.5 * math.sin(3 * t)
        ctx = KernelContext(kolmogorov(), CallableTime(lambda t: np.array([[a(t)]]), 1))
        s, t = 0.2, 1.9
        ex = np.array([[quad(lambda r: a(r) * f(t - r), s, t, epsabs=0, epsrel=1e-13)[0]
                        for f in row] for row in
                       [[lambda u: 1.0, lambda u: -u], [lambda u: -u, lambda u: u * u]]])
        assert np.allclose(covariance(ctx, s, t).C, ex, rtol=1e-11, atol=0)

    def test_ordering(self, pw_ctx):
        nu = 0.5
        k0 = constant_context(kolmogorov(), 1.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            s, t = sorted(rng.uniform(-1, 3, 2))
            Ci = pw_ctx.covariance(s, t).solve(np.eye(2))
            C0i = k0.covariance(s, t).solve(np.eye(2))
            scale = np.abs(C0i).max()
            assert np.linalg.eigvalsh(Ci - nu * C0i).min() >= -1e-12 * scale
            assert np.linalg.eigvalsh(C0i / nu - Ci).min() >= -1e-12 * scale

    def test_errors(self, kctx):
        with pytest.raises(ValueError):
            covariance(kctx, 1.0, 1.0)

    def test_vanishes(self, kctx):
        assert np.abs(covariance(kctx, 0.0, 1e-8).C).max() <= 1e-8


class TestGamma:
    def test_zero_before(self, kctx):
        assert gamma(kctx, gp([0, 0], 0.0), gp([0, 0], 0.0)) == 0.0
        assert gamma(kctx, gp([0, 0], -1.0), gp([0, 0], 0.0)) == 0.0
        assert gamma_derivative(kctx, (1, 0), "x", gp([0, 0], -1.0), gp([0, 0], 0.0)) == 0.0

    def test_peak(self, kctx):
        y = np.array([0.3, -0.2])
        x = kolmogorov().propagator(1.0) @ y
        assert gamma(kctx, gp(x, 1.0), gp(y, 0.0)) == pytest.approx(math.sqrt(3) / (2 * math.pi), rel=1e-14)

    def test_peak_derivatives(self, kctx):
        xi, eta = gp([0.0, 0.0], 1.0), gp([0.0, 0.0], 0.0)
        for i in range(2):
            assert gamma_derivative(kctx, MultiIndex.unit(2, i), "x", xi, eta) == 0.0
        g = gamma(kctx, xi, eta)
        Ci = kctx.covariance(0.0, 1.0).solve(np.eye(2))
        for i in range(2):
            for j in range(2):
                h = gamma_derivative(kctx, MultiIndex.unit(2, i, j), "x", xi, eta)
                assert h == pytest.approx(-0.5 * Ci[i, j] * g, rel=1e-12)

    def test_one_dimensional_heat(self):
        ctx = constant_context(parabolic(1), 1.0)
        val = gamma(ctx, gp([0.7], 2.0), gp([0.1], 0.5))
        assert val == pytest.approx(math.exp(-0.36 / 6) / math.sqrt(6 * math.pi), rel=1e-14)

    def test_y_derivative(self, pw_ctx):
        xi, eta = gp([0.3, -0.4], 1.5), gp([0.1, 0.2], 0.2)
        h = 1e-5
        for i in range(2):
            e = np.eye(2)[i] * h
            fd = (gamma(pw_ctx, xi, gp(eta.x + e, eta.t)) - gamma(pw_ctx, xi, gp(eta.x - e, eta.t))) / (2 * h)
            assert gamma_derivative(pw_ctx, MultiIndex.unit(2, i), "y", xi, eta) == pytest.approx(fd, rel=1e-7)
        with pytest.raises(ValueError):
            gamma_derivative(pw_ctx, (1, 0), "z", xi, eta)

    def test_wrong_length(self, kctx):
        with pytest.raises(ValueError):
            gamma_derivative(kctx, (1, 0, 0), "x", gp([0, 0], 1.0), gp([0, 0], 0.0))

    def test_tiny_interval(self, kctx):
        eta = gp([0.0, 0.0], 0.0)
        assert gamma(kctx, gp([0.1, 0.0], 1e-300), eta) == 0.0
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            val = gamma(kctx, gp([0.0, 0.0], 1e-300), eta)
        assert val == math.inf
        assert any(issubclass(w.category, PrecisionWarning) for w in rec)


class TestDrift:
    def test_identity_q1(self, kctx):
        xi, eta = gp([0.2, 0.9], 1.3), gp([-0.1, 0.3], 0.1)
        d11 = gamma_derivative(kctx, (2, 0), "x", xi, eta)
        assert gamma_drift(kctx, xi, eta) == -d11

    def test_against_flow(self, pw_ctx):
        # Y is the derivative along h -> (E(-h) x, t - h)
        ds = kolmogorov()
        eta = gp([0.1, -0.2], 0.0)
        for x, t in [([0.4, 0.5], 0.9), ([-0.6, 1.0], 1.6), ([1.0, -1.0], 0.3)]:
            x = np.asarray(x)

            def G(h):
                return gamma(pw_ctx, gp(ds.propagator(-h) @ x, t - h), eta)

            d = [(G(h) - G(-h)) / (2 * h) for h in (1e-3, 5e-4)]
            rich = (4 * d[1] - d[0]) / 3
            assert gamma_drift(pw_ctx, gp(x, t), eta) == pytest.approx(rich, rel=1e-6)

    def test_integrates_to_zero(self, pw_ctx):
        x, t, s = np.array([0.3, 0.1]), 1.4, 0.2
        fk = pw_ctx.kernel_at(t, s)
        y, W = whitened_nodes(fk, x, 20)
        v = fk.v(x, y)
        Y = -np.einsum("ij,pij->p", pw_ctx.coeffs(t), second_x_derivatives(fk, v))
        assert abs(np.dot(W, Y)) <= 1e-7


class TestIdentities:
    @pytest.mark.parametrize("alpha,target", [((0, 0), 1.0), ((1, 0), 0.0), ((1, 1), 0.0), ((0, 2), 0.0)])
    def test_moments(self, pw_ctx, alpha, target):
        assert integral_identity(pw_ctx, alpha, np.array([0.5, -1.0]), 1.7, 0.1) == pytest.approx(target, abs=1e-8)

    def test_needs_order(self, kctx):
        with pytest.raises(ValueError):
            integral_identity(kctx, (0, 0), np.zeros(2), 0.0, 1.0)

    def test_convolution(self):
        ds = chain((2, 1))
        ctx = constant_context(ds, 0.7)
        rng = np.random.default_rng(5)
        for _ in range(30):
            xi = gp(rng.uniform(-1, 1, 3), rng.uniform(0.5, 2))
            eta = gp(rng.uniform(-1, 1, 3), rng.uniform(-1, 0.4))
            a = gamma(ctx, xi, eta)
            b = gamma(ctx, compose(ds, invert(ds, eta), xi), GroupPoint.origin(3))
            assert a == pytest.approx(b, rel=1e-12)

    def test_scaling(self, kctx):
        ds = kolmogorov()
        rng = np.random.default_rng(6)
        for _ in range(30):
            xi = gp(rng.uniform(-1, 1, 2), rng.uniform(0.2, 2))
            lam = rng.uniform(0.3, 3)
            a = gamma(kctx, dilate(ds, lam, xi), GroupPoint.origin(2))
            assert a == pytest.approx(lam ** -4 * gamma(kctx, xi, GroupPoint.origin(2)), rel=1e-12)


class TestBounds:
    def test_equality_case(self, kctx):
        rng = np.random.default_rng(0)
        x, y = rng.uniform(-1, 1, (50, 2)), rng.uniform(-1, 1, (50, 2))
        t, s = rng.uniform(1, 2, 50), rng.uniform(0, 1, 50)
        bad, _ = sandwich_check(kctx, 1.0, x, t, y, s)
        assert bad == 0

    def test_envelope(self, pw_ctx):
        rep = bound_envelope(pw_ctx, (1, 0), 0.5, sample_count=2000, seed=1, kappa=1.5)
        assert rep.sandwich_violations == 0
        assert 0 < rep.c_sup < np.inf and 0 < rep.mean_value_ratio < np.inf
        assert rep.admissible_triples > 100
        assert rep.c_sup >= rep.c_sup_half

    def test_broken_nu(self, pw_ctx):
        with pytest.raises(SandwichViolation) as exc:
            bound_envelope(pw_ctx, (0, 0), 0.9, sample_count=500)
        assert exc.value.witness is not None

    def test_mean_value_same_point(self, pw_ctx):
        xi, eta = gp([0.1, 0.2], 1.0), gp([0.0, 0.0], 0.0)
        a = gamma_derivative(pw_ctx, (1, 0), "x", xi, eta)
        assert a - gamma_derivative(pw_ctx, (1, 0), "x", xi, eta) == 0.0


class TestResidual:
    def test_slope(self, pw_ctx):
        slope, hs, res = residual_slope(pw_ctx, gp([0.3, 0.2], 0.9), gp([0.0, 0.0], 0.45))
        assert slope >= 1.9
        assert np.all(np.diff(res) < 0)


class TestConcurrencyAndCsv:
    def test_threads_agree(self, pw_ctx):
        rng = np.random.default_rng(2)
        pts = [(rng.uniform(-1, 1, 2), rng.uniform(1, 2), rng.uniform(-1, 1, 2), rng.uniform(0, 1))
               for _ in range(40)]
        f = lambda p: gamma_derivative(pw_ctx, (1, 1), "x", gp(p[0], p[1]), gp(p[2], p[3]))
        serial = [f(p) for p in pts]
        with ThreadPoolExecutor(4) as ex:
            assert list(ex.map(f, pts)) == serial

    def test_csv(self, kctx, tmp_path):
        out = tmp_path / "k.csv"
        rows = [([0.0, 0.0], 1.0, [0.0, 0.0], 0.0), ([0.5, 0.1], 0.5, [0.0, 0.0], 1.0)]
        dump_kernel_csv(kctx, rows, out, [MultiIndex((2, 0))])
        lines = out.read_text().splitlines()
        assert lines[0] == "x1,x2,t,y1,y2,s,gamma,2.0"
        assert float(lines[1].split(",")[6]) == pytest.approx(math.sqrt(3) / (2 * math.pi), rel=1e-16)
        assert lines[2].split(",")[6:] == ["0", "0"]
