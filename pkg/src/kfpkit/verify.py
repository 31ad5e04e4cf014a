"""Independent cross-checks and the check suite.

The Monte Carlo oracle simulates ``dX = -B X dsigma + sqrt(2 A_0(sigma)) dW``
from ``X_s = y``.  Its mean solves ``m' = -B m``, i.e. ``m(t) = E(t - s) y``, and
its covariance solves ``S' = -B S - S B^T + 2 A``, i.e. ``S(t) = 2 C(t, s)``: the
law of ``X_t`` is exactly ``Gamma(., t; y, s)``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .coefficients import PiecewiseConstant
from .geometry import (
    DriftStructure,
    GroupPoint,
    compose,
    dilate,
    estimate_kappa,
    hom_norm,
    invert,
    qdistance_arrays,
)
from .kernel import (
    KernelContext,
    MultiIndex,
    gamma,
    gamma_derivative,
    integral_identity,
    residual_slope,
    sandwich_check,
)


@dataclass(frozen=True)
class McConfig:
    paths: int
    steps: int
    seed: int
    y: tuple
    s: float
    t: float
    batch: int = 20_000

    def __post_init__(self):
        if self.paths < 1 or self.steps < 1:
            raise ValueError("paths and steps must be >= 1")
        if not self.t > self.s:
            raise ValueError("need t > s")


@dataclass
class Check:
    name: str
    status: str  # pass | fail | info
    value: object
    tolerance: object
    seconds: float = 0.0
    witness: dict | None = None

    def to_json(self, include_timing: bool = True) -> dict:
        d = {"name": self.name, "status": self.status, "value": _jsonable(self.value),
             "tolerance": _jsonable(self.tolerance)}
        if include_timing:
            d["seconds"] = self.seconds
        if self.witness is not None:
            d["witness"] = _jsonable(self.witness)
        return d


@dataclass
class SuiteResult:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def extend(self, other: "SuiteResult") -> "SuiteResult":
        self.checks.extend(other.checks)
        return self

    def failures(self) -> list:
        return [c for c in self.checks if c.status == "fail"]

    def to_json(self, include_timing: bool = True) -> dict:
        return {"status": "pass" if self.passed else "fail",
                "checks": [c.to_json(include_timing) for c in self.checks]}

    def dumps(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_json(include_timing), indent=2, sort_keys=True)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _timed(name, fn):
    t0 = time.perf_counter()
    status, value, tol, *rest = fn()
    return Check(name, status, value, tol, time.perf_counter() - t0, rest[0] if rest else None)


# -- Monte Carlo --------------------------------------------------------------


def _noise_factor(A: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(2.0 * A)


def simulate_sde(ctx: KernelContext, cfg: McConfig, drift_sign: float = -1.0,
                 noise: bool = True) -> np.ndarray:
    """Euler-Maruyama samples of ``X_t`` (shape ``(paths, N)``).

    ``drift_sign = +1`` flips the drift and serves as a negative control.
    Paths are split into batches with independent child seeds, so the result
    depends only on ``cfg``.
    """
    N, q = ctx.N, ctx.drift.q
    B = ctx.drift.B
    h = (cfg.t - cfg.s) / cfg.steps
    step = np.eye(N) + drift_sign * h * B
    grid = cfg.s + h * np.arange(cfg.steps)
    coeffs = ctx.coeffs
    if isinstance(coeffs, PiecewiseConstant):
        factors = [_noise_factor(A) for A in coeffs.matrices]
        idx = coeffs.piece_index(grid)
        Ls = [factors[i] for i in idx]
    else:
        Ls = [_noise_factor(coeffs(s)) for s in grid]
    y = np.asarray(cfg.y, dtype=float)
    sizes = [min(cfg.batch, cfg.paths - k) for k in range(0, cfg.paths, cfg.batch)]
    children = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    out = []
    sq = math.sqrt(h)
    for n, ss in zip(sizes, children):
        rng = np.random.default_rng(ss)
        X = np.tile(y, (n, 1))
        for L in Ls:
            X = X @ step.T
            if noise:
                X[:, :q] += sq * rng.standard_normal((n, q)) @ L.T
        out.append(X)
    return np.concatenate(out)


def moment_check(samples: np.ndarray, ctx: KernelContext, cfg: McConfig, rel_cov: float = 0.05,
                 n_se: float = 3.0) -> SuiteResult:
    """Sample mean against ``E(t - s) y`` (``n_se`` standard errors) and sample
    covariance against ``2 C(t, s)`` (relative ``rel_cov``); KS on whitened
    marginals is informational."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n < 2:
        raise ValueError("moment_check needs at least two samples")
    mean = ctx.drift.propagator(cfg.t - cfg.s) @ np.asarray(cfg.y, dtype=float)
    cov = ctx.covariance(cfg.s, cfg.t)
    target = 2.0 * cov.C
    m_hat = samples.mean(axis=0)
    S_hat = np.cov(samples, rowvar=False).reshape(ctx.N, ctx.N)
    se = np.sqrt(np.diag(S_hat) / n)
    z = np.abs(m_hat - mean) / se
    res = SuiteResult()
    res.checks.append(Check("mc_mean", "pass" if np.all(z <= n_se) else "fail",
                            {"mean": m_hat, "target": mean, "z": z}, n_se))
    scale = np.sqrt(np.outer(np.diag(target), np.diag(target)))
    # entries that vanish are compared against the diagonal scale instead
    ref = np.where(np.abs(target) > 1e-3 * scale, np.abs(target), scale)
    rel = np.abs(S_hat - target) / ref
    res.checks.append(Check("mc_covariance", "pass" if np.all(rel <= rel_cov) else "fail",
                            {"max_rel": float(np.max(rel)), "cov": S_hat, "target": target}, rel_cov))
    w = (samples - mean) @ np.linalg.inv(math.sqrt(2.0) * cov.chol).T
    pvals = [float(stats.kstest(w[:, i], "norm").pvalue) for i in range(ctx.N)]
    res.checks.append(Check("mc_ks_whitened", "info", pvals, 0.05))
    return res


# -- ball volume --------------------------------------------------------------


def _ball_hits(ds: DriftStructure, xi: GroupPoint, r, rng, n, chunk=1_000_000):
    """Monte Carlo volume of ``{eta : d(eta, xi) < r}`` for each radius in ``r``."""
    r = np.asarray(r, dtype=float)
    R = float(np.max(r))
    qexp = np.asarray(ds.dilation.q, dtype=float)
    # eta = (E(s - t) x + w, s), ||w|| < R - sqrt|s - t|
    ss = xi.t + np.linspace(-R * R, R * R, 401)
    centers = np.einsum("kij,j->ki", ds.propagator(ss - xi.t), xi.x)
    lo = centers.min(axis=0) - R**qexp
    hi = centers.max(axis=0) + R**qexp
    # the centre curve is polynomial; pad by a grid-spacing margin
    pad = 0.01 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    tlo, thi = xi.t - R * R, xi.t + R * R
    vol_box = float(np.prod(hi - lo) * (thi - tlo))
    hits = np.zeros(len(r))
    done = 0
    while done < n:
        m = min(chunk, n - done)
        u = rng.random((m, ds.N + 1))
        y = lo + u[:, :-1] * (hi - lo)
        s = tlo + u[:, -1] * (thi - tlo)
        d = qdistance_arrays(ds, y, s, np.broadcast_to(xi.x, y.shape), np.full(m, xi.t))
        hits += np.sum(d[:, None] < r[None, :], axis=0)
        done += m
    frac = hits / n
    return frac * vol_box, np.sqrt(frac * (1 - frac) / n) * vol_box


def _origin_ball(ds: DriftStructure, r, rng, n, chunk=1_000_000):
    """Volume of ``{rho < r}`` for each radius, sampled through the map
    ``|y_i| = w_i^q_i``, ``|s| = w^2`` with ``w`` uniform on ``[0, r]``; each sample
    carries the Jacobian.

    Every radius gets its own proposal and its own draws, so the hit rate does not
    decay at small radii and the estimates are independent.
    """
    r = np.asarray(r, dtype=float)
    N = ds.N
    qexp = np.append(np.asarray(ds.dilation.q, dtype=float), 2.0)
    vol = np.zeros(len(r))
    se = np.zeros(len(r))
    for k, R in enumerate(r):
        acc = acc2 = 0.0
        done = 0
        while done < n:
            m = min(chunk, n - done)
            w = R * rng.random((m, N + 1))
            z = w**qexp
            jac = np.prod(qexp * w ** (qexp - 1), axis=1)
            d = qdistance_arrays(ds, z[:, :N], z[:, N], np.zeros((m, N)), np.zeros(m))
            vals = np.where(d < R, jac, 0.0)
            acc += vals.sum()
            acc2 += (vals**2).sum()
            done += m
        scale = (2.0 * R) ** (N + 1)
        mean = acc / n
        vol[k] = scale * mean
        se[k] = scale * math.sqrt(max(acc2 / n - mean**2, 0.0) / n)
    return vol, se


def ball_volume_check(ds: DriftStructure, r_list: Sequence[float], mc_samples: int = 4_000_000,
                      seed: int = 0, slope_tol: float = 0.05) -> SuiteResult:
    """Log-log slope of ``|B_r|`` against ``r`` (expected ``Q + 2``), plus the volume
    of a ball at a random second centre compared with the one at the origin."""
    r = np.asarray(r_list, dtype=float)
    if len(r) < 2 or np.any(r <= 0):
        raise ValueError("need at least two positive radii")
    rng = np.random.default_rng(seed)
    res = SuiteResult()
    t0 = time.perf_counter()
    vol, se = _origin_ball(ds, r, rng, mc_samples)
    if np.any(vol <= 0):
        res.checks.append(Check("ball_slope", "fail", {"volumes": vol}, slope_tol))
        return res
    slope, icpt = np.polyfit(np.log(r), np.log(vol), 1)
    target = ds.dilation.Q + 2
    resid = np.log(vol) - (slope * np.log(r) + icpt)
    res.checks.append(Check("ball_slope", "pass" if abs(slope - target) <= slope_tol else "fail",
                            {"slope": float(slope), "target": target, "volumes": vol,
                             "max_log_residual": float(np.max(np.abs(resid)))},
                            slope_tol, time.perf_counter() - t0))
    t0 = time.perf_counter()
    xi = GroupPoint(rng.uniform(-1, 1, ds.N), float(rng.uniform(-1, 1)))
    R = r[-1:]
    # plain uniform sampling in a box here, independent of the estimator above
    v2, se2 = _ball_hits(ds, xi, R, rng, mc_samples)
    z = abs(v2[0] - vol[-1]) / math.hypot(se2[0], se[-1])
    res.checks.append(Check("ball_translation", "pass" if z <= 4.0 else "fail",
                            {"origin": float(vol[-1]), "shifted": float(v2[0]), "z": float(z),
                             "center": [xi.x.tolist(), xi.t]}, 4.0, time.perf_counter() - t0))
    return res


# -- suite --------------------------------------------------------------------

SUITES = ("geometry", "kernel", "solver", "cancellation", "holder", "mc", "ball")


def _geometry_checks(ctx: KernelContext, rng) -> list:
    ds = ctx.drift
    N = ds.N
    dil = ds.dilation

    def prop_hom():
        err = 0.0
        for _ in range(100):
            lam, t = rng.uniform(0.2, 3.0), rng.uniform(-2, 2)
            lhs = ds.propagator(lam**2 * t)
            rhs = dil.matrix(lam) @ ds.propagator(t) @ dil.matrix(1 / lam)
            err = max(err, float(np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(lhs)))))
        return ("pass" if err <= 1e-12 else "fail", err, 1e-12)

    def group():
        err = 0.0
        for _ in range(100):
            a, b, c = (GroupPoint(rng.uniform(-2, 2, N), rng.uniform(-2, 2)) for _ in range(3))
            l = compose(ds, compose(ds, a, b), c)
            r_ = compose(ds, a, compose(ds, b, c))
            e = compose(ds, invert(ds, a), a)
            sc = 1.0 + np.max(np.abs(l.x))
            err = max(err, np.max(np.abs(l.x - r_.x)) / sc, abs(l.t - r_.t),
                      np.max(np.abs(e.x)) / (1 + np.max(np.abs(a.x))), abs(e.t))
        return ("pass" if err <= 1e-12 else "fail", float(err), 1e-12)

    def rho_hom():
        err = 0.0
        for _ in range(100):
            xi = GroupPoint(rng.uniform(-2, 2, N), rng.uniform(-2, 2))
            lam = rng.uniform(0.2, 3.0)
            lhs = hom_norm(ds, dilate(ds, lam, xi))
            err = max(err, abs(lhs - lam * hom_norm(ds, xi)) / lhs)
        return ("pass" if err <= 1e-12 else "fail", float(err), 1e-12)

    def kappa():
        k = estimate_kappa(ds, 2000, seed=int(rng.integers(2**31)))
        return ("info", {"kappa_hat": k.kappa_hat, "vartheta_hat": k.vartheta_hat}, None)

    return [_timed("propagator_homogeneity", prop_hom), _timed("group_axioms", group),
            _timed("rho_homogeneity", rho_hom), _timed("kappa_estimate", kappa)]


def _kernel_checks(ctx: KernelContext, nu: float, rng) -> list:
    N = ctx.N
    pts = [(rng.uniform(-1, 1, N), *sorted(rng.uniform(0, 2, 2))[::-1]) for _ in range(5)]

    def normalization():
        err = max(abs(integral_identity(ctx, (0,) * N, x, t, s) - 1.0) for x, t, s in pts)
        return ("pass" if err <= 1e-8 else "fail", err, 1e-8)

    def moments():
        err = 0.0
        for a in [MultiIndex.unit(N, i) for i in range(N)] + [MultiIndex.unit(N, 0, 0)]:
            for x, t, s in pts[:2]:
                err = max(err, abs(integral_identity(ctx, a, x, t, s)))
        return ("pass" if err <= 1e-8 else "fail", err, 1e-8)

    def sandwich():
        n = 2000
        x = rng.uniform(-2, 2, (n, N))
        y = rng.uniform(-2, 2, (n, N))
        ts = rng.uniform(0, 2, (n, 2))
        t, s = ts.max(axis=1), ts.min(axis=1)
        bad, wit = sandwich_check(ctx, nu, x, t, y, s)
        return ("pass" if bad == 0 else "fail", bad, 0, wit)

    def derivatives():
        err = 0.0
        for x, t, s in pts[:3]:
            y = rng.uniform(-1, 1, N)
            xi, eta = GroupPoint(x, t), GroupPoint(y, s)
            for i in range(N):
                h = 1e-4 * max(1.0, abs(x[i]))
                e = np.eye(N)[i] * h
                fd = (gamma(ctx, GroupPoint(x + e, t), eta) - gamma(ctx, GroupPoint(x - e, t), eta)) / (2 * h)
                an = gamma_derivative(ctx, MultiIndex.unit(N, i), "x", xi, eta)
                err = max(err, abs(fd - an) / max(abs(an), 1e-3))
        return ("pass" if err <= 1e-5 else "fail", err, 1e-5)

    def residual():
        s = 0.0
        t = 1.0
        br = ctx.coeffs.breakpoints_in(s - 1.0, t + 1.0)
        if br:
            # stay inside the piece containing t
            b = [x for x in br if x > t - 0.2]
            t = (min(b) - 0.1) if b and min(b) < t + 0.1 else t
        slope, _, _ = residual_slope(ctx, GroupPoint(np.full(N, 0.3), t), GroupPoint(np.zeros(N), s),
                                     steps=(0.04, 0.02, 0.01, 0.005))
        return ("pass" if slope >= 1.9 else "fail", slope, 1.9)

    return [_timed("kernel_normalization", normalization), _timed("kernel_vanishing_moments", moments),
            _timed("gaussian_sandwich", sandwich), _timed("kernel_derivative_fd", derivatives),
            _timed("pde_residual_slope", residual)]


def _solver_checks(ctx: KernelContext, rng) -> list:
    from .solver import TimeWindow, duhamel, manufactured_family, SourceField

    N = ctx.N
    win = TimeWindow(0.0, 1.5)
    X = rng.uniform(-0.5, 0.5, (3, N))

    def ftc():
        f = SourceField(lambda Y, s: -2 * s * np.ones(len(Y)), tau=0.0)
        err = float(np.max(np.abs(duhamel(ctx, f, win, X, 1.2) - 1.2**2)))
        return ("pass" if err <= 1e-8 else "fail", err, 1e-8)

    def round_trip():
        err = 0.0
        for ms in manufactured_family(ctx.drift, 2, seed=int(rng.integers(2**31))):
            u = ms.u(X, 1.2)
            err = max(err, float(np.max(np.abs(duhamel(ctx, ms.source(ctx.coeffs), win, X, 1.2) - u))
                                 / np.max(np.abs(u))))
        return ("pass" if err <= 1e-3 else "fail", err, 1e-3)

    return [_timed("duhamel_fundamental_theorem", ftc), _timed("duhamel_round_trip", round_trip)]


def _cancellation_checks(ctx: KernelContext) -> list:
    from .solver import cancellation_integral

    def flat():
        rs = [2.0**k for k in range(-4, 2)]
        vals = [cancellation_integral(ctx, np.zeros(ctx.N), 10.0, 0.0, r, cells=16) for r in rs]
        spread = max(vals) / min(vals) if min(vals) > 0 else math.inf
        ok = np.all(np.isfinite(vals)) and spread <= 3.0
        return ("pass" if ok else "fail", {"values": vals, "spread": spread}, 3.0)

    return [_timed("cancellation_flatness", flat)]


def _holder_checks(ctx: KernelContext, alpha: float, rng) -> list:
    from .holder import box_grid, schauder_ratio
    from .solver import manufactured_family

    def ratios():
        N = ctx.N
        X = box_grid([[-1.5, 1.5]] * N, 7 if N <= 2 else 4)
        vals = []
        for ms in manufactured_family(ctx.drift, 3, seed=int(rng.integers(2**31))):
            rep = schauder_ratio(ctx.drift, ctx.coeffs, ms, alpha, X, [0.5, 1.0])
            vals.append(rep.ratio)
        ok = all(math.isfinite(v) and v > 0 for v in vals)
        return ("pass" if ok else "fail", vals, "finite")

    return [_timed("schauder_ratio_finite", ratios)]


def _mc_checks(ctx: KernelContext, seed: int) -> list:
    cfg = McConfig(paths=20_000, steps=200, seed=seed, y=tuple([0.5] * ctx.N), s=0.0, t=1.0)
    t0 = time.perf_counter()
    res = moment_check(simulate_sde(ctx, cfg), ctx, cfg, rel_cov=0.1)
    for c in res.checks:
        c.seconds = time.perf_counter() - t0
    return res.checks


def run_suite(ctx: KernelContext, selection, nu: float | None = None, alpha: float = 0.5,
              seed: int = 0) -> SuiteResult:
    """Run the named check groups (``"all"`` for every group) with a fixed seed."""
    if isinstance(selection, str):
        selection = [selection] if selection else []
    names = list(SUITES) if "all" in selection else list(selection)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {SUITES} or 'all'")
    if nu is None:
        nu = ctx.coeffs.nu
    res = SuiteResult()
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        if name == "geometry":
            res.checks += _geometry_checks(ctx, rng)
        elif name == "kernel":
            if nu is None:
                raise ValueError("kernel suite needs an ellipticity constant nu")
            res.checks += _kernel_checks(ctx, nu, rng)
        elif name == "solver":
            res.checks += _solver_checks(ctx, rng)
        elif name == "cancellation":
            res.checks += _cancellation_checks(ctx)
        elif name == "holder":
            res.checks += _holder_checks(ctx, alpha, rng)
        elif name == "mc":
            res.checks += _mc_checks(ctx, seed)
        elif name == "ball":
            bres = ball_volume_check(ctx.drift, [0.25, 0.35, 0.5, 0.7, 1.0], 2_000_000, seed=seed)
            res.checks += bres.checks
    return res
