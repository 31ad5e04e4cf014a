"""Solution operators for coefficients depending on time only.

All spatial integrals are taken in whitened variables: for fixed ``t > s`` the
kernel in ``v = x - E(t - s) y`` is the centred Gaussian density with
covariance ``2 C(t, s)``, and ``dy = dv`` because ``det E = 1``.  With
``v = sqrt(2) L g`` and ``g`` standard normal,

    int Gamma(x, t; y, s) f(y) dy = E[f(E(s - t)(x - sqrt(2) L g))],

and ``D_x^alpha Gamma = P_alpha(w) Gamma`` turns derivative kernels into
polynomial weights on the same nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coefficients import SpaceTimeCoefficients, TimeCoefficients
from .geometry import DriftStructure
from .kernel import KernelContext, MultiIndex
from .quadrature import (
    QuadratureError,
    composite_legendre,
    default_order,
    graded_mesh,
    rule,
    standard_normal_nodes,
)


@dataclass(frozen=True)
class TimeWindow:
    tau: float
    T: float

    def __post_init__(self):
        if not self.tau < self.T:
            raise ValueError(f"time window needs tau < T, got tau={self.tau}, T={self.T}")


@dataclass
class SourceField:
    """``f(X, t)`` evaluated on rows of ``X`` (shape ``(P, N)``), returning ``(P,)``.

    ``tau`` is the time at or before which ``f`` vanishes, ``alpha`` its declared
    Hölder exponent in ``x`` and ``bound`` an estimate of ``sup |f|``.
    """

    fn: Callable[[np.ndarray, float], np.ndarray]
    tau: float = -math.inf
    alpha: float = 1.0
    bound: float | None = None
    unbounded: bool = False

    def __call__(self, X, t) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if t <= self.tau:
            return np.zeros(X.shape[0])
        return np.asarray(self.fn(X, float(t)), dtype=float).reshape(X.shape[0])

    def check_support(self, X, times) -> None:
        """Spot-check that ``f`` vanishes for ``t <= tau`` and is finite elsewhere."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        for t in times:
            vals = np.asarray(self.fn(X, float(t)), dtype=float)
            if t <= self.tau and np.any(vals != 0.0):
                raise ValueError(f"source does not vanish at t={t} <= tau={self.tau}")
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"non-finite source values at t={t}")


def as_source(f, **kw) -> SourceField:
    return f if isinstance(f, SourceField) else SourceField(f, **kw)


# -- manufactured solutions ---------------------------------------------------


_PROFILES = {
    # g(t) for t >= tau; all satisfy g(tau) = g'(tau) = 0
    "quadratic": (lambda h: h**2, lambda h: 2 * h),
    "quadratic_exp": (lambda h: h**2 * np.exp(-h), lambda h: (2 * h - h**2) * np.exp(-h)),
    "cubic": (lambda h: h**3, lambda h: 3 * h**2),
}


@dataclass
class ManufacturedSolution:
    """``u(x, t) = g(t - tau) amp exp(-(x - c)^T M (x - c) / 2)`` for ``t > tau``, else 0."""

    drift: DriftStructure
    center: np.ndarray
    M: np.ndarray
    amp: float = 1.0
    tau: float = 0.0
    profile: str = "quadratic"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.M = np.asarray(self.M, dtype=float)
        if self.profile not in _PROFILES:
            raise ValueError(f"unknown time profile {self.profile!r}")
        N = self.drift.N
        if self.center.shape != (N,) or self.M.shape != (N, N):
            raise ValueError("center/M dimensions do not match the drift")
        if np.min(np.linalg.eigvalsh(0.5 * (self.M + self.M.T))) <= 0:
            raise ValueError("M must be positive definite")

    def _g(self, t):
        h = max(float(t) - self.tau, 0.0)
        g, dg = _PROFILES[self.profile]
        return float(g(h)), float(dg(h))

    def _phi(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        D = X - self.center
        MD = D @ self.M.T
        return D, MD, self.amp * np.exp(-0.5 * np.sum(D * MD, axis=1))

    def u(self, X, t):
        g, _ = self._g(t)
        return g * self._phi(X)[2]

    def grad(self, X, t):
        g, _ = self._g(t)
        _, MD, phi = self._phi(X)
        return -g * MD * phi[:, None]

    def hess(self, X, t):
        g, _ = self._g(t)
        _, MD, phi = self._phi(X)
        H = MD[:, :, None] * MD[:, None, :] - self.M[None]
        return g * H * phi[:, None, None]

    def Yu(self, X, t):
        """``<Bx, grad u> - du/dt``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        g, dg = self._g(t)
        _, MD, phi = self._phi(X)
        BX = X @ self.drift.B.T
        return -g * np.sum(BX * MD, axis=1) * phi - dg * phi

    def Lu(self, coeffs, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        q = self.drift.q
        H = self.hess(X, t)[:, :q, :q]
        if isinstance(coeffs, SpaceTimeCoefficients):
            A = coeffs.batch(X, t)
        else:
            A = np.broadcast_to(coeffs(t), (X.shape[0], q, q))
        return np.einsum("pij,pij->p", A, H) + self.Yu(X, t)

    def source(self, coeffs, alpha: float = 1.0) -> SourceField:
        bound = None
        return SourceField(lambda X, t: self.Lu(coeffs, X, t), tau=self.tau, alpha=alpha, bound=bound)

    def dilated(self, lam: float) -> "ManufacturedSolution":
        """``u o D(lam)`` for the profile ``quadratic`` (time factor rescales as ``lam^4``)."""
        if self.profile != "quadratic" or self.tau != 0.0:
            raise ValueError("dilation family defined for the quadratic profile with tau = 0")
        d = lam ** np.asarray(self.drift.dilation.q, dtype=float)
        # exp(-(D x - c)^T M (D x - c)/2) = exp(-(x - D^-1 c)^T DMD (x - D^-1 c)/2)
        return ManufacturedSolution(self.drift, self.center / d, d[:, None] * self.M * d[None, :],
                                    self.amp * lam**4, 0.0, "quadratic")


def manufactured_family(drift: DriftStructure, count: int = 10, seed: int = 0,
                        tau: float = 0.0) -> list[ManufacturedSolution]:
    """Seeded family of bump solutions with varied centres, shapes and time profiles."""
    rng = np.random.default_rng(seed)
    N = drift.N
    names = list(_PROFILES)
    out = []
    for k in range(count):
        c = rng.uniform(-0.5, 0.5, size=N)
        G = rng.normal(size=(N, N)) * 0.3
        M = np.diag(rng.uniform(0.4, 1.0, size=N)) + G @ G.T
        out.append(ManufacturedSolution(drift, c, M, float(rng.uniform(0.5, 1.5)), tau,
                                        names[k % len(names)]))
    return out


# -- quadrature core ----------------------------------------------------------


def solver_order(N: int) -> int:
    """Hermite order per axis for space-time integrals; sources are often narrower
    than the kernel for large ``t - s``, so low dimensions get more nodes."""
    if N <= 2:
        return 40
    if N == 3:
        return 16
    return default_order(N)


def _points(x):
    X = np.asarray(x, dtype=float)
    return np.atleast_2d(X), X.ndim == 1


def _weights_for(fk, v, alpha):
    if alpha is None:
        return np.ones(v.shape[0])
    return fk.poly_from_v(v, alpha_x=alpha)


def time_nodes(ctx: KernelContext, tau, t, n, grade, ppc):
    """Graded nodes on ``[tau, t]`` with the coefficient breakpoints as cell boundaries."""
    return graded_mesh(tau, t, n, grade).nodes(ppc, ctx.coeffs.breakpoints_in(tau, t))


def _space_time(ctx: KernelContext, f: SourceField, X, t, tau, n, grade, ppc, order, alpha, mode):
    """Time-integrated Gaussian expectations on a graded mesh.

    ``mode`` selects the spatial integrand: ``plain`` gives ``E[P f(y)]``,
    ``centred`` gives ``E[P (f(y) - f(m))]`` with ``m = E(s - t) x``.
    """
    N = ctx.N
    g, wg = standard_normal_nodes(N, order or solver_order(N))
    s_nodes, s_w = time_nodes(ctx, tau, t, n, grade, ppc)
    total = np.zeros(X.shape[0])
    for s, ws in zip(s_nodes, s_w):
        fk = ctx.kernel_at(t, s)
        v = math.sqrt(2.0) * g @ fk.cov.chol.T
        Einv = ctx.drift.propagator(s - t)
        P = _weights_for(fk, v, alpha) * wg
        Y = (X[:, None, :] - v[None, :, :]) @ Einv.T
        fy = f(Y.reshape(-1, N), s).reshape(X.shape[0], -1)
        if mode == "centred":
            fm = f(X @ Einv.T, s)
            fy = fy - fm[:, None]
        total += ws * (fy @ P)
    return total


def _maybe_check(run, n, tol):
    val = run(n)
    if tol is not None:
        ref = run(2 * n)
        err = float(np.max(np.abs(ref - val)))
        if err > tol:
            raise QuadratureError(f"time mesh doubling changed the result by {err:.3g} > {tol:g}")
        val = ref
    return val


def cauchy_homogeneous(ctx: KernelContext, f, s: float, x, t: float, order: int | None = None,
                       tol: float | None = None):
    """``u(x, t) = int Gamma(x, t; y, s) f(y) dy`` for an initial datum ``f(Y) -> (P,)``.

    ``x`` may be one point or an array of points.  With ``tol`` the Hermite order is
    doubled and disagreement raises :class:`QuadratureError`.
    """
    X, single = _points(x)
    if not t > s:
        raise ValueError("cauchy_homogeneous needs t > s")
    N = ctx.N
    fk = ctx.kernel_at(t, s)
    Einv = ctx.drift.propagator(s - t)

    def run(n):
        g, wg = standard_normal_nodes(N, n)
        v = math.sqrt(2.0) * g @ fk.cov.chol.T
        Y = (X[:, None, :] - v[None]) @ Einv.T
        vals = np.asarray(f(Y.reshape(-1, N)), dtype=float).reshape(X.shape[0], -1)
        return vals @ wg

    n = order or default_order(N)
    out = run(n)
    if tol is not None:
        ref = run(2 * n)
        if np.max(np.abs(ref - out)) > tol:
            raise QuadratureError(f"Gauss-Hermite orders {n} and {2 * n} disagree")
        out = ref
    return float(out[0]) if single else out


def initial_trace_error(ctx: KernelContext, f, s: float, eps_list: Sequence[float], X,
                        order: int | None = None) -> list[float]:
    """``sup_X |u(x, s + eps) - f(x)|`` for each ``eps``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    f0 = np.asarray(f(X), dtype=float)
    out = []
    for eps in eps_list:
        if not eps > 0:
            raise ValueError("eps must be positive")
        u = cauchy_homogeneous(ctx, f, s, X, s + eps, order=order)
        out.append(float(np.max(np.abs(u - f0))))
    return out


def duhamel(ctx: KernelContext, f, window: TimeWindow, x, t: float, n: int = 16,
            grade: float = 2.0, ppc: int = 4, order: int | None = None, tol: float | None = None):
    """``u(x, t) = -int_tau^t int Gamma(x, t; y, s) f(y, s) dy ds``."""
    f = as_source(f, tau=window.tau)
    X, single = _points(x)
    if t > window.T:
        raise ValueError("t exceeds the window horizon")
    if t <= window.tau:
        out = np.zeros(X.shape[0])
    else:
        out = -_maybe_check(lambda m: _space_time(ctx, f, X, t, window.tau, m, grade, ppc, order,
                                                  None, "plain"), n, tol)
    return float(out[0]) if single else out


def first_derivative(ctx: KernelContext, f, window: TimeWindow, x, t: float, i: int,
                     n: int = 16, grade: float = 2.0, ppc: int = 4, order: int | None = None,
                     tol: float | None = None):
    """``d_{x_i} u(x, t) = -int_tau^t int d_{x_i} Gamma f dy ds``.

    ``f`` at the Gaussian mean is subtracted inside the spatial integral; this is
    exact because ``d_{x_i} Gamma`` integrates to zero, and it removes the
    ``(t - s)^(-1/2)`` growth of the integrand.
    """
    f = as_source(f, tau=window.tau)
    if not 0 <= i < ctx.drift.q:
        raise ValueError(f"derivative index must be < q = {ctx.drift.q}")
    X, single = _points(x)
    if t <= window.tau:
        out = np.zeros(X.shape[0])
    else:
        a = MultiIndex.unit(ctx.N, i).alpha
        out = -_maybe_check(lambda m: _space_time(ctx, f, X, t, window.tau, m, grade, ppc, order,
                                                  a, "centred"), n, tol)
    return float(out[0]) if single else out


def second_derivative(ctx: KernelContext, f, window: TimeWindow, x, t: float, i: int, j: int,
                      n: int = 16, grade: float | None = None, ppc: int = 4,
                      order: int | None = None, tol: float | None = None):
    """``T_ij f(x, t) = int_tau^t int d^2_{x_i x_j} Gamma [f(E(s - t) x, s) - f(y, s)] dy ds``.

    The time mesh is graded towards ``t`` with exponent ``2 / alpha`` by default,
    ``alpha`` being the declared Hölder exponent of ``f``.
    """
    f = as_source(f, tau=window.tau)
    q = ctx.drift.q
    if not (0 <= i < q and 0 <= j < q):
        raise ValueError(f"derivative indices must be < q = {q}")
    if grade is None:
        grade = max(1.0, 2.0 / min(max(f.alpha, 1e-3), 1.0))
    X, single = _points(x)
    if t <= window.tau:
        out = np.zeros(X.shape[0])
    else:
        a = MultiIndex.unit(ctx.N, i, j).alpha
        out = -_maybe_check(lambda m: _space_time(ctx, f, X, t, window.tau, m, grade, ppc, order,
                                                  a, "centred"), n, tol)
    return float(out[0]) if single else out


def sup_bound_constant(ctx: KernelContext, sources: Sequence[SourceField], window: TimeWindow,
                       X, t: float, i: int, **kw) -> float:
    """Fitted ``c`` in ``|d_i u| <= c sup|f| sqrt(T - tau)`` over a family of sources."""
    best = 0.0
    for f in sources:
        if f.bound is None:
            raise ValueError("sources need a declared sup bound")
        d = np.abs(first_derivative(ctx, f, window, X, t, i, **kw))
        best = max(best, float(np.max(d)) / (f.bound * math.sqrt(window.T - window.tau)))
    return best


# -- cancellation -------------------------------------------------------------


def _ball_integral(fk, rho: float, alpha, n_gl: int = 8, width: float = 10.0, panel: float = 1.5):
    """``int_{||v|| < rho} D^alpha Gamma dv`` by nested Gauss-Legendre.

    Each coordinate is written ``v_i = +-w^{q_i}`` so the remaining budget
    ``rho - sum w`` is linear; panels are at most ``panel`` conditional standard
    deviations wide and the box is ``width`` marginal standard deviations.
    """
    if rho <= 0:
        return 0.0
    N = fk.ctx.N
    qexp = np.asarray(fk.ctx.dilation.q, dtype=float)
    cov2 = 2.0 * fk.cov.C
    marg = np.sqrt(np.diag(cov2))
    cond = 1.0 / np.sqrt(np.diag(fk.cov.solve(np.eye(N)) / 2.0))
    r = rule("legendre", n_gl)
    V = np.zeros((1, 0))
    W = np.ones(1)
    budget = np.full(1, float(rho))
    for i in range(N):
        lim = np.minimum(np.maximum(budget, 0.0) ** qexp[i], width * marg[i])
        n_p = max(1, int(math.ceil(width * marg[i] / (panel * cond[i]))))
        # panels uniform in v on [0, lim], mapped to w = v^(1/q)
        edges = lim[:, None] * (np.arange(n_p + 1) / n_p)[None, :]
        wa, wb = edges[:, :-1] ** (1 / qexp[i]), edges[:, 1:] ** (1 / qexp[i])
        mid, half = 0.5 * (wa + wb), 0.5 * (wb - wa)
        w = mid[:, :, None] + half[:, :, None] * r.nodes  # (K, n_p, n_gl)
        jac = half[:, :, None] * r.weights * qexp[i] * w ** (qexp[i] - 1)
        w = w.reshape(len(V), -1)
        jac = jac.reshape(len(V), -1)
        vi = w ** qexp[i]
        m = w.shape[1]
        newV = np.concatenate([
            np.concatenate([np.repeat(V, m, axis=0), vi.reshape(-1, 1)], axis=1),
            np.concatenate([np.repeat(V, m, axis=0), -vi.reshape(-1, 1)], axis=1),
        ])
        newW = np.concatenate([(W[:, None] * jac).ravel()] * 2)
        newB = np.concatenate([(budget[:, None] - w).ravel()] * 2)
        keep = newW != 0.0
        V, W, budget = newV[keep], newW[keep], newB[keep]
    vals = fk.derivative_from_v(V, alpha_x=alpha)
    return float(np.dot(W, vals))


def cancellation_inner(ctx: KernelContext, t: float, s: float, r: float, i: int = 0, j: int = 0,
                       **kw) -> float:
    """``int_{d((x,t),(y,s)) >= r} d^2_{x_i x_j} Gamma dy`` (independent of ``x``).

    Evaluated as minus the integral over the bounded region ``||v|| < r - sqrt(t - s)``.
    """
    sigma = t - s
    if sigma <= 0 or sigma >= r * r:
        return 0.0
    fk = ctx.kernel_at(t, s)
    a = MultiIndex.unit(ctx.N, i, j).alpha
    return -_ball_integral(fk, r - math.sqrt(sigma), a, **kw)


def cancellation_integral(ctx: KernelContext, x, t: float, tau: float, r: float, i: int = 0,
                          j: int = 0, cells: int = 32, ppc: int = 4, **kw) -> float:
    """``I_{r,tau} = int_tau^t |int_{d >= r} d^2_{x_i x_j} Gamma dy| ds``.

    Only ``s > t - r^2`` contributes; the remaining ``sigma = t - s`` range is split
    into ``cells`` equal cells.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if tau > t:
        raise ValueError("need tau <= t")
    top = min(r * r, t - tau)
    if top <= 0:
        return 0.0
    sig, w = composite_legendre(np.linspace(0.0, top, cells + 1), ppc)
    vals = np.array([abs(cancellation_inner(ctx, t, t - sg, r, i, j, **kw)) for sg in sig])
    return float(np.dot(w, vals))


def heat_inner_closed_form(sigma: float, r: float) -> float:
    """1-D oracle for :func:`cancellation_inner` with ``B = 0``, ``a = 1``: ``(rho / sigma) g(rho)``."""
    rho = r - math.sqrt(sigma)
    if sigma <= 0 or rho <= 0:
        return 0.0
    g = math.exp(-rho * rho / (4 * sigma)) / math.sqrt(4 * math.pi * sigma)
    return rho / sigma * g


# -- integrability ------------------------------------------------------------


@dataclass
class IntegrabilityReport:
    spans: np.ndarray
    values: np.ndarray
    slope: float
    constant: float


def integrability_check(ctx: KernelContext, x, t: float, spans: Sequence[float], alpha: float,
                        i: int = 0, j: int = 0, n: int = 32, order: int | None = None
                        ) -> IntegrabilityReport:
    """``int_tau^t int |d^2_ij Gamma| ||E(s - t) x - y||^alpha dy ds`` for ``t - tau`` in ``spans``.

    Reports the log-log slope against ``t - tau`` and the fitted constant
    ``max value / (t - tau)^(alpha/2)``.
    """
    N = ctx.N
    qexp = np.asarray(ctx.dilation.q, dtype=float)
    a = MultiIndex.unit(N, i, j).alpha
    g, wg = standard_normal_nodes(N, order or default_order(N))
    vals = []
    for span in spans:
        tau = t - span
        s_nodes, s_w = time_nodes(ctx, tau, t, n, max(1.0, 2.0 / alpha), 4)
        tot = 0.0
        for s, ws in zip(s_nodes, s_w):
            fk = ctx.kernel_at(t, s)
            v = math.sqrt(2.0) * g @ fk.cov.chol.T
            d = v @ ctx.drift.propagator(s - t).T  # E(s - t) x - y
            nrm = np.sum(np.abs(d) ** (1.0 / qexp), axis=1) ** alpha
            tot += ws * float(np.dot(wg, np.abs(fk.poly_from_v(v, alpha_x=a)) * nrm))
        vals.append(tot)
    spans = np.asarray(spans, dtype=float)
    vals = np.asarray(vals)
    slope = float(np.polyfit(np.log(spans), np.log(vals), 1)[0])
    return IntegrabilityReport(spans, vals, slope, float(np.max(vals / spans ** (alpha / 2))))
