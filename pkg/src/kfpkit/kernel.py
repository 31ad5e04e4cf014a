"""Covariance matrix, Gaussian fundamental solution and its exact derivatives.

For ``t > s`` the kernel is

    Gamma(x, t; y, s) = (4 pi)^(-N/2) det C(t, s)^(-1/2) exp(-|w|^2 / 4),

with ``v = x - E(t - s) y`` and ``w = L^{-1} v`` for a Cholesky factor ``L`` of
``C(t, s)``.  Writing ``sigma = t - s`` and ``S = D_0(sqrt(sigma))`` one has

    C(t, s) = S Chat S,   Chat = int_0^1 E(u) A(t - sigma u) E(u)^T du,

where ``A`` is ``A_0`` padded with zeros to ``N x N``.  ``Chat`` has entries of
order one whatever ``sigma`` is, so all factorizations are done on it.

Spatial derivatives are ``D^alpha Gamma = P_alpha(w) Gamma`` with a polynomial
``P_alpha`` built one direction at a time: differentiating along a direction
``d`` of ``v``-space, with ``u = L^{-1} d``,

    P <- (-1/2 <u, w>) P + <u, grad_w P>.
"""

from __future__ import annotations

import csv
import math
import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .coefficients import PiecewiseConstant, TimeCoefficients
from .geometry import Dilation, DriftStructure, GroupPoint, qdistance_arrays
from .quadrature import QuadratureError, adaptive_legendre, rule, standard_normal_nodes


class CovarianceError(ArithmeticError):
    pass


class PrecisionWarning(RuntimeWarning):
    pass


class SandwichViolation(AssertionError):
    def __init__(self, message, witness):
        super().__init__(message)
        self.witness = witness


# -- multi-indices ------------------------------------------------------------


@dataclass(frozen=True)
class MultiIndex:
    alpha: tuple[int, ...]

    def __post_init__(self):
        a = tuple(int(v) for v in self.alpha)
        if any(v < 0 for v in a):
            raise ValueError("multi-index entries must be nonnegative")
        object.__setattr__(self, "alpha", a)

    @classmethod
    def unit(cls, N: int, *idx: int) -> "MultiIndex":
        a = [0] * N
        for i in idx:
            a[i] += 1
        return cls(tuple(a))

    @classmethod
    def parse(cls, text: str) -> "MultiIndex":
        return cls(tuple(int(p) for p in text.split(".")))

    @property
    def length(self) -> int:
        return sum(self.alpha)

    def order(self, dil: Dilation) -> int:
        return int(sum(a * q for a, q in zip(self.alpha, dil.q)))

    def key(self) -> str:
        return ".".join(str(a) for a in self.alpha)

    def directions(self) -> list[int]:
        return [i for i, a in enumerate(self.alpha) for _ in range(a)]


def all_multi_indices(N: int, max_length: int) -> list[MultiIndex]:
    out = [MultiIndex((0,) * N)]
    frontier = [(0,) * N]
    for _ in range(max_length):
        nxt = set()
        for a in frontier:
            for i in range(N):
                b = list(a)
                b[i] += 1
                nxt.add(tuple(b))
        frontier = sorted(nxt)
        out.extend(MultiIndex(a) for a in frontier)
    return out


# -- polynomials in the whitened variable ------------------------------------

Poly = dict  # monomial exponent tuple -> coefficient


def _poly_step(P: Poly, u: np.ndarray) -> Poly:
    N = len(u)
    out: Poly = {}
    for mono, c in P.items():
        for k in range(N):
            if u[k] == 0.0:
                continue
            # -1/2 u_k w_k * mono
            m = list(mono)
            m[k] += 1
            m = tuple(m)
            out[m] = out.get(m, 0.0) - 0.5 * c * u[k]
            # u_k d/dw_k mono
            if mono[k] > 0:
                m = list(mono)
                m[k] -= 1
                m = tuple(m)
                out[m] = out.get(m, 0.0) + c * mono[k] * u[k]
    return out


def _poly_eval(P: Poly, W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if not P:
        return np.zeros(W.shape[:-1])
    deg = max(max(m) for m in P)
    powers = [np.ones(W.shape)]
    for _ in range(deg):
        powers.append(powers[-1] * W)
    out = np.zeros(W.shape[:-1])
    for mono, c in P.items():
        term = np.full(W.shape[:-1], c)
        for k, e in enumerate(mono):
            if e:
                term = term * powers[e][..., k]
        out = out + term
    return out


# -- covariance ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Covariance:
    t: float
    s: float
    C: np.ndarray
    chol: np.ndarray
    log_det: float
    scaled: np.ndarray
    scaled_chol: np.ndarray
    scale: np.ndarray  # diagonal of D_0(sqrt(t - s))

    @property
    def sigma(self) -> float:
        return self.t - self.s

    def whiten(self, v) -> np.ndarray:
        """``L^{-1} v`` for ``v`` of shape ``(..., N)``."""
        v = np.asarray(v, dtype=float) / self.scale
        flat = v.reshape(-1, v.shape[-1]).T
        w = solve_triangular(self.scaled_chol, flat, lower=True)
        return w.T.reshape(v.shape)

    def quadratic_form(self, v) -> np.ndarray:
        w = self.whiten(v)
        return np.sum(w * w, axis=-1)

    def solve(self, v) -> np.ndarray:
        """``C^{-1} v`` by two triangular solves (never an explicit inverse).

        ``v`` is a vector or a matrix whose columns are right-hand sides.
        """
        v = np.asarray(v, dtype=float)
        sc = self.scale if v.ndim == 1 else self.scale[:, None]
        w = solve_triangular(self.scaled_chol, v / sc, lower=True)
        return solve_triangular(self.scaled_chol.T, w, lower=False) / sc


def _padded(A: np.ndarray, N: int) -> np.ndarray:
    q = A.shape[-1]
    out = np.zeros(A.shape[:-2] + (N, N))
    out[..., :q, :q] = A
    return out


class KernelContext:
    """Drift structure plus time-only coefficients; evaluators are cached per ``(t, s)``.

    The context is immutable after construction.  The caches are guarded by a
    lock so concurrent readers are safe.
    """

    def __init__(self, drift: DriftStructure, coeffs: TimeCoefficients,
                 adaptive_tol: float = 1e-12, hermite_order: int | None = None,
                 cache_size: int = 4096):
        if coeffs.q != drift.q:
            raise ValueError(f"coefficients are {coeffs.q}x{coeffs.q} but the drift has q={drift.q}")
        self.drift = drift
        self.coeffs = coeffs
        self.dilation = drift.dilation
        self.adaptive_tol = adaptive_tol
        self.hermite_order = hermite_order
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()
        self._qexp = np.asarray(self.dilation.q, dtype=float)

    @property
    def N(self) -> int:
        return self.drift.N

    def _scaled_integrand(self, t: float, sigma: float, u: np.ndarray) -> np.ndarray:
        u = np.atleast_1d(u)
        E = self.drift.propagator(u)
        A = np.stack([self.coeffs(t - sigma * ui) for ui in u])
        A = _padded(A, self.N)
        return np.einsum("nij,njk,nlk->nil", E, A, E)

    def _scaled_covariance(self, s: float, t: float) -> np.ndarray:
        sigma = t - s
        cuts = [0.0] + sorted((t - b) / sigma for b in self.coeffs.breakpoints_in(s, t)) + [1.0]
        total = np.zeros((self.N, self.N))
        if self.coeffs.is_piecewise_constant:
            r = rule("legendre", max(1, self.drift.nilpotency_index))
            for a, b in zip(cuts[:-1], cuts[1:]):
                mid, half = 0.5 * (a + b), 0.5 * (b - a)
                # interior nodes only, so the right-continuous convention never matters
                vals = self._scaled_integrand(t, sigma, mid + half * r.nodes)
                total += half * np.einsum("n,nij->ij", r.weights, vals)
        else:
            for a, b in zip(cuts[:-1], cuts[1:]):
                total += adaptive_legendre(
                    lambda u: self._scaled_integrand(t, sigma, u)[0], a, b, tol=self.adaptive_tol
                )
        return 0.5 * (total + total.T)

    def _build(self, s: float, t: float) -> Covariance:
        if not t > s:
            raise ValueError(f"covariance needs t > s, got t={t}, s={s}")
        Chat = self._scaled_covariance(s, t)
        try:
            Lhat = np.linalg.cholesky(Chat)
        except np.linalg.LinAlgError:
            ev = np.linalg.eigvalsh(Chat)
            raise CovarianceError(
                f"C({t}, {s}) is not positive definite; scaled eigenvalues {ev.tolist()}"
            ) from None
        scale = np.sqrt(t - s) ** self._qexp
        if np.any(scale == 0.0):
            raise CovarianceError(f"t - s = {t - s:g} underflows the dilation scale")
        C = scale[:, None] * Chat * scale[None, :]
        L = scale[:, None] * Lhat
        log_det = 2.0 * float(np.sum(np.log(np.diag(Lhat)))) + self.dilation.Q * math.log(t - s)
        return Covariance(float(t), float(s), C, L, log_det, Chat, Lhat, scale)

    def kernel_at(self, t: float, s: float) -> "FrozenKernel":
        key = (float(t), float(s))
        with self._lock:
            fk = self._cache.get(key)
            if fk is not None:
                self._cache.move_to_end(key)
                return fk
        fk = FrozenKernel(self, self._build(float(s), float(t)))
        with self._lock:
            self._cache[key] = fk
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return fk

    def covariance(self, s: float, t: float) -> Covariance:
        return self.kernel_at(t, s).cov


def constant_context(drift: DriftStructure, a: float, **kw) -> KernelContext:
    """Context of the model operator with ``A_0 = a I_q``."""
    return KernelContext(drift, PiecewiseConstant.constant(a * np.eye(drift.q), nu=min(a, 1 / a)), **kw)


def covariance(ctx: KernelContext, s: float, t: float) -> Covariance:
    return ctx.covariance(s, t)


class FrozenKernel:
    """Kernel evaluator for one fixed pair of times ``t > s``."""

    def __init__(self, ctx: KernelContext, cov: Covariance):
        self.ctx = ctx
        self.cov = cov
        self.E = ctx.drift.propagator(cov.t - cov.s)
        N = ctx.N
        self.log_norm = -0.5 * N * math.log(4 * math.pi) - 0.5 * cov.log_det
        self._polys: dict = {}
        self._lock = threading.Lock()
        # whitened images of the coordinate directions for x and y
        self._ux = cov.whiten(np.eye(N))
        self._uy = cov.whiten(-self.E.T)

    def v(self, x, y) -> np.ndarray:
        return np.asarray(x, dtype=float) - np.asarray(y, dtype=float) @ self.E.T

    def value_from_v(self, v) -> np.ndarray:
        w = self.cov.whiten(v)
        return np.exp(self.log_norm - 0.25 * np.sum(w * w, axis=-1))

    def gamma(self, x, y) -> np.ndarray:
        return self.value_from_v(self.v(x, y))

    def polynomial(self, alpha_x: Sequence[int] = (), alpha_y: Sequence[int] = ()) -> Poly:
        key = (tuple(alpha_x), tuple(alpha_y))
        with self._lock:
            P = self._polys.get(key)
        if P is not None:
            return P
        N = self.ctx.N
        P = {(0,) * N: 1.0}
        for i, a in enumerate(alpha_x):
            for _ in range(a):
                P = _poly_step(P, self._ux[i])
        for i, a in enumerate(alpha_y):
            for _ in range(a):
                P = _poly_step(P, self._uy[i])
        P = {m: c for m, c in P.items() if c != 0.0}
        with self._lock:
            self._polys[key] = P
        return P

    def derivative_from_v(self, v, alpha_x=(), alpha_y=()) -> np.ndarray:
        w = self.cov.whiten(v)
        g = np.exp(self.log_norm - 0.25 * np.sum(w * w, axis=-1))
        return _poly_eval(self.polynomial(alpha_x, alpha_y), w) * g

    def poly_from_v(self, v, alpha_x=(), alpha_y=()) -> np.ndarray:
        """``P_alpha(w)``, i.e. ``D^alpha Gamma / Gamma``."""
        return _poly_eval(self.polynomial(alpha_x, alpha_y), self.cov.whiten(v))

    def derivative(self, x, y, alpha_x=(), alpha_y=()) -> np.ndarray:
        return self.derivative_from_v(self.v(x, y), alpha_x, alpha_y)


# -- point-wise public API ----------------------------------------------------


def _alpha_tuple(alpha, N):
    if isinstance(alpha, MultiIndex):
        a = alpha.alpha
    else:
        a = tuple(int(v) for v in alpha)
    if len(a) != N:
        raise ValueError(f"multi-index has length {len(a)}, expected {N}")
    return a


def _tiny_interval_value(ctx: KernelContext, xi: GroupPoint, eta: GroupPoint, exc: Exception):
    v = xi.x - ctx.drift.propagator(xi.t - eta.t) @ eta.x
    if np.any(v != 0.0):
        return 0.0
    warnings.warn(f"kernel evaluated at its pole with t - s = {xi.t - eta.t:g}: {exc}", PrecisionWarning)
    return math.inf


def gamma(ctx: KernelContext, xi: GroupPoint, eta: GroupPoint) -> float:
    """``Gamma(x, t; y, s)``; zero for ``t <= s``."""
    if xi.t <= eta.t:
        return 0.0
    try:
        fk = ctx.kernel_at(xi.t, eta.t)
    except CovarianceError as exc:
        if xi.t - eta.t < 1e-8:
            return _tiny_interval_value(ctx, xi, eta, exc)
        raise
    return float(fk.gamma(xi.x, eta.x))


def gamma_derivative(ctx: KernelContext, alpha, wrt: str, xi: GroupPoint, eta: GroupPoint) -> float:
    """``D_x^alpha Gamma`` (``wrt="x"``) or ``D_y^alpha Gamma`` (``wrt="y"``)."""
    a = _alpha_tuple(alpha, ctx.N)
    if xi.t <= eta.t:
        return 0.0
    fk = ctx.kernel_at(xi.t, eta.t)
    if wrt == "x":
        return float(fk.derivative(xi.x, eta.x, alpha_x=a))
    if wrt == "y":
        return float(fk.derivative(xi.x, eta.x, alpha_y=a))
    raise ValueError("wrt must be 'x' or 'y'")


def second_x_derivatives(fk: FrozenKernel, v) -> np.ndarray:
    """All ``d^2 Gamma / dx_i dx_j`` for ``i, j < q``; shape ``v.shape[:-1] + (q, q)``."""
    q = fk.ctx.drift.q
    N = fk.ctx.N
    out = np.zeros(np.shape(v)[:-1] + (q, q))
    for i in range(q):
        for j in range(i, q):
            a = [0] * N
            a[i] += 1
            a[j] += 1
            out[..., i, j] = out[..., j, i] = fk.derivative_from_v(v, alpha_x=a)
    return out


def gamma_drift(ctx: KernelContext, xi: GroupPoint, eta: GroupPoint) -> float:
    """``Y Gamma = -sum_ij a_ij(t) d^2_{x_i x_j} Gamma``, read off ``L Gamma = 0``."""
    if xi.t <= eta.t:
        return 0.0
    fk = ctx.kernel_at(xi.t, eta.t)
    H = second_x_derivatives(fk, fk.v(xi.x, eta.x))
    return float(-np.sum(ctx.coeffs(xi.t) * H))


def whitened_nodes(fk: FrozenKernel, x, order: int):
    """Quadrature nodes ``y_k`` and weights ``W_k`` with ``int g(y) dy ~ sum W_k g(y_k)``
    for integrands shaped like the kernel's Gaussian in ``y``."""
    N = fk.ctx.N
    g, w = standard_normal_nodes(N, order)
    # v = sqrt(2) L g has the kernel's law, y = E^{-1} (x - v), |dy/dg| = 2^{N/2} det L
    v = math.sqrt(2.0) * g @ fk.cov.chol.T
    Einv = fk.ctx.drift.propagator(-(fk.cov.t - fk.cov.s))
    y = (np.asarray(x, dtype=float) - v) @ Einv.T
    log_jac = 0.5 * N * math.log(2.0) + 0.5 * fk.cov.log_det
    gauss = np.exp(-0.5 * np.sum(g * g, axis=1)) / (2 * math.pi) ** (N / 2)
    weights = w * np.exp(log_jac) / gauss
    return y, weights


def integral_identity(ctx: KernelContext, alpha, x, t: float, s: float, tol: float = 1e-8,
                      order: int | None = None) -> float:
    """``int_{R^N} D_x^alpha Gamma(x, t; y, s) dy`` by quadrature in whitened variables.

    The kernel (and its derivative) is evaluated at the nodes through the full
    formula, so the result checks the normalization rather than assuming it.
    Raises :class:`QuadratureError` if two orders disagree beyond ``tol``.
    """
    a = _alpha_tuple(alpha, ctx.N)
    if not t > s:
        raise ValueError("integral_identity needs t > s")
    fk = ctx.kernel_at(t, s)
    base = order or max(8, sum(a) + 4)
    vals = []
    for n in (base, base + 4):
        y, W = whitened_nodes(fk, x, n)
        vals.append(float(np.dot(W, fk.derivative(np.asarray(x, dtype=float), y, alpha_x=a))))
    if abs(vals[0] - vals[1]) > tol:
        raise QuadratureError(f"whitened quadrature not converged: {vals}")
    return vals[1]


# -- bounds -------------------------------------------------------------------


@dataclass
class EnvelopeReport:
    alpha: tuple[int, ...]
    nu: float
    samples: int
    sandwich_violations: int
    c_sup: float
    c_sup_half: float
    mean_value_ratio: float
    mean_value_ratio_half: float
    admissible_triples: int
    kappa_used: float
    witness: dict | None = None

    @property
    def c_sup_stability(self) -> float:
        return self.c_sup / self.c_sup_half if self.c_sup_half > 0 else math.inf

    @property
    def mean_value_stability(self) -> float:
        if self.mean_value_ratio_half == 0:
            return math.inf
        return self.mean_value_ratio / self.mean_value_ratio_half


def _batch_values(ctx: KernelContext, x, t, y, s, a=None):
    out = np.zeros(len(t))
    for k in range(len(t)):
        if t[k] <= s[k]:
            continue
        fk = ctx.kernel_at(t[k], s[k])
        if a is None:
            out[k] = fk.gamma(x[k], y[k])
        else:
            out[k] = fk.derivative(x[k], y[k], alpha_x=a)
    return out


def sandwich_check(ctx: KernelContext, nu: float, x, t, y, s, slack: float = 1e-12):
    """Count violations of ``nu^N Gamma_nu <= Gamma <= nu^-N Gamma_{1/nu}``.

    Returns ``(violations, witness)`` with the worst offending sample.
    """
    N = ctx.N
    lo_ctx = constant_context(ctx.drift, nu)
    hi_ctx = constant_context(ctx.drift, 1.0 / nu)
    g = _batch_values(ctx, x, t, y, s)
    lo = nu**N * _batch_values(lo_ctx, x, t, y, s)
    hi = nu ** (-N) * _batch_values(hi_ctx, x, t, y, s)
    bad_lo = lo - g > slack * np.maximum(np.abs(g), 1e-300)
    bad_hi = g - hi > slack * np.maximum(np.abs(hi), 1e-300)
    bad = bad_lo | bad_hi
    witness = None
    if np.any(bad):
        excess = np.where(bad_lo, (lo - g) / np.maximum(g, 1e-300), 0.0) + np.where(
            bad_hi, (g - hi) / np.maximum(hi, 1e-300), 0.0)
        k = int(np.argmax(excess))
        witness = {"x": x[k].tolist(), "t": float(t[k]), "y": y[k].tolist(), "s": float(s[k]),
                   "gamma": float(g[k]), "lower": float(lo[k]), "upper": float(hi[k])}
    return int(np.sum(bad)), witness


def _sample_pairs(rng, n, N, box, tmax):
    x = rng.uniform(-box, box, size=(n, N))
    y = rng.uniform(-box, box, size=(n, N))
    ts = rng.uniform(0.0, tmax, size=(n, 2))
    t, s = np.max(ts, axis=1), np.min(ts, axis=1)
    return x, t, y, s


def bound_envelope(ctx: KernelContext, alpha, nu: float, sample_count: int = 10_000,
                   seed: int = 0, kappa: float = 1.0, box: float = 2.0, tmax: float = 2.0,
                   strict: bool = True) -> EnvelopeReport:
    """Empirical Gaussian bounds for ``D_x^alpha Gamma``.

    * sandwich ``nu^N Gamma_nu <= Gamma <= nu^-N Gamma_{1/nu}`` (hard check);
    * ``c_sup = sup |D^alpha Gamma| d(xi, eta)^(Q + omega(alpha))``;
    * mean-value ratio ``sup |D^a G(xi1, eta) - D^a G(xi2, eta)| d(xi1, eta)^(Q+omega+1) / d(xi1, xi2)``
      over triples with ``d(xi1, eta) >= 4 kappa d(xi1, xi2)``.

    Both fitted constants are also reported on the first half of the sample to
    expose their stability.
    """
    a = _alpha_tuple(alpha, ctx.N)
    N = ctx.N
    dil = ctx.dilation
    rng = np.random.default_rng(seed)
    x, t, y, s = _sample_pairs(rng, sample_count, N, box, tmax)
    violations, witness = sandwich_check(ctx, nu, x, t, y, s)
    if violations and strict:
        raise SandwichViolation(f"{violations} Gaussian sandwich violations (nu={nu})", witness)

    omega = MultiIndex(a).order(dil)
    D = _batch_values(ctx, x, t, y, s, a)
    d = qdistance_arrays(ctx.drift, x, t, y, s)
    csup_q = np.abs(D) * d ** (dil.Q + omega)

    # xi2 = xi1 o D(lam) z with lam small, so most triples are admissible
    z = rng.uniform(-1.0, 1.0, size=(sample_count, N + 1))
    lam = 10.0 ** rng.uniform(-3, -1, size=sample_count)
    zx = z[:, :N] * lam[:, None] ** np.asarray(dil.q, dtype=float)
    zt = z[:, N] * lam**2
    x2 = zx + np.einsum("nij,nj->ni", ctx.drift.propagator(zt), x)
    t2 = t + zt
    d12 = qdistance_arrays(ctx.drift, x, t, x2, t2)
    ok = (d >= 4 * kappa * d12) & (d12 > 0)
    D2 = _batch_values(ctx, x2, t2, y, s, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        mv_q = np.where(ok, np.abs(D - D2) * d ** (dil.Q + omega + 1) / d12, 0.0)

    half = max(1, sample_count // 2)
    return EnvelopeReport(
        alpha=a, nu=nu, samples=sample_count, sandwich_violations=violations,
        c_sup=float(np.max(csup_q)), c_sup_half=float(np.max(csup_q[:half])),
        mean_value_ratio=float(np.max(mv_q)), mean_value_ratio_half=float(np.max(mv_q[:half])),
        admissible_triples=int(np.sum(ok)), kappa_used=kappa, witness=witness,
    )


# -- finite-difference residual -----------------------------------------------


def fd_residual(ctx: KernelContext, xi: GroupPoint, eta: GroupPoint, h: float) -> float:
    """Central-difference approximation of ``L Gamma(., eta)`` at ``xi`` with step ``h``.

    ``L Gamma = 0`` exactly, so the value is the discretization error.
    """
    x, t = xi.x, xi.t
    N, q = ctx.N, ctx.drift.q
    y = eta.x

    def G(xx, tt):
        return float(ctx.kernel_at(tt, eta.t).gamma(xx, y))

    I = np.eye(N)
    A = ctx.coeffs(t)
    res = 0.0
    for i in range(q):
        for j in range(q):
            if i == j:
                d2 = (G(x + h * I[i], t) - 2 * G(x, t) + G(x - h * I[i], t)) / h**2
            else:
                d2 = (G(x + h * (I[i] + I[j]), t) - G(x + h * (I[i] - I[j]), t)
                      - G(x - h * (I[i] - I[j]), t) + G(x - h * (I[i] + I[j]), t)) / (4 * h**2)
            res += A[i, j] * d2
    Bx = ctx.drift.B @ x
    for j in range(N):
        if Bx[j] != 0.0:
            res += Bx[j] * (G(x + h * I[j], t) - G(x - h * I[j], t)) / (2 * h)
    res -= (G(x, t + h) - G(x, t - h)) / (2 * h)
    return res


def residual_slope(ctx: KernelContext, xi: GroupPoint, eta: GroupPoint,
                   steps: Iterable[float] = (0.08, 0.04, 0.02, 0.01)):
    """Least-squares slope of ``log |FD residual|`` against ``log h``."""
    hs = np.asarray(list(steps), dtype=float)
    res = np.array([abs(fd_residual(ctx, xi, eta, h)) for h in hs])
    slope = float(np.polyfit(np.log(hs), np.log(res), 1)[0])
    return slope, hs, res


# -- CSV dump -----------------------------------------------------------------


def dump_kernel_csv(ctx: KernelContext, rows, path, derivatives: Sequence[MultiIndex] = ()):
    """Write ``x..., t, y..., s, gamma[, derivative columns]`` with 17 significant digits.

    ``rows`` is an iterable of ``(x, t, y, s)``; derivative columns are keyed by the
    dotted multi-index string, e.g. ``2.0`` for ``d^2/dx_1^2``.
    """
    N = ctx.N
    header = [f"x{i + 1}" for i in range(N)] + ["t"] + [f"y{i + 1}" for i in range(N)] + ["s", "gamma"]
    header += [m.key() for m in derivatives]
    fmt = "{:.17g}".format
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for x, t, y, s in rows:
            xi, eta = GroupPoint(x, t), GroupPoint(y, s)
            vals = [gamma(ctx, xi, eta)] + [gamma_derivative(ctx, m, "x", xi, eta) for m in derivatives]
            wr.writerow([fmt(v) for v in list(xi.x) + [xi.t] + list(eta.x) + [eta.t] + vals])
