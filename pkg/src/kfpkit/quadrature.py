"""Gaussian quadrature rules, Gaussian expectations, graded time meshes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import hermite, legendre


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Rule:
    kind: str
    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.nodes)


@lru_cache(maxsize=None)
def _cached_rule(kind: str, n: int) -> Rule:
    if kind == "legendre":
        x, w = legendre.leggauss(n)
    elif kind == "hermite":
        x, w = hermite.hermgauss(n)
    else:
        raise ValueError(f"unknown rule kind {kind!r}")
    # symmetrize: the generators are accurate but not bit-symmetric
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return Rule(kind, x, w)


def rule(kind: str, n: int) -> Rule:
    """``n``-point Gauss-Legendre (weight 1 on [-1, 1]) or Gauss-Hermite
    (weight ``exp(-z^2)`` on R) rule."""
    if int(n) < 1:
        raise ValueError("rule needs n >= 1")
    return _cached_rule(kind, int(n))


def default_order(N: int) -> int:
    if N <= 3:
        return 20
    if N <= 5:
        return 12
    return 8


@lru_cache(maxsize=32)
def _tensor_hermite(N: int, order: int):
    r = rule("hermite", order)
    z = np.array(list(itertools.product(r.nodes, repeat=N))).reshape(-1, N)
    w = np.prod(np.array(list(itertools.product(r.weights, repeat=N))).reshape(-1, N), axis=1)
    w = w / math.pi ** (N / 2)
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def standard_normal_nodes(N: int, order: int):
    """Nodes ``g`` and weights for ``E[f(g)]`` with ``g ~ N(0, I_N)``."""
    z, w = _tensor_hermite(N, order)
    return math.sqrt(2.0) * z, w


def _factor(covariance) -> np.ndarray:
    L = getattr(covariance, "chol", None)
    if L is not None:
        return L
    return np.linalg.cholesky(np.atleast_2d(np.asarray(covariance, dtype=float)))


def gaussian_integral(f, mean, covariance, order: int | None = None, tol: float | None = None):
    """``int f(y) phi(y) dy`` for the Gaussian density ``phi`` with the given mean
    and covariance (a matrix or an object with a ``chol`` factor).

    ``f`` receives an array of shape ``(M, N)`` and returns ``(M,)`` values.  When
    ``tol`` is given the result is compared with the rule of doubled order and
    :class:`QuadratureError` is raised if they disagree by more than ``tol``.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    N = mean.shape[0]
    L = _factor(covariance)
    order = default_order(N) if order is None else int(order)

    def run(n):
        g, w = standard_normal_nodes(N, n)
        vals = np.asarray(f(mean + g @ L.T), dtype=float)
        return float(np.dot(w, vals))

    val = run(order)
    if tol is not None:
        ref = run(2 * order)
        if abs(ref - val) > tol:
            raise QuadratureError(
                f"Gauss-Hermite orders {order} and {2 * order} disagree: {val!r} vs {ref!r}"
            )
        val = ref
    return val


@dataclass(frozen=True, eq=False)
class GradedMesh:
    tau: float
    t: float
    n: int
    grade: float
    breakpoints: np.ndarray

    def nodes(self, points_per_cell: int = 4, extra_breaks=()):
        gaps, w = self.gap_nodes(points_per_cell, extra_breaks)
        return self.t - gaps, w

    def gap_nodes(self, points_per_cell: int = 4, extra_breaks=()):
        """Composite Gauss-Legendre nodes and weights in the graded variable.

        With ``t - s = (t - tau) (1 - u)^grade`` the cells are uniform in ``u`` and
        the Jacobian ``grade (t - tau) (1 - u)^(grade - 1)`` is folded into the
        weights, so an integrand like ``(t - s)^(1/grade - 1)`` becomes smooth.
        ``extra_breaks`` are points of ``(tau, t)`` added as cell boundaries.
        Returns the distances ``t - s`` (exact near ``t``) and the weights.
        """
        span = self.t - self.tau
        u = np.arange(self.n + 1) / self.n
        extra = [1.0 - ((self.t - b) / span) ** (1.0 / self.grade)
                 for b in extra_breaks if self.tau < b < self.t]
        if extra:
            u = np.unique(np.concatenate([u, extra]))
        un, uw = composite_legendre(u, points_per_cell)
        gaps = span * (1.0 - un) ** self.grade
        w = uw * self.grade * span * (1.0 - un) ** (self.grade - 1)
        return gaps, w


def graded_mesh(tau: float, t: float, n: int, grade: float = 1.0) -> GradedMesh:
    """Breakpoints ``s_j`` on ``[tau, t]`` with ``t - s_j = (t - tau) ((n - j)/n)^grade``,
    i.e. clustered at the right endpoint ``t``."""
    if not tau < t:
        raise ValueError("graded mesh needs tau < t")
    if n < 1:
        raise ValueError("graded mesh needs n >= 1")
    if grade < 1:
        raise ValueError("grade must be >= 1")
    j = np.arange(n + 1)
    gaps = (t - tau) * ((n - j) / n) ** grade
    s = t - gaps
    s[0], s[-1] = tau, t
    return GradedMesh(float(tau), float(t), int(n), float(grade), s)


def composite_legendre(breaks, points_per_cell: int = 4):
    breaks = np.asarray(breaks, dtype=float)
    r = rule("legendre", points_per_cell)
    a, b = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (b - a)
    nodes = (a + b) * 0.5 + half * r.nodes
    weights = half * r.weights
    return nodes.ravel(), weights.ravel()


def adaptive_legendre(f, a: float, b: float, tol: float = 1e-12, n: int = 8, max_depth: int = 40):
    """Adaptive composite Gauss-Legendre for a (possibly array-valued) ``f(s)``.

    Each interval is accepted when a single ``n``-point rule agrees with the sum
    over its two halves within ``tol`` relative to the largest entry of the
    one-panel estimate over ``[a, b]``.
    """
    r = rule("legendre", n)

    def gl(lo, hi):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        return sum(w * f(mid + half * x) for x, w in zip(r.nodes, r.weights)) * half

    first = gl(a, b)
    atol = tol * max(float(np.max(np.abs(first))), 1e-300)
    total = 0.0
    stack = [(a, b, first, 0)]
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = gl(lo, mid), gl(mid, hi)
        err = np.max(np.abs(left + right - whole))
        if err <= atol or depth >= max_depth:
            if err > atol:
                raise QuadratureError(f"adaptive quadrature failed to converge on [{lo}, {hi}]")
            total = total + left + right
        else:
            stack.append((lo, mid, left, depth + 1))
            stack.append((mid, hi, right, depth + 1))
    return total
