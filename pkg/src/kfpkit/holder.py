"""Sampled Hölder seminorms and Schauder-ratio experiments.

Every estimate is a supremum of difference quotients over a finite pair set,
hence a lower bound of the true seminorm.  Three denominators are available:

* ``Cx``: ``||x1 - x2||^alpha`` for pairs sharing the same time;
* ``C``:  ``d(xi1, xi2)^alpha``;
* ``Ct``: ``d(xi1, xi2)^alpha + |t1 - t2|^(alpha / q_N)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import SpaceTimeCoefficients
from .geometry import DriftStructure, qdistance_arrays, space_norm

ALL_PAIRS_LIMIT = 2000
RANDOM_PAIRS = 1_000_000
VARIANTS = ("Cx", "C", "Ct")


@dataclass
class HolderReport:
    estimate: float
    witness: tuple | None  # ((x1, t1), (x2, t2))
    alpha: float
    variant: str
    description: str

    def to_json(self) -> dict:
        d = asdict(self)
        if self.witness is not None:
            d["witness"] = [[list(map(float, x)), float(t)] for x, t in self.witness]
        return d


def box_grid(box, points_per_axis: int) -> np.ndarray:
    """Tensor grid over ``box = [[lo, hi], ...]`` with ``points_per_axis`` per side."""
    axes = [np.linspace(lo, hi, int(points_per_axis)) for lo, hi in box]
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, len(box))


def pair_indices(n: int, seed: int = 0, limit: int = ALL_PAIRS_LIMIT, count: int = RANDOM_PAIRS):
    """All unordered pairs for ``n <= limit`` points, else ``count`` seeded random pairs."""
    if n < 2:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    if n <= limit:
        return np.triu_indices(n, k=1)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = np.where(j >= i, j + 1, j)
    return i, j


def _denominator(variant, ds: DriftStructure, X, T, i, j, alpha):
    if variant == "Cx":
        return space_norm(X[i] - X[j], ds.dilation.q) ** alpha
    d = qdistance_arrays(ds, X[i], T[i], X[j], T[j]) ** alpha
    if variant == "C":
        return d
    if variant == "Ct":
        return d + np.abs(T[i] - T[j]) ** (alpha / ds.dilation.q_max)
    raise ValueError(f"unknown variant {variant!r}")


def quotients(variant, ds: DriftStructure, X, T, V, i, j, alpha) -> np.ndarray:
    den = _denominator(variant, ds, X, T, i, j, alpha)
    num = np.abs(V[i] - V[j])
    with np.errstate(divide="ignore", invalid="ignore"):
        q = num / den
    return np.where(den > 0, q, 0.0)


def seminorm(variant: str, ds: DriftStructure, X, T, V, alpha: float, seed: int = 0,
             pairs=None) -> HolderReport:
    """Sampled seminorm of values ``V`` at space-time points ``(X[k], T[k])``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.broadcast_to(np.asarray(T, dtype=float), (X.shape[0],))
    V = np.asarray(V, dtype=float).reshape(X.shape[0])
    if pairs is None:
        i, j = pair_indices(X.shape[0], seed)
    else:
        i, j = (np.asarray(p, dtype=int) for p in pairs)
    if variant == "Cx":
        same = T[i] == T[j]
        i, j = i[same], j[same]
    if len(i) == 0:
        raise ValueError("empty pair set")
    q = quotients(variant, ds, X, T, V, i, j, alpha)
    k = int(np.argmax(q))
    wit = ((X[i[k]].copy(), float(T[i[k]])), (X[j[k]].copy(), float(T[j[k]])))
    return HolderReport(float(q[k]), wit, alpha, variant, f"{len(i)} pairs over {X.shape[0]} points")


def seminorm_Cx(ds, X, T, V, alpha, **kw) -> HolderReport:
    return seminorm("Cx", ds, X, T, V, alpha, **kw)


def seminorm_C(ds, X, T, V, alpha, **kw) -> HolderReport:
    return seminorm("C", ds, X, T, V, alpha, **kw)


def seminorm_Ct(ds, X, T, V, alpha, **kw) -> HolderReport:
    return seminorm("Ct", ds, X, T, V, alpha, **kw)


def witness_quotient(report: HolderReport, ds: DriftStructure, f) -> float:
    """Recompute the witness quotient from ``f(X, T) -> values``."""
    (x1, t1), (x2, t2) = report.witness
    X = np.array([x1, x2])
    T = np.array([t1, t2])
    V = np.asarray(f(X, T), dtype=float)
    return float(quotients(report.variant, ds, X, T, V, np.array([0]), np.array([1]), report.alpha)[0])


# -- Schauder ratios ----------------------------------------------------------


@dataclass
class SchauderRatioReport:
    numerator: float
    denominator: float
    ratio: float
    homogeneous_ratio: float
    space_time_quotient: float
    breakdown: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _space_time_points(X, times):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    times = np.asarray(times, dtype=float)
    XX = np.tile(X, (len(times), 1))
    TT = np.repeat(times, X.shape[0])
    return XX, TT


def _per_time(fn, X, times):
    return np.concatenate([np.asarray(fn(X, t)) for t in times], axis=0)


def schauder_ratio(ds: DriftStructure, coeffs, u, alpha: float, X, times, seed: int = 0
                   ) -> SchauderRatioReport:
    """Both sides of the global Schauder estimate for a manufactured ``u``.

    ``numerator = sum_ij ||d_ij u||_{Cx} + ||Yu||_{Cx} + sum_i ||d_i u||_{C} + ||u||_{C}``,
    ``denominator = ||Lu||_{Cx} + sup |u|``, norms being sup plus sampled seminorm.
    Also reported: the homogeneous ratio ``(sum_ij |d_ij u|_{Cx} + |Yu|_{Cx}) / |Lu|_{Cx}``
    and the largest space-time quotient of ``d_ij u`` with the ``Ct`` denominator.
    """
    q = ds.q
    XX, TT = _space_time_points(X, times)
    uval = _per_time(u.u, X, times)
    Luval = _per_time(lambda Y, t: u.Lu(coeffs, Y, t), X, times)
    if np.max(np.abs(uval)) == 0.0 and np.max(np.abs(Luval)) == 0.0:
        raise ValueError("degenerate manufactured solution: u vanishes on the grid")
    H = _per_time(u.hess, X, times)
    G = _per_time(u.grad, X, times)
    Y = _per_time(u.Yu, X, times)

    def norm(variant, V):
        r = seminorm(variant, ds, XX, TT, V, alpha, seed=seed)
        return float(np.max(np.abs(V))) + r.estimate, r.estimate

    parts = {}
    num = 0.0
    hom = 0.0
    st = 0.0
    for a in range(q):
        for b in range(q):
            n_, s_ = norm("Cx", H[:, a, b])
            parts[f"d2u_{a + 1}{b + 1}"] = n_
            num += n_
            hom += s_
            st = max(st, seminorm("Ct", ds, XX, TT, H[:, a, b], alpha, seed=seed).estimate)
    n_, s_ = norm("Cx", Y)
    parts["Yu"] = n_
    num += n_
    hom += s_
    for a in range(q):
        n_, _ = norm("C", G[:, a])
        parts[f"du_{a + 1}"] = n_
        num += n_
    n_, _ = norm("C", uval)
    parts["u"] = n_
    num += n_
    lu_norm, lu_semi = norm("Cx", Luval)
    den = lu_norm + float(np.max(np.abs(uval)))
    parts["Lu"] = lu_norm
    parts["sup_u"] = float(np.max(np.abs(uval)))
    if den == 0.0:
        raise ValueError("degenerate manufactured solution: denominator is zero")
    hratio = hom / lu_semi if lu_semi > 0 else math.inf
    return SchauderRatioReport(num, den, num / den, hratio, st, parts)
