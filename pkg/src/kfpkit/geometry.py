"""Algebraic and metric structure of a Kolmogorov-Fokker-Planck operator.

The drift matrix ``B`` is block sub-diagonal and nilpotent, so the propagator
``E(t) = exp(-tB)`` is a matrix polynomial in ``t``.  Everything else here (group
law, dilations, homogeneous norm, quasi-distance) is built on top of it.

Most helpers come in two flavours: a scalar one acting on :class:`GroupPoint`
and an array one acting on ``x`` of shape ``(..., N)`` and ``t`` of shape
``(...)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RANK_RTOL = 1e-10


class StructureError(ValueError):
    """Raised when a drift specification violates the block/rank conditions."""


@dataclass(frozen=True)
class Dilation:
    """Exponents ``q_i`` of the anisotropic dilations and the homogeneous dimension."""

    q: tuple[int, ...]

    @property
    def Q(self) -> int:
        return int(sum(self.q))

    @property
    def space_time_dimension(self) -> int:
        return self.Q + 2

    @property
    def q_max(self) -> int:
        return int(max(self.q))

    def matrix(self, lam: float) -> np.ndarray:
        """``D_0(lam)`` as a diagonal matrix."""
        return np.diag(np.power(float(lam), np.asarray(self.q, dtype=float)))


@dataclass(frozen=True, eq=False)
class DriftStructure:
    m: tuple[int, ...]
    blocks: tuple[np.ndarray, ...]
    B: np.ndarray
    nilpotency_index: int
    _powers: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def N(self) -> int:
        return int(sum(self.m))

    @property
    def q(self) -> int:
        """Number of diffusive variables (``m_0``)."""
        return int(self.m[0])

    @property
    def k(self) -> int:
        return len(self.m) - 1

    @property
    def dilation(self) -> Dilation:
        return dilation_exponents(self.m)

    def propagator(self, t):
        """``E(t)``; ``t`` may be an array, giving shape ``t.shape + (N, N)``."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.N, self.N))
        for j, P in enumerate(self._powers):
            out = out + np.multiply.outer((-t) ** j / math.factorial(j), P)
        return out

    def to_json(self) -> dict:
        return {"m": list(self.m), "blocks": [b.tolist() for b in self.blocks]}


@dataclass(frozen=True)
class GroupPoint:
    x: np.ndarray
    t: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "t", float(self.t))
        if not (np.all(np.isfinite(self.x)) and math.isfinite(self.t)):
            raise ValueError("GroupPoint entries must be finite")

    @classmethod
    def origin(cls, N: int) -> "GroupPoint":
        return cls(np.zeros(N), 0.0)


@dataclass(frozen=True)
class GeometryConstants:
    kappa_hat: float
    kappa_triangle: float
    kappa_symmetry: float
    vartheta_hat: float
    sample_count: int
    seed: int
    box: float

    @property
    def kappa_safe(self) -> float:
        """``kappa_hat`` inflated by the 10% safety factor used for thresholds."""
        return 1.1 * self.kappa_hat


def _check_m(m: Sequence[int]) -> tuple[int, ...]:
    m = tuple(int(v) for v in m)
    if not m:
        raise StructureError("m must be non-empty")
    if any(v < 1 for v in m):
        raise StructureError("m entries must be positive integers")
    if any(m[j] > m[j - 1] for j in range(1, len(m))):
        raise StructureError("m must be nonincreasing (m_0 >= m_1 >= ... >= m_k)")
    return m


def build_drift(m: Sequence[int], blocks: Sequence) -> DriftStructure:
    """Assemble and validate the block matrix ``B`` from ``m`` and ``B_1..B_k``."""
    m = _check_m(m)
    k = len(m) - 1
    if len(blocks) != k:
        raise StructureError(f"expected {k} blocks for m={list(m)}, got {len(blocks)}")
    N = sum(m)
    B = np.zeros((N, N))
    offsets = np.concatenate([[0], np.cumsum(m)])
    checked = []
    for j, blk in enumerate(blocks, start=1):
        blk = np.atleast_2d(np.asarray(blk, dtype=float))
        if blk.shape != (m[j], m[j - 1]):
            raise StructureError(
                f"block B_{j} has shape {blk.shape}, expected {(m[j], m[j - 1])}"
            )
        if not np.all(np.isfinite(blk)):
            raise StructureError(f"block B_{j} has non-finite entries")
        sv = np.linalg.svd(blk, compute_uv=False)
        if sv[0] == 0.0 or sv[-1] <= RANK_RTOL * sv[0]:
            raise StructureError(
                f"block B_{j} must have rank {m[j]}; singular values {sv.tolist()}"
            )
        B[offsets[j]:offsets[j + 1], offsets[j - 1]:offsets[j]] = blk
        checked.append(blk)
    powers = [np.eye(N)]
    while np.any(powers[-1] != 0.0):
        powers.append(powers[-1] @ B)
    nil = len(powers) - 1
    return DriftStructure(m, tuple(checked), B, nil, tuple(powers[:-1]))


def kolmogorov(n: int = 1) -> DriftStructure:
    """The classical Kolmogorov drift ``B = [[0, 0], [I_n, 0]]``."""
    return build_drift((n, n), [np.eye(n)])


def parabolic(n: int = 1) -> DriftStructure:
    return build_drift((n,), [])


def chain(m: Sequence[int]) -> DriftStructure:
    """Drift with blocks ``B_j = [I_{m_j} | 0]``; always satisfies the rank condition."""
    m = _check_m(m)
    return build_drift(m, [np.eye(m[j], m[j - 1]) for j in range(1, len(m))])


PRESETS = {"kolmogorov": kolmogorov, "parabolic": parabolic}


def drift_from_json(spec) -> DriftStructure:
    """Accepts ``{"m": [...], "blocks": [...]}`` or ``{"preset": name, "n": n}``.

    Without ``blocks`` the chain blocks ``[I | 0]`` are used.
    """
    if isinstance(spec, str):
        spec = json.loads(spec)
    if "preset" in spec:
        name = spec["preset"]
        if name not in PRESETS:
            raise StructureError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        return PRESETS[name](int(spec.get("n", 1)))
    if "m" not in spec:
        raise StructureError("drift spec needs either 'preset' or 'm'")
    if spec.get("blocks") is None:
        return chain(spec["m"])
    return build_drift(spec["m"], spec["blocks"])


def dilation_exponents(m: Sequence[int]) -> Dilation:
    m = _check_m(m)
    q = []
    for j, mj in enumerate(m):
        q.extend([2 * j + 1] * mj)
    return Dilation(tuple(q))


def propagator(ds: DriftStructure, t):
    return ds.propagator(t)


# -- group law ---------------------------------------------------------------


def _dim_check(ds: DriftStructure, *points: GroupPoint):
    for p in points:
        if p.x.shape != (ds.N,):
            raise ValueError(f"point has dimension {p.x.shape}, expected ({ds.N},)")


def compose_arrays(ds: DriftStructure, y, s, x, t):
    """``(y, s) o (x, t) = (x + E(t) y, t + s)`` on arrays."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    Et = ds.propagator(t)
    return np.asarray(x) + np.einsum("...ij,...j->...i", Et, y), t + np.asarray(s)


def invert_arrays(ds: DriftStructure, x, t):
    t = np.asarray(t, dtype=float)
    return -np.einsum("...ij,...j->...i", ds.propagator(-t), np.asarray(x, dtype=float)), -t


def compose(ds: DriftStructure, eta: GroupPoint, xi: GroupPoint) -> GroupPoint:
    _dim_check(ds, eta, xi)
    x, t = compose_arrays(ds, eta.x, eta.t, xi.x, xi.t)
    return GroupPoint(x, float(t))


def invert(ds: DriftStructure, xi: GroupPoint) -> GroupPoint:
    _dim_check(ds, xi)
    x, t = invert_arrays(ds, xi.x, xi.t)
    return GroupPoint(x, float(t))


def dilate_arrays(dil: Dilation, lam: float, x, t):
    if not lam > 0:
        raise ValueError("dilation factor must be positive")
    scale = np.power(float(lam), np.asarray(dil.q, dtype=float))
    return np.asarray(x, dtype=float) * scale, np.asarray(t, dtype=float) * lam**2


def dilate(ds: DriftStructure, lam: float, xi: GroupPoint) -> GroupPoint:
    _dim_check(ds, xi)
    x, t = dilate_arrays(ds.dilation, lam, xi.x, xi.t)
    return GroupPoint(x, float(t))


# -- norms and distance ------------------------------------------------------


def space_norm(x, q: Sequence[int]):
    """Homogeneous space norm ``sum_i |x_i|^(1/q_i)`` along the last axis."""
    inv = 1.0 / np.asarray(q, dtype=float)
    return np.sum(np.abs(np.asarray(x, dtype=float)) ** inv, axis=-1)


def hom_norm_arrays(dil: Dilation, x, t):
    return space_norm(x, dil.q) + np.sqrt(np.abs(np.asarray(t, dtype=float)))


def hom_norm(ds: DriftStructure, xi: GroupPoint) -> float:
    _dim_check(ds, xi)
    return float(hom_norm_arrays(ds.dilation, xi.x, xi.t))


def qdistance_arrays(ds: DriftStructure, x, t, y, s):
    """``d((x,t),(y,s)) = ||x - E(t-s) y|| + sqrt|t-s|`` on broadcastable arrays."""
    dt = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
    v = np.asarray(x, dtype=float) - np.einsum(
        "...ij,...j->...i", ds.propagator(dt), np.asarray(y, dtype=float)
    )
    return space_norm(v, ds.dilation.q) + np.sqrt(np.abs(dt))


def qdistance(ds: DriftStructure, xi: GroupPoint, eta: GroupPoint) -> float:
    _dim_check(ds, xi, eta)
    return float(qdistance_arrays(ds, xi.x, xi.t, eta.x, eta.t))


# -- empirical structural constants -----------------------------------------


def _box_points(rng: np.random.Generator, n: int, k: int, N: int, box: float):
    """``n`` tuples of ``k`` points, drawn as one block so prefixes are nested."""
    raw = rng.uniform(-box, box, size=(n, k, N + 1))
    return raw[..., :N], raw[..., N]


def estimate_kappa(
    ds: DriftStructure, sample_count: int, seed: int = 0, box: float = 2.0
) -> GeometryConstants:
    """Empirical sup of the quasi-triangle and quasi-symmetry quotients of ``d``.

    Samples are drawn uniformly in ``[-box, box]^(N+1)``.  Because a single
    generator fills one block of shape ``(n, ...)``, the first ``n`` samples of a
    run with ``2n`` samples coincide with a run of ``n``.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    x, t = _box_points(rng, sample_count, 3, ds.N, box)
    xi, eta, zeta = (x[:, 0], t[:, 0]), (x[:, 1], t[:, 1]), (x[:, 2], t[:, 2])
    d_xe = qdistance_arrays(ds, *xi, *eta)
    d_ex = qdistance_arrays(ds, *eta, *xi)
    d_xz = qdistance_arrays(ds, *xi, *zeta)
    d_ez = qdistance_arrays(ds, *eta, *zeta)
    tri = float(np.max(d_xe / (d_xz + d_ez)))
    with np.errstate(invalid="ignore", divide="ignore"):
        sym_q = np.where(d_ex > 0, d_xe / d_ex, 1.0)
    sym = float(np.max(sym_q))
    kappa = max(1.0, tri, sym)

    # pairs xi1, xi2 close to each other relative to eta (premise of the
    # equivalence lemma); xi2 = xi1 o D(lam) z with small lam
    x2, t2 = _box_points(rng, sample_count, 2, ds.N, box)
    lam = rng.uniform(0.0, 0.5, size=sample_count)
    scale = lam[:, None] ** np.asarray(ds.dilation.q, dtype=float)
    xi2 = compose_arrays(ds, xi[0], xi[1], x2[:, 0] * scale, t2[:, 0] * lam**2)
    d1 = d_xe
    d12 = qdistance_arrays(ds, xi[0], xi[1], xi2[0], xi2[1])
    d2 = qdistance_arrays(ds, xi2[0], xi2[1], eta[0], eta[1])
    ok = (d1 >= 2 * kappa * d12) & (d2 > 0)
    if np.any(ok):
        r = d1[ok] / d2[ok]
        vartheta = max(1.0, float(np.max(np.maximum(r, 1.0 / r))))
    else:
        vartheta = 1.0
    return GeometryConstants(kappa, tri, sym, vartheta, sample_count, seed, box)


def propagator_constant(ds: DriftStructure, sample_count: int, seed: int = 0) -> float:
    """Fitted ``c`` in ``||E(t) x|| <= c (||x|| + sqrt|t|)``.

    By homogeneity the sup can be taken over the unit sphere ``rho(x, t) = 1``;
    random points are pushed onto it with the dilation ``D(1/rho)``.
    """
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1.0, 1.0, size=(sample_count, ds.N + 1))
    x, t = raw[:, : ds.N], raw[:, ds.N]
    dil = ds.dilation
    rho = hom_norm_arrays(dil, x, t)
    qs = np.asarray(dil.q, dtype=float)
    x = x / rho[:, None] ** qs
    t = t / rho**2
    Ex = np.einsum("nij,nj->ni", ds.propagator(t), x)
    return float(np.max(space_norm(Ex, dil.q)))
