"""Diffusion coefficient fields ``A_0 = (a_ij)`` of size ``q x q``.

Two time-only representations are supported (piecewise constant with
right-continuous breakpoints, and an arbitrary callable of ``t``) plus callable
space-time fields that are Hölder continuous in ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import space_norm

SYMMETRY_ATOL = 1e-14


class CoefficientError(ValueError):
    pass


class EllipticityError(CoefficientError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def _as_matrix(a, q: int | None = None) -> np.ndarray:
    A = np.atleast_2d(np.asarray(a, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise CoefficientError(f"coefficient matrix must be square, got shape {A.shape}")
    if q is not None and A.shape[0] != q:
        raise CoefficientError(f"coefficient matrix must be {q}x{q}, got {A.shape}")
    return A


def _check_symmetric(A: np.ndarray, where) -> None:
    if not np.all(np.isfinite(A)):
        raise CoefficientError(f"non-finite coefficient entries at {where}")
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_ATOL * max(1.0, np.max(np.abs(A))):
        raise CoefficientError(f"asymmetric coefficient matrix at {where}: {A.tolist()}")


class TimeCoefficients:
    """Base class for fields ``t -> A_0(t)``."""

    q: int
    nu: float | None

    def __call__(self, t: float) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def breakpoints_in(self, s: float, t: float) -> list[float]:
        """Points of ``(s, t)`` where the field may jump."""
        return []

    @property
    def is_piecewise_constant(self) -> bool:
        return False


class PiecewiseConstant(TimeCoefficients):
    """``A_0(t) = matrices[i]`` on ``[breaks[i-1], breaks[i])``, extended constantly.

    ``len(matrices) == len(breaks) + 1``; at a breakpoint the value on the right is
    used.
    """

    def __init__(self, breaks: Sequence[float], matrices: Sequence, nu: float | None = None):
        self.breaks = np.asarray(breaks, dtype=float).reshape(-1)
        if np.any(np.diff(self.breaks) <= 0):
            raise CoefficientError("breakpoints must be strictly increasing")
        mats = [_as_matrix(a) for a in matrices]
        if len(mats) != len(self.breaks) + 1:
            raise CoefficientError(
                f"need len(breaks)+1 = {len(self.breaks) + 1} matrices, got {len(mats)}"
            )
        self.q = mats[0].shape[0]
        for i, A in enumerate(mats):
            _as_matrix(A, self.q)
            _check_symmetric(A, f"piece {i}")
        self.matrices = np.stack(mats)
        self.nu = nu

    @classmethod
    def constant(cls, A, nu: float | None = None) -> "PiecewiseConstant":
        return cls([], [A], nu)

    def piece_index(self, t):
        return np.searchsorted(self.breaks, t, side="right")

    def __call__(self, t):
        return self.matrices[self.piece_index(t)]

    def breakpoints_in(self, s, t):
        return [float(b) for b in self.breaks if s < b < t]

    @property
    def is_piecewise_constant(self) -> bool:
        return True

    def to_json(self) -> dict:
        return {
            "type": "piecewise_t",
            "breaks": self.breaks.tolist(),
            "matrices": self.matrices.tolist(),
        }


class CallableTime(TimeCoefficients):
    def __init__(self, fn: Callable[[float], np.ndarray], q: int, nu: float | None = None,
                 breaks: Sequence[float] = ()):
        self.fn = fn
        self.q = int(q)
        self.nu = nu
        self._breaks = sorted(float(b) for b in breaks)

    def __call__(self, t):
        A = _as_matrix(self.fn(float(t)), self.q)
        _check_symmetric(A, f"t={t}")
        return A

    def breakpoints_in(self, s, t):
        return [b for b in self._breaks if s < b < t]


class SpaceTimeCoefficients:
    """Field ``(x, t) -> A_0(x, t)`` with declared ellipticity and Hölder data."""

    def __init__(self, fn: Callable[[np.ndarray, float], np.ndarray], q: int,
                 nu: float, alpha: float, Lambda: float | None = None):
        if not 0 < alpha < 1:
            raise CoefficientError("alpha must lie in (0, 1)")
        self.fn = fn
        self.q = int(q)
        self.nu = nu
        self.alpha = alpha
        self.Lambda = Lambda

    def __call__(self, x, t):
        A = _as_matrix(self.fn(np.asarray(x, dtype=float), float(t)), self.q)
        _check_symmetric(A, f"x={np.asarray(x).tolist()}, t={t}")
        return A

    def batch(self, X, t) -> np.ndarray:
        """Values at the rows of ``X``; shape ``(P, q, q)``."""
        return np.stack([self(x, t) for x in np.atleast_2d(X)])


@dataclass(frozen=True)
class EllipticityReport:
    nu_hat: float
    worst_point: tuple
    sample_description: str

    @property
    def ok(self) -> bool:
        return self.nu_hat > 0


def _ellipticity_of(A: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(A)
    if ev[0] <= 0:
        return float(ev[0]) if ev[0] < 0 else 0.0
    return float(min(ev[0], 1.0 / ev[-1]))


def check_ellipticity(field, sample_spec) -> EllipticityReport:
    """Largest ``nu`` with ``nu |z|^2 <= <A z, z> <= |z|^2 / nu`` on the samples.

    ``sample_spec`` is a sequence of times for a :class:`TimeCoefficients` field
    and a sequence of ``(x, t)`` pairs for a :class:`SpaceTimeCoefficients` field.
    Raises :class:`EllipticityError` with the offending point if ``nu_hat <= 0``.
    """
    samples = list(sample_spec)
    if not samples:
        raise CoefficientError("sample_spec must be nonempty")
    worst, where = math.inf, None
    for p in samples:
        if isinstance(field, SpaceTimeCoefficients):
            x, t = p
            A = field(x, t)
            key = (tuple(np.atleast_1d(np.asarray(x, dtype=float)).tolist()), float(t))
        else:
            A = field(p)
            _check_symmetric(A, f"t={p}")
            key = (float(p),)
        v = _ellipticity_of(A)
        if v < worst:
            worst, where = v, key
    report = EllipticityReport(worst, where, f"{len(samples)} sample points")
    if worst <= 0:
        raise EllipticityError(f"coefficient matrix not positive definite at {where}", report)
    return report


def holder_lambda(field: SpaceTimeCoefficients, alpha: float, points: np.ndarray,
                  times: Sequence[float], exponents: Sequence[int] | None = None) -> float:
    """Lower estimate of ``max_ij ||a_ij||_{C^alpha_x}`` over a sampled point set.

    Every pair of rows of ``points`` is compared at each time in ``times``; the
    distance between ``x1`` and ``x2`` is the homogeneous norm ``||x1 - x2||``
    with exponents ``exponents`` (all ones when omitted).
    """
    if not 0 < alpha < 1:
        raise CoefficientError("alpha must lie in (0, 1)")
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] == 0 or len(times) == 0:
        raise CoefficientError("empty point set")
    q_exp = np.ones(X.shape[1], dtype=int) if exponents is None else np.asarray(exponents)
    i, j = np.triu_indices(X.shape[0], k=1)
    dist = space_norm(X[i] - X[j], q_exp) ** alpha
    sup = np.zeros((field.q, field.q))
    semi = np.zeros((field.q, field.q))
    for t in times:
        vals = field.batch(X, t)
        sup = np.maximum(sup, np.max(np.abs(vals), axis=0))
        if len(i):
            with np.errstate(divide="ignore", invalid="ignore"):
                quo = np.abs(vals[i] - vals[j]) / dist[:, None, None]
            quo = np.where(dist[:, None, None] > 0, quo, 0.0)
            semi = np.maximum(semi, np.max(quo, axis=0))
    return float(np.max(sup + semi))


def freeze(field, xbar) -> TimeCoefficients:
    """Coefficients frozen at the spatial point ``xbar``: ``t -> A_0(xbar, t)``."""
    if isinstance(field, TimeCoefficients):
        return field
    xbar = np.asarray(xbar, dtype=float).copy()
    return CallableTime(lambda t: field(xbar, t), field.q, field.nu)


# -- JSON ---------------------------------------------------------------------


def _expr_field(spec: dict, q: int):
    """Named formula presets for the ``{"type": "expr"}`` coefficient spec."""
    name = spec.get("name")
    if name == "sine_x":
        amp = float(spec.get("amplitude", 0.5))
        freq = float(spec.get("frequency", 1.0))
        idx = int(spec.get("index", 0))
        fn = lambda x, t: (1.0 + amp * math.sin(freq * float(x[idx]))) * np.eye(q)
        nu = float(spec.get("nu", 1.0 / (1.0 + abs(amp))))
        return SpaceTimeCoefficients(fn, q, nu, float(spec.get("alpha", 0.5)))
    if name == "sine_t":
        amp = float(spec.get("amplitude", 0.5))
        omega = float(spec.get("omega", 1.0))
        fn = lambda t: (1.0 + amp * math.sin(omega * t)) * np.eye(q)
        return CallableTime(fn, q, spec.get("nu"))
    if name == "constant":
        return PiecewiseConstant.constant(float(spec.get("value", 1.0)) * np.eye(q), spec.get("nu"))
    raise CoefficientError(f"unknown coefficient formula {name!r}")


def coefficients_from_json(spec: dict, q: int | None = None):
    kind = spec.get("type")
    if kind == "piecewise_t":
        field = PiecewiseConstant(spec.get("breaks", []), spec["matrices"], spec.get("nu"))
        if q is not None and field.q != q:
            raise CoefficientError(f"coefficient matrices are {field.q}x{field.q}, operator needs q={q}")
        return field
    if kind == "expr":
        if q is None:
            raise CoefficientError("expr coefficients need the operator's q")
        return _expr_field(spec, q)
    raise CoefficientError(f"unknown coefficient type {kind!r}")
