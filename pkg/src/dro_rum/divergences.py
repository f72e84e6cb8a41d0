"""phi-divergence families exposed through their convex conjugates.

Every dual computation in the package only needs the conjugate ``phi*``, its
first two derivatives and the open interval on which it is finite.  The
canonical entries use the normalized generators (``phi(1) = phi'(1) = 0``),
for which ``phi*(0) = 0`` and ``phi*'(0) = 1``.  Two literal variants,
``kl_table1`` and ``rkl_table1``, use the un-normalized generators and are
kept for cross-checks only.

Outside the conjugate domain the conjugate value is ``+inf`` (the closed
convex extension) and the derivatives are ``nan``.  Nothing here raises on an
out-of-domain argument, because dual minimizers legitimately probe
infeasible points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "OUT_OF_DOMAIN",
    "PhiDivergence",
    "DivergenceReport",
    "DIVERGENCES",
    "CANONICAL",
    "get_divergence",
    "conjugate_value",
    "conjugate_derivative",
    "conjugate_second_derivative",
    "validate_divergence",
]

#: Marker returned by :func:`conjugate_value` outside the conjugate domain.
OUT_OF_DOMAIN = math.inf

ScalarFn = Callable[[NDArray[np.float64]], NDArray[np.float64]]


@dataclass(frozen=True)
class PhiDivergence:
    """A divergence family described by its conjugate.

    The callables are only evaluated on points inside ``domain``; the public
    accessors below add the out-of-domain handling.

    Attributes:
        name: registry key.
        conjugate: ``s -> phi*(s)``.
        conjugate_deriv: ``s -> phi*'(s)``.
        conjugate_second_deriv: ``s -> phi*''(s)``.
        log_conjugate_deriv: ``s -> log phi*'(s)``, used by the dual solver to
            evaluate ``log E[phi*'(s)]`` without overflow.
        curvature_ratio: ``s -> phi*''(s) / phi*'(s)``.
        domain: open interval ``(a, b)``; endpoints may be infinite.
        unit_slope_point: the point where ``phi*'`` equals 1.  It is 0 for
            the normalized forms.
    """

    name: str
    conjugate: ScalarFn = field(repr=False)
    conjugate_deriv: ScalarFn = field(repr=False)
    conjugate_second_deriv: ScalarFn = field(repr=False)
    log_conjugate_deriv: ScalarFn = field(repr=False)
    curvature_ratio: ScalarFn = field(repr=False)
    domain: tuple[float, float] = (-math.inf, math.inf)
    unit_slope_point: float = 0.0

    @property
    def bounded_above(self) -> bool:
        return math.isfinite(self.domain[1])

    def in_domain(self, s: ArrayLike) -> NDArray[np.bool_]:
        s = np.asarray(s, dtype=float)
        a, b = self.domain
        return (s > a) & (s < b)

    def value(self, s: ArrayLike) -> NDArray[np.float64]:
        return _masked(self, s, self.conjugate, OUT_OF_DOMAIN)

    def derivative(self, s: ArrayLike) -> NDArray[np.float64]:
        return _masked(self, s, self.conjugate_deriv, math.nan)

    def second_derivative(self, s: ArrayLike) -> NDArray[np.float64]:
        return _masked(self, s, self.conjugate_second_deriv, math.nan)


def _masked(div: PhiDivergence, s: ArrayLike, fn: ScalarFn, fill: float):
    s = np.asarray(s, dtype=float)
    ok = div.in_domain(s)
    if ok.all():
        out = fn(s)
    else:
        out = np.full(s.shape, fill)
        out[ok] = fn(s[ok])
    return out[()] if out.ndim == 0 else out


def _one_minus(s):
    return 1.0 - s


KL = PhiDivergence(
    name="kl",
    conjugate=np.expm1,
    conjugate_deriv=np.exp,
    conjugate_second_deriv=np.exp,
    log_conjugate_deriv=lambda s: np.asarray(s, dtype=float),
    curvature_ratio=np.ones_like,
)

REVERSE_KL = PhiDivergence(
    name="reverse_kl",
    conjugate=lambda s: -np.log1p(-s),
    conjugate_deriv=lambda s: 1.0 / _one_minus(s),
    conjugate_second_deriv=lambda s: 1.0 / _one_minus(s) ** 2,
    log_conjugate_deriv=lambda s: -np.log1p(-s),
    curvature_ratio=lambda s: 1.0 / _one_minus(s),
    domain=(-math.inf, 1.0),
)

HELLINGER = PhiDivergence(
    name="hellinger",
    conjugate=lambda s: s / _one_minus(s),
    conjugate_deriv=lambda s: 1.0 / _one_minus(s) ** 2,
    conjugate_second_deriv=lambda s: 2.0 / _one_minus(s) ** 3,
    log_conjugate_deriv=lambda s: -2.0 * np.log1p(-s),
    curvature_ratio=lambda s: 2.0 / _one_minus(s),
    domain=(-math.inf, 1.0),
)

# Literal generators phi(t) = t log t and phi(t) = -log t.
KL_LITERAL = PhiDivergence(
    name="kl_table1",
    conjugate=lambda s: np.exp(s - 1.0),
    conjugate_deriv=lambda s: np.exp(s - 1.0),
    conjugate_second_deriv=lambda s: np.exp(s - 1.0),
    log_conjugate_deriv=lambda s: np.asarray(s, dtype=float) - 1.0,
    curvature_ratio=np.ones_like,
    unit_slope_point=1.0,
)

REVERSE_KL_LITERAL = PhiDivergence(
    name="rkl_table1",
    conjugate=lambda s: -1.0 - np.log(-s),
    conjugate_deriv=lambda s: -1.0 / s,
    conjugate_second_deriv=lambda s: 1.0 / s**2,
    log_conjugate_deriv=lambda s: -np.log(-s),
    curvature_ratio=lambda s: -1.0 / s,
    domain=(-math.inf, 0.0),
    unit_slope_point=-1.0,
)

DIVERGENCES: dict[str, PhiDivergence] = {
    d.name: d for d in (KL, REVERSE_KL, HELLINGER, KL_LITERAL, REVERSE_KL_LITERAL)
}

#: Names of the normalized registry entries.
CANONICAL = ("kl", "reverse_kl", "hellinger")


def get_divergence(div: str | PhiDivergence) -> PhiDivergence:
    """Look up a divergence by name; instances pass through unchanged."""
    if isinstance(div, PhiDivergence):
        return div
    try:
        return DIVERGENCES[div]
    except KeyError:
        known = ", ".join(sorted(DIVERGENCES))
        raise ValueError(f"unknown divergence {div!r}; expected one of {known}") from None


def conjugate_value(div: str | PhiDivergence, s: ArrayLike):
    """``phi*(s)``, or :data:`OUT_OF_DOMAIN` (``+inf``) outside the domain."""
    return get_divergence(div).value(s)


def conjugate_derivative(div: str | PhiDivergence, s: ArrayLike):
    """``phi*'(s)``, or ``nan`` outside the domain."""
    return get_divergence(div).derivative(s)


def conjugate_second_derivative(div: str | PhiDivergence, s: ArrayLike):
    """``phi*''(s)``, or ``nan`` outside the domain."""
    return get_divergence(div).second_derivative(s)


@dataclass(frozen=True)
class DivergenceReport:
    """Outcome of :func:`validate_divergence`, one boolean per check."""

    name: str
    checks: dict[str, bool]
    max_derivative_rel_error: float
    out_of_domain: tuple[float, ...] = ()

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def validate_divergence(
    div: str | PhiDivergence,
    grid: ArrayLike,
    step: float = 1e-5,
    rtol: float = 1e-6,
) -> DivergenceReport:
    """Numerically audit a divergence on a grid of conjugate arguments.

    Checks that every point is in the domain, that ``phi*'`` matches central
    differences of ``phi*`` to relative error ``rtol``, that ``phi*''`` is
    positive, that ``phi*'`` is nonnegative and nondecreasing along the
    sorted grid, and the Fenchel-Young bound ``phi*(s) >= s``.

    Near a finite right endpoint the difference step is shrunk to 1e-4 times
    of the distance to the pole, since the truncation error of a fixed step
    blows up like ``(step / (b - s))**2`` there.
    """
    div = get_divergence(div)
    s = np.sort(np.asarray(grid, dtype=float).ravel())
    inside = div.in_domain(s)
    bad = tuple(float(x) for x in s[~inside])
    s = s[inside]

    checks = {"in_domain": not bad}
    if s.size == 0:
        return DivergenceReport(div.name, {**checks, "nonempty": False}, math.nan, bad)

    a, b = div.domain
    room = np.minimum(s - a, b - s)
    h = np.minimum(step, 1e-4 * room)
    fd = (div.value(s + h) - div.value(s - h)) / (2.0 * h)
    d1 = div.derivative(s)
    rel = np.abs(fd - d1) / np.maximum(np.abs(d1), 1e-300)
    max_rel = float(rel.max())

    checks["derivative_matches_fd"] = max_rel < rtol
    checks["strictly_convex"] = bool(np.all(div.second_derivative(s) > 0))
    checks["nonnegative_slope"] = bool(np.all(d1 >= 0))
    checks["monotone_slope"] = bool(np.all(np.diff(d1) >= 0))
    checks["fenchel_young"] = bool(np.all(div.value(s) >= s - 1e-12 * np.abs(s)))
    return DivergenceReport(div.name, checks, max_rel, bad)
