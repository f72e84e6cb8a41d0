"""Scalar minimization and root-finding used by the dual solvers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0  # 1/golden ratio


@dataclass
class ScalarResult:
    x: float
    fx: float
    iterations: int
    converged: bool


def bracket_minimum(
    f: Callable[[float], float],
    x0: float,
    lo: float,
    hi: float,
    step: float = 1.0,
    max_iter: int = 200,
) -> tuple[float, float, float, int]:
    """Find ``a < b < c`` inside ``[lo, hi]`` with ``f(b) <= min(f(a), f(c))``.

    Expands geometrically from ``x0``.  When the function keeps decreasing
    toward a boundary, that boundary is returned as the middle point.
    """
    x0 = min(max(x0, lo), hi)
    f0 = f(x0)
    evals = 1
    right = min(x0 + step, hi)
    fr = f(right)
    evals += 1
    if fr < f0:
        a, fa, b, fb = x0, f0, right, fr
        d = step
        while b < hi and evals < max_iter:
            d *= 2.0
            c = min(b + d, hi)
            fc = f(c)
            evals += 1
            if fc >= fb:
                return a, b, c, evals
            a, fa, b, fb = b, fb, c, fc
        return a, b, b, evals
    c, fc, b, fb = right, fr, x0, f0
    d = step
    while b > lo and evals < max_iter:
        d *= 2.0
        a = max(b - d, lo)
        fa = f(a)
        evals += 1
        if fa >= fb:
            return a, b, c, evals
        c, fc, b, fb = b, fb, a, fa
    return b, b, c, evals


def golden_section(
    f: Callable[[float], float],
    a: float,
    c: float,
    xtol: float = 1e-10,
    max_iter: int = 500,
) -> ScalarResult:
    """Golden-section search for the minimum of a unimodal ``f`` on ``[a, c]``."""
    x1 = c - INV_PHI * (c - a)
    x2 = a + INV_PHI * (c - a)
    f1, f2 = f(x1), f(x2)
    it = 0
    while (c - a) > xtol * max(1.0, abs(x1) + abs(x2)) and it < max_iter:
        it += 1
        if f1 <= f2:
            c, x2, f2 = x2, x1, f1
            x1 = c - INV_PHI * (c - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (c - a)
            f2 = f(x2)
    converged = it < max_iter
    if f1 <= f2:
        return ScalarResult(x1, f1, it, converged)
    return ScalarResult(x2, f2, it, converged)


def safeguarded_newton(
    g: Callable[[float], tuple[float, float]],
    lo: float,
    hi: float,
    x0: float | None = None,
    tol: float = 1e-13,
    max_iter: int = 200,
    increasing: bool = True,
    pole: float | None = None,
) -> ScalarResult:
    """Root of a monotone ``g`` on ``[lo, hi]`` by Newton with bisection fallback.

    ``g(x)`` returns ``(value, derivative)``.  The bracket must straddle the
    root: ``g(lo) <= 0 <= g(hi)`` when ``increasing``, reversed otherwise.
    Non-finite values are treated as lying on the side of the nearer endpoint.
    Iteration also stops once a Newton step is below roundoff.

    With ``pole`` (a point at or below ``lo`` where ``g`` blows up) the
    fallback bisects geometrically in the distance to the pole, so a root
    many orders of magnitude closer to it is reached in few steps.
    ``fx`` of the result holds the final residual.
    """
    sign = 1.0 if increasing else -1.0
    x = 0.5 * (lo + hi) if x0 is None or not (lo <= x0 <= hi) else x0
    val = math.nan
    for it in range(1, max_iter + 1):
        val, der = g(x)
        val *= sign
        der *= sign
        if abs(val) <= tol:
            return ScalarResult(x, sign * val, it, True)
        if math.isnan(val):
            # overflowed toward the low side of the bracket
            val = -math.inf if (x - lo) < (hi - x) else math.inf
        if val < 0:
            lo = x
        else:
            hi = x
        if hi - lo <= 4e-16 * max(1.0, abs(lo), abs(hi)):
            return ScalarResult(x, sign * val, it, math.isfinite(val))
        step_ok = math.isfinite(val) and math.isfinite(der) and der > 0
        x_new = x - val / der if step_ok else math.nan
        if step_ok and abs(x_new - x) <= 1e-15 * max(1.0, abs(x)):
            # Newton has stalled at the roundoff floor of g
            return ScalarResult(x, sign * val, it, True)
        if not (lo < x_new < hi):
            if pole is not None and lo > pole:
                x_new = pole + math.sqrt((lo - pole) * (hi - pole))
            else:
                x_new = 0.5 * (lo + hi)
        x = x_new
    return ScalarResult(x, sign * val, max_iter, False)
