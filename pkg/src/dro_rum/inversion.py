"""Robust demand inversion and the robust random-coefficient logit.

Given observed choice probabilities ``p``, the mean utilities rationalizing
them minimize ``W_DRO(u) - <p, u>`` over ``u`` with ``u[0] = 0``.  The
gradient in ``u`` is the robust choice probability minus ``p``.  Each outer
step re-solves the dual for the current ``u`` (warm-started) and applies a
damped share-matching update ``u += log p - log p_hat(u)``.  For the logit
this update is exact in one step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp, softmax

from .divergences import PhiDivergence
from .dro import ConvergenceError, DualPoint, RobustSolution, dual_weights, kl_solve, solve_dual
from .rum import ChoiceProbabilities, berry_inversion_mnl, shock_draws, utility_summaries, weighted_choice_probs

__all__ = [
    "PROB_FLOOR",
    "InversionResult",
    "validate_target",
    "robust_demand_inversion",
    "conjugate_value_at",
    "rc_utilities",
    "rc_robust_surplus",
    "rc_choice_probs",
    "rc_demand_inversion",
]

PROB_FLOOR = 1e-8
MAX_STEP = 2.0


@dataclass(frozen=True)
class InversionResult:
    """Recovered mean utilities with the dual point at the optimum.

    ``objective`` is ``W_DRO(u) - <p, u>`` at the returned ``u``, which equals
    minus the conjugate of the robust surplus at ``p``.
    """

    u: NDArray[np.float64] = field(repr=False)
    dual: DualPoint
    objective: float
    residual: NDArray[np.float64] = field(repr=False)
    iterations: int
    converged: bool = True
    floored: bool = False

    @property
    def residual_norm(self) -> float:
        return float(np.max(np.abs(self.residual)))


def validate_target(p: ChoiceProbabilities | ArrayLike, floor_boundary: bool = False) -> tuple[NDArray[np.float64], bool]:
    """Check a target share vector; returns ``(p, floored)``.

    Entries must sum to one within 1e-9.  Zero or negative entries are
    rejected unless ``floor_boundary``, in which case they are raised to
    :data:`PROB_FLOOR` and the vector renormalized, with a warning.
    """
    p = np.array(p, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("target probabilities must be a vector with at least two entries")
    if not np.all(np.isfinite(p)):
        raise ValueError("target probabilities must be finite")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"target probabilities sum to {p.sum():.12g}, not 1")
    if np.all(p > 0):
        return p, False
    if not floor_boundary:
        raise ValueError("target probabilities must be strictly positive")
    warnings.warn(f"boundary shares floored at {PROB_FLOOR:g} and renormalized", RuntimeWarning, stacklevel=3)
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(), True


def _share_matching(
    p: NDArray[np.float64],
    u0: NDArray[np.float64],
    fit: Callable[[NDArray[np.float64], DualPoint | None], tuple[NDArray[np.float64], RobustSolution]],
    scale: float,
    tol: float,
    max_iter: int,
):
    """Damped ``u += scale * (log p - log p_hat)`` iteration with ``u[0]`` pinned to 0."""
    log_p = np.log(p)
    u = u0 - u0[0]
    fitted, sol = fit(u, None)
    best = (np.max(np.abs(fitted - p)), u, fitted, sol)
    damping = 1.0
    it = 0
    while best[0] > tol and it < max_iter:
        it += 1
        _, u_best, fit_best, sol_best = best
        with np.errstate(divide="ignore"):
            step = scale * (log_p - np.log(fit_best))
        step = np.clip(np.nan_to_num(step, posinf=MAX_STEP, neginf=-MAX_STEP), -MAX_STEP, MAX_STEP)
        u = u_best + damping * step
        u -= u[0]
        fitted, sol = fit(u, sol_best.dual)
        err = np.max(np.abs(fitted - p))
        if err < best[0]:
            best = (err, u, fitted, sol)
            damping = min(1.0, 2.0 * damping)
        else:
            damping *= 0.5
            if damping < 1e-6:
                break
    err, u, fitted, sol = best
    return u, fitted, sol, it, bool(err <= tol)


def _finish(p, u, fitted, sol, it, converged, floored, strict) -> InversionResult:
    res = InversionResult(
        u=u,
        dual=sol.dual,
        objective=float(sol.surplus - np.dot(p, u)),
        residual=fitted - p,
        iterations=it,
        converged=converged,
        floored=floored,
    )
    if strict and not converged:
        err = ConvergenceError(
            f"inversion stopped after {it} iterations with max residual {res.residual_norm:.3g}"
        )
        err.result = res
        raise err
    return res


def robust_demand_inversion(
    p: ChoiceProbabilities | ArrayLike,
    batch,
    div: str | PhiDivergence,
    rho: float,
    init: ArrayLike | None = None,
    tol: float = 1e-4,
    max_iter: int = 500,
    floor_boundary: bool = False,
    strict: bool = True,
) -> InversionResult:
    """Mean utilities whose robust choice probabilities on ``batch`` match ``p``.

    ``init`` defaults to the logit inversion of ``p``.  Convergence means
    ``max_j |p_hat_j - p_j| <= tol``.  With ``strict`` a failure raises
    :class:`ConvergenceError` carrying the best iterate as ``.result``;
    otherwise it returns with ``converged=False``.
    """
    p, floored = validate_target(p, floor_boundary)
    draws = shock_draws(batch)
    if draws.shape[1] != p.size:
        raise ValueError(f"{p.size} shares but shocks have {draws.shape[1]} columns")
    u0 = berry_inversion_mnl(p) if init is None else np.array(init, dtype=float)
    if u0.shape != p.shape:
        raise ValueError("initial utilities have the wrong length")

    def fit(u, start):
        h, a = utility_summaries(u, draws)
        sol = solve_dual(h, div, rho, start)
        w = None if math.isinf(sol.dual.lam) else dual_weights(h, div, sol.dual)
        return weighted_choice_probs(a, w, p.size), sol

    out = _share_matching(p, u0, fit, 1.0, tol, max_iter)
    return _finish(p, *out, floored, strict)


def conjugate_value_at(p, batch, div, rho: float, **kwargs) -> float:
    """Conjugate of the robust surplus at ``p``: ``sup_u <p, u> - W_DRO(u)``."""
    return -robust_demand_inversion(p, batch, div, rho, **kwargs).objective


# random-coefficient logit


def _check_rc(u, Z, T, e_batch):
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    u = np.asarray(u, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    e = shock_draws(e_batch)
    if Z.shape[0] != u.size:
        raise ValueError(f"Z has {Z.shape[0]} rows for {u.size} alternatives")
    if Z.shape[1] != e.shape[1]:
        raise ValueError(f"Z has {Z.shape[1]} columns but coefficient draws have {e.shape[1]}")
    return u, Z, float(T), e


def rc_utilities(u, Z, e_batch) -> NDArray[np.float64]:
    """Per-draw systematic utilities ``u + Z e_i`` as an ``n x (J+1)`` matrix."""
    u, Z, _, e = _check_rc(u, Z, 1.0, e_batch)
    return u + e @ Z.T


def rc_robust_surplus(u, Z, T: float, e_batch, rho: float) -> RobustSolution:
    """KL robust surplus of the logit with random coefficients ``Z e``.

    The inner logit shock is integrated out in closed form, so each draw
    contributes ``h_i = T * logsumexp((u + Z e_i) / T)``.
    """
    u, Z, T, e = _check_rc(u, Z, T, e_batch)
    h = T * logsumexp((u + e @ Z.T) / T, axis=1)
    return kl_solve(h, rho)


def _rc_fit(u, Z, T, e, rho):
    v = (u + e @ Z.T) / T
    h = T * logsumexp(v, axis=1)
    sol = kl_solve(h, rho)
    s = softmax(v, axis=1)
    if math.isinf(sol.dual.lam):
        return s.mean(axis=0), sol
    w = dual_weights(h, "kl", sol.dual)
    fitted = w @ s
    return fitted / fitted.sum(), sol


def rc_choice_probs(u, Z, T: float, e_batch, rho: float) -> ChoiceProbabilities:
    """Robust mixed-logit probabilities: worst-case weighted mean of per-draw softmaxes."""
    u, Z, T, e = _check_rc(u, Z, T, e_batch)
    fitted, _ = _rc_fit(u, Z, T, e, rho)
    return ChoiceProbabilities(fitted, "robust_rc", e.shape[0])


def rc_demand_inversion(
    p: ChoiceProbabilities | ArrayLike,
    Z,
    T: float,
    e_batch,
    rho: float,
    init: ArrayLike | None = None,
    tol: float = 1e-4,
    max_iter: int = 500,
    floor_boundary: bool = False,
    strict: bool = True,
) -> InversionResult:
    """Mean utilities of the robust random-coefficient logit that match ``p``.

    The objective is smooth in ``u``; the share-matching step is scaled by
    ``T`` so that it is exact for ``Z = 0``.
    """
    p, floored = validate_target(p, floor_boundary)
    u_ref = np.zeros(p.size)
    _, Z, T, e = _check_rc(u_ref, Z, T, e_batch)
    u0 = T * berry_inversion_mnl(p) if init is None else np.array(init, dtype=float)

    def fit(u, start):
        return _rc_fit(u, Z, T, e, rho)

    out = _share_matching(p, u0, fit, T, tol, max_iter)
    return _finish(p, *out, floored, strict)
