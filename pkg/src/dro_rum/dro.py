"""Distributionally robust surplus over phi-divergence balls around a nominal F.

Everything is a sample average approximation: expectations under ``F`` are
means over one fixed batch of shocks, so each solve is a deterministic convex
problem in the two dual multipliers

    Psi(lam, mu) = lam * rho + mu + lam * mean(phi*((h - mu) / lam)),

where ``h`` holds the row-wise maximal utilities ``max_j (u_j + eps_j)``.
The minimum is the robust surplus.  The minimizer defines the worst-case
reweighting ``w = phi*'((h - mu*) / lam*)`` of the nominal draws, and the
robust choice probabilities are the ``w``-weighted argmax frequencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from ._scalar import bracket_minimum, golden_section, safeguarded_newton
from .divergences import PhiDivergence, get_divergence
from .rum import (
    ChoiceProbabilities,
    shock_draws,
    utility_summaries,
    utility_vector,
    weighted_choice_probs,
)
from .shocks import NominalSpec, SampleBatch, Seed, draw_nominal

__all__ = [
    "LAMBDA_MIN",
    "LAMBDA_MAX",
    "ConvergenceError",
    "AcceptanceError",
    "DualPoint",
    "RobustSolution",
    "WDZReport",
    "AcceptRejectResult",
    "dual_objective",
    "dual_objective_h",
    "solve_dual",
    "kl_solve",
    "solve_robust_surplus",
    "kl_robust_surplus",
    "dual_weights",
    "robust_weights",
    "robust_choice_probs",
    "wdz_gradient_check",
    "accept_reject_sample",
]

LAMBDA_MIN = 1e-6
LAMBDA_MAX = 1e12
MEAN_WEIGHT_TOL = 1e-4
# keep conjugate arguments this far inside a finite domain endpoint
DOMAIN_MARGIN = 1e-12


class ConvergenceError(RuntimeError):
    """A dual solve did not meet its first-order tolerance."""

    def __init__(self, message: str, solution: RobustSolution | None = None):
        super().__init__(message)
        self.solution = solution


class AcceptanceError(RuntimeError):
    """Acceptance-rejection sampling accepted too few proposals."""


@dataclass(frozen=True)
class DualPoint:
    """Multipliers of the divergence constraint (``lam``) and of normalization (``mu``)."""

    lam: float
    mu: float


@dataclass(frozen=True)
class RobustSolution:
    """Result of one robust surplus solve on a fixed batch.

    ``gradient_norm`` is the Euclidean norm of the dual gradient at the
    returned point.  At the ``rho = 0`` shortcut ``lam`` is ``inf``: the dual
    infimum is only approached as ``lam`` grows without bound.
    """

    dual: DualPoint
    surplus: float
    rho: float
    divergence: str
    n: int
    iterations: int
    gradient_norm: float
    mean_weight: float
    at_floor: bool = False
    method: str = "nested_newton"


def _divergence_and_rho(div, rho):
    div = get_divergence(div)
    rho = float(rho)
    if not rho >= 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    return div, rho


def dual_objective_h(
    h: ArrayLike, div: str | PhiDivergence, rho: float, lam: float, mu: float
) -> float:
    """Dual objective for precomputed maximal utilities; ``inf`` off the domain."""
    div, rho = _divergence_and_rho(div, rho)
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    h = np.asarray(h, dtype=float)
    with np.errstate(over="ignore"):
        phi = div.value((h - mu) / lam)
        return float(lam * rho + mu + lam * np.mean(phi))


def dual_objective(u, batch, div, rho: float, point: DualPoint) -> float:
    """``lam*rho + mu + lam*mean(phi*((h - mu)/lam))`` over the rows of ``batch``."""
    h, _ = utility_summaries(utility_vector(u), batch)
    return dual_objective_h(h, div, rho, point.lam, point.mu)


# dual solver on h


@dataclass
class _Stats:
    lam: float
    mu: float
    value: float
    dlam: float
    d2lam: float
    mean_weight: float
    inner_iterations: int


class _DualProblem:
    """Nested minimization of the dual objective for a fixed vector ``h``."""

    def __init__(self, h: NDArray[np.float64], div: PhiDivergence, rho: float):
        self.h = h
        self.div = div
        self.rho = rho
        self.n = h.size
        self.hmax = float(h.max())
        self.hmean = float(h.mean())
        self.log_n = math.log(self.n)
        self.cache: dict[float, _Stats] = {}
        self.evaluations = 0

    def _log_mean_slope(self, lam: float, mu: float) -> tuple[float, float]:
        """``log mean phi*'(s)`` and its derivative in ``mu``; exact in one step for KL."""
        div = self.div
        s = (self.h - mu) / lam
        lw = div.log_conjugate_deriv(s)
        top = lw.max()
        e = np.exp(lw - top)
        total = e.sum()
        ell = top + math.log(total) - self.log_n
        slope = -float(np.dot(e, div.curvature_ratio(s))) / (total * lam)
        return ell, slope

    def _mean_slope(self, lam: float, mu: float) -> tuple[float, float]:
        """``mean phi*'(s) - 1`` and its derivative in ``mu``.

        Convex and decreasing in ``mu``, so Newton is monotone after one step.
        Used for bounded domains, where ``phi*'`` cannot overflow.
        """
        div = self.div
        s = (self.h - mu) / lam
        if s.max() >= div.domain[1]:
            return math.inf, math.nan
        return float(div.conjugate_deriv(s).mean()) - 1.0, -float(div.conjugate_second_deriv(s).mean()) / lam

    def inner(self, lam: float, mu0: float | None = None):
        """Minimize over ``mu`` for fixed ``lam``; returns ``(mu, iterations)``."""
        s1 = self.div.unit_slope_point
        hi = self.hmax - lam * s1
        lo = self.hmean - lam * s1
        pole = None
        if self.div.bounded_above:
            pole = self.hmax - lam * self.div.domain[1]
            lo = max(lo, self.hmax - lam * (self.div.domain[1] - DOMAIN_MARGIN))
        if hi - lo <= 4e-16 * max(1.0, abs(hi)):
            return hi, 0
        g = self._mean_slope if self.div.bounded_above else self._log_mean_slope
        res = safeguarded_newton(
            lambda m: g(lam, m), lo, hi, x0=mu0, tol=1e-12, increasing=False, pole=pole
        )
        return res.x, res.iterations

    def stats(self, lam: float, mu0: float | None = None) -> _Stats:
        if lam in self.cache:
            return self.cache[lam]
        mu, it = self.inner(lam, mu0)
        div = self.div
        s = (self.h - mu) / lam
        phi = div.conjugate(s)
        d1 = div.conjugate_deriv(s)
        d2 = div.conjugate_second_deriv(s)
        a = d2.mean()
        b = np.dot(d2, s) / self.n
        c = np.dot(d2 * s, s) / self.n
        st = _Stats(
            lam=lam,
            mu=mu,
            value=lam * self.rho + mu + lam * phi.mean(),
            dlam=self.rho + phi.mean() - np.dot(s, d1) / self.n,
            d2lam=max(c - b * b / a, 0.0) / lam if a > 0 else 0.0,
            mean_weight=float(d1.mean()),
            inner_iterations=it,
        )
        self.cache[lam] = st
        self.evaluations += 1 + it
        return st

    def solve(self, start: DualPoint | None = None, tol: float = 1e-9) -> tuple[_Stats, bool]:
        """Returns the optimal stats and whether the ``lam`` floor is active."""
        warm = start is not None and math.isfinite(start.lam) and start.lam > 0
        if warm:
            lam0 = min(max(start.lam, LAMBDA_MIN), LAMBDA_MAX)
            mu_prev = start.mu
            factor = 2.0
        else:
            lam0 = max(float(np.std(self.h)), 0.0) + 1e-3
            mu_prev = None
            factor = 10.0
        t_min, t_max = math.log(LAMBDA_MIN), math.log(LAMBDA_MAX)

        def at(t: float) -> _Stats:
            nonlocal mu_prev
            st = self.stats(math.exp(t), mu_prev)
            mu_prev = st.mu
            return st

        t0 = math.log(lam0)
        st0 = at(t0)
        if abs(st0.dlam) <= tol:
            return st0, False
        step = math.log(factor)
        if st0.dlam < 0:
            t_lo, t_hi = t0, t0
            while True:
                t_hi = min(t_hi + step, t_max)
                st = at(t_hi)
                if st.dlam >= 0:
                    break
                if t_hi >= t_max:
                    raise ConvergenceError(
                        f"no dual minimizer below lambda={LAMBDA_MAX:g} (rho={self.rho})"
                    )
                t_lo = t_hi
                step *= 2.0
        else:
            t_lo, t_hi = t0, t0
            while True:
                t_lo = max(t_lo - step, t_min)
                st = at(t_lo)
                if st.dlam <= 0:
                    break
                if t_lo <= t_min:
                    return st, True
                t_hi = t_lo
                step *= 2.0

        def g(t):
            st = at(t)
            return st.dlam, st.lam * st.d2lam

        res = safeguarded_newton(g, t_lo, t_hi, x0=t_hi, tol=tol)
        return at(res.x), False


def _solution_from(problem: _DualProblem, st: _Stats, at_floor: bool, method: str) -> RobustSolution:
    grad = math.hypot(0.0 if at_floor else st.dlam, 1.0 - st.mean_weight)
    sol = RobustSolution(
        dual=DualPoint(st.lam, st.mu),
        surplus=float(st.value),
        rho=problem.rho,
        divergence=problem.div.name,
        n=problem.n,
        iterations=problem.evaluations,
        gradient_norm=float(grad),
        mean_weight=st.mean_weight,
        at_floor=at_floor,
        method=method,
    )
    if abs(st.mean_weight - 1.0) > MEAN_WEIGHT_TOL or not (at_floor or abs(st.dlam) <= 1e-6):
        raise ConvergenceError(
            f"dual solve did not converge: mean weight {st.mean_weight:.3g}, "
            f"lambda residual {st.dlam:.3g}",
            sol,
        )
    return sol


def _shortcut(h: NDArray[np.float64], div: PhiDivergence) -> RobustSolution:
    mean = float(np.mean(h))
    return RobustSolution(
        dual=DualPoint(math.inf, mean),
        surplus=mean,
        rho=0.0,
        divergence=div.name,
        n=h.size,
        iterations=0,
        gradient_norm=0.0,
        mean_weight=1.0,
        method="rho0_shortcut",
    )


def _as_h(h) -> NDArray[np.float64]:
    h = np.asarray(h, dtype=float).ravel()
    if h.size == 0:
        raise ValueError("empty batch")
    return h


def solve_dual(
    h: ArrayLike,
    div: str | PhiDivergence,
    rho: float,
    start: DualPoint | None = None,
) -> RobustSolution:
    """Robust surplus for a vector of maximal utilities ``h``.

    Nested scheme: for each ``lam`` the ``mu`` problem is solved by
    safeguarded Newton on ``log mean phi*'((h - mu)/lam) = 0``, and the
    outer profile in ``log(lam)`` by safeguarded Newton on its derivative.
    ``start`` warm-starts both levels.

    Raises:
        ConvergenceError: if the first-order residuals exceed tolerance.
    """
    div, rho = _divergence_and_rho(div, rho)
    h = _as_h(h)
    if rho == 0.0:
        return _shortcut(h, div)
    problem = _DualProblem(h, div, rho)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        st, at_floor = problem.solve(start)
    return _solution_from(problem, st, at_floor, "nested_newton")


def kl_solve(h: ArrayLike, rho: float, xtol: float = 1e-11) -> RobustSolution:
    """KL robust surplus via the closed-form profile in ``lam``.

    Minimizes ``lam*rho + lam*log mean exp(h/lam)`` by golden-section search
    in ``log(lam)`` and recovers ``mu* = lam* log mean exp(h/lam*)``.
    """
    div, rho = _divergence_and_rho("kl", rho)
    h = _as_h(h)
    if rho == 0.0:
        return _shortcut(h, div)
    n = h.size
    top = float(h.max())
    shifted = h - top
    log_n = math.log(n)

    def log_mean_exp(lam):
        return logsumexp(shifted / lam) - log_n

    def profile(t):
        lam = math.exp(t)
        return lam * rho + top + lam * log_mean_exp(lam)

    t_min, t_max = math.log(LAMBDA_MIN), math.log(LAMBDA_MAX)
    t0 = math.log(float(np.std(h)) + 1e-3)
    a, b, c, evals = bracket_minimum(profile, t0, t_min, t_max, step=math.log(10.0))
    if a == b:
        t_star, it = a, 0
    else:
        res = golden_section(profile, a, c, xtol=xtol)
        t_star, it = res.x, res.iterations
    at_floor = t_star - t_min <= 1e-9
    lam = math.exp(t_star)
    mu = top + lam * log_mean_exp(lam)
    s = (h - mu) / lam
    w = np.exp(s)
    mean_weight = float(w.mean())
    dlam = rho + float(np.mean(np.expm1(s) - s * w))
    sol = RobustSolution(
        dual=DualPoint(lam, mu),
        surplus=float(lam * rho + mu + lam * np.mean(np.expm1(s))),
        rho=rho,
        divergence="kl",
        n=n,
        iterations=evals + it,
        gradient_norm=math.hypot(0.0 if at_floor else dlam, 1.0 - mean_weight),
        mean_weight=mean_weight,
        at_floor=at_floor,
        method="kl_golden_section",
    )
    if abs(mean_weight - 1.0) > MEAN_WEIGHT_TOL:
        raise ConvergenceError(f"KL solve: mean weight {mean_weight:.3g}", sol)
    return sol


def solve_robust_surplus(u, batch, div, rho: float, start: DualPoint | None = None) -> RobustSolution:
    """Robust surplus ``W_DRO(u)`` on a fixed batch (exact shortcut at ``rho = 0``)."""
    h, _ = utility_summaries(utility_vector(u), batch)
    return solve_dual(h, div, rho, start)


def kl_robust_surplus(u, batch, rho: float) -> RobustSolution:
    """KL robust surplus by the one-dimensional closed-form route."""
    h, _ = utility_summaries(utility_vector(u), batch)
    return kl_solve(h, rho)


def dual_weights(h: ArrayLike, div: str | PhiDivergence, dual: DualPoint) -> NDArray[np.float64]:
    """Worst-case likelihood ratios ``phi*'((h - mu)/lam)`` (ones when ``lam`` is infinite)."""
    div = get_divergence(div)
    h = np.asarray(h, dtype=float)
    if math.isinf(dual.lam):
        return np.ones_like(h)
    with np.errstate(over="ignore"):
        w = div.derivative((h - dual.mu) / dual.lam)
    if not np.all(np.isfinite(w)):
        raise ConvergenceError("robust weights left the conjugate domain at the reported optimum")
    return w


def robust_weights(u, batch, div, sol: RobustSolution) -> NDArray[np.float64]:
    """Robust density of each draw relative to the nominal one."""
    h, _ = utility_summaries(utility_vector(u), batch)
    return dual_weights(h, div, sol.dual)


def robust_choice_probs(
    u, batch, div, rho: float, solution: RobustSolution | None = None
) -> ChoiceProbabilities:
    """Self-normalized importance estimate of the robust choice probabilities.

    Without ``solution`` the dual is solved on ``batch`` itself.  Passing a
    solution obtained on another batch evaluates its worst-case weights on
    this one.
    """
    u = utility_vector(u)
    h, a = utility_summaries(u, batch)
    if solution is None:
        solution = solve_dual(h, div, rho)
    w = None if math.isinf(solution.dual.lam) else dual_weights(h, div, solution.dual)
    probs = weighted_choice_probs(a, w, u.size)
    return ChoiceProbabilities(probs, "robust", a.size)


@dataclass(frozen=True)
class WDZReport:
    """Finite-difference gradient of the sample robust surplus vs. robust probabilities."""

    gradient: NDArray[np.float64] = field(repr=False)
    probs: NDArray[np.float64] = field(repr=False)
    step: float
    max_deviation: float

    @property
    def deviation(self) -> NDArray[np.float64]:
        return np.abs(self.gradient - self.probs)


def wdz_gradient_check(u, batch, div, rho: float, h: float = 1e-3) -> WDZReport:
    """Compare central differences of the surplus with the robust probabilities.

    Each perturbed surplus is re-solved on the same batch.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"step must lie in [1e-4, 1e-2], got {h}")
    u = utility_vector(u)
    draws = shock_draws(batch)
    base = solve_robust_surplus(u, draws, div, rho)
    probs = robust_choice_probs(u, draws, div, rho, solution=base).probs
    grad = np.empty(u.size)
    for j in range(u.size):
        e = np.zeros(u.size)
        e[j] = h
        up = solve_robust_surplus(u + e, draws, div, rho, start=base.dual).surplus
        down = solve_robust_surplus(u - e, draws, div, rho, start=base.dual).surplus
        grad[j] = (up - down) / (2.0 * h)
    return WDZReport(grad, probs, h, float(np.max(np.abs(grad - probs))))


@dataclass(frozen=True)
class AcceptRejectResult:
    """Draws from the robust density plus envelope diagnostics.

    ``capped_fraction`` is the share of proposals whose weight exceeded the
    cap.  Those draws are under-accepted, so a nonzero value measures the
    bias of the capped envelope.
    """

    batch: SampleBatch
    acceptance_rate: float
    capped_fraction: float
    weight_cap: float
    proposals: int

    @property
    def biased(self) -> bool:
        return self.capped_fraction > 1e-3


def accept_reject_sample(
    u,
    nominal: NominalSpec,
    div,
    sol: RobustSolution,
    n: int,
    weight_cap: float | None = None,
    seed: Seed = 0,
    cap_quantile: float | None = None,
    min_acceptance: float = 1e-4,
) -> AcceptRejectResult:
    """Sample the robust distribution by thinning ``n`` nominal proposals.

    A proposal with weight ``w`` is kept with probability
    ``min(w, cap) / cap``.  The weight is unbounded under a fully supported
    nominal, so no finite cap is an exact envelope.  Give either a fixed
    ``weight_cap`` or ``cap_quantile``, which sets the cap to that quantile of
    the proposal weights.

    Raises:
        AcceptanceError: if fewer than ``min_acceptance`` of proposals survive.
    """
    if (weight_cap is None) == (cap_quantile is None):
        raise ValueError("give exactly one of weight_cap and cap_quantile")
    u = utility_vector(u)
    rng = np.random.default_rng(seed)
    proposals = draw_nominal(nominal, n, rng)
    h, _ = utility_summaries(u, proposals)
    w = dual_weights(h, div, sol.dual)
    cap = float(np.quantile(w, cap_quantile)) if cap_quantile is not None else float(weight_cap)
    if not cap >= 1.0:
        raise ValueError(f"weight cap must be at least 1, got {cap}")
    keep = rng.random(n) * cap < np.minimum(w, cap)
    rate = float(keep.mean())
    if rate < min_acceptance:
        raise AcceptanceError(f"acceptance rate {rate:.2e} below {min_acceptance:g}")
    return AcceptRejectResult(
        batch=SampleBatch(proposals[keep], seed, nominal),
        acceptance_rate=rate,
        capped_fraction=float(np.mean(w > cap)),
        weight_cap=cap,
        proposals=n,
    )
