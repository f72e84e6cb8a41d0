"""Classical random utility machinery: surplus, MNL, simulated MNP, Berry inversion.

These serve both as baselines for the robust model and as oracles in its
tests.  Utilities are plain float arrays of length ``J + 1`` with index 0 the
outside option.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp, softmax

from .shocks import SampleBatch, Seed, sample_mvn

__all__ = [
    "EULER_GAMMA",
    "ChoiceProbabilities",
    "utility_vector",
    "shock_draws",
    "h_max",
    "argmax_alternative",
    "nominal_surplus_mc",
    "mnl_surplus",
    "mnl_choice_probs",
    "empirical_choice_probs",
    "weighted_choice_probs",
    "choice_covariance",
    "utility_summaries",
    "mnp_choice_probs",
    "berry_inversion_mnl",
]

EULER_GAMMA = 0.57721566490153286

Provenance = Literal["analytic_mnl", "empirical", "mnp", "robust", "robust_rc"]


@dataclass(frozen=True, eq=False)
class ChoiceProbabilities:
    """A point on the probability simplex together with how it was obtained."""

    probs: NDArray[np.float64]
    provenance: Provenance
    estimator_n: int | None = None

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("probabilities must be a non-empty vector")
        tol = 1e-12 if self.estimator_n is None else 1e-9
        if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
            raise ValueError(f"not on the simplex: {p}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def percent(self) -> NDArray[np.float64]:
        return 100.0 * self.probs

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype)

    def __len__(self) -> int:
        return self.probs.size


def utility_vector(values: ArrayLike, normalized: bool = False) -> NDArray[np.float64]:
    """Validate a utility vector; with ``normalized`` require ``u[0] == 0``."""
    u = np.asarray(values, dtype=float)
    if u.ndim != 1 or u.size < 1:
        raise ValueError("utility vector must be 1-d and non-empty")
    if not np.all(np.isfinite(u)):
        raise ValueError("utility vector must be finite")
    if normalized and u[0] != 0.0:
        raise ValueError(f"outside option utility must be 0, got {u[0]}")
    return u


def shock_draws(batch: SampleBatch | ArrayLike) -> NDArray[np.float64]:
    draws = batch.draws if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=float)
    if draws.ndim == 1:
        draws = draws[None, :]
    if draws.shape[0] == 0:
        raise ValueError("empty batch")
    return draws


def _check_lengths(u, eps):
    if u.shape[-1] != eps.shape[-1]:
        raise ValueError(f"length mismatch: {u.shape[-1]} utilities vs {eps.shape[-1]} shocks")


def h_max(u: ArrayLike, eps: ArrayLike) -> NDArray[np.float64] | float:
    """``max_j (u_j + eps_j)``; row-wise when ``eps`` is a matrix."""
    u = np.asarray(u, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _check_lengths(u, eps)
    out = np.max(u + eps, axis=-1)
    return float(out) if out.ndim == 0 else out


def argmax_alternative(u: ArrayLike, eps: ArrayLike):
    """Index maximizing ``u_j + eps_j``; ties go to the lowest index."""
    u = np.asarray(u, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _check_lengths(u, eps)
    out = np.argmax(u + eps, axis=-1)
    return int(out) if out.ndim == 0 else out


def utility_summaries(u: ArrayLike, batch) -> tuple[NDArray[np.float64], NDArray[np.intp]]:
    """Per-row maximal utility and chosen alternative for a batch."""
    draws = shock_draws(batch)
    u = np.asarray(u, dtype=float)
    _check_lengths(u, draws)
    v = draws + u
    a = np.argmax(v, axis=1)
    return v[np.arange(v.shape[0]), a], a


def nominal_surplus_mc(u: ArrayLike, batch) -> float:
    """Sample analogue of the surplus ``E_F[max_j (u_j + eps_j)]``."""
    h, _ = utility_summaries(u, batch)
    return float(np.mean(h))


def mnl_surplus(u: ArrayLike, eta: float = 1.0) -> float:
    """Closed-form logit surplus ``eta * logsumexp(u / eta) + eta * gamma``."""
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    u = utility_vector(u)
    return float(eta * logsumexp(u / eta) + eta * EULER_GAMMA)


def mnl_choice_probs(u: ArrayLike, eta: float = 1.0) -> ChoiceProbabilities:
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    u = utility_vector(u)
    return ChoiceProbabilities(softmax(u / eta), "analytic_mnl")


def weighted_choice_probs(
    chosen: NDArray[np.intp], weights: NDArray[np.float64] | None, dims: int
) -> NDArray[np.float64]:
    """Self-normalized frequency of each alternative among the chosen indices."""
    if weights is None:
        counts = np.bincount(chosen, minlength=dims).astype(float)
        return counts / chosen.size
    mass = np.bincount(chosen, weights=weights, minlength=dims)
    return mass / mass.sum()


def choice_covariance(
    chosen: NDArray[np.intp], weights: NDArray[np.float64] | None, probs: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Delta-method covariance of a (self-normalized) frequency estimator."""
    dims = probs.size
    w = np.ones(chosen.size) if weights is None else np.asarray(weights, dtype=float)
    wn = w / w.sum()
    ind = np.zeros((chosen.size, dims))
    ind[np.arange(chosen.size), chosen] = 1.0
    resid = ind - probs
    return (resid * wn[:, None] ** 2).T @ resid


def empirical_choice_probs(u: ArrayLike, batch) -> ChoiceProbabilities:
    """Frequencies of the utility-maximizing alternative over a batch."""
    u = utility_vector(u)
    _, a = utility_summaries(u, batch)
    return ChoiceProbabilities(weighted_choice_probs(a, None, u.size), "empirical", a.size)


def mnp_choice_probs(u: ArrayLike, covariance: ArrayLike, n: int, seed: Seed = 0) -> ChoiceProbabilities:
    """Simulated probit probabilities with shocks ``N(0, covariance)``."""
    u = utility_vector(u)
    batch = sample_mvn(n, None, covariance, seed)
    p = empirical_choice_probs(u, batch)
    return ChoiceProbabilities(p.probs, "mnp", n)


def berry_inversion_mnl(p: ChoiceProbabilities | ArrayLike) -> NDArray[np.float64]:
    """Logit demand inversion ``u_j = log(p_j / p_0)``."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ValueError("Berry inversion needs strictly positive probabilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    lp = np.log(p)
    return lp - lp[0]
