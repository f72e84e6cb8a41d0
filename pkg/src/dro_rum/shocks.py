"""Nominal shock distributions and seeded Monte-Carlo batches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "NominalSpec",
    "SampleBatch",
    "Seed",
    "gumbel_from_uniform",
    "sample_gumbel",
    "sample_mvn",
    "sample_nominal",
    "draw_nominal",
    "open_uniform",
]

Seed = Union[int, np.random.SeedSequence, "list[int]", "tuple[int, ...]"]


@dataclass(frozen=True, eq=False)
class NominalSpec:
    """Description of the nominal distribution ``F`` of the shock vector.

    Use :meth:`gumbel` or :meth:`mvn` rather than the raw constructor.
    """

    kind: Literal["iid_gumbel", "mvn"]
    dims: int
    location: NDArray[np.float64] | None = None
    scale: float = 1.0
    mean: NDArray[np.float64] | None = None
    covariance: NDArray[np.float64] | None = field(default=None, repr=False)
    cholesky: NDArray[np.float64] | None = field(default=None, repr=False)

    @classmethod
    def gumbel(cls, dims: int, location: ArrayLike = 0.0, scale: float = 1.0) -> NominalSpec:
        if dims < 1:
            raise ValueError("dims must be at least 1")
        if not scale > 0:
            raise ValueError(f"Gumbel scale must be positive, got {scale}")
        loc = np.broadcast_to(np.asarray(location, dtype=float), (dims,)).copy()
        loc.flags.writeable = False
        return cls("iid_gumbel", dims, location=loc, scale=float(scale))

    @classmethod
    def mvn(cls, covariance: ArrayLike, mean: ArrayLike | None = None) -> NominalSpec:
        cov = np.array(covariance, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got shape {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        dims = cov.shape[0]
        mu = np.zeros(dims) if mean is None else np.array(mean, dtype=float)
        if mu.shape != (dims,):
            raise ValueError(f"mean must have length {dims}")
        for a in (cov, chol, mu):
            a.flags.writeable = False
        return cls("mvn", dims, mean=mu, covariance=cov, cholesky=chol)

    def column_means(self) -> NDArray[np.float64]:
        """Exact mean of each shock coordinate."""
        if self.kind == "iid_gumbel":
            return self.location + self.scale * np.euler_gamma
        return np.asarray(self.mean)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """An immutable ``n x dims`` matrix of shock draws plus its provenance."""

    draws: NDArray[np.float64] = field(repr=False)
    seed: object
    nominal: NominalSpec | None = None

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=float)
        if d.ndim != 2:
            raise ValueError("draws must be a 2-d array")
        if not np.all(np.isfinite(d)):
            raise ValueError("draws must be finite")
        view = d.view()
        view.flags.writeable = False
        object.__setattr__(self, "draws", view)

    @property
    def n(self) -> int:
        return self.draws.shape[0]

    @property
    def dims(self) -> int:
        return self.draws.shape[1]

    def __len__(self) -> int:
        return self.n


def open_uniform(rng: np.random.Generator, size) -> NDArray[np.float64]:
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(size)
    zero = u == 0.0
    while zero.any():
        u[zero] = rng.random(int(zero.sum()))
        zero = u == 0.0
    return u


def gumbel_from_uniform(u: ArrayLike, location: ArrayLike = 0.0, scale: float = 1.0):
    """Inverse Gumbel CDF: ``location - scale * log(-log u)``."""
    u = np.asarray(u, dtype=float)
    return location - scale * np.log(-np.log(u))


def _check_n(n: int) -> None:
    if int(n) != n or n < 1:
        raise ValueError(f"sample size must be a positive integer, got {n}")


def draw_nominal(nominal: NominalSpec, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """Draw ``n`` shock vectors from ``nominal`` using an existing generator."""
    _check_n(n)
    if nominal.kind == "iid_gumbel":
        u = open_uniform(rng, (n, nominal.dims))
        return gumbel_from_uniform(u, nominal.location, nominal.scale)
    z = rng.standard_normal((n, nominal.dims))
    return nominal.mean + z @ nominal.cholesky.T


def sample_nominal(nominal: NominalSpec, n: int, seed: Seed) -> SampleBatch:
    """Seeded batch from any nominal spec; same inputs give the same matrix."""
    rng = np.random.default_rng(seed)
    return SampleBatch(draw_nominal(nominal, n, rng), seed, nominal)


def sample_gumbel(
    n: int, dims: int, location: ArrayLike = 0.0, scale: float = 1.0, seed: Seed = 0
) -> SampleBatch:
    """iid Gumbel shocks by inverse CDF.

    Column ``j`` has mean ``location[j] + scale * euler_gamma``.
    """
    return sample_nominal(NominalSpec.gumbel(dims, location, scale), n, seed)


def sample_mvn(n: int, mean: ArrayLike | None, covariance: ArrayLike, seed: Seed = 0) -> SampleBatch:
    """Multivariate normal shocks ``mean + L z`` with ``L`` the Cholesky factor.

    Raises:
        ValueError: if the covariance is not symmetric positive definite.
    """
    return sample_nominal(NominalSpec.mvn(covariance, mean), n, seed)
