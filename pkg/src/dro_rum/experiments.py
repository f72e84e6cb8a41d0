"""Experiment harness: configuration, the numbered scenarios, CSV output.

Each ``cmd_*`` function takes an :class:`ExperimentConfig` and returns a
:class:`Table`; nothing is written until :meth:`Table.write` is called.
Random streams are derived from the config seed with a fixed stream id per
purpose, so one batch feeds every rho and every utility vector (common
random numbers) and a run is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import io
import math
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

from .divergences import DIVERGENCES
from .dro import RobustSolution, dual_weights, solve_dual
from .inversion import robust_demand_inversion, validate_target
from .rum import mnl_choice_probs, utility_summaries, weighted_choice_probs
from .shocks import NominalSpec, SampleBatch, sample_nominal

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "CSV_PREAMBLE",
    "SIGMA_INDEP",
    "SIGMA_DEP",
    "DEFAULT_RHO_GRID",
    "ConfigError",
    "ExperimentConfig",
    "Table",
    "load_config",
    "stream_seed",
    "percent_row",
    "cmd_surplus",
    "cmd_table",
    "cmd_substitution",
    "cmd_invert",
    "cmd_density",
    "read_probability_csv",
]

CSV_PREAMBLE = "# dro-rum csv v1"

SIGMA_INDEP = np.eye(4)
SIGMA_DEP = np.array(
    [
        [2.0, -0.5, 0.5, 1.3],
        [-0.5, 2.0, 0.0, 0.15],
        [0.5, 0.0, 2.0, 1.0],
        [1.3, 0.15, 1.0, 2.0],
    ]
)
DEFAULT_RHO_GRID = (0.1, 0.7, 1.3, 2.2, 4.3)
DEFAULT_UTILITIES = ((0.0, 1.0, 2.0, 2.1), (0.0, 1.0, 2.0, 2.2))
FULL_SCALE = {"n_probs": 10_000_000, "n_opt": 50_000_000}
MIN_COUNT = 1_000

# stream ids for SeedSequence([seed, stream])
STREAM_OPT = 1
STREAM_PROBS = 2
STREAM_MNP_INDEP = 3
STREAM_MNP_DEP = 4
STREAM_DENSITY = 5


class ConfigError(ValueError):
    """Invalid configuration or input data."""


def stream_seed(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream])


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated experiment settings.

    ``utilities[0]`` is the baseline vector and ``utilities[-1]`` the
    perturbed one used by the second table and the substitution study.
    """

    name: str = "experiment"
    utilities: tuple[NDArray[np.float64], ...] = tuple(np.array(u) for u in DEFAULT_UTILITIES)
    divergence: str = "kl"
    rho_grid: tuple[float, ...] = DEFAULT_RHO_GRID
    nominal: NominalSpec = field(default_factory=lambda: NominalSpec.gumbel(4))
    n_probs: int = 1_000_000
    n_opt: int = 2_000_000
    seed: int = 0
    output_dir: Path = Path("results")
    cov_indep: NDArray[np.float64] = field(default_factory=lambda: SIGMA_INDEP.copy(), repr=False)
    cov_dep: NDArray[np.float64] = field(default_factory=lambda: SIGMA_DEP.copy(), repr=False)
    density_rho: float = 0.5
    density_bins: int = 50
    density_coordinate: int = 0
    probs_csv: Path | None = None
    invert_rho: float = 0.0

    def __post_init__(self):
        if not self.utilities:
            raise ConfigError("utilities must list at least one vector")
        dims = self.nominal.dims
        for i, u in enumerate(self.utilities):
            if u.ndim != 1 or u.size != dims:
                raise ConfigError(f"utilities[{i}] must have {dims} entries to match the nominal")
            if u[0] != 0.0:
                raise ConfigError(f"utilities[{i}] must start with 0 (outside option)")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"unknown divergence {self.divergence!r}")
        if not self.rho_grid:
            raise ConfigError("rho_grid must not be empty")
        if any(not (r >= 0 and math.isfinite(r)) for r in self.rho_grid):
            raise ConfigError(f"rho_grid entries must be finite and nonnegative: {self.rho_grid}")
        for key in ("n_probs", "n_opt"):
            if getattr(self, key) < MIN_COUNT:
                raise ConfigError(f"{key} must be at least {MIN_COUNT}")
        for key in ("cov_indep", "cov_dep"):
            cov = getattr(self, key)
            if cov.shape != (dims, dims):
                raise ConfigError(f"{key} must be {dims}x{dims}")
        if not self.density_rho >= 0 or not self.invert_rho >= 0:
            raise ConfigError("rho values must be nonnegative")
        if self.density_bins < 1:
            raise ConfigError("bins must be a positive integer")
        if not 0 <= self.density_coordinate < dims:
            raise ConfigError(f"density coordinate must lie in [0, {dims})")

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
        exp = dict(data.get("experiment", {}))
        model = dict(data.get("model", {}))
        nominal = dict(data.get("nominal", {}))
        mnp = dict(data.get("mnp", {}))
        density = dict(data.get("density", {}))
        invert = dict(data.get("invert", {}))
        base = base_dir or Path(".")
        try:
            utilities = tuple(np.array(u, dtype=float) for u in model.get("utilities", DEFAULT_UTILITIES))
            dims = utilities[0].size if utilities else 4
            kwargs: dict[str, Any] = dict(
                name=str(exp.get("name", "experiment")),
                utilities=utilities,
                divergence=str(model.get("divergence", "kl")),
                rho_grid=tuple(float(r) for r in model.get("rho_grid", DEFAULT_RHO_GRID)),
                nominal=_nominal_from(nominal, dims),
                n_probs=int(exp.get("n_probs", 1_000_000)),
                n_opt=int(exp.get("n_opt", 2_000_000)),
                seed=int(exp.get("seed", 0)),
                output_dir=base / exp.get("output_dir", "results"),
                cov_indep=np.array(mnp.get("cov_indep", np.eye(dims)), dtype=float),
                cov_dep=np.array(mnp.get("cov_dep", SIGMA_DEP), dtype=float),
                density_rho=float(density.get("rho", 0.5)),
                density_bins=int(density.get("bins", 50)),
                density_coordinate=int(density.get("coordinate", 0)),
                invert_rho=float(invert.get("rho", 0.0)),
            )
            if "probs_csv" in invert:
                kwargs["probs_csv"] = base / invert["probs_csv"]
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cls(**kwargs)

    def with_overrides(
        self,
        seed: int | None = None,
        paper_scale: bool = False,
        output_dir: Path | None = None,
        **fields: Any,
    ) -> ExperimentConfig:
        changes: dict[str, Any] = {k: v for k, v in fields.items() if v is not None}
        if seed is not None:
            changes["seed"] = seed
        if paper_scale:
            changes.update(FULL_SCALE)
        if output_dir is not None:
            changes["output_dir"] = Path(output_dir)
        return replace(self, **changes) if changes else self

    def batch(self, stream: int, n: int, nominal: NominalSpec | None = None) -> SampleBatch:
        return sample_nominal(nominal or self.nominal, n, stream_seed(self.seed, stream))


def _nominal_from(section: dict[str, Any], dims: int) -> NominalSpec:
    kind = section.get("kind", "iid_gumbel")
    try:
        if kind == "iid_gumbel":
            return NominalSpec.gumbel(dims, section.get("location", 0.0), section.get("scale", 1.0))
        if kind == "mvn":
            if "covariance" not in section:
                raise ConfigError("mvn nominal needs a covariance")
            return NominalSpec.mvn(section["covariance"], section.get("mean"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"nominal: {exc}") from exc
    raise ConfigError(f"unknown nominal kind {kind!r}")


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a TOML experiment file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(data, path.parent)


# output


@dataclass
class Table:
    """Rows of one CSV artifact."""

    name: str
    header: list[str]
    rows: list[list[Any]]

    def column(self, key: str) -> list[Any]:
        i = self.header.index(key)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_PREAMBLE + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.name}.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())
        return path


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def percent_row(probs: NDArray[np.float64], decimals: int = 4) -> list[str]:
    """Percentages at fixed decimals that sum to exactly 100 (largest remainder)."""
    units = 100 * 10**decimals
    raw = np.asarray(probs, dtype=float) * units
    base = np.floor(raw).astype(np.int64)
    short = units - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return [f"{b / 10**decimals:.{decimals}f}" for b in base]


# experiment pieces


def _dro_path(config: ExperimentConfig, u, rhos: Sequence[float], opt: SampleBatch):
    """Solutions along a rho grid on the optimization batch, warm-started."""
    h, _ = utility_summaries(u, opt)
    out, start = [], None
    for rho in rhos:
        sol = solve_dual(h, config.divergence, rho, start)
        if math.isfinite(sol.dual.lam) and not sol.at_floor:
            start = sol.dual
        out.append(sol)
    return out


def _weighted_fit(config: ExperimentConfig, u, sol: RobustSolution, batch: SampleBatch):
    """Chosen indices, weights (None at rho=0) and probabilities on ``batch``."""
    h, a = utility_summaries(u, batch)
    w = None if math.isinf(sol.dual.lam) else dual_weights(h, config.divergence, sol.dual)
    return a, w, weighted_choice_probs(a, w, u.size)


def cmd_surplus(config: ExperimentConfig) -> Table:
    """Robust surplus along the rho grid for every utility vector."""
    opt = config.batch(STREAM_OPT, config.n_opt)
    header = ["u_id", "rho", "W_dro", "lambda_star", "mu_star", "mean_weight", "n_opt", "seed"]
    rows = []
    for uid, u in enumerate(config.utilities):
        for rho, sol in zip(config.rho_grid, _dro_path(config, u, config.rho_grid, opt)):
            rows.append([uid, rho, sol.surplus, sol.dual.lam, sol.dual.mu, sol.mean_weight, config.n_opt, config.seed])
    return Table("surplus", header, rows)


def cmd_table(config: ExperimentConfig, which: str) -> Table:
    """Choice probabilities in percent: MNL, two probits, then one DRO row per rho."""
    if which not in ("table2", "table3"):
        raise ConfigError(f"unknown table {which!r}")
    u = config.utilities[0] if which == "table2" else config.utilities[-1]
    alts = [f"alt{j + 1}_pct" for j in range(u.size)]
    header = ["model", "rho", *alts, "estimator", "n", "lambda_star", "mu_star"]
    rows: list[list[Any]] = []
    rows.append(["MNL", "", *percent_row(mnl_choice_probs(u).probs), "analytic", "", "", ""])
    for label, cov, stream in (
        ("MNP-indep", config.cov_indep, STREAM_MNP_INDEP),
        ("MNP-dep", config.cov_dep, STREAM_MNP_DEP),
    ):
        batch = config.batch(stream, config.n_probs, NominalSpec.mvn(cov))
        _, a = utility_summaries(u, batch)
        p = weighted_choice_probs(a, None, u.size)
        rows.append([label, "", *percent_row(p), "frequency", config.n_probs, "", ""])
    opt = config.batch(STREAM_OPT, config.n_opt)
    probs_batch = config.batch(STREAM_PROBS, config.n_probs)
    for rho, sol in zip(config.rho_grid, _dro_path(config, u, config.rho_grid, opt)):
        _, _, p = _weighted_fit(config, u, sol, probs_batch)
        rows.append(
            [f"DRO-{config.divergence}", rho, *percent_row(p), "self_normalized_is", config.n_probs, sol.dual.lam, sol.dual.mu]
        )
    return Table(which, header, rows)


def _changed_coordinate(u: NDArray[np.float64], v: NDArray[np.float64]) -> int:
    diff = np.flatnonzero(u != v)
    if diff.size > 1:
        raise ConfigError(f"utility vectors differ in {diff.size} coordinates; expected at most one")
    return int(diff[0]) if diff.size else -1


def _log_ratio_influence(a, w, j: int, k: int) -> NDArray[np.float64]:
    """Per-draw influence of ``log(p_j / p_k)`` for a self-normalized estimator."""
    w = np.ones(a.size) if w is None else w
    mj = w * (a == j)
    mk = w * (a == k)
    return mj / mj.sum() - mk / mk.sum()


def cmd_substitution(config: ExperimentConfig) -> Table:
    """Relative probability changes from ``utilities[0]`` to ``utilities[1]``.

    Ratios among the alternatives whose utility did not change are constant
    under IIA.  Each sampled model reports the largest deviation of those log
    ratios and a delta-method standard error computed with common random
    numbers.  A model is flagged IIA-violating when the deviation exceeds
    three standard errors.
    """
    if len(config.utilities) != 2:
        raise ConfigError("substitution needs exactly two utility vectors")
    u, v = config.utilities
    c = _changed_coordinate(u, v)
    dims = u.size
    kept = [j for j in range(dims) if j != c]
    header = ["model", "rho", *[f"alt{j + 1}_rel_change" for j in range(dims)], "max_log_ratio_dev", "ratio_se", "iia"]
    rows: list[list[Any]] = []

    def rel(p, q):
        return list((q - p) / p)

    def ratio_dev(p, q):
        if len(kept) < 2:
            return 0.0
        lp, lq = np.log(p[kept]), np.log(q[kept])
        return float(np.max(np.abs((lq - lq[0]) - (lp - lp[0]))))

    p, q = mnl_choice_probs(u).probs, mnl_choice_probs(v).probs
    rows.append(["MNL", "", *rel(p, q), ratio_dev(p, q), 0.0, "consistent"])

    def sampled(label, rho, a_u, w_u, a_v, w_v):
        p = weighted_choice_probs(a_u, w_u, dims)
        q = weighted_choice_probs(a_v, w_v, dims)
        dev, se = 0.0, 0.0
        k0 = kept[0]
        for j in kept[1:]:
            d = abs(math.log(q[j] / q[k0]) - math.log(p[j] / p[k0]))
            psi = _log_ratio_influence(a_v, w_v, j, k0) - _log_ratio_influence(a_u, w_u, j, k0)
            s = float(np.sqrt(np.dot(psi, psi)))
            if dev == 0.0 or d / max(s, 1e-300) > dev / max(se, 1e-300):
                dev, se = d, s
        flag = "violating" if dev > 3.0 * se else "consistent"
        rows.append([label, rho, *rel(p, q), dev, se, flag])

    for label, cov, stream in (
        ("MNP-indep", config.cov_indep, STREAM_MNP_INDEP),
        ("MNP-dep", config.cov_dep, STREAM_MNP_DEP),
    ):
        batch = config.batch(stream, config.n_probs, NominalSpec.mvn(cov))
        _, a_u = utility_summaries(u, batch)
        _, a_v = utility_summaries(v, batch)
        sampled(label, "", a_u, None, a_v, None)

    opt = config.batch(STREAM_OPT, config.n_opt)
    probs_batch = config.batch(STREAM_PROBS, config.n_probs)
    path_u = _dro_path(config, u, config.rho_grid, opt)
    path_v = _dro_path(config, v, config.rho_grid, opt)
    for rho, su, sv in zip(config.rho_grid, path_u, path_v):
        a_u, w_u, _ = _weighted_fit(config, u, su, probs_batch)
        a_v, w_v, _ = _weighted_fit(config, v, sv, probs_batch)
        sampled(f"DRO-{config.divergence}", rho, a_u, w_u, a_v, w_v)
    return Table("substitution", header, rows)


def read_probability_csv(path: str | Path) -> tuple[list[int], NDArray[np.float64]]:
    """Parse ``p0,...,pJ`` rows; returns line numbers and an ``m x (J+1)`` matrix.

    Structural problems (bad header, wrong field count, non-numeric or
    negative values, sums off by more than 1e-9) are collected for every
    line and raised together as one :class:`ConfigError`.  Zero entries
    pass and are floored later.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = [(i, row) for i, row in enumerate(csv.reader(fh), start=1) if row and not row[0].startswith("#")]
    if not lines:
        raise ConfigError(f"{path}: no header row")
    head_line, head = lines[0]
    head = [c.strip() for c in head]
    expected = [f"p{j}" for j in range(len(head))]
    if head != expected or len(head) < 2:
        raise ConfigError(f"{path}:{head_line}: header must be {','.join(expected) if len(head) > 1 else 'p0,p1,...'}")
    errors, numbers, rows = [], [], []
    for line, row in lines[1:]:
        if len(row) != len(head):
            errors.append(f"line {line}: expected {len(head)} fields, got {len(row)}")
            continue
        try:
            p = np.array([float(x) for x in row])
        except ValueError:
            errors.append(f"line {line}: non-numeric entry")
            continue
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            errors.append(f"line {line}: entries must be finite and nonnegative")
        elif abs(p.sum() - 1.0) > 1e-9:
            errors.append(f"line {line}: probabilities sum to {p.sum():.12g}, not 1")
        else:
            numbers.append(line)
            rows.append(p)
    if errors:
        raise ConfigError(f"{path}: " + "; ".join(errors))
    if not rows:
        raise ConfigError(f"{path}: no probability rows")
    return numbers, np.vstack(rows)


def cmd_invert(config: ExperimentConfig, probs_csv: str | Path | None = None) -> Table:
    """Recover mean utilities for each probability vector in a CSV."""
    path = probs_csv or config.probs_csv
    if path is None:
        raise ConfigError("invert needs a probability CSV (--probs or [invert] probs_csv)")
    numbers, targets = read_probability_csv(path)
    dims = targets.shape[1]
    if dims != config.nominal.dims:
        raise ConfigError(f"CSV has {dims} alternatives but the nominal has {config.nominal.dims}")
    batch = config.batch(STREAM_PROBS, config.n_probs)
    header = ["line", *[f"u{j}" for j in range(dims)], "lambda_star", "mu_star", "residual_norm", "iterations", "warning"]
    rows = []
    for line, p in zip(numbers, targets):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            p_ok, floored = validate_target(p, floor_boundary=True)
        res = robust_demand_inversion(p_ok, batch, config.divergence, config.invert_rho)
        warning = f"floored_at_{1e-8:g}" if floored else ""
        rows.append([line, *res.u, res.dual.lam, res.dual.mu, res.residual_norm, res.iterations, warning])
    return Table("invert", header, rows)


def cmd_density(
    config: ExperimentConfig,
    rho: float | None = None,
    bins: int | None = None,
    coordinate: int | None = None,
) -> Table:
    """Weighted vs. nominal histogram of one shock coordinate at the robust optimum."""
    if config.divergence not in ("kl", "kl_table1"):
        raise ConfigError("density is defined for the KL divergence only")
    rho = config.density_rho if rho is None else float(rho)
    bins = config.density_bins if bins is None else int(bins)
    coordinate = config.density_coordinate if coordinate is None else int(coordinate)
    if not rho >= 0:
        raise ConfigError("rho must be nonnegative")
    if bins < 1:
        raise ConfigError("bins must be a positive integer")
    if not 0 <= coordinate < config.nominal.dims:
        raise ConfigError(f"coordinate must lie in [0, {config.nominal.dims})")
    u = config.utilities[0]
    batch = config.batch(STREAM_DENSITY, config.n_probs)
    h, _ = utility_summaries(u, batch)
    sol = solve_dual(h, config.divergence, rho)
    x = batch.draws[:, coordinate]
    edges = np.histogram_bin_edges(x, bins=bins)
    nominal, _ = np.histogram(x, bins=edges)
    nominal_mass = nominal / x.size
    if math.isinf(sol.dual.lam):
        robust_mass = nominal_mass.copy()
    else:
        w = dual_weights(h, config.divergence, sol.dual)
        robust, _ = np.histogram(x, bins=edges, weights=w)
        robust_mass = robust / w.sum()
    header = ["bin_left", "bin_right", "nominal_mass", "robust_mass"]
    rows = [[edges[i], edges[i + 1], nominal_mass[i], robust_mass[i]] for i in range(bins)]
    return Table("density", header, rows)
