"""Distributionally robust random utility models over phi-divergence balls."""

from .divergences import CANONICAL, DIVERGENCES, PhiDivergence, get_divergence, validate_divergence
from .dro import (
    AcceptanceError,
    ConvergenceError,
    DualPoint,
    RobustSolution,
    accept_reject_sample,
    dual_objective,
    kl_robust_surplus,
    robust_choice_probs,
    robust_weights,
    solve_dual,
    solve_robust_surplus,
    wdz_gradient_check,
)
from .inversion import (
    InversionResult,
    conjugate_value_at,
    rc_demand_inversion,
    rc_robust_surplus,
    robust_demand_inversion,
)
from .rum import (
    ChoiceProbabilities,
    berry_inversion_mnl,
    empirical_choice_probs,
    mnl_choice_probs,
    mnl_surplus,
    mnp_choice_probs,
    nominal_surplus_mc,
)
from .shocks import NominalSpec, SampleBatch, sample_gumbel, sample_mvn, sample_nominal

__version__ = "0.1.0"
