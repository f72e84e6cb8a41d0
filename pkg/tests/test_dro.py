import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from dro_rum.divergences import CANONICAL
from dro_rum.dro import (
    LAMBDA_MIN,
    AcceptanceError,
    DualPoint,
    accept_reject_sample,
    dual_objective,
    dual_objective_h,
    kl_robust_surplus,
    kl_solve,
    robust_choice_probs,
    robust_weights,
    solve_dual,
    solve_robust_surplus,
    wdz_gradient_check,
)
from dro_rum.rum import empirical_choice_probs, mnl_choice_probs, nominal_surplus_mc, utility_summaries
from dro_rum.shocks import NominalSpec

from conftest import U

RHOS = (0.1, 0.7, 1.3, 2.2, 4.3)


def kl_profile(h, lam):
    """lam * log mean exp(h / lam), vectorized over an array of lam."""
    lam = np.atleast_1d(lam)
    top = h.max()
    return top + lam * (logsumexp((h[None, :] - top) / lam[:, None], axis=1) - math.log(h.size))


class TestDualObjective:
    def test_single_row(self):
        assert dual_objective_h([2.0], "kl", 0.0, 1.0, 2.0) == 2.0

    def test_two_rows(self):
        np.testing.assert_allclose(dual_objective_h([0.0, 2.0], "kl", 0.1, 1.0, 0.0), 3.294528, atol=1e-6)

    def test_out_of_domain_marker(self):
        assert dual_objective_h([0.0, 2.0], "hellinger", 0.1, 1.0, 0.5) == math.inf
        assert dual_objective_h([0.0, 2.0], "reverse_kl", 0.1, 1.0, 0.999) == math.inf

    def test_batch_form(self):
        eps = np.array([[0.0, 0.0], [1.0, -1.0]])
        h = np.array([1.0, 1.0])
        assert dual_objective([0.0, 1.0], eps, "kl", 0.3, DualPoint(0.5, 0.2)) == dual_objective_h(
            h, "kl", 0.3, 0.5, 0.2
        )

    def test_preconditions(self):
        with pytest.raises(ValueError):
            dual_objective_h([0.0], "kl", -0.1, 1.0, 0.0)
        with pytest.raises(ValueError):
            dual_objective_h([0.0], "kl", 0.1, 0.0, 0.0)


class TestSolverOracles:
    def test_two_row_grid_oracle(self):
        h = np.array([0.0, 2.0])
        lam = np.arange(1, 50_001) * 1e-3
        # for fixed lambda the objective is convex in mu, so the grid minimum over
        # mu in [-10, 10] sits at one of the two grid points around the exact minimizer
        mu_exact = kl_profile(h, lam)
        best = math.inf
        for mu in (np.floor(mu_exact * 1e3) / 1e3, np.ceil(mu_exact * 1e3) / 1e3):
            vals = lam * 0.1 + mu + lam * np.mean(np.expm1((h[None, :] - mu[:, None]) / lam[:, None]), axis=1)
            best = min(best, float(vals.min()))
        sol = solve_dual(h, "kl", 0.1)
        assert abs(sol.surplus - best) <= 1e-3
        assert sol.surplus <= best + 1e-12

    def test_two_row_exhaustive_window(self):
        h = np.array([0.0, 2.0])
        sol = solve_dual(h, "kl", 0.1)
        lam = np.round(sol.dual.lam, 3) + np.arange(-200, 201) * 1e-3
        mu = np.round(sol.dual.mu, 3) + np.arange(-200, 201) * 1e-3
        L, M = np.meshgrid(lam, mu, indexing="ij")
        vals = L * 0.1 + M + L * 0.5 * (np.expm1((h[0] - M) / L) + np.expm1((h[1] - M) / L))
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        assert 0 < i < lam.size - 1 and 0 < j < mu.size - 1
        assert abs(vals[i, j] - sol.surplus) <= 1e-5
        # worst-case weights at the grid minimizer
        w_grid = np.exp((h - M[i, j]) / L[i, j])
        w = np.exp((h - sol.dual.mu) / sol.dual.lam)
        np.testing.assert_allclose(w, w_grid, atol=5e-3)
        np.testing.assert_allclose(w.mean(), 1.0, atol=1e-12)

    def test_kl_two_row_lambda_grid(self):
        h = np.array([0.0, 2.0])
        lam = np.arange(1, 500_001) * 1e-4
        grid = float(np.min(0.5 * lam + kl_profile(h, lam)))
        sol = kl_solve(h, 0.5)
        assert abs(sol.surplus - grid) <= 1e-4
        np.testing.assert_allclose(solve_dual(h, "kl", 0.5).surplus, sol.surplus, atol=1e-10)

    def test_gumbel_lambda_grid(self, gumbel_2m):
        h, _ = utility_summaries(U, gumbel_2m)
        coarse = np.arange(1, 101) * 0.1
        vals = np.array([0.1 * l + kl_profile(h, l)[0] for l in coarse])
        c = coarse[np.argmin(vals)]
        fine = c + np.arange(-100, 101) * 1e-3
        grid = min(0.1 * l + kl_profile(h, l)[0] for l in fine)
        sol = solve_robust_surplus(U, gumbel_2m, "kl", 0.1)
        assert sol.surplus > nominal_surplus_mc(U, gumbel_2m) + 0.1
        assert abs(sol.surplus - grid) <= 1e-6
        assert sol.surplus <= grid + 1e-12

    def test_constant_sample(self):
        sol = kl_solve(np.full(7, 1.5), 0.4)
        assert sol.at_floor
        np.testing.assert_allclose(sol.surplus, 1.5 + LAMBDA_MIN * 0.4, atol=1e-12)
        assert kl_solve(np.full(7, 1.5), 0.0).surplus == 1.5
        for name in CANONICAL:
            assert solve_dual(np.full(3, 1.5), name, 0.4).surplus == pytest.approx(1.5, abs=1e-6)

    def test_agrees_with_kl_route(self, gumbel_2m):
        h, _ = utility_summaries(U, gumbel_2m)
        for rho in RHOS:
            a = solve_dual(h, "kl", rho)
            b = kl_solve(h, rho)
            assert abs(a.surplus - b.surplus) <= 1e-5
            np.testing.assert_allclose(a.dual.lam, b.dual.lam, rtol=1e-4)
            np.testing.assert_allclose(a.dual.mu, b.dual.mu, rtol=1e-5)

    def test_literal_forms_give_same_surplus(self, gumbel_100k):
        h, _ = utility_summaries(U, gumbel_100k)
        for lit, canon in (("kl_table1", "kl"), ("rkl_table1", "reverse_kl")):
            for rho in (0.1, 1.3):
                a, b = solve_dual(h, lit, rho), solve_dual(h, canon, rho)
                np.testing.assert_allclose(a.surplus, b.surplus, rtol=1e-9)
                np.testing.assert_allclose(a.dual.lam, b.dual.lam, rtol=1e-6)
                # the literal multiplier absorbs the unit shift of the conjugate argument
                shift = {"kl_table1": 1.0, "rkl_table1": -1.0}[lit]
                np.testing.assert_allclose(a.dual.mu, b.dual.mu - shift * b.dual.lam, rtol=1e-6)


class TestSolverContract:
    def test_rho_zero_shortcut(self, gumbel_100k):
        for name in CANONICAL:
            sol = solve_robust_surplus(U, gumbel_100k, name, 0.0)
            assert sol.surplus == nominal_surplus_mc(U, gumbel_100k)
            assert math.isinf(sol.dual.lam) and sol.mean_weight == 1.0
            np.testing.assert_array_equal(robust_weights(U, gumbel_100k, name, sol), 1.0)

    def test_kl_surplus_increasing(self, gumbel_1m):
        w = [kl_robust_surplus(U, gumbel_1m, r).surplus for r in (0.0, *RHOS)]
        assert np.all(np.diff(w) > 0)

    @pytest.mark.parametrize("name", CANONICAL)
    def test_first_order_conditions(self, gumbel_100k, name):
        h, _ = utility_summaries(U, gumbel_100k)
        for rho in (0.05, 0.7, 1.3, 1.9):
            sol = solve_dual(h, name, rho)
            w = robust_weights(U, gumbel_100k, name, sol)
            assert abs(w.mean() - 1.0) <= 1e-4
            assert np.all(w >= 0)
            np.testing.assert_allclose(sol.surplus, np.mean(w * h), atol=1e-3)
            if not sol.at_floor:
                from dro_rum.divergences import get_divergence

                s = (h - sol.dual.mu) / sol.dual.lam
                div = get_divergence(name)
                stationarity = rho + np.mean(div.value(s)) - np.mean(div.derivative(s) * s)
                assert abs(stationarity) <= 1e-3
            assert sol.gradient_norm <= 1e-6

    def test_floor_detection(self):
        h = np.array([0.0, 0.3, 1.0, 0.2])
        # the point mass on the top draw has KL distance log n and squared Hellinger 2 - 2/sqrt(n)
        kl = solve_dual(h, "kl", math.log(4) + 0.1)
        assert kl.at_floor and kl.surplus == pytest.approx(1.0, abs=1e-5)
        assert not solve_dual(h, "kl", math.log(4) - 0.1).at_floor
        hel = solve_dual(h, "hellinger", 1.2)
        assert hel.at_floor and hel.surplus == pytest.approx(1.0, abs=1e-5)
        rkl = solve_dual(h, "reverse_kl", 8.0)
        assert not rkl.at_floor and rkl.surplus < 1.0

    def test_warm_start_same_answer(self, gumbel_100k):
        h, _ = utility_summaries(U, gumbel_100k)
        for name in CANONICAL:
            cold = solve_dual(h, name, 0.7)
            warm = solve_dual(h, name, 0.7, start=DualPoint(cold.dual.lam * 3, cold.dual.mu - 1))
            np.testing.assert_allclose(warm.surplus, cold.surplus, rtol=1e-10)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            solve_dual([1.0, 2.0], "kl", -1.0)
        with pytest.raises(ValueError):
            solve_dual([], "kl", 0.1)


class TestLemmaProperties:
    @pytest.mark.parametrize("name", CANONICAL)
    def test_translation(self, gumbel_100k, name):
        a = solve_robust_surplus(U, gumbel_100k, name, 0.7)
        b = solve_robust_surplus(U + 1.25, gumbel_100k, name, 0.7)
        np.testing.assert_allclose(b.surplus, a.surplus + 1.25, rtol=1e-10)
        np.testing.assert_allclose(b.dual.lam, a.dual.lam, rtol=1e-6)
        np.testing.assert_allclose(b.dual.mu, a.dual.mu + 1.25, rtol=1e-8)
        pa = robust_choice_probs(U, gumbel_100k, name, 0.7, a).probs
        pb = robust_choice_probs(U + 1.25, gumbel_100k, name, 0.7, b).probs
        np.testing.assert_allclose(pb, pa, atol=1e-8)

    def test_strict_convexity_gap(self, gumbel_100k):
        u, v = U, np.array([0.0, 2.0, 0.5, 1.0])
        w = lambda x: solve_robust_surplus(x, gumbel_100k, "kl", 0.7).surplus
        gap = 0.5 * (w(u) + w(v)) - w(0.5 * (u + v))
        assert gap > 1e-3

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.lists(st.floats(-3, 3), min_size=2, max_size=8),
        rho=st.floats(0.01, 3.0),
        name=st.sampled_from(CANONICAL),
    )
    def test_bounds_and_monotonicity(self, h, rho, name):
        h = np.array(h)
        sol = solve_dual(h, name, rho)
        more = solve_dual(h, name, rho * 1.5)
        assert h.mean() - 1e-9 <= sol.surplus <= h.max() + LAMBDA_MIN * rho + 1e-7
        assert more.surplus >= sol.surplus - 1e-9
        assert abs(sol.mean_weight - 1.0) <= 1e-4


class TestRobustProbabilities:
    def test_rho_zero_matches_empirical(self, gumbel_100k):
        for name in CANONICAL:
            p = robust_choice_probs(U, gumbel_100k, name, 0.0)
            np.testing.assert_allclose(p.probs, empirical_choice_probs(U, gumbel_100k).probs, atol=1e-12)

    def test_on_simplex(self, gumbel_100k):
        for name in CANONICAL:
            p = robust_choice_probs(U, gumbel_100k, name, 1.3).probs
            assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-14

    def test_kl_weights_closed_form(self, gumbel_100k):
        h, _ = utility_summaries(U, gumbel_100k)
        sol = kl_robust_surplus(U, gumbel_100k, 0.7)
        w = robust_weights(U, gumbel_100k, "kl", sol)
        ref = np.exp((h - h.max()) / sol.dual.lam)
        np.testing.assert_allclose(w, ref / ref.mean(), rtol=1e-9)

    def test_gumbel_nominal_leaves_probabilities_at_logit(self, gumbel_2m):
        # under iid Gumbel shocks the maximum is independent of the argmax, so any
        # reweighting that depends on the draw only through the maximum keeps the logit
        h, a = utility_summaries(U, gumbel_2m)
        sol = solve_dual(h, "kl", 0.1)
        p = robust_choice_probs(U, gumbel_2m, "kl", 0.1, sol).probs
        np.testing.assert_allclose(p, mnl_choice_probs(U).probs, atol=3e-3)
        arbitrary = (h - h.min()) ** 2
        q = np.bincount(a, weights=arbitrary, minlength=4) / arbitrary.sum()
        np.testing.assert_allclose(q, mnl_choice_probs(U).probs, atol=3e-3)

    def test_normal_nominal_moves_probabilities(self):
        from dro_rum.shocks import sample_mvn

        b = sample_mvn(400_000, None, np.eye(4), seed=8)
        p0 = robust_choice_probs(U, b, "kl", 0.0).probs
        p1 = robust_choice_probs(U, b, "kl", 1.3).probs
        assert np.max(np.abs(p1 - p0)) > 0.02


class TestWDZ:
    def test_rho_zero(self, gumbel_100k):
        assert wdz_gradient_check(U, gumbel_100k, "kl", 0.0, 1e-3).max_deviation <= 1e-2

    @pytest.mark.parametrize("name", CANONICAL)
    def test_robust(self, gumbel_100k, name):
        rep = wdz_gradient_check(U, gumbel_100k, name, 0.7, 1e-3)
        assert rep.max_deviation <= 1e-2
        np.testing.assert_allclose(rep.gradient.sum(), 1.0, atol=1e-6)

    def test_symmetric_utilities(self, gumbel_100k):
        # a batch closed under cyclic column shifts is exactly exchangeable
        base = gumbel_100k.draws[:25_000]
        sym = np.vstack([np.roll(base, k, axis=1) for k in range(4)])
        rep = wdz_gradient_check(np.zeros(4), sym, "kl", 0.7, 1e-3)
        assert np.ptp(rep.gradient) <= 5e-3
        np.testing.assert_allclose(rep.probs, 0.25, atol=1e-12)

    def test_step_range(self, gumbel_100k):
        with pytest.raises(ValueError):
            wdz_gradient_check(U, gumbel_100k, "kl", 0.1, 0.1)


class TestAcceptReject:
    nominal = NominalSpec.gumbel(4)

    def test_rho_zero(self, gumbel_100k):
        sol = solve_robust_surplus(U, gumbel_100k, "kl", 0.0)
        r = accept_reject_sample(U, self.nominal, "kl", sol, 400_000, weight_cap=4.0, seed=3)
        assert abs(r.acceptance_rate - 0.25) < 5e-3
        assert r.capped_fraction == 0.0 and not r.biased
        np.testing.assert_allclose(empirical_choice_probs(U, r.batch).probs, mnl_choice_probs(U).probs, atol=5e-3)

    def test_unit_cap_flags_bias(self, gumbel_100k):
        sol = solve_robust_surplus(U, gumbel_100k, "kl", 0.7)
        r = accept_reject_sample(U, self.nominal, "kl", sol, 100_000, weight_cap=1.0, seed=4)
        assert r.biased and r.capped_fraction > 0.05

    def test_quantile_cap(self, gumbel_100k):
        sol = solve_robust_surplus(U, gumbel_100k, "kl", 0.7)
        r = accept_reject_sample(U, self.nominal, "kl", sol, 200_000, cap_quantile=0.999, seed=5)
        assert r.capped_fraction <= 1e-3 and r.proposals == 200_000

    def test_aborts_on_low_acceptance(self, gumbel_100k):
        sol = solve_robust_surplus(U, gumbel_100k, "kl", 0.7)
        with pytest.raises(AcceptanceError):
            accept_reject_sample(U, self.nominal, "kl", sol, 10_000, weight_cap=1e9, seed=6)

    def test_cap_arguments(self, gumbel_100k):
        sol = solve_robust_surplus(U, gumbel_100k, "kl", 0.7)
        with pytest.raises(ValueError):
            accept_reject_sample(U, self.nominal, "kl", sol, 100, seed=0)
        with pytest.raises(ValueError):
            accept_reject_sample(U, self.nominal, "kl", sol, 100, weight_cap=0.5, seed=0)
