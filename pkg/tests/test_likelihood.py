import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import TINY_COORDS, TINY_SEEDS, TINY_T, tiny_outcome_prob, tiny_outcomes
from ilm_npe._errors import InvalidTrajectoryError
from ilm_npe.epidemic import NEVER, GeometricRemoval, Trajectory, simulate_seir, simulate_sir
from ilm_npe.likelihood import (
    duration_loglik,
    full_loglik_fixed,
    full_loglik_stochastic,
    infection_loglik_terms,
    log_posterior,
    obs_loglik,
    one_step_loglik,
    seir_loglik,
)
from ilm_npe.population import Population, generate_uniform
from ilm_npe.priors import PriorSpec, log_prior
from ilm_npe.rng import substream


def fixed_traj(inf_times, T=TINY_T, seeds=TINY_SEEDS, length=3):
    inf = np.array([NEVER if t is None else t for t in inf_times])
    rem = np.where(inf == NEVER, NEVER, inf + length)
    rem = np.where(rem > T, NEVER, rem)
    return Trajectory(inf, rem, T, list(seeds))


class TestOneStep:
    pair = Population([[0.0, 0.0], [1.0, 0.0]])

    def test_escape(self):
        assert one_step_loglik(self.pair, [0], [1], [], 0.7, 2.3) == pytest.approx(-0.7, rel=1e-15)

    def test_infection(self):
        ll = one_step_loglik(self.pair, [0], [1], [1], 0.7, 0.4)
        assert ll == pytest.approx(math.log(1 - math.exp(-0.7)), rel=1e-14)
        assert ll == pytest.approx(-0.6863, abs=1e-4)

    def test_no_susceptibles(self):
        assert one_step_loglik(self.pair, [0, 1], [], [], 0.7, 1.0) == 0.0

    def test_new_infection_must_be_susceptible(self):
        with pytest.raises(ValueError):
            one_step_loglik(self.pair, [0], [1], [0], 0.7, 1.0)

    @given(st.integers(0, 5000))
    @settings(max_examples=25, deadline=None)
    def test_sum_of_steps_is_trajectory_loglik(self, seed):
        pop = generate_uniform(25, 10, seed=seed % 3)
        alpha, beta = 0.8, 1.3
        traj = simulate_sir(pop, alpha, beta, [0], 8, substream(seed))
        terms = infection_loglik_terms(traj, pop, alpha, beta)
        for t in range(traj.T):
            s = traj.state_at(t)
            new = np.flatnonzero(traj.infection_time == t + 1)
            expected = one_step_loglik(pop, np.flatnonzero(s == 2), np.flatnonzero(s == 0), new, alpha, beta)
            assert terms[t] == pytest.approx(expected, rel=1e-10, abs=1e-12)


class TestFixed:
    def test_no_spread_near_zero(self):
        pop = generate_uniform(30, 10, seed=1)
        traj = simulate_sir(pop, 1e-12, 1.0, [0], 10, substream(1))
        ll = full_loglik_fixed(traj, pop, (1e-12, 1.0))
        assert -1e-9 < ll <= 0.0

    def test_enumeration_sums_to_one(self, tiny_pop):
        for alpha, beta in [(0.3, 0.7), (1.9, 2.2)]:
            total = sum(math.exp(full_loglik_fixed(fixed_traj(o), tiny_pop, (alpha, beta))) for o in tiny_outcomes())
            assert total == pytest.approx(1.0, abs=1e-10)

    def test_matches_stepwise_oracle(self, tiny_pop):
        for o in tiny_outcomes():
            ll = full_loglik_fixed(fixed_traj(o), tiny_pop, (0.6, 1.4))
            assert math.exp(ll) == pytest.approx(tiny_outcome_prob(o, 0.6, 1.4), rel=1e-12)

    def test_decreasing_in_alpha_without_infections(self, tiny_pop):
        traj = fixed_traj([0, None, None])
        values = [full_loglik_fixed(traj, tiny_pop, (a, 1.0)) for a in (0.1, 0.5, 1.0, 2.0)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_inconsistent_removal(self, tiny_pop):
        traj = Trajectory([0, 1, NEVER], [2, NEVER, NEVER], 5, [0])
        with pytest.raises(InvalidTrajectoryError):
            full_loglik_fixed(traj, tiny_pop, (1.0, 1.0))


class TestStochastic:
    @staticmethod
    def one_duration(g, T=60):
        rem = [g if g is not None else NEVER, NEVER]
        return Trajectory([0, NEVER], rem, T, [0])

    def test_single_step(self):
        assert duration_loglik(self.one_duration(1), math.log(2)) == pytest.approx(math.log(0.5), rel=1e-14)

    def test_three_steps(self):
        assert duration_loglik(self.one_duration(3), math.log(2)) == pytest.approx(math.log(0.125), rel=1e-14)

    def test_durations_and_censoring_sum_to_one(self):
        # removal after g = 1..60 steps, or still infectious at T = 60
        total = sum(math.exp(duration_loglik(self.one_duration(g), 0.3)) for g in range(1, 61))
        total += math.exp(duration_loglik(self.one_duration(None), 0.3))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_geometric_series_to_sixty(self):
        p = 1 - math.exp(-0.3)
        terms = [math.exp(duration_loglik(self.one_duration(g, T=100), 0.3)) for g in range(1, 61)]
        assert sum(terms) == pytest.approx(1 - (1 - p) ** 60, abs=1e-12)

    def test_removal_not_after_infection(self):
        traj = Trajectory([0, 2], [1, 2], 5, [0])
        with pytest.raises(InvalidTrajectoryError):
            duration_loglik(traj, 0.5)

    def test_enumeration_sums_to_one(self, tiny_pop):
        theta = (0.9, 1.1, 0.7)
        total = 0.0
        for o in tiny_outcomes():
            inf = [NEVER if t is None else t for t in o]
            options = [[NEVER] if t == NEVER else [*range(t + 1, TINY_T + 1), NEVER] for t in inf]
            for rem in itertools.product(*options):
                traj = Trajectory(inf, list(rem), TINY_T, [0])
                total += math.exp(full_loglik_stochastic(traj, tiny_pop, theta))
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_simulated_trajectories_finite(self):
        pop = generate_uniform(50, 20, seed=2)
        for k in range(10):
            traj = simulate_sir(pop, 1.0, 1.5, [0], 20, substream(5, k), GeometricRemoval(0.5))
            assert np.isfinite(full_loglik_stochastic(traj, pop, (1.0, 1.5, 0.5)))


class TestSeir:
    def test_two_farm_enumeration_sums_to_one(self):
        pop = Population([[0.0, 0.0], [1.5, 0.0]])
        T, theta = 3, (0.8, 1.2, 0.05, 0.6)
        total = 0.0
        for r0 in [1, 2, 3, NEVER]:
            for e in [1, 2, 3, NEVER]:
                infs = [NEVER] if e == NEVER else [*range(e + 1, T + 1), NEVER]
                for i in infs:
                    rems = [NEVER] if i == NEVER else [*range(i + 1, min(i + 4, T) + 1), NEVER]
                    for r in rems:
                        if i != NEVER and r == NEVER and i + 4 <= T:
                            continue  # a period of 4 would end by T
                        traj = Trajectory([0, i], [r0, r], T, [0], exposure_time=[0, e])
                        traj.validate()
                        total += math.exp(seir_loglik(traj, pop, theta))
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_simulated_trajectories_finite(self):
        pop = generate_uniform(60, 20, seed=3)
        for k in range(10):
            traj = simulate_seir(pop, 1.0, 1.5, 0.001, 0.3, 25, substream(6, k))
            assert np.isfinite(seir_loglik(traj, pop, (1.0, 1.5, 0.001, 0.3)))


class TestObservation:
    def test_half_of_three(self):
        true = [0, 1, 1, 2]
        seen = [0, 1, NEVER, 2]
        assert obs_loglik(true, seen, 0.5, seeds=[0]) == pytest.approx(3 * math.log(0.5), rel=1e-14)
        assert obs_loglik(true, seen, 0.5, seeds=[0]) == pytest.approx(-2.07944, abs=1e-5)

    def test_certain_and_complete(self):
        assert obs_loglik([0, 1, 2], [0, 1, 2], 1.0, seeds=[0]) == 0.0

    def test_certain_but_missing(self):
        assert obs_loglik([0, 1, 2], [0, 1, NEVER], 1.0, seeds=[0]) == -np.inf

    def test_observed_must_be_true(self):
        with pytest.raises(ValueError):
            obs_loglik([0, 1, NEVER], [0, 1, 2], 0.5)


class TestPosterior:
    prior = PriorSpec()

    def test_full_is_likelihood_plus_prior(self, tiny_pop):
        traj = fixed_traj([0, 1, None])
        theta = (0.7, 1.3)
        expected = full_loglik_fixed(traj, tiny_pop, theta) + log_prior(theta, self.prior, "full", tiny_pop, [0])
        assert log_posterior(theta, traj, "full", self.prior, tiny_pop, [0]) == pytest.approx(expected, rel=1e-15)

    @pytest.mark.parametrize("rho", [0.0, 1.0, 1.2, -0.1])
    def test_partial_rho_support(self, tiny_pop, rho):
        traj = fixed_traj([0, 1, None])
        lp = log_posterior((0.7, 1.3, rho), traj, "partial", self.prior, tiny_pop, [0],
                           observed_times=traj.infection_time)
        assert lp == -np.inf

    def test_two_point_grid_bayes(self, tiny_pop):
        observed = [0, 1, None]
        grid = [(0.5, 1.2), (1.1, 2.0)]

        def prior_density(alpha, beta):
            lam0 = sum(math.dist(TINY_COORDS[0], TINY_COORDS[i]) ** (-beta) for i in (1, 2))
            scale = 3.0 * lam0
            return (stats.gamma.pdf(beta, 6, scale=0.25)
                    * stats.gamma.pdf(alpha * scale, 10, scale=0.25) * scale)

        unnorm = [prior_density(a, b) * tiny_outcome_prob(observed, a, b) for a, b in grid]
        oracle = np.array(unnorm) / sum(unnorm)
        lp = np.array([log_posterior(th, fixed_traj(observed), "full", self.prior, tiny_pop, [0]) for th in grid])
        post = np.exp(lp - lp.max())
        np.testing.assert_allclose(post / post.sum(), oracle, rtol=0, atol=1e-10)

    def test_repeatable(self):
        pop = generate_uniform(40, 20, seed=4)
        traj = simulate_sir(pop, 1.0, 1.5, [0, 1], 15, substream(7))
        a = log_posterior((1.0, 1.5), traj, "full", self.prior, pop, [0, 1])
        b = log_posterior((1.0, 1.5), traj, "full", self.prior, pop, [0, 1])
        assert a == b and np.isfinite(a)

    def test_never_nan(self, tiny_pop):
        traj = fixed_traj([0, 1, 2])
        for theta in [(1e-300, 5.0), (1e3, 0.01), (1.0, 40.0)]:
            assert not math.isnan(log_posterior(theta, traj, "full", self.prior, tiny_pop, [0]))
