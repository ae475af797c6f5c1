"""Exact complete-data log-likelihoods and log-posteriors.

All densities are natural logs. ``log(1 - P)`` for the per-step infection
probability is computed as ``-(alpha * pressure + epsilon)`` directly, and
``log P`` as ``log(-expm1(-lambda))`` so that tiny probabilities at large
distances keep full precision. An impossible event gives ``-inf``; the
result is never NaN.

Durations of individuals still infectious (or latent) at ``T`` are treated
as right-censored: they contribute the probability of surviving to ``T``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import xlogy

from ._errors import InvalidTrajectoryError
from .epidemic import CULLING_PMF, NEVER, ParameterVector, Scenario, Trajectory, _finite_or
from .population import Population
from .priors import PriorSpec, in_support, log_prior

__all__ = [
    "KernelCache",
    "one_step_loglik",
    "infection_loglik",
    "infection_loglik_terms",
    "pressure_matrix",
    "loglik_from_pressure",
    "full_loglik_fixed",
    "duration_loglik",
    "full_loglik_stochastic",
    "latent_loglik",
    "culling_loglik",
    "seir_loglik",
    "obs_loglik",
    "obs_loglik_counts",
    "log_posterior",
]


class KernelCache:
    """Memoises ``d^-beta`` for the most recent ``beta``.

    MCMC moves on latent event times keep ``beta`` fixed, so the kernel is
    computed once per parameter update rather than once per evaluation.
    """

    def __init__(self, pop: Population):
        self.dist = pop.distances
        self._beta = None
        self._K = None

    def __call__(self, beta: float, cols=None) -> np.ndarray:
        if self._beta != beta:
            self._K = self.dist ** (-beta)
            self._beta = beta
        return self._K if cols is None else self._K[cols]


def one_step_loglik(pop: Population, infectious, susceptible, new_infections,
                    alpha: float, beta: float, epsilon: float = 0.0) -> float:
    """Log-probability of the new infections during one step.

    ``infectious`` and ``susceptible`` are the index sets at time ``t``;
    ``new_infections`` must be a subset of ``susceptible``.
    """
    infectious = np.asarray(infectious, dtype=np.int64)
    susceptible = np.asarray(susceptible, dtype=np.int64)
    new = np.asarray(new_infections, dtype=np.int64)
    if not np.isin(new, susceptible).all():
        raise ValueError("new infections must be drawn from the susceptible set")
    if susceptible.size == 0:
        return 0.0
    pressure = (pop.distances[np.ix_(susceptible, infectious)] ** (-beta)).sum(1)
    lam = alpha * pressure + epsilon
    is_new = np.isin(susceptible, new)
    with np.errstate(divide="ignore"):
        return float(np.log(-np.expm1(-lam[is_new])).sum() - lam[~is_new].sum())


def pressure_matrix(traj: Trajectory, pop: Population, beta: float, kernel=None) -> np.ndarray:
    """``P[t, i] = sum_{j infectious at t} d_ij^-beta``, shape ``(T, M)``."""
    X = traj.infectious_matrix()
    cols = np.flatnonzero(X.any(0))
    K = pop.distances[cols] ** (-beta) if kernel is None else kernel(beta, cols)
    return X[:, cols].astype(np.float64) @ K


def loglik_from_pressure(P: np.ndarray, entry: np.ndarray, alpha: float, epsilon: float = 0.0,
                         rows=None) -> np.ndarray:
    """Per-step transmission log-likelihood given the pressure matrix.

    ``entry`` holds the time each individual leaves S with NEVER already
    replaced by a value above ``T``. When ``rows`` is given, ``P`` holds
    only those time steps and one term per row is returned.
    """
    t = (np.arange(P.shape[0]) if rows is None else np.asarray(rows))[:, None]
    at_risk = entry[None, :] > t
    new = entry[None, :] == t + 1
    lam = alpha * np.maximum(P, 0.0) + epsilon
    surv = np.where(at_risk & ~new, lam, 0.0).sum(1)
    with np.errstate(divide="ignore"):
        log_inf = np.where(new, np.log(-np.expm1(-np.where(new, lam, 1.0))), 0.0).sum(1)
    return log_inf - surv


def infection_loglik_terms(traj: Trajectory, pop: Population, alpha: float, beta: float,
                           epsilon: float = 0.0, kernel=None) -> np.ndarray:
    """Per-step contributions of the transmission process, shape ``(T,)``.

    Step ``t`` covers the transition from ``t`` to ``t + 1``. For SEIR
    trajectories the "new infections" are new exposures.
    """
    P = pressure_matrix(traj, pop, beta, kernel)
    entry = _finite_or(traj.entry_time(), traj.T + 10)
    return loglik_from_pressure(P, entry, alpha, epsilon)


def infection_loglik(traj: Trajectory, pop: Population, alpha: float, beta: float,
                     epsilon: float = 0.0, kernel=None) -> float:
    return float(infection_loglik_terms(traj, pop, alpha, beta, epsilon, kernel).sum())


def _check_fixed(traj: Trajectory, length: int) -> None:
    inf = traj.infection_time
    expected = np.where(inf == NEVER, NEVER, inf + length)
    expected = np.where(expected > traj.T, NEVER, expected)
    if not np.array_equal(expected, traj.removal_time):
        bad = np.flatnonzero(expected != traj.removal_time)[:5]
        raise InvalidTrajectoryError(f"removal times inconsistent with fixed period {length} at {bad}")


def full_loglik_fixed(traj: Trajectory, pop: Population, theta, removal_length: int = 3,
                      kernel=None, check: bool = True) -> float:
    """Log-likelihood of a complete SIR trajectory with a fixed infectious period."""
    alpha, beta = _first_two(theta)
    if check:
        _check_fixed(traj, removal_length)
    return infection_loglik(traj, pop, alpha, beta, kernel=kernel)


def duration_loglik(traj: Trajectory, gamma: float) -> float:
    """Geometric infectious-period terms; open durations are censored at ``T``."""
    inf, rem = traj.infection_time, traj.removal_time
    infected = inf != NEVER
    done = infected & (rem != NEVER)
    if np.any(rem[done] <= inf[done]):
        raise InvalidTrajectoryError("removal must come strictly after infection")
    log_stay = -gamma                    # log(1 - P_IR)
    log_leave = math.log(-math.expm1(-gamma))
    g = rem[done] - inf[done]
    open_ = infected & (rem == NEVER)
    stay = (g - 1).sum() + (traj.T - inf[open_]).sum()
    return float(stay * log_stay + done.sum() * log_leave)


def full_loglik_stochastic(traj: Trajectory, pop: Population, theta, kernel=None) -> float:
    alpha, beta = _first_two(theta)
    gamma = _values(theta)[2]
    return infection_loglik(traj, pop, alpha, beta, kernel=kernel) + duration_loglik(traj, gamma)


def latent_loglik(traj: Trajectory, gamma_E: float) -> float:
    """Geometric latent-period terms for non-seed exposures (censored at ``T``)."""
    exp, inf = traj.exposure_time, traj.infection_time
    non_seed = np.ones(traj.size, dtype=bool)
    non_seed[traj.seeds] = False
    done = non_seed & (exp != NEVER) & (inf != NEVER)
    open_ = non_seed & (exp != NEVER) & (inf == NEVER)
    L = inf[done] - exp[done]
    if np.any(L < 1):
        return -np.inf
    stay = (L - 1).sum() + (traj.T - exp[open_]).sum()
    return float(-gamma_E * stay + done.sum() * math.log(-math.expm1(-gamma_E)))


def culling_loglik(traj: Trajectory, culling_pmf=CULLING_PMF) -> float:
    """Infectious-period terms under a fixed duration distribution on ``1..len(pmf)``."""
    pmf = np.asarray(culling_pmf, dtype=np.float64)
    inf, rem = traj.infection_time, traj.removal_time
    infected = inf != NEVER
    done = infected & (rem != NEVER)
    g = rem[done] - inf[done]
    if np.any((g < 1) | (g > pmf.size)):
        return -np.inf
    # survival P(G > T - tau) for durations still open at T
    tail = np.concatenate([np.cumsum(pmf[::-1])[::-1], [0.0]])  # tail[k] = P(G >= k + 1)
    open_ = infected & (rem == NEVER)
    k = np.minimum(traj.T - inf[open_], pmf.size)
    with np.errstate(divide="ignore"):
        return float(np.log(pmf[g - 1]).sum() + np.log(tail[k]).sum())


def seir_loglik(traj: Trajectory, pop: Population, theta, culling_pmf=CULLING_PMF,
                kernel=None) -> float:
    """Complete-data log-likelihood of an SEIR trajectory with a spark term."""
    alpha, beta, eps, gamma_E = _values(theta)
    ll = latent_loglik(traj, gamma_E) + culling_loglik(traj, culling_pmf)
    if ll == -np.inf:
        return ll
    return ll + infection_loglik(traj, pop, alpha, beta, eps, kernel=kernel)


def obs_loglik_counts(n_true: int, n_observed: int, rho: float) -> float:
    if not 0 <= n_observed <= n_true:
        raise ValueError(f"observed count {n_observed} must lie in [0, {n_true}]")
    return float(xlogy(n_observed, rho) + xlogy(n_true - n_observed, 1.0 - rho))


def obs_loglik(true_times, observed_times, rho: float, seeds=()) -> float:
    """Binomial thinning of non-seed infections with observation probability ``rho``.

    ``true_times`` and ``observed_times`` are per-individual infection times
    (``NEVER`` when absent). Every observed infection must be a true one at
    the same time.
    """
    true_times = np.asarray(true_times)
    observed_times = np.asarray(observed_times)
    obs = observed_times != NEVER
    if np.any(obs & (observed_times != true_times)):
        raise ValueError("observed infections must be a subset of the true infections")
    non_seed = np.ones(true_times.shape[0], dtype=bool)
    non_seed[np.asarray(seeds, dtype=np.int64)] = False
    n_true = int(((true_times != NEVER) & non_seed).sum())
    n_obs = int((obs & non_seed).sum())
    return obs_loglik_counts(n_true, n_obs, rho)


def _values(theta) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        return theta.as_array()
    return np.asarray(theta, dtype=np.float64)


def _first_two(theta):
    v = _values(theta)
    return float(v[0]), float(v[1])


def log_posterior(theta, traj: Trajectory, scenario, prior: PriorSpec, pop: Population, seeds,
                  observed_times=None, removal_length: int = 3, kernel=None) -> float:
    """Unnormalised log-posterior of ``theta`` and the (augmented) trajectory.

    ``observed_times`` is required for ``partial``; there it enters through
    the binomial observation model with ``rho = theta[2]``.
    """
    if isinstance(theta, ParameterVector):
        scenario = theta.scenario
    scenario = Scenario(scenario)
    v = _values(theta)
    if not in_support(v, prior, scenario):
        return -np.inf
    lp = log_prior(v, prior, scenario, pop, seeds)
    if scenario is Scenario.FULL:
        ll = full_loglik_fixed(traj, pop, v, removal_length, kernel=kernel)
    elif scenario is Scenario.STOCH:
        ll = full_loglik_stochastic(traj, pop, v, kernel=kernel)
    elif scenario is Scenario.PARTIAL:
        if observed_times is None:
            raise ValueError("partial scenario needs the observed infection times")
        ll = obs_loglik(traj.infection_time, observed_times, v[2], traj.seeds)
        if ll > -np.inf:
            ll += full_loglik_fixed(traj, pop, v, removal_length, kernel=kernel)
    else:
        ll = seir_loglik(traj, pop, v, prior.culling_pmf, kernel=kernel)
    return float(lp + ll)
