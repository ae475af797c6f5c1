"""Likelihood-based baseline: adaptive Metropolis-Hastings with data augmentation.

Model parameters are updated jointly by a random-walk Metropolis step on
transformed coordinates (``log alpha``, ``beta``, and ``log`` of any rate
parameter). The proposal covariance starts diagonal, switches to the
empirical covariance of the chain history, and its global scale follows a
Robbins-Monro recursion towards a 0.234 acceptance rate. Adaptation stops
at the end of burn-in.

Latent parts of the epidemic are updated per scenario:

* ``stoch``: all removal times jointly, proposed from the geometric
  duration model and accepted on the transmission-likelihood ratio.
* ``partial``: ``rho`` by a conjugate Beta draw, then single-site toggles of
  unobserved individuals between uninfected and infected-at-a-uniform-time.
* ``seir``: exposure times by exact categorical full conditionals, and
  infectious periods by single-site Gibbs over the culling distribution.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._errors import ConfigError
from .epidemic import NEVER, ObservedEpidemic, Scenario, Trajectory, _finite_or
from .likelihood import (
    culling_loglik,
    duration_loglik,
    latent_loglik,
    log_posterior,
    loglik_from_pressure,
    obs_loglik,
    pressure_matrix,
)
from .priors import PriorSpec, log_prior, sample_prior
from .rng import check_rng, substream

__all__ = [
    "MCMCConfig",
    "AdaptiveProposal",
    "adaptive_mh_step",
    "ChainState",
    "AugmentedModel",
    "augment_removals",
    "gibbs_rho",
    "augment_infections",
    "augment_exposures",
    "exposure_log_weights",
    "exposure_log_weight_matrix",
    "gibbs_culling",
    "ChainOutput",
    "run_chain",
    "run_chains",
    "gelman_rubin",
]


@dataclass
class MCMCConfig:
    n_chains: int = 3
    iters: int = 50_000
    burn_in: int = 20_000
    thin: int = 30
    n_props: int = 10
    target_accept: float = 0.234
    adapt_start: int = 500
    exposure_window: int = 15
    removal_length: int = 3
    debug: bool = False

    def validate(self) -> "MCMCConfig":
        if self.n_chains < 1:
            raise ConfigError("mcmc.n_chains must be >= 1")
        if not 0 <= self.burn_in < self.iters:
            raise ConfigError("mcmc.burn_in must lie in [0, iters)")
        if self.thin < 1:
            raise ConfigError("mcmc.thin must be >= 1")
        if self.n_props < 0:
            raise ConfigError("mcmc.n_props must be >= 0")
        if not 0 < self.target_accept < 1:
            raise ConfigError("mcmc.target_accept must lie in (0, 1)")
        if self.exposure_window < 1:
            raise ConfigError("mcmc.exposure_window must be >= 1")
        return self

    @property
    def n_keep(self) -> int:
        return (self.iters - self.burn_in) // self.thin


class AdaptiveProposal:
    """Gaussian random-walk proposal with Robbins-Monro scale adaptation.

    For the first ``adapt_start`` updates the shape is the diagonal
    ``init_sd**2``; afterwards it is the running empirical covariance plus a
    small ridge. ``freeze()`` stops all adaptation.
    """

    def __init__(self, dim: int, init_sd=None, target: float = 0.234, adapt_start: int = 500):
        self.dim = dim
        self.target = target
        self.adapt_start = adapt_start
        self.init_sd = np.ones(dim) if init_sd is None else np.asarray(init_sd, dtype=float)
        self.log_scale = math.log(2.38 / math.sqrt(dim))
        self.n = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))
        self.frozen = False
        self._chol = np.diag(self.init_sd)

    def shape(self) -> np.ndarray:
        if self.n < max(self.adapt_start, 2 * self.dim):
            return np.diag(self.init_sd**2)
        cov = self._m2 / (self.n - 1)
        return cov + 1e-8 * np.diag(self.init_sd**2) + 1e-12 * np.eye(self.dim)

    def propose(self, u: np.ndarray, rng) -> np.ndarray:
        return u + math.exp(self.log_scale) * (self._chol @ rng.standard_normal(self.dim))

    def update(self, u: np.ndarray, accept_prob: float) -> None:
        if self.frozen:
            return
        self.n += 1
        self.log_scale += self.n ** -0.6 * (accept_prob - self.target)
        delta = u - self.mean
        self.mean += delta / self.n
        self._m2 += np.outer(delta, u - self.mean)
        if self.n >= self.adapt_start and self.n % 50 == 0 or self.n == self.adapt_start:
            try:
                self._chol = np.linalg.cholesky(self.shape())
            except np.linalg.LinAlgError:
                pass

    def freeze(self) -> None:
        self.frozen = True


def adaptive_mh_step(u: np.ndarray, log_p: float, log_target, proposal: AdaptiveProposal, rng):
    """One adaptive random-walk Metropolis step on unconstrained coordinates.

    ``log_target(u)`` must already include any Jacobian of the coordinate
    transform. Returns ``(u, log_p, accepted)``.
    """
    u_new = proposal.propose(u, rng)
    lp_new = log_target(u_new)
    log_ratio = lp_new - log_p
    accept_prob = 1.0 if log_ratio >= 0 else (math.exp(log_ratio) if lp_new > -np.inf else 0.0)
    accepted = rng.random() < accept_prob
    if accepted:
        u, log_p = u_new, lp_new
    proposal.update(u, accept_prob)
    return u, log_p, accepted


# ---------------------------------------------------------------- augmented posterior

@dataclass
class ChainState:
    """Current parameters, augmented trajectory and cached density pieces."""

    theta: np.ndarray
    traj: Trajectory
    P: np.ndarray                 # pressure matrix at theta's beta
    log_prior: float
    ll_trans: float               # transmission (infection/exposure) part
    ll_extra: float               # durations, latent periods, observation model
    stats: dict = field(default_factory=dict)

    @property
    def log_post(self) -> float:
        return self.log_prior + self.ll_trans + self.ll_extra


class AugmentedModel:
    """Scenario-specific pieces of the augmented posterior for one observation."""

    def __init__(self, obs: ObservedEpidemic, prior: PriorSpec, config: MCMCConfig | None = None):
        self.obs = obs
        self.scenario = Scenario(obs.scenario)
        self.pop = obs.population
        self.prior = prior
        self.config = (config or MCMCConfig()).validate()
        self.T = obs.T
        self.M = self.pop.size
        self.seeds = obs.seeds
        if self.seeds.size == 0:
            raise ValueError("observation has no seeds (no infection observed at t=0)")
        self.obs_time = obs.node_obs_time
        self.non_seed = np.ones(self.M, dtype=bool)
        self.non_seed[self.seeds] = False
        self.unobserved = np.flatnonzero(self.obs_time == NEVER)
        # parameters updated by the random walk, and which are on log scale
        if self.scenario is Scenario.SEIR:
            self.log_coords = np.array([True, False, True, True])
            self.mh_dims = np.arange(4)
        elif self.scenario is Scenario.STOCH:
            self.log_coords = np.array([True, False, True])
            self.mh_dims = np.arange(3)
        else:
            self.log_coords = np.array([True, False])
            self.mh_dims = np.arange(2)

    # ---- coordinates
    def to_u(self, theta):
        v = np.asarray(theta, dtype=float)[self.mh_dims]
        with np.errstate(divide="ignore"):
            return np.where(self.log_coords, np.log(np.maximum(v, 0.0)), v)

    def from_u(self, u, theta):
        out = np.array(theta, dtype=float)
        out[self.mh_dims] = np.where(self.log_coords, np.exp(u), u)
        return out

    # ---- density pieces
    def pressure(self, traj: Trajectory, beta: float) -> np.ndarray:
        return pressure_matrix(traj, self.pop, beta)

    def entry(self, traj: Trajectory) -> np.ndarray:
        return _finite_or(traj.entry_time(), self.T + 10)

    def ll_trans(self, theta, traj, P) -> float:
        eps = theta[2] if self.scenario is Scenario.SEIR else 0.0
        return float(loglik_from_pressure(P, self.entry(traj), theta[0], eps).sum())

    def ll_extra(self, theta, traj) -> float:
        if self.scenario is Scenario.STOCH:
            return duration_loglik(traj, theta[2])
        if self.scenario is Scenario.PARTIAL:
            return obs_loglik(traj.infection_time, self.obs_time, theta[2], self.seeds)
        if self.scenario is Scenario.SEIR:
            return latent_loglik(traj, theta[3]) + culling_loglik(traj, self.prior.culling_pmf)
        return 0.0

    def log_prior(self, theta) -> float:
        return log_prior(theta, self.prior, self.scenario, self.pop, self.seeds)

    def make_state(self, theta, traj) -> ChainState:
        theta = np.asarray(theta, dtype=float)
        P = self.pressure(traj, theta[1])
        lp = self.log_prior(theta)
        return ChainState(theta, traj, P, lp, self.ll_trans(theta, traj, P), self.ll_extra(theta, traj))

    def check_cache(self, state: ChainState, tol: float = 1e-9) -> None:
        fresh = log_posterior(state.theta, state.traj, self.scenario, self.prior, self.pop, self.seeds,
                              observed_times=self.obs_time, removal_length=self.config.removal_length)
        cached = state.log_post
        if not (fresh == cached or abs(fresh - cached) <= tol * max(1.0, abs(fresh))):
            raise AssertionError(f"cached log-posterior {cached!r} != recomputed {fresh!r}")
        state.traj.validate()

    # ---- initial states
    def initial_state(self, rng) -> ChainState:
        """Overdispersed start: parameters from the prior, latent events by scenario rules."""
        rng = check_rng(rng)
        for _ in range(1000):
            theta = sample_prior(self.prior, self.scenario, self.pop, self.seeds, rng).as_array()
            traj = self._initial_trajectory(theta, rng)
            state = self.make_state(theta, traj)
            if np.isfinite(state.log_post):
                return state
        raise RuntimeError("could not find an initial state with finite posterior density")

    def _initial_trajectory(self, theta, rng) -> Trajectory:
        T, L = self.T, self.config.removal_length
        inf = self.obs_time.copy()
        if self.scenario is Scenario.STOCH:
            infected = np.flatnonzero(inf != NEVER)
            p = -math.expm1(-theta[2])
            for _ in range(100):
                rem = np.full(self.M, NEVER)
                r = inf[infected] + rng.geometric(p, size=infected.size)
                rem[infected] = np.where(r <= T, r, NEVER)
                traj = Trajectory(inf, rem, T, self.seeds)
                if np.isfinite(self.ll_trans(theta, traj, self.pressure(traj, theta[1]))):
                    return traj
            return Trajectory(inf, np.full(self.M, NEVER), T, self.seeds)
        if self.scenario is Scenario.SEIR:
            exp = np.where((inf != NEVER) & self.non_seed, inf - 1, inf)
            rem = np.full(self.M, NEVER)
            infected = np.flatnonzero(inf != NEVER)
            g = rng.choice(np.arange(1, len(self.prior.culling_pmf) + 1), size=infected.size,
                           p=self.prior.culling_pmf)
            r = inf[infected] + g
            rem[infected] = np.where(r <= T, r, NEVER)
            return Trajectory(inf, rem, T, self.seeds, exposure_time=exp)
        if self.scenario is Scenario.PARTIAL:
            inf = self._fill_gaps(inf, rng)
        return _fixed_trajectory(inf, T, self.seeds, L)

    def _fill_gaps(self, inf, rng) -> np.ndarray:
        """Add unobserved infections until every infection has an infectious source.

        Unobserved individuals start uninfected; where an observed infection at
        ``t + 1`` has nobody infectious at ``t``, the closest unobserved
        individual is made infected at ``t`` and the scan restarts.
        """
        T, L = self.T, self.config.removal_length
        inf = inf.copy()
        for _ in range(self.M):
            traj = _fixed_trajectory(inf, T, self.seeds, L)
            X = traj.infectious_matrix()
            need = np.zeros(T, dtype=bool)
            times = inf[inf > 0]
            need[times - 1] = True
            gaps = np.flatnonzero(need & ~X.any(1))
            if gaps.size == 0:
                return inf
            t = int(gaps[0])
            later = np.flatnonzero(inf == t + 1)
            free = np.flatnonzero(inf == NEVER)
            if free.size == 0:
                return inf
            d = self.pop.distances[np.ix_(free, later)].min(1)
            inf[free[np.argmin(d)]] = t
        return inf


def _fixed_trajectory(inf, T, seeds, L) -> Trajectory:
    rem = np.where(inf == NEVER, NEVER, inf + L)
    rem = np.where(rem > T, NEVER, rem)
    return Trajectory(inf, rem, T, seeds)


def _accept(log_ratio: float, rng) -> bool:
    return log_ratio >= 0 or (log_ratio > -np.inf and rng.random() < math.exp(log_ratio))


def _update_params(state: ChainState, model: AugmentedModel, proposal: AdaptiveProposal, rng) -> ChainState:
    theta = state.theta
    cache = {}

    def log_target(u):
        th = model.from_u(u, theta)
        lp = model.log_prior(th)
        if lp == -np.inf:
            return -np.inf
        P = state.P if th[1] == theta[1] else model.pressure(state.traj, th[1])
        parts = (lp, model.ll_trans(th, state.traj, P), model.ll_extra(th, state.traj))
        cache["last"] = (th, P, parts)
        return sum(parts) + float(u[model.log_coords].sum())

    u = model.to_u(theta)
    log_p = state.log_post + float(u[model.log_coords].sum())
    _, _, accepted = adaptive_mh_step(u, log_p, log_target, proposal, rng)
    state.stats["param_proposed"] = state.stats.get("param_proposed", 0) + 1
    if accepted:
        th, P, (lp, lt, le) = cache["last"]
        state = ChainState(th, state.traj, P, lp, lt, le, state.stats)
        state.stats["param_accepted"] = state.stats.get("param_accepted", 0) + 1
    return state


def augment_removals(state: ChainState, model: AugmentedModel, rng) -> ChainState:
    """Joint independence proposal of all removal times from the geometric model.

    Because the proposal is the duration model itself, the duration terms
    cancel and acceptance uses only the transmission-likelihood ratio.
    """
    traj, theta, T = state.traj, state.theta, model.T
    infected = traj.infected()
    p = -math.expm1(-theta[2])
    r = traj.infection_time[infected] + rng.geometric(p, size=infected.size)
    rem = np.full(traj.size, NEVER)
    rem[infected] = np.where(r <= T, r, NEVER)
    new_traj = Trajectory(traj.infection_time, rem, T, traj.seeds)
    P = model.pressure(new_traj, theta[1])
    ll_new = model.ll_trans(theta, new_traj, P)
    log_ratio = ll_new - state.ll_trans
    state.stats["last_log_ratio"] = log_ratio
    state.stats["aug_proposed"] = state.stats.get("aug_proposed", 0) + 1
    if _accept(log_ratio, rng):
        state.stats["aug_accepted"] = state.stats.get("aug_accepted", 0) + 1
        return ChainState(theta, new_traj, P, state.log_prior, ll_new, model.ll_extra(theta, new_traj), state.stats)
    return state


def gibbs_rho(k: int, n: int, rng) -> float:
    """Draw rho from Beta(1 + k, 1 + n - k), its full conditional under a Uniform(0, 1) prior."""
    if not 0 <= k <= n:
        raise ValueError(f"observed count {k} must lie in [0, {n}]")
    return float(check_rng(rng).beta(1 + k, 1 + n - k))


def _update_rho(state: ChainState, model: AugmentedModel, rng) -> ChainState:
    inf = state.traj.infection_time
    n = int(((inf != NEVER) & model.non_seed).sum())
    k = int(((model.obs_time != NEVER) & model.non_seed).sum())
    theta = state.theta.copy()
    theta[2] = gibbs_rho(k, n, rng)
    return ChainState(theta, state.traj, state.P, model.log_prior(theta), state.ll_trans,
                      model.ll_extra(theta, state.traj), state.stats)


def _infectious_count(traj: Trajectory) -> np.ndarray:
    """Number of infectious individuals at each ``t = 0..T-1``."""
    T = traj.T
    inf, rem = traj.infection_time, traj.removal_time
    on = inf != NEVER
    ends = np.where(rem[on] == NEVER, T, np.minimum(rem[on], T))
    diff = np.bincount(inf[on], minlength=T + 1)[: T + 1] - np.bincount(ends, minlength=T + 1)[: T + 1]
    return np.cumsum(diff)[:T]


def _shift_pressure(P, K_row, old_rows, new_rows, count):
    """Move one individual's kernel row between time steps.

    Rows with nobody infectious (``count == 0``) are reset to exactly zero
    so that rounding cannot turn an impossible infection into a possible one.
    """
    P = P.copy()
    if old_rows.size:
        P[old_rows] -= K_row
    if new_rows.size:
        P[new_rows] += K_row
    P[count == 0] = 0.0
    return P


def _infectious_rows(tau: int, rem: int, T: int) -> np.ndarray:
    if tau == NEVER:
        return np.empty(0, dtype=np.int64)
    end = T if rem == NEVER else min(rem, T)
    return np.arange(tau, end)


def augment_infections(state: ChainState, model: AugmentedModel, rng, n_props: int | None = None) -> ChainState:
    """Single-site updates of unobserved infections (partial observation).

    Each of ``min(n_props, #unobserved)`` randomly chosen unobserved
    individuals gets an independence proposal: uninfected with probability
    1/2, otherwise infected at a time drawn uniformly from ``1..T``.
    Acceptance uses the likelihood ratio, the observation-model odds under
    ``rho`` and the proposal ratio.
    """
    n_props = model.config.n_props if n_props is None else n_props
    T, L = model.T, model.config.removal_length
    cand = model.unobserved
    m = min(n_props, cand.size)
    state.stats["proposal_set_size"] = m
    if m == 0:
        return state
    chosen = rng.choice(cand, size=m, replace=False)
    theta = state.theta
    log_q_inf = math.log(0.5 / T)
    log_q_none = math.log(0.5)
    for i in chosen:
        traj = state.traj
        cur = int(traj.infection_time[i])
        new = int(rng.integers(1, T + 1)) if rng.random() < 0.5 else NEVER
        state.stats["aug_proposed"] = state.stats.get("aug_proposed", 0) + 1
        if new == cur:
            state.stats["aug_accepted"] = state.stats.get("aug_accepted", 0) + 1
            continue
        inf = traj.infection_time.copy()
        inf[i] = new
        new_traj = _fixed_trajectory(inf, T, traj.seeds, L)
        K_row = model.pop.distances[i] ** (-theta[1])
        K_row[i] = 0.0
        P = _shift_pressure(state.P, K_row,
                            _infectious_rows(cur, traj.removal_time[i], T),
                            _infectious_rows(new, new_traj.removal_time[i], T),
                            _infectious_count(new_traj))
        ll_t = model.ll_trans(theta, new_traj, P)
        ll_e = model.ll_extra(theta, new_traj)
        log_q_fwd = log_q_none if new == NEVER else log_q_inf
        log_q_rev = log_q_none if cur == NEVER else log_q_inf
        log_ratio = (ll_t + ll_e) - (state.ll_trans + state.ll_extra) + log_q_rev - log_q_fwd
        state.stats["last_log_ratio"] = log_ratio
        if _accept(log_ratio, rng):
            state.stats["aug_accepted"] = state.stats.get("aug_accepted", 0) + 1
            state = ChainState(theta, new_traj, P, state.log_prior, ll_t, ll_e, state.stats)
            if model.config.debug:
                model.check_cache(state)
    return state


def exposure_log_weights(P_col: np.ndarray, alpha: float, epsilon: float, gamma_E: float,
                         T: int, infection_time: int, window: int) -> tuple:
    """Unnormalised log full-conditional weights of one farm's exposure time.

    Returns ``(candidates, log_weights)``. Candidates are exposure times;
    ``NEVER`` stands for staying unexposed through ``T``. For a farm
    infectious at ``tau`` the candidates are ``max(1, tau - window)..tau-1``;
    otherwise ``1..T`` plus ``NEVER``.
    """
    lam = alpha * P_col + epsilon                       # step s -> s+1 hazard
    cum = np.concatenate([[0.0], np.cumsum(lam)])       # cum[s] = sum_{r<s} lam_r
    log_q = math.log(-math.expm1(-gamma_E))
    with np.errstate(divide="ignore"):
        if infection_time != NEVER:
            e = np.arange(max(1, infection_time - window), infection_time)
            logw = -cum[e - 1] + np.log(-np.expm1(-lam[e - 1])) - gamma_E * (infection_time - e - 1) + log_q
            return e, logw
        e = np.arange(1, T + 1)
        logw = -cum[e - 1] + np.log(-np.expm1(-lam[e - 1])) - gamma_E * (T - e)
        return np.append(e, NEVER), np.append(logw, -cum[T])


def _categorical(logw: np.ndarray, rng) -> int:
    w = np.exp(logw - logw.max())
    c = np.cumsum(w)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


def exposure_log_weight_matrix(P: np.ndarray, infection_time: np.ndarray, alpha: float, epsilon: float,
                               gamma_E: float, window: int) -> tuple:
    """Vectorised ``exposure_log_weights`` for many farms at once.

    ``P`` has shape ``(T, n)`` (pressure columns of the farms) and
    ``infection_time`` shape ``(n,)``. Returns ``(candidates, log_weights)``
    of shape ``(C, n)`` with ``-inf`` marking unavailable candidates.
    """
    T, n = P.shape
    lam = alpha * np.maximum(P, 0.0) + epsilon
    cum = np.vstack([np.zeros((1, n)), np.cumsum(lam, axis=0)])
    with np.errstate(divide="ignore"):
        log_hit = np.log(-np.expm1(-lam))
    log_q = math.log(-math.expm1(-gamma_E))
    tau = infection_time
    observed = tau != NEVER
    C = max(T + 1, window)
    cand = np.full((C, n), NEVER, dtype=np.int64)
    logw = np.full((C, n), -np.inf)
    cols = np.arange(n)
    # farms still unexposed or latent at T: exposure at 1..T or never
    e = np.arange(1, T + 1)[:, None]
    u = ~observed
    cand[:T, u] = e
    logw[:T, u] = -cum[e - 1, cols[u]] + log_hit[e - 1, cols[u]] - gamma_E * (T - e)
    logw[T, u] = -cum[T, u]
    # infected farms: exposure in the window before infection
    k = np.arange(1, window + 1)[:, None]
    o = cols[observed]
    e = tau[o][None, :] - k
    ok = e >= 1
    es = np.where(ok, e, 1)
    w = -cum[es - 1, o] + log_hit[es - 1, o] - gamma_E * (k - 1) + log_q
    cand[:window, o] = np.where(ok, e, NEVER)
    logw[:window, o] = np.where(ok, w, -np.inf)
    return cand, logw


def augment_exposures(state: ChainState, model: AugmentedModel, rng) -> ChainState:
    """Gibbs sweep over every non-seed farm's exposure time.

    Exposed farms are not infectious, so a farm's exposure time only enters
    its own transmission, latent-period and survival terms, and all farms
    can be drawn from their exact categorical full conditionals at once.
    """
    theta, traj = state.theta, state.traj
    farms = np.flatnonzero(model.non_seed)
    cand, logw = exposure_log_weight_matrix(state.P[:, farms], traj.infection_time[farms], theta[0],
                                            theta[2], theta[3], model.config.exposure_window)
    # Gumbel-max draw from each column's categorical
    pick = np.argmax(logw + rng.gumbel(size=logw.shape), axis=0)
    usable = np.isfinite(logw.max(axis=0))
    exp = traj.exposure_time.copy()
    exp[farms[usable]] = cand[pick[usable], usable]
    new_traj = Trajectory(traj.infection_time, traj.removal_time, model.T, traj.seeds, exposure_time=exp)
    state = ChainState(theta, new_traj, state.P, state.log_prior, model.ll_trans(theta, new_traj, state.P),
                       model.ll_extra(theta, new_traj), state.stats)
    if model.config.debug:
        model.check_cache(state)
    return state


def gibbs_culling(state: ChainState, model: AugmentedModel, rng) -> ChainState:
    """Single-site Gibbs update of each infected farm's removal time (SEIR).

    Only the time steps between infection and the longest possible removal
    change, so each candidate is scored on those rows alone.
    """
    theta, T = state.theta, model.T
    alpha, eps = theta[0], theta[2]
    pmf = np.asarray(model.prior.culling_pmf)
    G = pmf.size
    tail = np.concatenate([np.cumsum(pmf[::-1])[::-1], [0.0]])
    entry = model.entry(state.traj)
    count = _infectious_count(state.traj)
    P = state.P.copy()
    rem = state.traj.removal_time.copy()
    kernel = model.pop.distances ** (-theta[1])
    changed = False
    with np.errstate(divide="ignore"):
        log_pmf, log_tail = np.log(pmf), np.log(tail)
    for j in state.traj.infected():
        tau = int(state.traj.infection_time[j])
        rows = np.arange(tau, min(tau + G, T))
        if rows.size == 0:
            continue
        cur_end = T if rem[j] == NEVER else rem[j]
        base_on = rows < cur_end
        K_row = kernel[j]
        P_base = P[rows] - np.outer(base_on, K_row)
        c_base = count[rows] - base_on
        options, logw, blocks = [], [], []
        for g in range(1, G + 1):
            r = tau + g
            if r > T:
                options.append(NEVER)
                lp = log_tail[g - 1]
                end = T
            else:
                options.append(r)
                lp = log_pmf[g - 1]
                end = r
            on = rows < end
            Pb = P_base + np.outer(on, K_row)
            Pb[(c_base + on) == 0] = 0.0
            blocks.append((Pb, c_base + on))
            logw.append(lp + float(loglik_from_pressure(Pb, entry, alpha, eps, rows=rows).sum()))
            if r > T:
                break
        logw = np.array(logw)
        if not np.isfinite(logw.max()):
            continue
        k = _categorical(logw, rng)
        if options[k] != rem[j]:
            rem[j] = options[k]
            P[rows], count[rows] = blocks[k]
            changed = True
    if changed:
        traj = state.traj
        new_traj = Trajectory(traj.infection_time, rem, T, traj.seeds, exposure_time=traj.exposure_time)
        state = ChainState(theta, new_traj, P, state.log_prior, model.ll_trans(theta, new_traj, P),
                           model.ll_extra(theta, new_traj), state.stats)
    if model.config.debug:
        model.check_cache(state)
    return state


# ---------------------------------------------------------------- chains

@dataclass
class ChainOutput:
    """Thinned draws of every chain plus diagnostics."""

    scenario: Scenario
    param_names: tuple
    draws: np.ndarray            # (n_chains, n_keep, D)
    acceptance: list             # per chain: {"param": rate, "aug": rate}
    wall_time: float
    rhat: dict = field(default_factory=dict)

    @property
    def converged(self):
        """True when every R-hat < 1.1; None when R-hat is unavailable."""
        vals = list(self.rhat.values())
        if not vals or any(v is None or not np.isfinite(v) for v in vals):
            return None
        return bool(max(vals) < 1.1)

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def diagnostics(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "param_names": list(self.param_names),
            "n_chains": int(self.draws.shape[0]),
            "n_keep": int(self.draws.shape[1]),
            "rhat": {k: (None if v is None or not np.isfinite(v) else float(v)) for k, v in self.rhat.items()},
            "rhat_available": self.draws.shape[0] >= 2,
            "converged": self.converged,
            "acceptance": self.acceptance,
            "wall_time": self.wall_time,
        }


def _sweep(state: ChainState, model: AugmentedModel, proposal: AdaptiveProposal, rng) -> ChainState:
    state = _update_params(state, model, proposal, rng)
    if model.config.debug:
        model.check_cache(state)
    sc = model.scenario
    if sc is Scenario.STOCH:
        state = augment_removals(state, model, rng)
    elif sc is Scenario.PARTIAL:
        state = _update_rho(state, model, rng)
        state = augment_infections(state, model, rng)
    elif sc is Scenario.SEIR:
        state = augment_exposures(state, model, rng)
        state = gibbs_culling(state, model, rng)
    if model.config.debug:
        model.check_cache(state)
    return state


def _init_sd(model: AugmentedModel) -> np.ndarray:
    sd = {Scenario.FULL: [0.3, 0.2], Scenario.PARTIAL: [0.3, 0.2],
          Scenario.STOCH: [0.3, 0.2, 0.2], Scenario.SEIR: [0.3, 0.2, 0.5, 0.3]}
    return np.array(sd[model.scenario])


def run_chain(obs: ObservedEpidemic, prior: PriorSpec, config: MCMCConfig, rng) -> tuple:
    """Run one chain; returns ``(draws, acceptance)``."""
    rng = check_rng(rng)
    model = AugmentedModel(obs, prior, config)
    state = model.initial_state(rng)
    proposal = AdaptiveProposal(len(model.mh_dims), _init_sd(model), config.target_accept, config.adapt_start)
    draws = np.empty((config.n_keep, obs.scenario.dim))
    k = 0
    for it in range(1, config.iters + 1):
        if it == config.burn_in + 1:
            proposal.freeze()
        state = _sweep(state, model, proposal, rng)
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0 and k < config.n_keep:
            draws[k] = state.theta
            k += 1
    s = state.stats
    acc = {"param": s.get("param_accepted", 0) / max(1, s.get("param_proposed", 0))}
    if "aug_proposed" in s:
        acc["aug"] = s.get("aug_accepted", 0) / max(1, s["aug_proposed"])
    return draws, acc


def _run_chain_job(args):
    obs, prior, config, seed, c = args
    return run_chain(obs, prior, config, substream(seed, "mcmc-chain", c))


def run_chains(obs: ObservedEpidemic, prior: PriorSpec | None = None, config: MCMCConfig | None = None,
               seed: int = 0, threads: int = 1) -> ChainOutput:
    """Run independent chains from prior-drawn starts and compute R-hat.

    Chain ``c`` uses substream ``(seed, "mcmc-chain", c)``, so results do
    not depend on ``threads``.
    """
    prior = prior or PriorSpec()
    config = (config or MCMCConfig()).validate()
    t0 = time.perf_counter()
    jobs = [(obs, prior, config, seed, c) for c in range(config.n_chains)]
    if threads > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, config.n_chains)) as ex:
            results = list(ex.map(_run_chain_job, jobs))
    else:
        results = [_run_chain_job(j) for j in jobs]
    draws = np.stack([r[0] for r in results])
    out = ChainOutput(Scenario(obs.scenario), obs.scenario.param_names, draws,
                      [r[1] for r in results], time.perf_counter() - t0)
    for d, name in enumerate(out.param_names):
        out.rhat[name] = gelman_rubin(draws[:, :, d]) if config.n_chains >= 2 else None
    return out


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for one parameter.

    ``chains`` has shape (m, n): m >= 2 chains of n >= 2 draws. Returns NaN
    when the within-chain variance is zero.
    """
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"need at least 2 chains of 2 draws, got shape {x.shape}")
    m, n = x.shape
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if not W > 0:
        return float("nan")
    var_hat = (n - 1) / n * W + B / n
    return float(math.sqrt(var_hat / W))


def config_dict(config: MCMCConfig) -> dict:
    return asdict(config)
