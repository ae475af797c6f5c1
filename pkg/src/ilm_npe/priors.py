"""Priors specified through R0, with the transmission intensity induced from it.

For every scenario ``beta ~ Gamma(6, scale=1/4)`` and
``R0 ~ Gamma(10, scale=1/4)``. The transmission intensity is then
``alpha = R0 / (mu * lambda0(beta))`` where ``lambda0(beta)`` is the mean
pressure the seeds exert on everyone else and ``mu`` the mean infectious
period: fixed (3) for full/partial, drawn for stochastic removal, and the
culling-distribution mean (3.2) for SEIR.

``log_prior`` evaluates the induced density of ``(alpha, beta, ...)`` by
changing variables from ``(R0, beta, ...)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .epidemic import CULLING_PMF, ParameterVector, Scenario
from .population import Population, mean_initial_pressure
from .rng import check_rng

__all__ = ["PriorSpec", "sample_prior", "log_prior", "in_support", "alpha_scale"]


@dataclass(frozen=True)
class PriorSpec:
    beta_shape: float = 6.0
    beta_scale: float = 0.25
    r0_shape: float = 10.0
    r0_scale: float = 0.25
    mu_fix: float = 3.0
    mu_I_sdlog: float = 0.27
    mu_I_mean: float = 3.0
    epsilon_rate: float = 1000.0
    gamma_E_shape: float = 10.0
    gamma_E_scale: float = 0.02
    culling_pmf: tuple = CULLING_PMF

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "culling_pmf":
                pmf = np.asarray(v, dtype=float)
                if np.any(pmf < 0) or not np.isclose(pmf.sum(), 1.0):
                    raise ValueError(f"culling_pmf must be a probability vector, got {v}")
                object.__setattr__(self, "culling_pmf", tuple(float(x) for x in v))
            elif not v > 0:
                raise ValueError(f"prior hyperparameter {f.name} must be positive, got {v}")

    @property
    def mu_I_meanlog(self) -> float:
        # chosen so that E[mu_I] = mu_I_mean
        return float(np.log(self.mu_I_mean) - self.mu_I_sdlog**2 / 2)

    @property
    def mean_infectious_period(self) -> float:
        pmf = np.asarray(self.culling_pmf)
        return float((np.arange(1, pmf.size + 1) * pmf).sum())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["culling_pmf"] = list(self.culling_pmf)
        return d


def _gamma_logpdf(x, shape, scale):
    return (shape - 1) * math.log(x) - x / scale - math.lgamma(shape) - shape * math.log(scale)


def _lognormal_logpdf(x, meanlog, sdlog):
    z = (math.log(x) - meanlog) / sdlog
    return -0.5 * z * z - math.log(x * sdlog) - 0.5 * math.log(2 * math.pi)


def alpha_scale(beta: float, pop: Population, seeds, mu: float) -> float:
    """``mu * lambda0(beta)``, so that ``alpha = R0 / alpha_scale``."""
    return mu * mean_initial_pressure(pop, seeds, beta)


def _gamma_from_mu(mu_I: float) -> float:
    return float(-np.log1p(-1.0 / mu_I))


def sample_prior(spec: PriorSpec, scenario, pop: Population, seeds, rng=None) -> ParameterVector:
    """Draw one parameter vector from the scenario's prior.

    Draw order is fixed (beta, R0, then scenario add-ons) so a substream
    always maps to the same vector.
    """
    scenario = Scenario(scenario)
    rng = check_rng(rng)
    beta = rng.gamma(spec.beta_shape, spec.beta_scale)
    r0 = rng.gamma(spec.r0_shape, spec.r0_scale)
    if scenario is Scenario.STOCH:
        mu = rng.lognormal(spec.mu_I_meanlog, spec.mu_I_sdlog)
        while mu <= 1.0:  # gamma undefined; essentially never happens
            mu = rng.lognormal(spec.mu_I_meanlog, spec.mu_I_sdlog)
        alpha = r0 / alpha_scale(beta, pop, seeds, mu)
        return ParameterVector(scenario, (alpha, beta, _gamma_from_mu(mu)))
    if scenario is Scenario.SEIR:
        alpha = r0 / alpha_scale(beta, pop, seeds, spec.mean_infectious_period)
        eps = rng.exponential(1.0 / spec.epsilon_rate)
        gamma_E = rng.gamma(spec.gamma_E_shape, spec.gamma_E_scale)
        return ParameterVector(scenario, (alpha, beta, eps, gamma_E))
    alpha = r0 / alpha_scale(beta, pop, seeds, spec.mu_fix)
    if scenario is Scenario.PARTIAL:
        return ParameterVector(scenario, (alpha, beta, rng.uniform(0.0, 1.0)))
    return ParameterVector(scenario, (alpha, beta))


def _values(theta, scenario) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        return theta.as_array()
    v = np.asarray(theta, dtype=np.float64)
    if v.shape != (scenario.dim,):
        raise ValueError(f"{scenario.value} expects {scenario.dim} parameters, got shape {v.shape}")
    return v


def in_support(theta, spec: PriorSpec | None = None, scenario=None) -> bool:
    """True iff every component lies in its prior's support (epsilon = 0 included)."""
    if isinstance(theta, ParameterVector):
        scenario = theta.scenario
    scenario = Scenario(scenario)
    v = _values(theta, scenario)
    if not np.all(np.isfinite(v)):
        return False
    d = dict(zip(scenario.param_names, v))
    ok = d["alpha"] > 0 and d["beta"] > 0
    if scenario is Scenario.STOCH:
        ok = ok and d["gamma"] > 0
    elif scenario is Scenario.PARTIAL:
        ok = ok and 0 < d["rho"] < 1
    elif scenario is Scenario.SEIR:
        ok = ok and d["epsilon"] >= 0 and d["gamma_E"] > 0
    return bool(ok)


def in_support_array(theta: np.ndarray, scenario) -> np.ndarray:
    """Row-wise ``in_support`` for an (n, D) array."""
    scenario = Scenario(scenario)
    theta = np.atleast_2d(theta)
    ok = np.all(np.isfinite(theta), axis=1) & (theta[:, 0] > 0) & (theta[:, 1] > 0)
    if scenario is Scenario.STOCH:
        ok &= theta[:, 2] > 0
    elif scenario is Scenario.PARTIAL:
        ok &= (theta[:, 2] > 0) & (theta[:, 2] < 1)
    elif scenario is Scenario.SEIR:
        ok &= (theta[:, 2] >= 0) & (theta[:, 3] > 0)
    return ok


def log_prior(theta, spec: PriorSpec, scenario, pop: Population, seeds) -> float:
    """Log density of the induced prior on ``theta`` (``-inf`` off support)."""
    if isinstance(theta, ParameterVector):
        scenario = theta.scenario
    scenario = Scenario(scenario)
    v = _values(theta, scenario)
    if not in_support(v, spec, scenario):
        return -np.inf
    alpha, beta = v[0], v[1]
    lam0 = mean_initial_pressure(pop, seeds, beta)
    lp = _gamma_logpdf(beta, spec.beta_shape, spec.beta_scale)
    if scenario is Scenario.STOCH:
        gamma = v[2]
        # mu_I = 1 / (1 - exp(-gamma)),  |d mu_I / d gamma| = e^-gamma / (1 - e^-gamma)^2
        p = -math.expm1(-gamma)
        mu = 1.0 / p
        lp += _lognormal_logpdf(mu, spec.mu_I_meanlog, spec.mu_I_sdlog)
        lp += -gamma - 2.0 * math.log(p)
    elif scenario is Scenario.SEIR:
        mu = spec.mean_infectious_period
        lp += math.log(spec.epsilon_rate) - spec.epsilon_rate * v[2]
        lp += _gamma_logpdf(v[3], spec.gamma_E_shape, spec.gamma_E_scale)
    else:
        mu = spec.mu_fix
    scale = mu * lam0
    lp += _gamma_logpdf(alpha * scale, spec.r0_shape, spec.r0_scale) + math.log(scale)
    return float(lp)
