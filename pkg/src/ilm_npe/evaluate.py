"""Posterior accuracy metrics, calibration checks and predictive checks."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .epidemic import ObservedEpidemic, Scenario
from .rng import check_rng

__all__ = [
    "mae",
    "interval_summary",
    "EvalReport",
    "evaluate_posteriors",
    "write_reports_csv",
    "sbc_ranks",
    "sbc_chisquare",
    "PPCResult",
    "ppc",
    "BenchmarkReport",
    "benchmark",
]


def mae(medians, truths) -> np.ndarray:
    """Mean absolute error of posterior medians, one value per parameter."""
    medians = np.atleast_2d(np.asarray(medians, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if medians.shape != truths.shape:
        raise ValueError(f"medians {medians.shape} and truths {truths.shape} differ in shape")
    if medians.shape[0] == 0:
        raise ValueError("no epidemics to score")
    return np.abs(medians - truths).mean(axis=0)


def _as_sample_list(samples):
    if isinstance(samples, np.ndarray) and samples.ndim == 3:
        return list(samples)
    out = [np.asarray(s, dtype=np.float64) for s in samples]
    return [s[:, None] if s.ndim == 1 else s for s in out]


def interval_summary(samples, truths, level: float = 0.95) -> tuple:
    """Coverage and mean width of equal-tailed credible intervals.

    Parameters
    ----------
    samples : sequence of arrays (S_n, D)
        Posterior draws for each epidemic.
    truths : array (N, D)

    Returns
    -------
    coverage, width : arrays of shape (D,)
    """
    samples = _as_sample_list(samples)
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if len(samples) != truths.shape[0]:
        raise ValueError(f"{len(samples)} sample sets for {truths.shape[0]} truths")
    if not 0 < level <= 1:
        raise ValueError(f"level must lie in (0, 1], got {level}")
    tail = (1 - level) / 2
    covered, widths = [], []
    for s, th in zip(samples, truths):
        if s.shape[0] < 2:
            raise ValueError("each epidemic needs at least 2 posterior samples")
        lo, hi = np.quantile(s, [tail, 1 - tail], axis=0)
        covered.append((lo <= th) & (th <= hi))
        widths.append(hi - lo)
    return np.mean(covered, axis=0), np.mean(widths, axis=0)


@dataclass
class EvalReport:
    """Accuracy and calibration of one method on one scenario."""

    scenario: str
    method: str
    param_names: list
    mae: list
    width: list
    coverage: list
    n_epidemics: int
    wall_time: dict = field(default_factory=dict)

    def rows(self) -> list:
        return [
            {"scenario": self.scenario, "method": self.method, "parameter": p,
             "mae": m, "width": w, "coverage": c}
            for p, m, w, c in zip(self.param_names, self.mae, self.width, self.coverage)
        ]

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def evaluate_posteriors(samples, truths, scenario, method: str, level: float = 0.95,
                        wall_time: dict | None = None) -> EvalReport:
    samples = _as_sample_list(samples)
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    scenario = Scenario(scenario)
    medians = np.array([np.median(s, axis=0) for s in samples])
    cov, width = interval_summary(samples, truths, level)
    return EvalReport(scenario.value, method, list(scenario.param_names), mae(medians, truths).tolist(),
                      width.tolist(), cov.tolist(), len(samples), dict(wall_time or {}))


def write_reports_csv(reports, path) -> None:
    """Flat table with columns scenario, method, parameter, mae, width, coverage."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["scenario", "method", "parameter", "mae", "width", "coverage"])
        w.writeheader()
        for r in reports:
            for row in r.rows():
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def sbc_ranks(samples, truths) -> np.ndarray:
    """Rank of each true parameter among its posterior draws, shape (N, D)."""
    samples = _as_sample_list(samples)
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    return np.array([(s < th).sum(axis=0) for s, th in zip(samples, truths)])


def sbc_chisquare(ranks, n_samples: int, bins: int = 20) -> np.ndarray:
    """Chi-square p-value of rank uniformity per parameter.

    Ranks take values ``0..n_samples``; they are grouped into ``bins``
    equal-width bins of that range.
    """
    ranks = np.atleast_2d(np.asarray(ranks))
    if ranks.shape[0] < bins:
        raise ValueError(f"need at least {bins} ranks for {bins} bins")
    b = np.floor(ranks * bins / (n_samples + 1)).astype(int)
    pvals = []
    for d in range(ranks.shape[1]):
        counts = np.bincount(b[:, d], minlength=bins)
        pvals.append(stats.chisquare(counts).pvalue)
    return np.array(pvals)


@dataclass
class PPCResult:
    """Pointwise predictive incidence bands next to the observed curve."""

    t: np.ndarray
    observed: np.ndarray
    lo: np.ndarray
    med: np.ndarray
    hi: np.ndarray
    curves: np.ndarray

    def coverage(self) -> float:
        """Fraction of time steps with the observed count inside the band."""
        return float(np.mean((self.lo <= self.observed) & (self.observed <= self.hi)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "obs", "lo", "med", "hi"])
            for row in zip(self.t, self.observed, self.lo, self.med, self.hi):
                w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])


def _posterior_draws(source, obs, n_draws, rng):
    if hasattr(source, "sample") and hasattr(source, "flow_"):
        return source.sample(obs, n_draws, random_state=rng)
    if hasattr(source, "pooled"):
        pool = source.pooled()
    else:
        pool = np.atleast_2d(np.asarray(source, dtype=np.float64))
    return pool[rng.choice(pool.shape[0], size=n_draws, replace=pool.shape[0] < n_draws)]


def ppc(source, obs: ObservedEpidemic, n_draws: int = 100, rng=None, culling_pmf=None,
        removal_length: int = 3, level: float = 0.95) -> PPCResult:
    """Posterior predictive incidence bands.

    ``source`` is a fitted estimator, a ``ChainOutput`` or an (S, D) array
    of posterior draws. Each of ``n_draws`` parameter vectors is simulated
    forward from the observed seeds through the scenario's observation map.
    """
    from .npe import simulate_observation

    rng = check_rng(rng)
    draws = _posterior_draws(source, obs, n_draws, rng)
    curves = np.array([
        simulate_observation(obs.scenario, th, obs.population, obs.T, rng, obs.seeds, culling_pmf,
                             removal_length).incidence
        for th in draws
    ])
    tail = (1 - level) / 2
    lo, med, hi = np.quantile(curves, [tail, 0.5, 1 - tail], axis=0)
    return PPCResult(np.arange(1, obs.T + 1), obs.incidence, lo, med, hi, curves)


@dataclass
class BenchmarkReport:
    """Wall-clock timings; one-off costs are kept apart from per-epidemic costs."""

    generation_s: float | None
    training_s: float | None
    npe_per_epidemic_s: float | None
    npe_per_epidemic_max_s: float | None
    mcmc_per_epidemic_s: float | None
    n_epidemics: int
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def benchmark(estimator=None, observations=(), n_samples: int = 3000, mcmc_runner=None,
              generation_s=None, training_s=None, rng=None) -> BenchmarkReport:
    """Time per-epidemic NPE sampling (and optionally MCMC) over ``observations``.

    ``mcmc_runner(obs)`` should run a complete MCMC analysis of one
    observation; it is timed on the first observation only.
    """
    rng = check_rng(rng)
    times = []
    observations = list(observations)
    if estimator is not None:
        for obs in observations:
            t0 = time.perf_counter()
            estimator.sample(obs, n_samples, random_state=rng)
            times.append(time.perf_counter() - t0)
    mcmc_s = None
    if mcmc_runner is not None and observations:
        t0 = time.perf_counter()
        mcmc_runner(observations[0])
        mcmc_s = time.perf_counter() - t0
    return BenchmarkReport(
        generation_s, training_s,
        float(np.mean(times)) if times else None, float(np.max(times)) if times else None,
        mcmc_s, len(observations), n_samples,
    )
