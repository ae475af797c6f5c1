"""Discrete-time spatial SIR/SEIR simulation and observation maps.

Time runs over ``t = 0, 1, ..., T``. Seeds are infectious at ``t = 0``.
During step ``t -> t+1`` every susceptible individual is infected (or, in
the SEIR model, exposed) independently with probability
``1 - exp(-alpha * sum_{j in I_t} d_ij^-beta - epsilon)``. Event times are
integers; ``NEVER`` (-1) marks an event that did not happen by ``T``.
An individual is infectious at ``t`` when ``infection <= t < removal``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from ._errors import InvalidTrajectoryError
from .population import Population
from .rng import NEVER, check_rng

__all__ = [
    "NEVER",
    "Scenario",
    "ParameterVector",
    "FixedRemoval",
    "GeometricRemoval",
    "CULLING_PMF",
    "Trajectory",
    "ObservedEpidemic",
    "ObservationBatch",
    "infection_prob",
    "removal_prob",
    "simulate_sir",
    "simulate_seir",
    "draw_seeds",
    "observe",
    "write_trajectory",
    "read_trajectory",
    "write_observed",
    "read_observed",
]

CULLING_PMF = (0.05, 0.15, 0.35, 0.45)


class Scenario(str, Enum):
    FULL = "full"
    STOCH = "stoch"
    PARTIAL = "partial"
    SEIR = "seir"

    @property
    def param_names(self) -> tuple:
        return _PARAM_NAMES[self]

    @property
    def dim(self) -> int:
        return len(_PARAM_NAMES[self])


_PARAM_NAMES = {
    Scenario.FULL: ("alpha", "beta"),
    Scenario.STOCH: ("alpha", "beta", "gamma"),
    Scenario.PARTIAL: ("alpha", "beta", "rho"),
    Scenario.SEIR: ("alpha", "beta", "epsilon", "gamma_E"),
}


@dataclass(frozen=True)
class ParameterVector:
    """Named parameter values for one scenario."""

    scenario: Scenario
    values: tuple

    def __post_init__(self):
        sc = Scenario(self.scenario)
        vals = tuple(float(v) for v in self.values)
        if len(vals) != sc.dim:
            raise ValueError(f"{sc.value} expects {sc.dim} parameters {sc.param_names}, got {len(vals)}")
        object.__setattr__(self, "scenario", sc)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_dict(cls, scenario, d: dict) -> "ParameterVector":
        sc = Scenario(scenario)
        return cls(sc, tuple(d[n] for n in sc.param_names))

    def __getitem__(self, name: str) -> float:
        return self.values[self.scenario.param_names.index(name)]

    def as_dict(self) -> dict:
        return dict(zip(self.scenario.param_names, self.values))

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    def is_valid(self) -> bool:
        d = self.as_dict()
        ok = d["alpha"] > 0 and d["beta"] > 0
        if "gamma" in d:
            ok = ok and d["gamma"] > 0
        if "rho" in d:
            ok = ok and 0 < d["rho"] < 1
        if "epsilon" in d:
            ok = ok and d["epsilon"] >= 0 and d["gamma_E"] > 0
        return bool(ok and all(np.isfinite(self.values)))


@dataclass(frozen=True)
class FixedRemoval:
    length: int = 3


@dataclass(frozen=True)
class GeometricRemoval:
    gamma: float


def infection_prob(pressure, alpha: float, epsilon: float = 0.0):
    """Per-step infection probability ``1 - exp(-alpha * pressure - epsilon)``."""
    pressure = np.asarray(pressure, dtype=np.float64)
    if np.any(pressure < 0) or alpha < 0 or epsilon < 0:
        raise ValueError("pressure, alpha and epsilon must be non-negative")
    out = -np.expm1(-(alpha * pressure + epsilon))
    return float(out) if out.ndim == 0 else out


def removal_prob(gamma: float) -> float:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return float(-np.expm1(-gamma))


def _as_int(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64)


def _finite_or(a: np.ndarray, big: int) -> np.ndarray:
    """Replace the NEVER sentinel by ``big`` for order comparisons."""
    return np.where(a == NEVER, big, a)


@dataclass(eq=False)
class Trajectory:
    """Complete event history of one simulated epidemic."""

    infection_time: np.ndarray
    removal_time: np.ndarray
    T: int
    seeds: np.ndarray
    exposure_time: np.ndarray | None = None

    def __post_init__(self):
        self.infection_time = _as_int(self.infection_time)
        self.removal_time = _as_int(self.removal_time)
        self.seeds = np.sort(_as_int(self.seeds))
        if self.exposure_time is not None:
            self.exposure_time = _as_int(self.exposure_time)

    @property
    def size(self) -> int:
        return self.infection_time.shape[0]

    @property
    def is_seir(self) -> bool:
        return self.exposure_time is not None

    def entry_time(self) -> np.ndarray:
        """Time each individual leaves S (exposure for SEIR, infection for SIR)."""
        return self.exposure_time if self.is_seir else self.infection_time

    def copy(self) -> "Trajectory":
        return Trajectory(
            self.infection_time.copy(), self.removal_time.copy(), self.T, self.seeds.copy(),
            None if self.exposure_time is None else self.exposure_time.copy(),
        )

    def infected(self) -> np.ndarray:
        return np.flatnonzero(self.infection_time != NEVER)

    def final_size(self) -> int:
        return int((self.entry_time() != NEVER).sum())

    def state_at(self, t: int) -> np.ndarray:
        """State codes at time ``t``: 0=S, 1=E, 2=I, 3=R."""
        big = self.T + 10
        entry = _finite_or(self.entry_time(), big)
        inf = _finite_or(self.infection_time, big)
        rem = _finite_or(self.removal_time, big)
        state = np.zeros(self.size, dtype=np.int8)
        state[entry <= t] = 1
        state[inf <= t] = 2
        state[rem <= t] = 3
        return state

    def infectious_matrix(self) -> np.ndarray:
        """Boolean (T, M) matrix; row ``t`` marks who is infectious at time ``t``."""
        big = self.T + 10
        t = np.arange(self.T)[:, None]
        inf = _finite_or(self.infection_time, big)[None, :]
        rem = _finite_or(self.removal_time, big)[None, :]
        return (inf <= t) & (t < rem)

    def validate(self) -> None:
        M, T = self.size, self.T
        for name in ("infection_time", "removal_time", "exposure_time"):
            a = getattr(self, name)
            if a is None:
                continue
            if a.shape != (M,):
                raise InvalidTrajectoryError(f"{name} has shape {a.shape}, expected ({M},)")
            bad = (a != NEVER) & ((a < 0) | (a > T))
            if bad.any():
                raise InvalidTrajectoryError(f"{name} outside [0, {T}] for individuals {np.flatnonzero(bad)[:5]}")
        inf, rem = self.infection_time, self.removal_time
        if np.any((inf == NEVER) & (rem != NEVER)):
            raise InvalidTrajectoryError("removal recorded for an individual never infected")
        both = (inf != NEVER) & (rem != NEVER)
        if np.any(rem[both] <= inf[both]):
            raise InvalidTrajectoryError("removal must come strictly after infection")
        if self.is_seir:
            exp = self.exposure_time
            if np.any((exp == NEVER) & (inf != NEVER)):
                raise InvalidTrajectoryError("infection without exposure")
            both = (inf != NEVER) & (exp != NEVER)
            if np.any(exp[both] > inf[both]):
                raise InvalidTrajectoryError("exposure after infection")
        entry = self.entry_time()
        if np.any(entry[self.seeds] != 0) or np.any(inf[self.seeds] != 0):
            raise InvalidTrajectoryError("seeds must be infectious at t=0")
        non_seed = np.setdiff1d(np.arange(M), self.seeds)
        if np.any(entry[non_seed] == 0):
            raise InvalidTrajectoryError("only seeds may leave S at t=0")
        if self.is_seir:
            ok = (inf[non_seed] == NEVER) | (inf[non_seed] > self.exposure_time[non_seed])
            if not np.all(ok):
                raise InvalidTrajectoryError("non-seed latent period must be at least one step")


def draw_seeds(pop: Population, seed_range, rng) -> np.ndarray:
    """Uniformly choose a seed count in ``seed_range`` (inclusive) and the seed locations."""
    rng = check_rng(rng)
    lo, hi = seed_range
    n = int(rng.integers(lo, hi + 1))
    return np.sort(rng.choice(pop.size, size=n, replace=False))


class _LazyKernel:
    """Columns of ``d^-beta`` computed on first use (only infectives need them)."""

    def __init__(self, pop: Population, beta: float):
        self.dist = pop.distances
        self.beta = beta
        self.cols = {}

    def column_sum(self, idx) -> np.ndarray:
        out = np.zeros(self.dist.shape[0])
        for j in idx:
            col = self.cols.get(j)
            if col is None:
                col = self.cols[j] = self.dist[:, j] ** (-self.beta)
            out += col
        return out


def simulate_sir(pop: Population, alpha: float, beta: float, seeds, T: int, rng=None,
                 removal=FixedRemoval(3), epsilon: float = 0.0) -> Trajectory:
    """Forward-simulate a spatial SIR epidemic.

    ``removal`` is either ``FixedRemoval(length)`` or ``GeometricRemoval(gamma)``.
    Each step consumes ``M`` uniforms for infection and, under geometric
    removal, ``M`` more for removal, so the stream position depends only on
    the step index.
    """
    rng = check_rng(rng)
    seeds = np.unique(_as_int(seeds))
    if seeds.size == 0:
        raise ValueError("seed set is empty")
    if not (alpha > 0 and beta > 0 and epsilon >= 0):
        raise ValueError("need alpha > 0, beta > 0, epsilon >= 0")
    M = pop.size
    geometric = isinstance(removal, GeometricRemoval)
    if geometric:
        p_remove = removal_prob(removal.gamma)
    elif not (isinstance(removal, FixedRemoval) and removal.length >= 1):
        raise ValueError(f"unsupported removal model {removal!r}")
    kern = _LazyKernel(pop, beta)

    inf = np.full(M, NEVER, dtype=np.int64)
    rem = np.full(M, NEVER, dtype=np.int64)
    inf[seeds] = 0
    susceptible = np.ones(M, dtype=bool)
    susceptible[seeds] = False
    infectious = ~susceptible
    if not geometric and removal.length <= T:
        rem[seeds] = removal.length
    pressure = kern.column_sum(seeds)

    for t in range(T):
        u = rng.random(M)
        p = -np.expm1(-(alpha * np.maximum(pressure, 0.0) + epsilon))
        new = susceptible & (u < p)
        if geometric:
            gone = infectious & (rng.random(M) < p_remove)
        else:
            gone = infectious & (rem == t + 1)
        new_idx = np.flatnonzero(new)
        gone_idx = np.flatnonzero(gone)
        inf[new_idx] = t + 1
        susceptible[new_idx] = False
        if geometric:
            rem[gone_idx] = t + 1
        elif t + 1 + removal.length <= T:
            rem[new_idx] = t + 1 + removal.length
        infectious[new_idx] = True
        infectious[gone_idx] = False
        if new_idx.size:
            pressure += kern.column_sum(new_idx)
        if gone_idx.size:
            pressure -= kern.column_sum(gone_idx)
        if not infectious.any():
            # nothing can happen any more (epsilon spark aside)
            if epsilon == 0:
                break
            pressure[:] = 0.0
    return Trajectory(inf, rem, T, seeds)


def _validate_pmf(pmf) -> np.ndarray:
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0 or np.any(pmf < 0) or not np.isclose(pmf.sum(), 1.0, atol=1e-9):
        raise ValueError(f"invalid probability mass function {pmf}")
    return pmf


def simulate_seir(pop: Population, alpha: float, beta: float, epsilon: float, gamma_E: float,
                  T: int, rng=None, seeds=None, culling_pmf=CULLING_PMF,
                  seed_range=(5, 10)) -> Trajectory:
    """Forward-simulate a spatial SEIR epidemic with a spark term.

    Exposed individuals become infectious with per-step probability
    ``1 - exp(-gamma_E)``; infectious periods are drawn from ``culling_pmf``
    over durations ``1..len(culling_pmf)``. When ``seeds`` is None the seed
    count is drawn uniformly from ``seed_range`` and the seeds uniformly
    from the population.
    """
    rng = check_rng(rng)
    pmf = _validate_pmf(culling_pmf)
    if not (alpha > 0 and beta > 0 and epsilon >= 0 and gamma_E > 0):
        raise ValueError("need alpha > 0, beta > 0, epsilon >= 0, gamma_E > 0")
    if seeds is None:
        seeds = draw_seeds(pop, seed_range, rng)
    seeds = np.unique(_as_int(seeds))
    if seeds.size == 0:
        raise ValueError("seed set is empty")
    M = pop.size
    durations = np.arange(1, pmf.size + 1)
    p_latent = -np.expm1(-gamma_E)
    kern = _LazyKernel(pop, beta)

    exp = np.full(M, NEVER, dtype=np.int64)
    inf = np.full(M, NEVER, dtype=np.int64)
    rem = np.full(M, NEVER, dtype=np.int64)
    exp[seeds] = 0
    inf[seeds] = 0
    r = rng.choice(durations, size=seeds.size, p=pmf)
    rem[seeds] = np.where(r <= T, r, NEVER)
    susceptible = np.ones(M, dtype=bool)
    susceptible[seeds] = False
    exposed = np.zeros(M, dtype=bool)
    infectious = ~susceptible
    pressure = kern.column_sum(seeds)

    for t in range(T):
        u_exp = rng.random(M)
        u_lat = rng.random(M)
        p = -np.expm1(-(alpha * np.maximum(pressure, 0.0) + epsilon))
        new_e = np.flatnonzero(susceptible & (u_exp < p))
        new_i = np.flatnonzero(exposed & (u_lat < p_latent))
        gone = np.flatnonzero(infectious & (rem == t + 1))
        exp[new_e] = t + 1
        susceptible[new_e] = False
        exposed[new_e] = True
        inf[new_i] = t + 1
        exposed[new_i] = False
        if new_i.size:
            d = rng.choice(durations, size=new_i.size, p=pmf)
            rr = t + 1 + d
            rem[new_i] = np.where(rr <= T, rr, NEVER)
            infectious[new_i] = True
            pressure += kern.column_sum(new_i)
        if gone.size:
            infectious[gone] = False
            pressure -= kern.column_sum(gone)
        if not infectious.any():
            pressure[:] = 0.0
    return Trajectory(inf, rem, T, seeds, exposure_time=exp)


@dataclass(eq=False)
class ObservedEpidemic:
    """What inference gets to see of one epidemic.

    ``node_obs_time[i]`` is the observed infection time of individual ``i``
    or ``NEVER``. The incidence curve has length ``T``; entry ``k`` counts
    observed infections at time ``k + 1`` (seeds, infected at ``t = 0``, are
    not part of the curve).
    """

    scenario: Scenario
    population: Population
    T: int
    node_obs_time: np.ndarray

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        self.node_obs_time = _as_int(self.node_obs_time)
        if self.node_obs_time.shape != (self.population.size,):
            raise ValueError("node_obs_time must have one entry per individual")

    @property
    def node_observed(self) -> np.ndarray:
        return self.node_obs_time != NEVER

    @property
    def seeds(self) -> np.ndarray:
        return np.flatnonzero(self.node_obs_time == 0)

    @property
    def incidence(self) -> np.ndarray:
        t = self.node_obs_time
        return np.bincount(t[t > 0] - 1, minlength=self.T)[: self.T].astype(np.int64)


def observe(traj: Trajectory, scenario, population: Population, rho: float | None = None,
            rng=None) -> ObservedEpidemic:
    """Apply the scenario's observation map to a complete trajectory.

    Infection times are reported for every infected individual, except
    under ``partial`` where each non-seed infection is kept independently
    with probability ``rho``. Removal and exposure times are never reported.
    """
    scenario = Scenario(scenario)
    times = traj.infection_time.copy()
    if scenario is Scenario.PARTIAL:
        if rho is None or not 0 < rho <= 1:
            raise ValueError(f"partial observation needs rho in (0, 1], got {rho}")
        rng = check_rng(rng)
        keep = rng.random(traj.size) < rho
        keep[traj.seeds] = True
        times[~keep] = NEVER
    elif rho is not None:
        raise ValueError(f"rho is only meaningful for the partial scenario, not {scenario.value}")
    return ObservedEpidemic(scenario, population, traj.T, times)


@dataclass(eq=False)
class ObservationBatch:
    """Stack of observations sharing one population and horizon."""

    scenario: Scenario
    population: Population
    T: int
    node_obs_time: np.ndarray  # (N, M)

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        self.node_obs_time = np.atleast_2d(_as_int(self.node_obs_time))
        if self.node_obs_time.shape[1] != self.population.size:
            raise ValueError("node_obs_time must have shape (N, M)")

    @classmethod
    def from_list(cls, observations) -> "ObservationBatch":
        observations = list(observations)
        if not observations:
            raise ValueError("empty observation list")
        first = observations[0]
        for o in observations[1:]:
            if o.population is not first.population and o.population.fingerprint() != first.population.fingerprint():
                raise ValueError("observations must share one population")
            if o.T != first.T or o.scenario != first.scenario:
                raise ValueError("observations must share scenario and horizon")
        return cls(first.scenario, first.population, first.T, np.stack([o.node_obs_time for o in observations]))

    def __len__(self) -> int:
        return self.node_obs_time.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return ObservedEpidemic(self.scenario, self.population, self.T, self.node_obs_time[idx])
        return ObservationBatch(self.scenario, self.population, self.T, self.node_obs_time[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def incidence(self) -> np.ndarray:
        t = self.node_obs_time
        out = np.zeros((t.shape[0], self.T), dtype=np.int64)
        n, i = np.nonzero(t > 0)
        np.add.at(out, (n, t[n, i] - 1), 1)
        return out


def as_batch(obs) -> ObservationBatch:
    if isinstance(obs, ObservationBatch):
        return obs
    if isinstance(obs, ObservedEpidemic):
        return ObservationBatch(obs.scenario, obs.population, obs.T, obs.node_obs_time[None, :])
    return ObservationBatch.from_list(obs)


# ---------------------------------------------------------------- file formats

def write_trajectory(traj: Trajectory, path, observed=None) -> None:
    """CSV ``id,exposure_time,infection_time,removal_time,observed`` (-1 = never)."""
    exp = traj.exposure_time if traj.is_seir else np.full(traj.size, NEVER)
    if observed is None:
        observed = traj.infection_time != NEVER
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "exposure_time", "infection_time", "removal_time", "observed"])
        for i in range(traj.size):
            w.writerow([i, exp[i], traj.infection_time[i], traj.removal_time[i], int(observed[i])])


def read_trajectory(path, T: int, seir: bool | None = None) -> tuple:
    """Return ``(trajectory, observed_mask)`` from a trajectory CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["id"]))
    exp = np.array([int(r["exposure_time"]) for r in rows])
    inf = np.array([int(r["infection_time"]) for r in rows])
    rem = np.array([int(r["removal_time"]) for r in rows])
    observed = np.array([bool(int(r["observed"])) for r in rows])
    if seir is None:
        seir = bool(np.any(exp != NEVER))
    seeds = np.flatnonzero(inf == 0)
    traj = Trajectory(inf, rem, T, seeds, exposure_time=exp if seir else None)
    traj.validate()
    return traj, observed


def write_observed(obs: ObservedEpidemic, directory, meta: dict | None = None) -> Path:
    """Write an observation bundle: ``meta.json``, ``incidence.csv``, ``nodes.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    info = {
        "scenario": obs.scenario.value,
        "T": obs.T,
        "M": obs.population.size,
        "region": list(obs.population.region),
        "population_fingerprint": obs.population.fingerprint(),
    }
    info.update(meta or {})
    (d / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    with open(d / "incidence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "count"])
        for k, c in enumerate(obs.incidence):
            w.writerow([k + 1, int(c)])
    with open(d / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "observed", "obs_time"])
        for i, (x, y) in enumerate(obs.population.coords):
            w.writerow([i, repr(float(x)), repr(float(y)), int(obs.node_obs_time[i] != NEVER), obs.node_obs_time[i]])
    return d


def read_observed(directory, population: Population | None = None) -> tuple:
    """Read a bundle; returns ``(observation, meta)``.

    The population is rebuilt from ``nodes.csv`` unless one is supplied
    (it must then have the recorded fingerprint).
    """
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    with open(d / "nodes.csv", newline="") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["id"]))
    times = np.array([int(r["obs_time"]) for r in rows])
    if population is None:
        coords = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        population = Population(coords, region=tuple(meta["region"]))
    if population.fingerprint() != meta["population_fingerprint"]:
        raise ValueError(f"{d}: population does not match the bundle's fingerprint")
    obs = ObservedEpidemic(Scenario(meta["scenario"]), population, int(meta["T"]), times)
    counts = np.loadtxt(d / "incidence.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)[:, 1]
    if not np.array_equal(counts, obs.incidence):
        raise ValueError(f"{d}: incidence.csv disagrees with nodes.csv")
    return obs, meta
