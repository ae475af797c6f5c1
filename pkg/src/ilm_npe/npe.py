"""Amortised neural posterior estimation.

``generate_training_set`` draws parameter/observation pairs from the prior
predictive distribution of a scenario. ``NeuralPosteriorEstimator`` trains
an embedding network jointly with a conditional spline flow by minimising
the mean negative log-density of the training parameters, and afterwards
samples the posterior of any new observation without retraining.

The flow works on transformed, standardised parameters: ``alpha``,
``beta``, ``gamma``, ``epsilon`` and ``gamma_E`` enter on the log scale
and ``rho`` on the logit scale, then each coordinate is shifted and scaled
by training-set statistics. Densities returned by ``log_prob`` are on the
original parameter scale (the transform's Jacobian is included).
"""
from __future__ import annotations

import copy
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._errors import NumericalError, OutOfDistributionWarning
from .autodiff import (
    load_checkpoint,
    load_state_arrays,
    make_adam,
    save_checkpoint,
    seed_torch,
    state_arrays,
)
from .embeddings import CnnEmbedding, GnnEmbedding, GraphBatch, incidence_features, node_features
from .epidemic import (
    GeometricRemoval,
    FixedRemoval,
    ObservationBatch,
    ObservedEpidemic,
    Scenario,
    as_batch,
    draw_seeds,
    observe,
    simulate_seir,
    simulate_sir,
)
from .flow import SplineFlow
from .population import Population, knn_graph, read_population, write_population
from .priors import PriorSpec, in_support_array, sample_prior
from .rng import check_rng, substream, torch_seed

__all__ = [
    "ParameterTransform",
    "simulate_observation",
    "fixed_seeds",
    "TrainingSet",
    "generate_training_set",
    "NeuralPosteriorEstimator",
]


# ---------------------------------------------------------------- parameter transform

class ParameterTransform:
    """Bijection from a scenario's parameter space to ``R^D``.

    Log for positive parameters, logit for ``rho``.
    """

    def __init__(self, scenario):
        self.scenario = Scenario(scenario)
        self.logit = np.array([n == "rho" for n in self.scenario.param_names])

    def forward(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.logit, np.log(theta) - np.log1p(-theta), np.log(theta))

    def inverse(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        with np.errstate(over="ignore"):
            return np.where(self.logit, 1.0 / (1.0 + np.exp(-u)), np.exp(u))

    def log_abs_det_forward(self, theta) -> np.ndarray:
        """``sum log|du/dtheta|`` per row."""
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(self.logit, -np.log(theta) - np.log1p(-theta), -np.log(theta))
        return terms.sum(axis=1)


# ---------------------------------------------------------------- prior predictive

def fixed_seeds(pop: Population, n_seeds: int, seed: int) -> np.ndarray:
    """The study-wide seed set used by the SIR scenarios."""
    rng = substream(seed, "seed-set")
    return np.sort(rng.choice(pop.size, size=n_seeds, replace=False))


def simulate_observation(scenario, theta, pop: Population, T: int, rng, seeds,
                         culling_pmf=None, removal_length: int = 3) -> ObservedEpidemic:
    """Simulate one epidemic at ``theta`` and apply the scenario's observation map."""
    scenario = Scenario(scenario)
    theta = np.asarray(theta, dtype=np.float64)
    rng = check_rng(rng)
    if scenario is Scenario.SEIR:
        kw = {} if culling_pmf is None else {"culling_pmf": culling_pmf}
        traj = simulate_seir(pop, theta[0], theta[1], theta[2], theta[3], T, rng, seeds=seeds, **kw)
        return observe(traj, scenario, pop)
    removal = GeometricRemoval(theta[2]) if scenario is Scenario.STOCH else FixedRemoval(removal_length)
    traj = simulate_sir(pop, theta[0], theta[1], seeds, T, rng, removal=removal)
    rho = theta[2] if scenario is Scenario.PARTIAL else None
    return observe(traj, scenario, pop, rho=rho, rng=rng)


def _prior_predictive(scenario, prior, pop, T, rng, seeds, seed_range, removal_length):
    if scenario is Scenario.SEIR:
        seeds = draw_seeds(pop, seed_range, rng)
    theta = sample_prior(prior, scenario, pop, seeds, rng).as_array()
    obs = simulate_observation(scenario, theta, pop, T, rng, seeds, prior.culling_pmf, removal_length)
    return theta, obs.node_obs_time


def _generate_chunk(args):
    scenario, prior, pop, T, seed, tag, idx, seeds, seed_range, removal_length = args
    thetas, times = [], []
    for n in idx:
        th, t = _prior_predictive(scenario, prior, pop, T, substream(seed, tag, int(n)), seeds,
                                  seed_range, removal_length)
        thetas.append(th)
        times.append(t)
    return np.array(thetas), np.array(times)


@dataclass(eq=False)
class TrainingSet:
    """Prior-predictive pairs for one scenario and population.

    ``observations.node_obs_time[n]`` is the observation generated from
    ``theta[n]``. ``seeds`` is the fixed seed set (SIR scenarios) or None
    when every epidemic draws its own seeds (SEIR).
    """

    scenario: Scenario
    theta: np.ndarray
    observations: ObservationBatch
    seed: int
    prior: PriorSpec
    seeds: np.ndarray | None = None
    tag: str = "train"

    @property
    def N(self) -> int:
        return self.theta.shape[0]

    @property
    def population(self) -> Population:
        return self.observations.population

    @property
    def T(self) -> int:
        return self.observations.T

    def standardisation(self) -> tuple:
        u = ParameterTransform(self.scenario).forward(self.theta)
        return u.mean(axis=0), u.std(axis=0)

    def save(self, directory) -> Path:
        """Write ``dataset.json``, ``population.csv``, ``params.csv`` and ``observations.npz``.

        The metadata file is not called ``manifest.json`` because the CLI
        writes its run manifest into the same directory.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_population(self.population, d / "population.csv")
        names = ",".join(self.scenario.param_names)
        np.savetxt(d / "params.csv", self.theta, delimiter=",", header=names, comments="", fmt="%.17g")
        np.savez(d / "observations.npz", node_obs_time=self.observations.node_obs_time)
        mean, sd = self.standardisation()
        manifest = {
            "scenario": self.scenario.value,
            "N": self.N,
            "T": self.T,
            "M": self.population.size,
            "region": list(self.population.region),
            "population_fingerprint": self.population.fingerprint(),
            "seed": self.seed,
            "tag": self.tag,
            "seeds": None if self.seeds is None else [int(s) for s in self.seeds],
            "prior": self.prior.to_dict(),
            "param_names": list(self.scenario.param_names),
            "standardisation": {"mean": mean.tolist(), "sd": sd.tolist()},
        }
        (d / "dataset.json").write_text(json.dumps(manifest, indent=2))
        return d

    @classmethod
    def load(cls, directory) -> "TrainingSet":
        d = Path(directory)
        man = json.loads((d / "dataset.json").read_text())
        pop = read_population(d / "population.csv", region=tuple(man["region"]))
        if pop.fingerprint() != man["population_fingerprint"]:
            raise ValueError(f"{d}: population does not match the dataset fingerprint")
        theta = np.loadtxt(d / "params.csv", delimiter=",", skiprows=1, ndmin=2)
        times = np.load(d / "observations.npz")["node_obs_time"]
        scenario = Scenario(man["scenario"])
        prior_d = dict(man["prior"])
        prior_d["culling_pmf"] = tuple(prior_d["culling_pmf"])
        batch = ObservationBatch(scenario, pop, man["T"], times)
        seeds = None if man["seeds"] is None else np.array(man["seeds"], dtype=np.int64)
        return cls(scenario, theta, batch, man["seed"], PriorSpec(**prior_d), seeds, man.get("tag", "train"))


def generate_training_set(scenario, prior: PriorSpec, pop: Population, N: int, T: int, seed: int,
                          seeds=None, n_seeds: int = 3, seed_range=(5, 10), removal_length: int = 3,
                          threads: int = 1, tag: str = "train") -> TrainingSet:
    """Draw ``N`` i.i.d. prior-predictive pairs.

    Pair ``n`` uses substream ``(seed, tag, n)``, so the result is
    independent of ``threads``. For SIR scenarios the seed set is ``seeds``
    or, if None, ``fixed_seeds(pop, n_seeds, seed)``; SEIR epidemics draw
    their own seed count uniformly from ``seed_range``.
    """
    scenario = Scenario(scenario)
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if scenario is Scenario.SEIR:
        seeds = None
    elif seeds is None:
        seeds = fixed_seeds(pop, n_seeds, seed)
    else:
        seeds = np.sort(np.asarray(seeds, dtype=np.int64))
    idx = np.arange(N)
    n_chunks = max(1, min(N, threads * 4)) if threads > 1 else 1
    chunks = [(scenario, prior, pop, T, seed, tag, c, seeds, seed_range, removal_length)
              for c in np.array_split(idx, n_chunks)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(_generate_chunk, chunks))
    else:
        parts = [_generate_chunk(c) for c in chunks]
    theta = np.concatenate([p[0] for p in parts])
    times = np.concatenate([p[1] for p in parts])
    batch = ObservationBatch(scenario, pop, T, times)
    return TrainingSet(scenario, theta, batch, seed, prior, seeds, tag)


# ---------------------------------------------------------------- estimator

class NeuralPosteriorEstimator(BaseEstimator):
    """Embedding network + conditional spline flow trained on simulated pairs.

    Parameters
    ----------
    embedding : {"cnn", "gnn"}
        Observation encoder.
    k_emb : int
        Length of the summary vector passed to the flow.
    knn_k : int
        Neighbours per node in the GNN graph.
    flow_layers, flow_bins, flow_tail_bound, flow_hidden :
        Spline flow architecture.
    batch_size, lr, weight_decay, max_epochs, patience, val_fraction :
        Optimisation settings; the checkpoint with the best validation loss
        is kept.
    max_oversample : int
        Sampling stops after ``max_oversample * n`` flow draws.
    random_state : int
        Seeds weight initialisation, the validation split and batch order.

    Attributes
    ----------
    scenario_ : Scenario
    history_ : dict
        Per-epoch ``train`` and ``val`` losses, per-batch ``batch`` losses,
        ``best_epoch`` and ``stopped_early``.
    """

    def __init__(self, embedding="cnn", k_emb=32, knn_k=8, cnn_channels=(32, 64, 64), cnn_kernel=5,
                 cnn_pooled=8, gnn_width=64, gnn_layers=3, flow_layers=5, flow_bins=8,
                 flow_tail_bound=5.0, flow_hidden=64, batch_size=128, lr=5e-4, weight_decay=0.0,
                 max_epochs=200, patience=10, val_fraction=0.1, max_oversample=20, random_state=0,
                 verbose=False):
        self.embedding = embedding
        self.k_emb = k_emb
        self.knn_k = knn_k
        self.cnn_channels = cnn_channels
        self.cnn_kernel = cnn_kernel
        self.cnn_pooled = cnn_pooled
        self.gnn_width = gnn_width
        self.gnn_layers = gnn_layers
        self.flow_layers = flow_layers
        self.flow_bins = flow_bins
        self.flow_tail_bound = flow_tail_bound
        self.flow_hidden = flow_hidden
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.max_oversample = max_oversample
        self.random_state = random_state
        self.verbose = verbose

    @classmethod
    def from_config(cls, cfg) -> "NeuralPosteriorEstimator":
        """Build from a ``RunConfig``."""
        e, f, t = cfg.embed, cfg.flow, cfg.train
        return cls(embedding=e.kind, k_emb=e.k_emb, knn_k=e.knn_k, cnn_channels=tuple(e.cnn_channels),
                   cnn_kernel=e.cnn_kernel, cnn_pooled=e.cnn_pooled, gnn_width=e.gnn_width,
                   gnn_layers=e.gnn_layers, flow_layers=f.layers, flow_bins=f.bins,
                   flow_tail_bound=f.tail_bound, flow_hidden=f.hidden, batch_size=t.batch_size, lr=t.lr,
                   weight_decay=t.weight_decay, max_epochs=t.max_epochs, patience=t.patience,
                   val_fraction=t.val_fraction, random_state=cfg.seed)

    # ---- network construction
    def _build(self, dim: int):
        if self.embedding == "cnn":
            net = CnnEmbedding(self.k_emb, tuple(self.cnn_channels), self.cnn_kernel, self.cnn_pooled)
        elif self.embedding == "gnn":
            net = GnnEmbedding(self.k_emb, self.gnn_width, self.gnn_layers)
        else:
            raise ValueError(f"embedding must be 'cnn' or 'gnn', got {self.embedding!r}")
        flow = SplineFlow(dim, self.k_emb, self.flow_layers, self.flow_bins, self.flow_tail_bound,
                          self.flow_hidden)
        return net, flow

    def _features(self, batch: ObservationBatch):
        """Precomputed network inputs for every observation in ``batch``."""
        if self.embedding == "cnn":
            return incidence_features(batch.incidence())
        return node_features(batch.node_obs_time, batch.population, batch.T)

    def _graph(self, population: Population):
        key = population.fingerprint()
        cache = self.__dict__.setdefault("_graph_cache", {})
        if key not in cache:
            if self.knn_k > population.size - 1:
                raise ValueError(f"knn_k={self.knn_k} too large for a population of {population.size}")
            cache.clear()
            cache[key] = knn_graph(population, self.knn_k)
        return cache[key]

    def _embed(self, feats, idx, population):
        if self.embedding == "cnn":
            return self.embed_net_(feats[idx])
        return self.embed_net_(GraphBatch(feats[idx], self._graph(population)))

    def _std(self, theta):
        u = self.transform_.forward(theta)
        return torch.from_numpy((u - self.param_mean_) / self.param_sd_)

    def loss(self, feats, theta_std, idx, population) -> torch.Tensor:
        """Mean negative log-density (standardised space) over rows ``idx``."""
        h = self._embed(feats, idx, population)
        return -self.flow_.log_prob(theta_std[idx], h).mean()

    # ---- training
    def fit(self, X, y):
        """Train on observations ``X`` (ObservationBatch) with parameters ``y`` of shape (N, D)."""
        X = as_batch(X)
        scenario = Scenario(X.scenario)
        y = check_array(y, dtype=np.float64, ensure_2d=True)
        if y.shape != (len(X), scenario.dim):
            raise ValueError(f"theta must have shape ({len(X)}, {scenario.dim}), got {y.shape}")
        if not in_support_array(y, scenario).all():
            raise ValueError("training parameters must lie in the prior support")
        self.scenario_ = scenario
        self.transform_ = ParameterTransform(scenario)
        u = self.transform_.forward(y)
        self.param_mean_ = u.mean(axis=0)
        self.param_sd_ = np.maximum(u.std(axis=0), 1e-12)
        self.T_ = X.T

        threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            self._train(X, y)
        finally:
            torch.set_num_threads(threads)
        return self

    def _train(self, X: ObservationBatch, y):
        seed_torch(int(self.random_state))
        rng = substream(int(self.random_state), "npe-train")
        self.embed_net_, self.flow_ = self._build(self.scenario_.dim)
        params = list(self.embed_net_.parameters()) + list(self.flow_.parameters())
        opt = make_adam(params, self.lr, self.weight_decay)
        feats = self._features(X)
        theta_std = self._std(y)
        N = len(X)
        perm = rng.permutation(N)
        n_val = max(1, int(round(self.val_fraction * N))) if N > 1 else 0
        val_idx, tr_idx = np.sort(perm[:n_val]), perm[n_val:]
        if tr_idx.size == 0:
            tr_idx, val_idx = perm, perm[:0]
        pop = X.population
        hist = {"train": [], "val": [], "batch": [], "best_epoch": 0, "stopped_early": False}
        best, best_state, bad = np.inf, None, 0
        t0 = time.perf_counter()
        for epoch in range(self.max_epochs):
            self.embed_net_.train()
            order = rng.permutation(tr_idx)
            total = 0.0
            for b, start in enumerate(range(0, order.size, self.batch_size)):
                idx = order[start:start + self.batch_size]
                loss = self.loss(feats, theta_std, idx, pop)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * idx.size
                hist["batch"].append(loss.item())
            hist["train"].append(total / order.size)
            if val_idx.size:
                with torch.no_grad():
                    chunks = [val_idx[s:s + 512] for s in range(0, val_idx.size, 512)]
                    v = sum(self.loss(feats, theta_std, c, pop).item() * c.size for c in chunks) / val_idx.size
            else:
                v = hist["train"][-1]
            hist["val"].append(v)
            if self.verbose:
                print(f"epoch {epoch}: train {hist['train'][-1]:.4f} val {v:.4f}")
            if v < best:
                best, bad, hist["best_epoch"] = v, 0, epoch
                best_state = (copy.deepcopy(self.embed_net_.state_dict()), copy.deepcopy(self.flow_.state_dict()))
            else:
                bad += 1
                if bad >= self.patience:
                    hist["stopped_early"] = True
                    break
        self.embed_net_.load_state_dict(best_state[0])
        self.flow_.load_state_dict(best_state[1])
        self.embed_net_.eval()
        hist["train_time"] = time.perf_counter() - t0
        self.history_ = hist

    # ---- inference
    def _check_obs(self, obs):
        check_is_fitted(self, "flow_")
        batch = as_batch(obs)
        if Scenario(batch.scenario) is not self.scenario_:
            raise ValueError(f"estimator was trained for {self.scenario_.value!r}, "
                             f"observation is {Scenario(batch.scenario).value!r}")
        return batch

    def transform(self, X) -> np.ndarray:
        """Embedding vectors, shape (N, k_emb)."""
        batch = self._check_obs(X)
        feats = self._features(batch)
        out = []
        with torch.no_grad():
            for s in range(0, len(batch), 256):
                idx = np.arange(s, min(s + 256, len(batch)))
                out.append(self._embed(feats, idx, batch.population).numpy())
        return np.concatenate(out)

    def sample(self, obs, n: int = 3000, random_state=None) -> np.ndarray:
        """``n`` posterior draws for a single observation, shape (n, D).

        Draws outside the prior support are discarded and replaced. If fewer
        than ``n`` valid draws appear within ``max_oversample * n`` flow
        samples, an ``OutOfDistributionWarning`` is issued and the valid
        draws found so far are returned.
        """
        batch = self._check_obs(obs)
        if len(batch) != 1:
            raise ValueError("sample() takes a single observation; use sample_many() for batches")
        h = torch.from_numpy(self.transform(batch)[0])
        return self._sample_context(h, n, random_state)

    def sample_many(self, X, n: int = 3000, random_state=None) -> list:
        batch = self._check_obs(X)
        H = torch.from_numpy(self.transform(batch))
        rng = check_rng(random_state if random_state is not None else substream(int(self.random_state), "npe-sample"))
        return [self._sample_context(H[i], n, rng) for i in range(len(batch))]

    def _sample_context(self, h, n, random_state):
        rng = check_rng(random_state if random_state is not None else substream(int(self.random_state), "npe-sample"))
        gen = torch.Generator().manual_seed(torch_seed(rng))
        kept, drawn = [], 0
        cap = self.max_oversample * n
        with torch.no_grad():
            while sum(k.shape[0] for k in kept) < n and drawn < cap:
                m = min(n, cap - drawn)
                x = self.flow_.sample(h, m, generator=gen).numpy()
                drawn += m
                theta = self.transform_.inverse(x * self.param_sd_ + self.param_mean_)
                kept.append(theta[in_support_array(theta, self.scenario_)])
        out = np.concatenate(kept)[:n]
        if out.shape[0] < n:
            warnings.warn(
                f"only {out.shape[0]} of {n} posterior draws fell inside the prior support after "
                f"{drawn} flow samples; the observation may be out of distribution",
                OutOfDistributionWarning, stacklevel=3)
        return out

    def log_prob(self, obs, theta) -> np.ndarray:
        """Posterior log-density of each row of ``theta`` given one observation."""
        batch = self._check_obs(obs)
        theta = check_array(theta, dtype=np.float64, ensure_2d=True)
        ok = in_support_array(theta, self.scenario_)
        out = np.full(theta.shape[0], -np.inf)
        if not ok.any():
            return out
        h = torch.from_numpy(self.transform(batch)[0])
        with torch.no_grad():
            lp = self.flow_.log_prob(self._std(theta[ok]), h).numpy()
        out[ok] = lp - np.log(self.param_sd_).sum() + self.transform_.log_abs_det_forward(theta[ok])
        return out

    def predict(self, X, n_samples: int = 1000, random_state=None) -> np.ndarray:
        """Posterior medians, shape (N, D)."""
        draws = self.sample_many(X, n_samples, random_state)
        return np.array([np.median(d, axis=0) for d in draws])

    # ---- persistence
    def save(self, path, meta: dict | None = None) -> None:
        check_is_fitted(self, "flow_")
        arrays = state_arrays(self.embed_net_, "embed.")
        arrays.update(state_arrays(self.flow_, "flow."))
        arrays["std.mean"] = self.param_mean_
        arrays["std.sd"] = self.param_sd_
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        info = {
            "params": params,
            "scenario": self.scenario_.value,
            "T": self.T_,
            # wall time stays out so that equal seeds give byte-identical files
            "history": {k: v for k, v in self.history_.items() if k not in ("batch", "train_time")},
        }
        info.update(meta or {})
        save_checkpoint(path, arrays, info)

    @classmethod
    def load(cls, path) -> "NeuralPosteriorEstimator":
        arrays, meta = load_checkpoint(path)
        params = dict(meta["params"])
        params["cnn_channels"] = tuple(params["cnn_channels"])
        est = cls(**params)
        est.scenario_ = Scenario(meta["scenario"])
        est.transform_ = ParameterTransform(est.scenario_)
        est.T_ = meta["T"]
        est.param_mean_ = arrays.pop("std.mean")
        est.param_sd_ = arrays.pop("std.sd")
        est.embed_net_, est.flow_ = est._build(est.scenario_.dim)
        load_state_arrays(est.embed_net_, arrays, "embed.")
        load_state_arrays(est.flow_, arrays, "flow.")
        est.embed_net_.eval()
        est.history_ = meta.get("history", {})
        est.meta_ = meta
        return est
