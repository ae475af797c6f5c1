"""Command-line interface: ``ilm-npe <command> [options]``.

Every command writes only under its ``--out`` directory and leaves a
``manifest.json`` there recording the command line, config fingerprint,
master seed, library versions and wall time.

Exit codes: 0 success, 1 configuration error, 2 missing input,
3 numerical failure (details in ``<out>/error.json``).
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._errors import ConfigError, NumericalError
from .config import RunConfig, load_config
from .epidemic import (
    NEVER,
    FixedRemoval,
    GeometricRemoval,
    Scenario,
    draw_seeds,
    observe,
    read_observed,
    read_trajectory,
    simulate_seir,
    simulate_sir,
    write_observed,
    write_trajectory,
)
from .evaluate import (
    benchmark,
    evaluate_posteriors,
    ppc,
    sbc_chisquare,
    sbc_ranks,
    write_reports_csv,
)
from .likelihood import full_loglik_fixed, full_loglik_stochastic, log_posterior, obs_loglik, seir_loglik
from .mcmc import run_chains
from .npe import (
    NeuralPosteriorEstimator,
    TrainingSet,
    fixed_seeds,
    generate_training_set,
)
from .population import (
    Population,
    generate_clustered,
    generate_uniform,
    read_population,
    write_population,
)
from .priors import sample_prior
from .rng import substream

__all__ = ["main", "build_parser"]

CHECKPOINT_NAME = "estimator.ilmnpe"
EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 1, 2, 3


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------- helpers

def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("ILM_NPE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"ILM_NPE_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _config(args) -> RunConfig:
    cfg = load_config(_need(args.config)) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "scenario", None):
        cfg.scenario = Scenario(args.scenario)
    return cfg.validate()


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"input not found: {p}")
    return p


def _population(args, cfg: RunConfig) -> Population:
    if getattr(args, "population", None):
        return read_population(_need(args.population))
    pc = cfg.population
    if pc.kind == "file":
        return read_population(_need(pc.path))
    if pc.kind == "clustered":
        return generate_clustered(pc.M, pc.n_clusters, pc.spread, substream(cfg.seed, "population"), pc.side)
    return generate_uniform(pc.M, pc.side, substream(cfg.seed, "population"))


def _write_manifest(out: Path, args, cfg: RunConfig | None, t0: float, extra: dict | None = None) -> None:
    import scipy
    import sklearn
    import torch

    man = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_fingerprint": None if cfg is None else cfg.fingerprint(),
        "config": None if cfg is None else cfg.to_dict(),
        "seed": None if cfg is None else cfg.seed,
        "versions": {
            "ilm_npe": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__, "torch": torch.__version__,
        },
        "wall_time_s": time.perf_counter() - t0,
    }
    man.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))


def _write_draws(path: Path, names, draws) -> None:
    np.savetxt(path, draws, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


# ---------------------------------------------------------------- commands

def cmd_gen_pop(args, out):
    cfg = _config(args)
    if args.gen_uniform:
        M, side = args.gen_uniform.split(",")
        pop = generate_uniform(int(M), float(side), substream(cfg.seed, "population"))
    elif args.gen_clustered:
        M, k, spread = args.gen_clustered.split(",")
        pop = generate_clustered(int(M), int(k), float(spread), substream(cfg.seed, "population"),
                                 cfg.population.side)
    else:
        pop = _population(args, cfg)
    write_population(pop, out / "population.csv")
    return cfg, {"M": pop.size, "population_fingerprint": pop.fingerprint()}


def cmd_simulate(args, out):
    cfg = _config(args)
    pop = _population(args, cfg)
    write_population(pop, out / "population.csv")
    sc, sim = cfg.scenario, cfg.simulation
    sir_seeds = None if sc is Scenario.SEIR else fixed_seeds(pop, sim.n_seeds, cfg.seed)
    for n in range(args.n):
        rng = substream(cfg.seed, "simulate", n)
        seeds = draw_seeds(pop, sim.seed_range, rng) if sc is Scenario.SEIR else sir_seeds
        if args.theta:
            theta = np.array([float(v) for v in args.theta.split(",")])
            if theta.size != sc.dim:
                raise ConfigError(f"--theta needs {sc.dim} values for {sc.value}")
        else:
            theta = sample_prior(cfg.prior, sc, pop, seeds, rng).as_array()
        if sc is Scenario.SEIR:
            traj = simulate_seir(pop, *theta, sim.T, rng, seeds=seeds, culling_pmf=cfg.prior.culling_pmf)
            obs = observe(traj, sc, pop)
        else:
            removal = GeometricRemoval(theta[2]) if sc is Scenario.STOCH else FixedRemoval(sim.removal_length)
            traj = simulate_sir(pop, theta[0], theta[1], seeds, sim.T, rng, removal=removal)
            obs = observe(traj, sc, pop, rho=theta[2] if sc is Scenario.PARTIAL else None, rng=rng)
        d = write_observed(obs, out / f"e{n}", {"theta": dict(zip(sc.param_names, theta.tolist())),
                                                 "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed,
                                                 "index": n})
        write_trajectory(traj, d / "trajectory.csv", observed=obs.node_obs_time != NEVER)
    return cfg, {"n": args.n}


def cmd_make_train(args, out):
    cfg = _config(args)
    pop = _population(args, cfg)
    tag = "test" if args.test else "train"
    N = args.n if args.n is not None else (cfg.eval.n_test if args.test else cfg.train.n_train)
    sim = cfg.simulation
    t0 = time.perf_counter()
    ts = generate_training_set(cfg.scenario, cfg.prior, pop, N, sim.T, cfg.seed, n_seeds=sim.n_seeds,
                               seed_range=sim.seed_range, removal_length=sim.removal_length,
                               threads=_threads(args), tag=tag)
    gen_s = time.perf_counter() - t0
    ts.save(out)
    return cfg, {"N": N, "tag": tag, "generation_s": gen_s}


def cmd_train(args, out):
    cfg = _config(args)
    ts = TrainingSet.load(_need(args.data))
    if ts.scenario is not cfg.scenario:
        raise ConfigError(f"training data is for {ts.scenario.value!r}, config says {cfg.scenario.value!r}")
    est = NeuralPosteriorEstimator.from_config(cfg)
    est.fit(ts.observations, ts.theta)
    est.save(out / CHECKPOINT_NAME, meta={"config_fingerprint": cfg.fingerprint(), "seed": cfg.seed,
                                          "population_fingerprint": ts.population.fingerprint()})
    hist = est.history_
    (out / "history.json").write_text(json.dumps(hist, indent=2))
    return cfg, {"training_s": hist["train_time"], "best_epoch": hist["best_epoch"], "N": ts.N}


def _load_estimator(path) -> NeuralPosteriorEstimator:
    p = _need(path)
    if p.is_dir():
        p = _need(p / CHECKPOINT_NAME)
    return NeuralPosteriorEstimator.load(p)


def cmd_infer(args, out):
    cfg = _config(args)
    est = _load_estimator(args.checkpoint)
    obs, meta = read_observed(_need(args.epidemic))
    S = args.n_samples or cfg.eval.n_samples
    t0 = time.perf_counter()
    draws = est.sample(obs, S, random_state=substream(cfg.seed, "infer"))
    infer_s = time.perf_counter() - t0
    _write_draws(out / "posterior.csv", obs.scenario.param_names, draws)
    return cfg, {"n_samples": int(draws.shape[0]), "inference_s": infer_s,
                 "checkpoint_fingerprint": est.meta_.get("config_fingerprint")}


def cmd_mcmc(args, out):
    cfg = _config(args)
    obs, meta = read_observed(_need(args.epidemic))
    if obs.scenario is not cfg.scenario:
        raise ConfigError(f"epidemic is {obs.scenario.value!r}, requested {cfg.scenario.value!r}")
    res = run_chains(obs, cfg.prior, cfg.mcmc, seed=cfg.seed, threads=_threads(args))
    for c in range(res.draws.shape[0]):
        _write_draws(out / f"chain_{c}.csv", res.param_names, res.draws[c])
    diag = res.diagnostics()
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2))
    return cfg, {"converged": diag["converged"]}


def _test_set(args) -> TrainingSet:
    return TrainingSet.load(_need(args.data))


def cmd_evaluate(args, out):
    cfg = _config(args)
    est = _load_estimator(args.checkpoint)
    ts = _test_set(args)
    S = args.n_samples or cfg.eval.n_samples
    t0 = time.perf_counter()
    draws = est.sample_many(ts.observations, S, random_state=substream(cfg.seed, "evaluate"))
    per = (time.perf_counter() - t0) / ts.N
    method = f"{est.embedding.upper()}-NPE"
    report = evaluate_posteriors(draws, ts.theta, ts.scenario, method, cfg.eval.level,
                                 {"npe_per_epidemic_s": per})
    report.to_json(out / "report.json")
    write_reports_csv([report], out / "table.csv")
    extra = {"n_epidemics": ts.N}
    if ts.N >= 20 and min(d.shape[0] for d in draws) == S:
        p = sbc_chisquare(sbc_ranks(draws, ts.theta), S)
        (out / "sbc.json").write_text(json.dumps(dict(zip(ts.scenario.param_names, p.tolist())), indent=2))
    return cfg, extra


def cmd_ppc(args, out):
    cfg = _config(args)
    obs, meta = read_observed(_need(args.epidemic))
    if args.checkpoint:
        source = _load_estimator(args.checkpoint)
    elif args.draws:
        source = np.loadtxt(_need(args.draws), delimiter=",", skiprows=1, ndmin=2)
    else:
        raise ConfigError("ppc needs --checkpoint or --draws")
    res = ppc(source, obs, args.n_draws or cfg.eval.ppc_draws, substream(cfg.seed, "ppc"),
              cfg.prior.culling_pmf, cfg.simulation.removal_length, cfg.eval.level)
    res.to_csv(out / "ppc.csv")
    return cfg, {"band_coverage": res.coverage()}


def cmd_bench(args, out):
    cfg = _config(args)
    est = _load_estimator(args.checkpoint)
    ts = _test_set(args)
    obs = list(ts.observations)[: args.n_epidemics]

    def run_mcmc(o):
        return run_chains(o, cfg.prior, cfg.mcmc, seed=cfg.seed, threads=1)

    runner = run_mcmc if args.mcmc else None
    # the checkpoint omits wall times; `train` leaves them in history.json beside it
    ck = Path(args.checkpoint)
    hist_path = (ck if ck.is_dir() else ck.parent) / "history.json"
    training_s = json.loads(hist_path.read_text()).get("train_time") if hist_path.exists() else None
    rep = benchmark(est, obs, args.n_samples or cfg.eval.n_samples, runner,
                    training_s=training_s, rng=substream(cfg.seed, "bench"))
    (out / "timings.json").write_text(json.dumps(rep.to_dict(), indent=2))
    return cfg, rep.to_dict()


def cmd_loglik(args, out):
    """Complete-data log-likelihood and log-posterior of a simulated bundle (debugging aid)."""
    cfg = _config(args)
    d = _need(args.epidemic)
    obs, meta = read_observed(d)
    traj, _ = read_trajectory(_need(d / "trajectory.csv"), obs.T, seir=obs.scenario is Scenario.SEIR)
    sc = obs.scenario
    theta = np.array([float(v) for v in args.theta.split(",")])
    if theta.size != sc.dim:
        raise ConfigError(f"--theta needs {sc.dim} values for {sc.value}")
    pop, L = obs.population, cfg.simulation.removal_length
    if sc is Scenario.FULL:
        ll = full_loglik_fixed(traj, pop, theta, L)
    elif sc is Scenario.STOCH:
        ll = full_loglik_stochastic(traj, pop, theta)
    elif sc is Scenario.PARTIAL:
        ll = obs_loglik(traj.infection_time, obs.node_obs_time, theta[2], traj.seeds)
        ll += full_loglik_fixed(traj, pop, theta, L)
    else:
        ll = seir_loglik(traj, pop, theta, cfg.prior.culling_pmf)
    lp = log_posterior(theta, traj, sc, cfg.prior, pop, traj.seeds, observed_times=obs.node_obs_time,
                       removal_length=L)
    result = {"scenario": sc.value, "theta": dict(zip(sc.param_names, theta.tolist())),
              "loglik": float(ll), "log_posterior": float(lp)}
    print(json.dumps(result))
    (out / "loglik.json").write_text(json.dumps(result, indent=2))
    return cfg, {"loglik": float(ll)}


COMMANDS = {
    "gen-pop": cmd_gen_pop,
    "simulate": cmd_simulate,
    "make-train": cmd_make_train,
    "train": cmd_train,
    "infer": cmd_infer,
    "mcmc": cmd_mcmc,
    "evaluate": cmd_evaluate,
    "ppc": cmd_ppc,
    "bench": cmd_bench,
    "loglik": cmd_loglik,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ilm-npe", description="Neural posterior estimation and "
                                "data-augmented MCMC for spatial individual-level epidemic models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="JSON run configuration (defaults used when omitted)")
        sp.add_argument("--out", required=True, help="output directory (created if needed)")
        sp.add_argument("--seed", type=int, help="master seed; overrides the config value")
        sp.add_argument("--threads", type=int, help="worker processes (fallback: $ILM_NPE_THREADS, then all cores)")
        return sp

    sp = add("gen-pop", "Generate or copy a population file.")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--gen-uniform", metavar="M,SIDE", help="M uniform points in [0, SIDE]^2")
    g.add_argument("--gen-clustered", metavar="M,K,SPREAD", help="M points in K Gaussian clusters")
    g.add_argument("--population", help="existing population CSV (id,x,y)")

    sp = add("simulate", "Simulate epidemics and write observation bundles.")
    sp.add_argument("--population", help="population CSV (id,x,y); default from config")
    sp.add_argument("--scenario", choices=[s.value for s in Scenario])
    sp.add_argument("--n", type=int, default=1, help="number of epidemics")
    sp.add_argument("--theta", help="comma-separated parameter values (default: draw from the prior)")

    sp = add("make-train", "Generate a training (or test) set of prior-predictive pairs.")
    sp.add_argument("--population", help="population CSV (id,x,y); default from config")
    sp.add_argument("--scenario", choices=[s.value for s in Scenario])
    sp.add_argument("--n", type=int, help="number of pairs (default train.n_train or eval.n_test)")
    sp.add_argument("--test", action="store_true", help="write a test set (independent substreams)")

    sp = add("train", "Train an NPE estimator on a training set.")
    sp.add_argument("--data", required=True, help="training-set directory from make-train")

    sp = add("infer", "Sample the posterior of one observed epidemic.")
    sp.add_argument("--checkpoint", required=True, help="checkpoint file or train output directory")
    sp.add_argument("--epidemic", required=True, help="observation bundle directory")
    sp.add_argument("--n-samples", type=int, help="posterior draws (default eval.n_samples)")

    sp = add("mcmc", "Run data-augmented MCMC on one observed epidemic.")
    sp.add_argument("--scenario", choices=[s.value for s in Scenario])
    sp.add_argument("--epidemic", required=True, help="observation bundle directory")

    sp = add("evaluate", "Score an estimator on a test set (MAE, interval width, coverage, SBC).")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="test-set directory from make-train --test")
    sp.add_argument("--n-samples", type=int)

    sp = add("ppc", "Posterior predictive incidence bands for one epidemic.")
    sp.add_argument("--epidemic", required=True)
    sp.add_argument("--checkpoint", help="estimator to draw parameters from")
    sp.add_argument("--draws", help="CSV of posterior draws (e.g. an MCMC chain)")
    sp.add_argument("--n-draws", type=int)

    sp = add("bench", "Time per-epidemic inference (and optionally one MCMC run).")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="test-set directory")
    sp.add_argument("--n-epidemics", type=int, default=10)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--mcmc", action="store_true", help="also time one MCMC run with the config's settings")

    sp = add("loglik", "Print the complete-data log-likelihood of a simulated epidemic at given parameters.")
    sp.add_argument("--epidemic", required=True, help="bundle written by simulate (needs trajectory.csv)")
    sp.add_argument("--theta", required=True, help="comma-separated parameter values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg, extra = COMMANDS[args.command](args, out)
        _write_manifest(out, args, cfg, t0, extra)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        (out / "error.json").write_text(json.dumps({"command": args.command, "error": str(exc),
                                                    "type": type(exc).__name__}, indent=2))
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
