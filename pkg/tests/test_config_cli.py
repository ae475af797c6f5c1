import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ilm_npe._errors import ConfigError
from ilm_npe.cli import main
from ilm_npe.config import RunConfig, load_config
from ilm_npe.epidemic import read_observed, read_trajectory
from ilm_npe.likelihood import full_loglik_fixed

TINY = {
    "scenario": "full",
    "seed": 7,
    "population": {"M": 30, "side": 20.0},
    "simulation": {"T": 10},
    "embed": {"k_emb": 8, "cnn_channels": [8, 8], "gnn_width": 16, "gnn_layers": 2, "knn_k": 4},
    "flow": {"layers": 2, "hidden": 16},
    "train": {"n_train": 40, "max_epochs": 2, "batch_size": 16},
    "eval": {"n_test": 20, "n_samples": 30, "ppc_draws": 5},
    "mcmc": {"n_chains": 2, "iters": 60, "burn_in": 20, "thin": 2},
}


def write_cfg(path, **over):
    data = json.loads(json.dumps(TINY))
    data.update(over)
    path.write_text(json.dumps(data))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


class TestConfig:
    def test_defaults_valid(self):
        cfg = RunConfig().validate()
        assert cfg.train.batch_size == 128 and cfg.train.lr == 5e-4 and cfg.train.patience == 10
        assert cfg.mcmc.n_keep == 1000 and cfg.eval.n_samples == 3000

    def test_round_trip(self, tmp_path):
        cfg = RunConfig.from_dict(TINY)
        cfg.save(tmp_path / "c.json")
        back = load_config(tmp_path / "c.json")
        assert back.to_dict() == cfg.to_dict() and back.fingerprint() == cfg.fingerprint()

    def test_fingerprint_ignores_out_dir(self):
        a = RunConfig.from_dict(dict(TINY, out_dir="x"))
        b = RunConfig.from_dict(dict(TINY, out_dir="y"))
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != RunConfig.from_dict(dict(TINY, seed=8)).fingerprint()

    @pytest.mark.parametrize("bad", [
        {"bogus": 1},
        {"train": {"lr": 1e-3, "momentum": 0.9}},
        {"scenario": "sir"},
        {"seed": -1},
        {"train": {"batch_size": 12.5}},
        {"mcmc": {"burn_in": 10, "iters": 5}},
        {"prior": {"culling_pmf": [0.5, 0.6]}},
        {"embed": {"kind": "rnn"}},
        {"mcmc": {"debug": "yes"}},
    ])
    def test_strict(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(dict(TINY, **bad))

    def test_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(tmp_path / "c.json")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """make-train, train, simulate once and reuse the outputs."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "cfg.json")
    assert run("make-train", "--config", cfg, "--out", root / "train", "--threads", 1) == 0
    assert run("make-train", "--config", cfg, "--out", root / "test", "--test", "--threads", 1) == 0
    assert run("train", "--config", cfg, "--data", root / "train", "--out", root / "model") == 0
    assert run("simulate", "--config", cfg, "--out", root / "sim", "--n", 2) == 0
    return root, cfg


class TestCommands:
    def test_gen_pop(self, tmp_path):
        assert run("gen-pop", "--gen-uniform", "25,10", "--out", tmp_path, "--seed", 3) == 0
        rows = list(csv.reader(open(tmp_path / "population.csv")))
        assert rows[0] == ["id", "x", "y"] and len(rows) == 26
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["command"] == "gen-pop" and man["seed"] == 3 and "numpy" in man["versions"]

    def test_infer_writes_posterior(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("infer", "--config", cfg, "--checkpoint", root / "model", "--epidemic", root / "sim" / "e0",
                   "--out", tmp_path, "--n-samples", 40) == 0
        draws = np.loadtxt(tmp_path / "posterior.csv", delimiter=",", skiprows=1)
        assert draws.shape == (40, 2) and np.all(draws > 0)
        assert open(tmp_path / "posterior.csv").readline().strip() == "alpha,beta"
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["config_fingerprint"] == RunConfig.from_dict(TINY).fingerprint()
        assert man["checkpoint_fingerprint"] == man["config_fingerprint"]

    def test_infer_is_reproducible(self, pipeline, tmp_path):
        root, cfg = pipeline
        for name in ("a", "b"):
            run("infer", "--config", cfg, "--checkpoint", root / "model", "--epidemic", root / "sim" / "e1",
                "--out", tmp_path / name)
        assert (tmp_path / "a" / "posterior.csv").read_bytes() == (tmp_path / "b" / "posterior.csv").read_bytes()

    def test_training_reproducible(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("train", "--config", cfg, "--data", root / "train", "--out", tmp_path) == 0
        assert (tmp_path / "estimator.ilmnpe").read_bytes() == (root / "model" / "estimator.ilmnpe").read_bytes()

    def test_make_train_reproducible(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("make-train", "--config", cfg, "--out", tmp_path, "--threads", 2) == 0
        for name in ("params.csv", "observations.npz", "population.csv"):
            assert (tmp_path / name).read_bytes() == (root / "train" / name).read_bytes()

    def test_mcmc(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("mcmc", "--config", cfg, "--epidemic", root / "sim" / "e0", "--out", tmp_path,
                   "--threads", 1) == 0
        chain = np.loadtxt(tmp_path / "chain_0.csv", delimiter=",", skiprows=1)
        assert chain.shape == (20, 2)
        diag = json.loads((tmp_path / "diagnostics.json").read_text())
        assert set(diag["rhat"]) == {"alpha", "beta"} and len(diag["acceptance"]) == 2

    def test_evaluate(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("evaluate", "--config", cfg, "--checkpoint", root / "model", "--data", root / "test",
                   "--out", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "table.csv")))
        assert [r["parameter"] for r in rows] == ["alpha", "beta"] and rows[0]["method"] == "CNN-NPE"
        assert set(json.loads((tmp_path / "sbc.json").read_text())) == {"alpha", "beta"}

    def test_ppc_from_checkpoint_and_draws(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("ppc", "--config", cfg, "--epidemic", root / "sim" / "e0", "--checkpoint", root / "model",
                   "--out", tmp_path / "a") == 0
        draws = tmp_path / "d.csv"
        draws.write_text("alpha,beta\n1.0,1.5\n0.8,1.2\n")
        assert run("ppc", "--config", cfg, "--epidemic", root / "sim" / "e0", "--draws", draws,
                   "--out", tmp_path / "b") == 0
        rows = list(csv.reader(open(tmp_path / "b" / "ppc.csv")))
        assert rows[0] == ["t", "obs", "lo", "med", "hi"] and len(rows) == 11

    def test_bench(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert run("bench", "--config", cfg, "--checkpoint", root / "model", "--data", root / "test",
                   "--out", tmp_path, "--n-epidemics", 3, "--n-samples", 20, "--mcmc") == 0
        t = json.loads((tmp_path / "timings.json").read_text())
        assert t["n_epidemics"] == 3 and t["mcmc_per_epidemic_s"] > 0 and t["training_s"] > 0

    def test_loglik(self, pipeline, tmp_path, capsys):
        root, cfg = pipeline
        assert run("loglik", "--config", cfg, "--epidemic", root / "sim" / "e0", "--theta", "1.1,1.6",
                   "--out", tmp_path) == 0
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        obs, _ = read_observed(root / "sim" / "e0")
        traj, _ = read_trajectory(root / "sim" / "e0" / "trajectory.csv", obs.T)
        assert printed["loglik"] == full_loglik_fixed(traj, obs.population, (1.1, 1.6))

    def test_simulate_bundle(self, pipeline):
        root, _ = pipeline
        obs, meta = read_observed(root / "sim" / "e1")
        traj, observed = read_trajectory(root / "sim" / "e1" / "trajectory.csv", obs.T)
        assert np.array_equal(traj.infection_time, obs.node_obs_time)
        assert set(meta["theta"]) == {"alpha", "beta"} and meta["index"] == 1


class TestExitCodes:
    def test_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", bogus=True)
        assert run("gen-pop", "--config", cfg, "--out", tmp_path / "o") == 1

    def test_bad_theta_is_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json")
        assert run("simulate", "--config", cfg, "--out", tmp_path / "o", "--theta", "1.0") == 1

    def test_missing_input(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 2
        assert run("gen-pop", "--config", tmp_path / "none.json", "--out", tmp_path / "o") == 2

    def test_numerical_failure(self, pipeline, tmp_path, monkeypatch):
        from ilm_npe import npe

        root, cfg = pipeline

        def boom(self, X, y):
            raise npe.NumericalError("non-finite training loss at epoch 0, batch 3")

        monkeypatch.setattr(npe.NeuralPosteriorEstimator, "_train", boom)
        assert run("train", "--config", cfg, "--data", root / "train", "--out", tmp_path) == 3
        err = json.loads((tmp_path / "error.json").read_text())
        assert "batch 3" in err["error"] and err["command"] == "train"

    def test_console_script_help(self):
        res = subprocess.run([sys.executable, "-m", "ilm_npe.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for cmd in ("gen-pop", "simulate", "make-train", "train", "infer", "mcmc", "evaluate", "ppc", "bench",
                    "loglik"):
            assert cmd in res.stdout
