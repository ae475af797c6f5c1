import math

import numpy as np
import pytest
import torch

from ilm_npe._errors import OutOfDistributionWarning
from ilm_npe.autodiff import finite_difference_check
from ilm_npe.epidemic import ObservationBatch, simulate_sir
from ilm_npe.npe import (
    NeuralPosteriorEstimator,
    ParameterTransform,
    TrainingSet,
    fixed_seeds,
    generate_training_set,
    simulate_observation,
)
from ilm_npe.population import generate_uniform
from ilm_npe.priors import PriorSpec, in_support_array
from ilm_npe.rng import substream

PRIOR = PriorSpec()
POP = generate_uniform(40, 40, seed=21)


def small_set(scenario="full", N=64, seed=3, T=15, tag="train"):
    return generate_training_set(scenario, PRIOR, POP, N, T, seed=seed, tag=tag)


def quick(embedding="cnn", **kw):
    base = dict(k_emb=8, cnn_channels=(8, 8), gnn_width=16, gnn_layers=2, knn_k=4, flow_layers=2,
                flow_hidden=16, max_epochs=3, batch_size=16, random_state=0)
    base.update(kw)
    return NeuralPosteriorEstimator(embedding=embedding, **base)


@pytest.fixture(scope="module")
def fitted():
    ts = small_set()
    return ts, quick().fit(ts.observations, ts.theta)


class TestTransform:
    @pytest.mark.parametrize("scenario", ["full", "stoch", "partial", "seir"])
    def test_round_trip(self, scenario):
        ts = small_set(scenario, N=20)
        tr = ParameterTransform(scenario)
        np.testing.assert_allclose(tr.inverse(tr.forward(ts.theta)), ts.theta, rtol=1e-12)

    def test_logit_for_rho(self):
        u = ParameterTransform("partial").forward([[1.0, 2.0, 0.75]])
        np.testing.assert_allclose(u, [[0.0, math.log(2.0), math.log(3.0)]], atol=1e-15)

    def test_log_det_matches_numeric(self):
        tr = ParameterTransform("partial")
        theta = np.array([[0.3, 1.7, 0.2]])
        h = 1e-6
        diag = [(tr.forward(theta + h * e)[0, j] - tr.forward(theta - h * e)[0, j]) / (2 * h)
                for j, e in enumerate(np.eye(3))]
        assert tr.log_abs_det_forward(theta)[0] == pytest.approx(np.log(np.abs(diag)).sum(), rel=1e-7)


class TestGeneration:
    def test_deterministic(self):
        a, b = small_set(N=16), small_set(N=16)
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.observations.node_obs_time, b.observations.node_obs_time)
        assert not np.array_equal(a.theta, small_set(N=16, seed=4).theta)

    def test_threads_do_not_change_pairs(self):
        a = small_set(N=12)
        b = generate_training_set("full", PRIOR, POP, 12, 15, seed=3, threads=2)
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.observations.node_obs_time, b.observations.node_obs_time)

    def test_full_observation_is_identity(self):
        seeds = fixed_seeds(POP, 3, 0)
        obs = simulate_observation("full", (1.0, 1.5), POP, 15, substream(5), seeds)
        traj = simulate_sir(POP, 1.0, 1.5, seeds, 15, substream(5))
        assert np.array_equal(obs.node_obs_time, traj.infection_time)

    @pytest.mark.parametrize("scenario", ["full", "stoch", "partial", "seir"])
    def test_pairs_in_support(self, scenario):
        ts = small_set(scenario, N=20)
        assert ts.theta.shape == (20, ts.scenario.dim)
        assert in_support_array(ts.theta, scenario).all()
        assert ts.observations.node_obs_time.shape == (20, POP.size)

    def test_seir_draws_own_seeds(self):
        ts = small_set("seir", N=20)
        assert ts.seeds is None
        counts = (ts.observations.node_obs_time == 0).sum(1)
        assert counts.min() >= 5 and counts.max() <= 10

    def test_save_load(self, tmp_path):
        ts = small_set("partial", N=10)
        back = TrainingSet.load(ts.save(tmp_path / "ts"))
        assert np.array_equal(back.theta, ts.theta)
        assert np.array_equal(back.observations.node_obs_time, ts.observations.node_obs_time)
        assert back.scenario is ts.scenario and list(back.seeds) == list(ts.seeds)
        assert back.prior == ts.prior

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            small_set(N=0)


class TestTraining:
    def test_loss_drops_by_a_nat(self, desk_full):
        """Smoothed over ten batches, the final training loss is at least one nat below the first."""
        for est in (desk_full["cnn"], desk_full["gnn"]):
            batch = np.array(est.history_["batch"])
            assert batch[:10].mean() - batch[-10:].mean() >= 1.0

    def test_small_data_stops_early(self):
        ts = small_set(N=32, seed=8)
        est = NeuralPosteriorEstimator(random_state=1, max_epochs=400).fit(ts.observations, ts.theta)
        h = est.history_
        assert h["stopped_early"]
        assert h["train"][-1] < h["train"][0] - 1.0
        # past the best epoch training keeps improving while validation does not
        assert h["train"][-1] < h["train"][h["best_epoch"]]
        assert min(h["val"][h["best_epoch"] + 1:]) >= h["val"][h["best_epoch"]]

    def test_same_seed_same_checkpoint(self, tmp_path, fitted):
        ts, est = fitted
        again = quick().fit(ts.observations, ts.theta)
        est.save(tmp_path / "a.ckpt")
        again.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_rejects_out_of_support_parameters(self):
        ts = small_set(N=8)
        bad = ts.theta.copy()
        bad[0, 1] = -1.0
        with pytest.raises(ValueError, match="support"):
            quick().fit(ts.observations, bad)

    def test_unknown_embedding(self):
        ts = small_set(N=8)
        with pytest.raises(ValueError, match="embedding"):
            quick("mlp").fit(ts.observations, ts.theta)

    @pytest.mark.parametrize("embedding", ["cnn", "gnn"])
    def test_composed_gradient(self, embedding):
        ts = small_set(N=10)
        est = quick(embedding, max_epochs=1).fit(ts.observations, ts.theta)
        feats = est._features(ts.observations)
        theta = est._std(ts.theta)
        idx = np.arange(10)
        params = list(est.embed_net_.parameters()) + list(est.flow_.parameters())
        loss = lambda: est.loss(feats, theta, idx, ts.population)  # noqa: E731
        assert finite_difference_check(loss, params, h=1e-4, n_probe=30) < 1e-3


class TestSampling:
    def test_samples_in_support(self, fitted):
        ts, est = fitted
        draws = est.sample(ts.observations[0], 500, random_state=substream(1))
        assert draws.shape == (500, 2)
        assert in_support_array(draws, "full").all()

    def test_sampling_is_repeatable(self, fitted):
        ts, est = fitted
        a = est.sample(ts.observations[1], 50, random_state=substream(2))
        b = est.sample(ts.observations[1], 50, random_state=substream(2))
        assert np.array_equal(a, b)

    def test_amortised_queries(self, fitted):
        ts, est = fitted
        draws = est.sample_many(ts.observations[:3], 20)
        assert len(draws) == 3 and all(d.shape == (20, 2) for d in draws)
        assert est.predict(ts.observations[:3], 20).shape == (3, 2)

    def test_out_of_distribution_warning(self, fitted):
        ts, est = fitted
        saved = est.param_sd_.copy()
        est.param_sd_ = np.full_like(saved, 1e6)   # almost every draw overflows the support
        try:
            with pytest.warns(OutOfDistributionWarning):
                draws = est.sample(ts.observations[0], 100, random_state=substream(3))
        finally:
            est.param_sd_ = saved
        assert draws.shape[0] < 100 and in_support_array(draws, "full").all()

    def test_log_prob_density_on_original_scale(self, fitted):
        """Draws' empirical mass in a box matches the integral of ``exp(log_prob)`` over it."""
        ts, est = fitted
        obs = ts.observations[4]
        draws = est.sample(obs, 40_000, random_state=substream(4))
        lo, hi = np.quantile(draws, [0.3, 0.7], axis=0)
        inside = np.all((draws > lo) & (draws < hi), axis=1).mean()
        ga = np.linspace(lo[0], hi[0], 121)
        gb = np.linspace(lo[1], hi[1], 121)
        A, B = np.meshgrid(ga, gb, indexing="ij")
        dens = np.exp(est.log_prob(obs, np.column_stack([A.ravel(), B.ravel()]))).reshape(A.shape)
        integral = np.trapezoid(np.trapezoid(dens, gb, axis=1), ga)
        assert integral == pytest.approx(inside, abs=0.01)

    def test_log_prob_outside_support(self, fitted):
        ts, est = fitted
        assert est.log_prob(ts.observations[0], [[-1.0, 1.0]])[0] == -np.inf

    def test_scenario_mismatch(self, fitted):
        ts, est = fitted
        other = small_set("partial", N=2)
        with pytest.raises(ValueError, match="trained for"):
            est.sample(other.observations[0], 10)

    def test_single_observation_only(self, fitted):
        ts, est = fitted
        with pytest.raises(ValueError):
            est.sample(ts.observations[:2], 10)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            quick().sample(small_set(N=2).observations[0], 10)


class TestPersistence:
    @pytest.mark.parametrize("embedding", ["cnn", "gnn"])
    def test_round_trip(self, tmp_path, embedding):
        ts = small_set(N=20)
        est = quick(embedding, max_epochs=1).fit(ts.observations, ts.theta)
        est.save(tmp_path / "m.ckpt", meta={"fingerprint": "abc"})
        back = NeuralPosteriorEstimator.load(tmp_path / "m.ckpt")
        assert back.meta_["fingerprint"] == "abc"
        assert back.get_params() == est.get_params()
        obs = ts.observations[:4]
        np.testing.assert_array_equal(back.transform(obs), est.transform(obs))
        np.testing.assert_array_equal(back.sample(obs[0], 30, substream(1)), est.sample(obs[0], 30, substream(1)))
        back.save(tmp_path / "again.ckpt", meta={"fingerprint": "abc"})
        assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()

    def test_sklearn_clone(self, fitted):
        from sklearn.base import clone
        _, est = fitted
        c = clone(est)
        assert c.get_params() == est.get_params() and not hasattr(c, "flow_")


def test_batch_population_mismatch():
    with pytest.raises(ValueError):
        ObservationBatch("full", POP, 15, np.zeros((2, POP.size + 1), dtype=np.int64))


def test_training_restores_thread_count(fitted):
    before = torch.get_num_threads()
    ts, _ = fitted
    quick(max_epochs=1).fit(ts.observations[:8], ts.theta[:8])
    assert torch.get_num_threads() == before
