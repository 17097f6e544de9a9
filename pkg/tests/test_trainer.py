import math

import numpy as np
import pytest

from dvi_ibll.autodiff import grad
from dvi_ibll.conjugate import GaussianPrior, NoiseModel, log_evidence
from dvi_ibll.data import Dataset, make_synthetic, prepare_splits
from dvi_ibll.diffusion import DiffusionSchedule, NonFiniteElboError, draw_path_noise
from dvi_ibll.trainer import (
    FeatureNet,
    ModelBundle,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    freeze,
    freeze_features,
    train,
    train_map,
    write_epoch_log,
)

SMALL = dict(feature_dims=(8, 6), generator_hidden=(8,), score_hidden=(8,), schedule=DiffusionSchedule(n_steps=10))


def small_splits(seed=0, n=120):
    return prepare_splits(make_synthetic("linear", seed, n=n, n_features=3), seed)


def small_bundle(seed=0, **kw):
    return ModelBundle.build(3, seed=seed, **{**SMALL, **kw})


class TestBundle:
    def test_feature_net_shape(self):
        f = FeatureNet(4, (10, 7), np.random.default_rng(0))
        assert f(np.zeros((3, 4))).shape == (3, 7)
        assert f.n_features == 7

    def test_dimension_chain_checked(self):
        b = small_bundle()
        with pytest.raises(ValueError, match="features"):
            ModelBundle(FeatureNet(3, (5,)), b.generator, b.score, b.likelihood, b.schedule, b.aux_prior)

    def test_identity_generator_needs_matching_dims(self):
        with pytest.raises(ValueError, match="identity generator"):
            ModelBundle.build(3, feature_dims=(4,), aux_dim=3, generator_hidden=None)

    def test_save_load_round_trip(self, tmp_path):
        b = small_bundle(seed=3)
        path = tmp_path / "model.bin"
        b.save(path, {"note": 1})
        loaded, meta = ModelBundle.load(path)
        assert meta["note"] == 1
        x = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_array_equal(loaded.feature_matrix(x), b.feature_matrix(x))
        a = b.sample_weights(4, np.random.default_rng(1))
        c = loaded.sample_weights(4, np.random.default_rng(1))
        np.testing.assert_array_equal(a, c)

    def test_freeze_rejects_unknown_group(self):
        with pytest.raises(ValueError, match="unknown"):
            freeze(small_bundle(), "decoder")


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError, match="lr_overrides"):
            TrainConfig(lr_overrides={"bogus": 1.0})

    def test_group_lr(self):
        cfg = TrainConfig(lr=1e-3, lr_noise=1e-2, lr_overrides={"score": 5e-3})
        assert cfg.group_lr("features") == 1e-3
        assert cfg.group_lr("noise") == 1e-2
        assert cfg.group_lr("score") == 5e-3


class TestTrain:
    def test_deterministic(self, tmp_path):
        train_d, val_d, _ = small_splits()
        cfg = TrainConfig(epochs=3, seed=4, eval_paths=16)
        logs = []
        for _ in range(2):
            res = train(small_bundle(seed=1), train_d, val_d, cfg)
            logs.append([(r.epoch, r.train_elbo, r.val_nll, r.val_rmse) for r in res.log])
        assert logs[0] == logs[1]
        write_epoch_log(res.log, tmp_path / "log.csv")
        header = (tmp_path / "log.csv").read_text().splitlines()[0]
        assert header == "epoch,train_elbo,val_nll,val_rmse,wall_seconds"

    def test_elbo_rises_early(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, (200, 1))
        y = 2 * x[:, 0] + 0.3 * rng.standard_normal(200)
        data = Dataset(x, y - y.mean())
        bundle = ModelBundle.build(1, seed=0, **SMALL)
        cfg = TrainConfig(epochs=80, batch_size=32, seed=0)
        records = []
        res = train(bundle, data, None, cfg, callback=lambda step, est: records.append((est.value.item(), est.stderr)))
        values = np.array([v for v, _ in records[:500]])
        se = np.median([s for _, s in records[:500]]) / math.sqrt(50)
        smooth = np.convolve(values, np.ones(50) / 50, mode="valid")
        assert np.all(np.diff(smooth) > -3 * se)
        assert smooth[-1] > smooth[0]
        assert res.skipped_steps == 0

    def test_returns_best_snapshot(self):
        train_d, val_d, _ = small_splits(1)
        cfg = TrainConfig(epochs=6, seed=2, eval_paths=32)
        res = train(small_bundle(seed=2), train_d, val_d, cfg)
        val_nll, _ = evaluate(res.bundle, val_d, 32, np.random.default_rng([2, 1_000_003]))
        assert val_nll == res.best_val_nll
        assert res.log[res.best_epoch - 1].val_nll == res.best_val_nll

    def test_freeze_features(self):
        train_d, val_d, _ = small_splits(2)
        bundle = freeze_features(small_bundle(seed=5))
        before = bundle.state_dict()
        res = train(bundle, train_d, None, TrainConfig(epochs=26, batch_size=20, seed=0))
        after = res.bundle.state_dict()
        assert len(res.step_elbos) >= 100
        for k in before:
            if k.startswith("features/"):
                assert np.array_equal(before[k], after[k])
        assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("generator/"))
        assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("score/"))
        assert math.isfinite(evaluate(res.bundle, val_d, 16, np.random.default_rng(0))[0])

    def test_abort_after_repeated_failures(self, monkeypatch):
        train_d, _, _ = small_splits(3)
        bundle = small_bundle()

        def broken(*a, **k):
            raise NonFiniteElboError("log_lik")

        monkeypatch.setattr(bundle, "elbo", broken)
        with pytest.raises(TrainingDiverged, match="skipped"):
            train(bundle, train_d, None, TrainConfig(epochs=50, batch_size=8))

    def test_conjugate_reduction_gets_close(self):
        rng = np.random.default_rng(0)
        # small features keep the posterior wider than the per-step noise g^2 dt
        x = 0.2 * rng.standard_normal((100, 4))
        y = x @ np.array([2.5, -1.5, 1.0, 0.5]) + rng.standard_normal(100)
        bundle = ModelBundle.build(
            4, feature_dims=(), generator_hidden=None, score_hidden=(16,), schedule=DiffusionSchedule(n_steps=20), seed=0
        )
        bundle = freeze(bundle, "features", "generator", "noise")
        cfg = TrainConfig(epochs=300, batch_size=100, lr=3e-3, weight_decay=0.0, seed=0)
        res = train(bundle, Dataset(x, y), None, cfg)
        logev = log_evidence(x, y, GaussianPrior.isotropic(4), NoiseModel.from_var(1.0))
        est = res.bundle.elbo(x, y, 100, 512, np.random.default_rng(1), antithetic=True)
        assert float(est.value.data) <= logev + 3 * est.stderr
        assert abs(float(est.value.data) - logev) < 0.05 * abs(logev)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    bundle = ModelBundle.build(2, feature_dims=(5,), generator_hidden=(6,), score_hidden=(6,),
                               schedule=DiffusionSchedule(n_steps=5), seed=1)
    for p in bundle.score.params.values():
        p.data = 0.1 * rng.standard_normal(p.shape)
    x, y = rng.standard_normal((7, 2)), rng.standard_normal(7)
    init, noises = draw_path_noise(bundle.schedule, 3, bundle.aux_prior.dim, rng)

    def value():
        return float(bundle.elbo(x, y, 7, 3, initial=init, noises=noises).value.data)

    groups = bundle.param_groups()
    named = [(g, k, p) for g, ps in groups.items() for k, p in ps.items()]
    grads = grad(bundle.elbo(x, y, 7, 3, initial=init, noises=noises).value, [p for _, _, p in named])
    checked = set()
    h = 1e-6
    for (g, k, p), gv in zip(named, grads):
        flat, gflat = p.data.reshape(-1), gv.reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = value()
            flat[i] = old - h
            down = value()
            flat[i] = old
            num = (up - down) / (2 * h)
            assert abs(gflat[i] - num) <= 1e-3 * max(abs(num), 1e-3), (g, k, i)
        checked.add(g)
    assert checked == {"features", "generator", "score", "noise"}


def test_map_baseline_runs():
    train_d, val_d, test_d = small_splits(4)
    base = train_map(3, train_d, val_d, TrainConfig(epochs=5), feature_dims=(8, 6))
    assert math.isfinite(base.nll(test_d))
    assert base.rmse(test_d) >= 0
