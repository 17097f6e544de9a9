"""End-to-end acceptance criteria. Each test prints one PASS/FAIL line.

Slow (roughly an hour on one core). Skip with ``-m "not acceptance"``.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from dvi_ibll import oracles
from dvi_ibll.autodiff import grad
from dvi_ibll.cli import OracleSpec, RunConfig, run_seed
from dvi_ibll.data import Dataset, load_boston, make_ood_cluster, make_synthetic, normalize, prepare_splits
from dvi_ibll.diffusion import DiffusionSchedule, draw_path_noise
from dvi_ibll.metrics import ece, nll, predict, roc_auc
from dvi_ibll.trainer import ModelBundle, TrainConfig, freeze_features, train, train_map

pytestmark = pytest.mark.acceptance

TESTS = Path(__file__).parent


def report(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


@pytest.fixture(scope="module")
def conjugate_run():
    return oracles.train_conjugate(OracleSpec())


def test_criterion_1_posterior_recovery(conjugate_run):
    r = oracles.check_conjugate_moments(conjugate_run)
    report(1, r.passed, r.detail)


def test_criterion_2_elbo_bound(conjugate_run):
    r = oracles.check_elbo_bound(conjugate_run)
    report(2, r.passed, r.detail)


def test_criterion_3_kappa():
    r = oracles.check_kappa()
    report(3, r.passed, r.detail)


def test_criterion_4_exact_score():
    r = oracles.check_exact_score()
    report(4, r.passed, r.detail)


def test_criterion_5_gradients():
    worst, checked = 0.0, set()
    for seed in range(3):
        rng = np.random.default_rng(seed)
        bundle = ModelBundle.build(3, feature_dims=(6, 5), generator_hidden=(7,), score_hidden=(8,),
                                   schedule=DiffusionSchedule(n_steps=8), seed=seed)
        for p in bundle.score.params.values():
            p.data = 0.1 * rng.standard_normal(p.shape)
        x, y = rng.standard_normal((9, 3)), rng.standard_normal(9)
        init, noises = draw_path_noise(bundle.schedule, 4, bundle.aux_prior.dim, rng)
        value = lambda: float(bundle.elbo(x, y, 9, 4, initial=init, noises=noises).value.data)
        named = [(g, p) for g, ps in bundle.param_groups().items() for p in ps.values()]
        grads = grad(bundle.elbo(x, y, 9, 4, initial=init, noises=noises).value, [p for _, p in named])
        for (g, p), gv in zip(named, grads):
            flat, gflat = p.data.reshape(-1), gv.reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + 1e-6
                up = value()
                flat[i] = old - 1e-6
                down = value()
                flat[i] = old
                num = (up - down) / 2e-6
                worst = max(worst, abs(gflat[i] - num) / max(abs(num), 1e-3))
            checked.add(g)
    ok = worst < 1e-3 and checked == {"features", "generator", "score", "noise"}
    report(5, ok, f"max rel err {worst:.1e} (< 1e-3) over groups {sorted(checked)}")


def test_criterion_6_boston(tmp_path):
    cfg = RunConfig()
    data = load_boston()
    runs = [run_seed(cfg, data, seed, tmp_path / f"seed_{seed}") for seed in range(20)]
    dvi_nll = np.array([r["nll"] for r in runs])
    dvi_rmse = np.array([r["rmse"] for r in runs])
    map_nll = np.array([r["baseline_nll"] for r in runs])
    se = lambda v: v.std(ddof=1) / np.sqrt(len(v))
    in_band = dvi_nll.mean() <= 2.45 and dvi_rmse.mean() <= 2.85
    beats_map = dvi_nll.mean() < map_nll.mean()
    how = "within band" if in_band else ("band missed, beats MAP baseline" if beats_map else "band missed, MAP baseline not beaten")
    report(
        6,
        in_band or beats_map,
        f"20 seeds NLL {dvi_nll.mean():.3f} ± {se(dvi_nll):.3f} (<= 2.45), RMSE {dvi_rmse.mean():.3f} ± {se(dvi_rmse):.3f} "
        f"(<= 2.85), MAP baseline NLL {map_nll.mean():.3f} ± {se(map_nll):.3f}; {how}",
    )


def test_criterion_7_heavy_tail():
    gains = []
    for seed in range(10):
        data = make_synthetic("heavy_tail", seed)
        train_d, val_d, test_d = prepare_splits(data, seed)
        cfg = TrainConfig(seed=seed, epochs=100, eval_paths=128)
        base = train_map(data.n_features, train_d, val_d, cfg)
        bundle = ModelBundle.build(data.n_features, generator_hidden=(64,), seed=seed,
                                   log_noise_var=float(np.log(np.var(train_d.y))))
        for k, p in bundle.features.params.items():
            p.data = base.features.params[k].data.copy()
        res = train(freeze_features(bundle), train_d, val_d, cfg)
        mix = predict(res.bundle, test_d.X, 512, np.random.default_rng([seed, 7]))
        gains.append(base.nll(test_d) - nll(mix, test_d.y))
    gains = np.array(gains)
    report(
        7,
        gains.mean() >= 0.05,
        f"conjugate NLL minus DVI NLL {gains.mean():.3f} ± {gains.std(ddof=1) / np.sqrt(10):.3f} over 10 seeds (>= 0.05)",
    )


def test_criterion_8_ood():
    aucs, eces = [], []
    for seed in range(5):
        data = make_synthetic("two_moons", seed)
        train_d, val_d, test_d = prepare_splits(data, seed)
        raw = make_ood_cluster(len(test_d), seed)
        ood = normalize(Dataset(raw, np.zeros(len(raw), dtype=int), task="classification"), train_d.stats).X
        bundle = ModelBundle.build(2, n_outputs=2, task="classification", seed=seed)
        res = train(bundle, train_d, val_d, TrainConfig(seed=seed, eval_paths=128))
        rng = np.random.default_rng([seed, 7])
        inside, outside = predict(res.bundle, test_d.X, 512, rng), predict(res.bundle, ood, 512, rng)
        scores = np.r_[inside.entropy(), outside.entropy()]
        aucs.append(roc_auc(scores, np.r_[np.zeros(len(test_d)), np.ones(len(ood))]))
        eces.append(ece(inside.mean(), test_d.y))
    auc, err = float(np.mean(aucs)), float(np.mean(eces))
    report(8, auc > 0.95 and err < 0.10, f"entropy AUC {auc:.3f} (> 0.95), in-distribution ECE {err:.3f} (< 0.10) over 5 seeds")


def test_criterion_9_unit_suite():
    files = [str(TESTS / f) for f in ("test_metrics.py", "test_conjugate.py", "test_diffusion.py")]
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *files], capture_output=True, text=True)
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr.strip()[-200:]
    report(9, res.returncode == 0, f"metric, conjugate and diffusion examples: {tail}")
