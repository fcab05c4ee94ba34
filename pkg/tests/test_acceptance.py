"""One test per acceptance criterion; each records a PASS/FAIL line that is
printed in the terminal summary.

Criteria 6-8 read the desk experiment (scripts/desk_experiment.py).  Its runs
are cached by config hash under runs/desk, so the first invocation trains
(about three and a half hours on one CPU core) and later ones only evaluate.
Set ITERGAN_DESK_DIR to point somewhere else.
"""
import importlib.util
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from itergan import datahub, evalsuite as ev, nets, trainloop
from itergan.checkpoint import load_checkpoint, save_checkpoint
from itergan.losses import masked_l1
from itergan.nets import IterGAN

from conftest import TINY
from oracles import (friedman_permutation_p, friedman_rank_formula, kl_loop, l1_loop, masked_l1_loop,
                     ssim_direct, vifp_direct)
from test_losses import VARIANTS, _grad_check, _rel_err

ROOT = Path(__file__).resolve().parents[1]
DESK_DIR = Path(os.environ.get("ITERGAN_DESK_DIR", ROOT / "runs" / "desk"))

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


# ----------------------------------------------------------------------------
# 1. oracle equivalence


def test_c01_loss_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    lm = ev.RandomProjectionLabelModel()
    worst = {"masked_l1": 0.0, "metric_l1": 0.0, "kl_label": 0.0, "ssim": 0.0, "vifp": 0.0}
    for _ in range(100):
        h, w = rng.integers(8, 33, size=2)
        B, T = rng.random((h, w, 3)), rng.random((h, w, 3))
        M = rng.random((h, w)) < rng.random()
        got = float(masked_l1(torch.from_numpy(B).permute(2, 0, 1)[None],
                              torch.from_numpy(T).permute(2, 0, 1)[None], torch.from_numpy(M)[None]))
        worst["masked_l1"] = max(worst["masked_l1"], abs(got - masked_l1_loop(B, T, M)))
        worst["metric_l1"] = max(worst["metric_l1"], abs(ev.metric_l1(B, T) - l1_loop(B, T)))
        worst["kl_label"] = max(worst["kl_label"],
                                abs(ev.kl_label_divergence(lm, B, T) - kl_loop(lm(B), lm(T))))
        # SSIM needs at least one full 11x11 window
        hs, ws = max(h, 11), max(w, 11)
        Bs, Ts = rng.random((hs, ws, 3)), rng.random((hs, ws, 3))
        worst["ssim"] = max(worst["ssim"], abs(ev.ssim(Bs, Ts) - ssim_direct(Bs, Ts)))
        Bv = np.clip(T + rng.normal(0, 0.1, T.shape), 0, 1)
        worst["vifp"] = max(worst["vifp"], abs(ev.vifp(Bv, T) - vifp_direct(Bv, T)))
    secs = time.time() - t0
    ok = max(worst.values()) <= 1e-6 and secs < 60
    record(1, ok, "max |delta| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {secs:.0f} s")
    assert ok


# ----------------------------------------------------------------------------
# 2. gradient checks


def test_c02_gradient_checks():
    t0 = time.time()
    errs = {}
    for name, weights in VARIANTS.items():
        for which in ("g", "d"):
            a, n = _grad_check(weights, which)
            errs[f"{which}/{name}"] = _rel_err(a, n)
    secs = time.time() - t0
    ok = max(errs.values()) <= 1e-3 and secs < 300
    record(2, ok, f"max relative error {max(errs.values()):.1e} over {len(errs)} objectives; {secs:.0f} s")
    assert ok


# ----------------------------------------------------------------------------
# 3. composition and parameter invariants


def test_c03_composition_and_params():
    gen = nets.UnetGenerator(TINY)
    nets.init_weights(gen, 0)
    gen.eval()
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    exact = True
    with torch.no_grad():
        for k in (1, 2, 6, 36):
            final, _ = nets.iterate_generator(gen, x, k)
            y = x
            for _ in range(k):
                y = gen(y)
            exact &= torch.equal(final, y)
    counts = set()
    for variant in ("ig6", "ig6-m", "ig6-mu", "ig6-ms", "ig6-mus", "iga", "igk-mu", "p2p-30", "p2p-65"):
        v = trainloop.parse_variant(variant)
        counts.add(nets.count_params(IterGAN(TINY, v.unsup_idl, v.sup_idl).gen))
    ok = exact and len(counts) == 1
    record(3, ok, f"bit-exact nesting {exact}; generator sizes across variants {sorted(counts)}")
    assert ok


# ----------------------------------------------------------------------------
# 4. sampling and curriculum


def test_c04_sampling_and_curriculum():
    angles_ok = all(datahub.view_angle(b, k) == (b + 5 * k) % 360
                    for b in range(0, 360, 5) for k in range(1, 37))
    phases = trainloop.curriculum_schedule(20)
    seq = [trainloop.curriculum_state(phases, e).k_max for e in range(20)]
    sched_ok = seq == [1] * 5 + [6] * 5 + [18] * 5 + [36] * 5
    rng = np.random.default_rng(11)
    draws = [trainloop.sample_k(trainloop.KPolicy("sampled"), rng) for _ in range(100_000)]
    p = stats.chisquare(np.bincount(draws, minlength=37)[1:]).pvalue
    ok = angles_ok and sched_ok and p > 0.001
    record(4, ok, f"72x36 angles exact {angles_ok}; boundaries {phases}; uniformity chi2 p={p:.3f}")
    assert ok


# ----------------------------------------------------------------------------
# 5. Friedman


def test_c05_friedman():
    table = np.array([[1, 2, 3]] * 5 + [[2, 3, 1]], dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = ev.friedman_test(table)
        mono = ev.friedman_test(np.exp(3 * table))
    stat_diff = abs(res.statistic - friedman_rank_formula(table))
    stat_exact = stat_diff <= 1e-12  # equal up to float rounding
    exact_p = friedman_permutation_p(table)
    invariant = mono.statistic == res.statistic and mono.pvalue == res.pvalue
    ok = stat_exact and abs(res.pvalue - exact_p) <= 0.01 and invariant
    record(5, ok, f"statistic {res.statistic:.4f} (|delta| vs rank formula {stat_diff:.1e}); p {res.pvalue:.4f} "
                  f"vs permutation {exact_p:.4f}; monotone invariance {invariant}")
    assert ok


# ----------------------------------------------------------------------------
# 6-8. desk-scale experiment


def _load_experiment():
    spec = importlib.util.spec_from_file_location("desk_experiment", ROOT / "scripts" / "desk_experiment.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="module")
def desk():
    return _load_experiment().run_experiment(DESK_DIR)


def test_c06_desk_learning(desk):
    ident = desk["identity"]["l1"]
    per_seed = {s: v["l1"] for s, v in desk["ig6"]["per_seed"].items()}
    med = desk["ig6"]["median_l1"]
    ok = med <= 0.7 * ident
    cells = ", ".join(f"seed {s} {v:.4f}" for s, v in per_seed.items())
    record(6, ok, f"IG6 seen-test L1 median {med:.4f} vs 0.7 x identity {0.7 * ident:.4f} "
                  f"(ratio {med / ident:.3f}; {cells})")
    assert ok


def test_c07_mask_loss_trend(desk):
    a, b = desk["ig6-m"]["median_l1m"], desk["ig6"]["median_l1m"]
    ok = a <= b
    table = "; ".join(f"seed {s}: IG6-M {desk['ig6-m']['per_seed'][s]['l1m']:.4f} "
                      f"IG6 {desk['ig6']['per_seed'][s]['l1m']:.4f}" for s in desk["ig6"]["per_seed"])
    record(7, ok, f"median L1M IG6-M {a:.4f} vs IG6 {b:.4f} ({table})")
    assert ok


def test_c08_control_sweep(desk):
    sweep = desk["igk-m"]["sweep_l1m"]
    rho = desk["igk-m"]["spearman"]
    ok = rho >= 0.5
    record(8, ok, f"Spearman rho(k, mean L1M) = {rho:.3f} over k=1..12; "
                  f"L1M {sweep[0][1]:.3f} at k=1 -> {sweep[-1][1]:.3f} at k=12")
    assert ok


# ----------------------------------------------------------------------------
# 9. reproducibility


def test_c09_reproducibility(tiny_dataset, tmp_path):
    cfg = trainloop.TrainConfig(variant="ig6-mu", epochs=2, batch_size=4, net=TINY, checkpoint_every=0,
                                max_batches_per_epoch=3)
    runs = [trainloop.fit(cfg, seed=5, out_dir=tmp_path / str(i), manifest=tiny_dataset) for i in range(2)]
    worst = 0.0
    for ra, rb in zip(runs[0].history, runs[1].history):
        for key in trainloop.LOG_COLUMNS:
            if ra.get(key) not in (None, ""):
                x, y = float(ra[key]), float(rb[key])
                worst = max(worst, abs(x - y) / max(abs(x), 1e-12))
    model = runs[0].trainer.model.eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, iteration_count_trained=6, epoch=2, seed=5)
    loaded, _ = load_checkpoint(path)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        bit_exact = torch.equal(nets.iterate_generator(model.gen, x, 6)[0],
                                nets.iterate_generator(loaded.gen, x, 6)[0])
    ok = worst <= 1e-5 and bit_exact
    record(9, ok, f"max relative per-step loss difference {worst:.1e}; checkpoint round trip bit-exact {bit_exact}")
    assert ok


# ----------------------------------------------------------------------------
# 10. full-scale preset


def test_c10_paper_preset(tmp_path):
    cfg = trainloop.paper_preset(variant="ig6-mus")
    complete = (cfg.epochs == 20 and cfg.lambda_l1 == 100 and cfg.weights.lambda_u == 0.1
                and cfg.weights.lambda_s == 0.1 and cfg.net.image_size == 256 and cfg.restarts == 3
                and cfg.lr == 2e-4 and tuple(cfg.betas) == (0.5, 0.999))
    man = datahub.build_synth_dataset(3, 256, 0, tmp_path / "data")
    dry = trainloop.paper_preset(variant="ig6-mus", epochs=1, max_batches_per_epoch=1,
                                 data_root=str(man.root), checkpoint_every=0)
    res = trainloop.fit(dry, seed=0, out_dir=tmp_path / "run", manifest=man)
    finite = len(res.history) == 1 and all(math.isfinite(float(v)) for k, v in res.history[0].items()
                                           if k.startswith(("g_", "d_")) and v != "")
    ok = complete and finite and res.checkpoint.exists()
    record(10, ok, f"preset complete {complete}; 1-batch dry run at 256x256 finite {finite}")
    assert ok
