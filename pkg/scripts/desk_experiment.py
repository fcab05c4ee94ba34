"""Desk-scale synthetic turntable experiment.

Trains IG6 and IG6-M (three seeds each) and one IGK-M model on an 18-object
synthetic turntable (16 training objects, 2 of them also used for seen-test
pairs, plus 2 unseen objects), then scores them against the identity baseline.

Every run directory is keyed by the config hash and seed, so re-running only
trains what is missing.  Results land in <out>/results.json.

    python scripts/desk_experiment.py --out runs/desk
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
from scipy import stats

from itergan import datahub, evalsuite, trainloop
from itergan.checkpoint import read_header
from itergan.nets import DESK, NetConfig

log = logging.getLogger("desk")

DATA_SEED = 7
N_OBJECTS, N_UNSEEN, N_SEEN = 18, 2, 2
RESOLUTION = 64
SEEDS = (0, 1, 2)
SWEEP_KS = tuple(range(1, 13))

# Toy-scale training settings; see the README for why they differ from the
# full-scale preset.
DESK_TRAIN = dict(epochs=30, batch_size=8, lr=2e-3, lr_decay_epochs=15, net=DESK)


def dataset(out):
    root = Path(out) / "data"
    if (root / "manifest.json").exists():
        return datahub.load_manifest(root)
    log.info("rendering %d objects into %s", N_OBJECTS, root)
    return datahub.build_synth_dataset(N_OBJECTS, RESOLUTION, DATA_SEED, root,
                                       n_unseen=N_UNSEEN, n_seen=N_SEEN)


def make_config(variant, root, **overrides):
    kw = {**DESK_TRAIN, **overrides}
    return trainloop.TrainConfig(variant=variant, data_root=str(root), checkpoint_every=0, **kw)


def train_cached(cfg, seed, out, man):
    run = Path(out) / "runs" / f"{cfg.variant}_{cfg.hash()}_s{seed}"
    ckpt = run / "final.ckpt"
    if ckpt.exists() and read_header(ckpt).get("config_hash") == cfg.hash():
        return ckpt, None
    t0 = time.time()
    trainloop.fit(cfg, seed=seed, out_dir=run, manifest=man)
    (run / "config.json").write_text(json.dumps(cfg.to_json(), indent=1) + "\n")
    elapsed = time.time() - t0
    log.info("%s seed %d trained in %.0f s", cfg.variant, seed, elapsed)
    return ckpt, elapsed


def _mean(rep, metric):
    return rep.aggregates[rep.models[0]][metric]["mean"]


def run_experiment(out="runs/desk", seeds=SEEDS, **overrides):
    out = Path(out)
    man = dataset(out)
    root = man.root
    results = {"settings": {k: (v.to_dict() if isinstance(v, NetConfig) else v)
                            for k, v in {**DESK_TRAIN, **overrides}.items()},
               "seeds": list(seeds), "train_seconds": {}}

    ident = evalsuite.evaluate_model("identity", man, "seen_test", ["l1", "l1m"])
    results["identity"] = {"l1": _mean(ident, "l1"), "l1m": _mean(ident, "l1m")}

    for variant in ("ig6", "ig6-m"):
        cfg = make_config(variant, root, **overrides)
        per_seed = {}
        for seed in seeds:
            ckpt, secs = train_cached(cfg, seed, out, man)
            if secs is not None:
                results["train_seconds"][f"{variant}/{seed}"] = secs
            rep = evalsuite.evaluate_model(ckpt, man, "seen_test", ["l1", "l1m"])
            per_seed[str(seed)] = {"l1": _mean(rep, "l1"), "l1m": _mean(rep, "l1m"),
                                   "checkpoint": str(ckpt)}
        results[variant] = {"config_hash": cfg.hash(), "per_seed": per_seed,
                            "median_l1": float(np.median([v["l1"] for v in per_seed.values()])),
                            "median_l1m": float(np.median([v["l1m"] for v in per_seed.values()]))}

    cfg = make_config("igk-m", root, **overrides)
    ckpt, secs = train_cached(cfg, seeds[0], out, man)
    if secs is not None:
        results["train_seconds"][f"igk-m/{seeds[0]}"] = secs
    reps = [evalsuite.evaluate_model(ckpt, man, split, ["l1m"], ks=SWEEP_KS, name="igk-m")
            for split in ("seen_test", "unseen_test")]
    rows = reps[0].rows + reps[1].rows
    sweep = [[k, float(np.mean([r["l1m"] for r in rows if r["k"] == k]))] for k in SWEEP_KS]
    rho = stats.spearmanr([k for k, _ in sweep], [v for _, v in sweep]).statistic
    results["igk-m"] = {"config_hash": cfg.hash(), "checkpoint": str(ckpt), "sweep_l1m": sweep,
                        "spearman": float(rho)}

    ratio = results["ig6"]["median_l1"] / results["identity"]["l1"]
    results["summary"] = {
        "ig6_over_identity_l1": ratio,
        "ig6m_l1m_minus_ig6_l1m": results["ig6-m"]["median_l1m"] - results["ig6"]["median_l1m"],
        "igk_sweep_spearman": float(rho),
    }
    (out / "results.json").write_text(json.dumps(results, indent=1) + "\n")
    return results


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("--epochs", type=int, default=None)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    res = run_experiment(args.out, tuple(args.seeds), **overrides)
    s = res["summary"]
    print(f"identity seen-test L1   {res['identity']['l1']:.4f}")
    for v in ("ig6", "ig6-m"):
        cells = "  ".join(f"s{k}: L1 {d['l1']:.4f} L1M {d['l1m']:.4f}" for k, d in res[v]["per_seed"].items())
        print(f"{v:6s} {cells}")
    print(f"IG6 / identity L1       {s['ig6_over_identity_l1']:.3f}")
    print(f"IG6-M minus IG6 L1M     {s['ig6m_l1m_minus_ig6_l1m']:+.4f}")
    print(f"IGK-M sweep Spearman    {s['igk_sweep_spearman']:.3f}")


if __name__ == "__main__":
    main()
