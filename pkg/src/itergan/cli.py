"""Command-line entry point: synth | train | rotate | eval | report | grid."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import datahub
from .trainloop import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, ConfigError, NumericDivergence, config_hash

log = logging.getLogger("itergan")


def _parse_ks(text):
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    for k in out:
        if not 1 <= k <= datahub.MAX_K:
            raise argparse.ArgumentTypeError(f"k={k} outside 1..{datahub.MAX_K}")
    return out


def _parse_pair(text):
    obj, base = text.split(":")
    return int(obj), int(base)


def build_parser():
    p = argparse.ArgumentParser(prog="itergan", description="Iterated image-to-image GANs for object rotation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic turntable dataset")
    s.add_argument("--objects", type=int, required=True, help="number of objects (>= 3)")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--unseen", type=int, default=None, help="objects held out entirely")
    s.add_argument("--seen", type=int, default=None, help="training objects with held-out start angles")

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True, help="TrainConfig JSON file")
    t.add_argument("--seed", type=int, required=True, help="the single source of randomness")
    t.add_argument("--restarts", type=int, default=None, help="train N times, keep the best seen-test L1M")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--variant", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--data", default=None, help="dataset root (overrides config)")
    t.add_argument("--out", default=None, help="run directory (overrides config)")

    r = sub.add_parser("rotate", help="rotate one image by 5k degrees")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, help="RGB image")
    r.add_argument("--k", type=int, required=True, help="rotation in 5-degree steps (1..36)")
    r.add_argument("--intermediates", action="store_true", help="also write every intermediate step")
    r.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="score a checkpoint or baseline on a test split")
    e.add_argument("--ckpt", required=True, help="checkpoint file, or 'identity' / 'projective'")
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", choices=["seen", "unseen"], default="seen")
    e.add_argument("--metrics", default="l1,l1m,kl,ssim,vifp")
    e.add_argument("--ks", type=_parse_ks, default=None, help="rotation steps, e.g. 6 or 1-12 (default 6)")
    e.add_argument("--label-model", choices=["random", "vgg16"], default="random")
    e.add_argument("--focal-scale", type=float, default=1.2, help="projective focal length / width")
    e.add_argument("--name", default=None, help="model name in the report")
    e.add_argument("--out", required=True, help="report JSON path (a per-pair CSV is written beside it)")

    rp = sub.add_parser("report", help="compare evaluation reports across models")
    rp.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    rp.add_argument("--friedman", action="store_true", help="include Friedman significance tests")
    rp.add_argument("--metric", default="l1m", help="metric for the rotation-sweep data file")
    rp.add_argument("--out", default="comparison.json")
    rp.add_argument("--sweep", default=None, help="rotation-sweep CSV (angle, model, mean, n)")

    g = sub.add_parser("grid", help="montage of model outputs over rotation steps")
    g.add_argument("--data", required=True, help="dataset root")
    g.add_argument("--models", nargs="+", required=True, help="checkpoints or baselines")
    g.add_argument("--pairs", nargs="+", type=_parse_pair, required=True, help="object:base_angle")
    g.add_argument("--ks", type=_parse_ks, required=True)
    g.add_argument("--out", required=True, help="montage PNG; labels go to <out>.json")
    return p


# ----------------------------------------------------------------------------


def cmd_synth(args):
    man = datahub.build_synth_dataset(args.objects, args.size, args.seed, args.out,
                                      n_unseen=args.unseen, n_seen=args.seen)
    print(f"wrote {len(man.objects)} objects x {datahub.N_VIEWS} views to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .trainloop import TrainConfig, fit, fit_with_restarts

    cfg = TrainConfig.load(args.config)
    overrides = {"seed": args.seed}
    for key, val in (("variant", args.variant), ("epochs", args.epochs), ("data_root", args.data),
                     ("out_dir", args.out), ("restarts", args.restarts)):
        if val is not None:
            overrides[key] = val
    cfg = TrainConfig.from_json({**cfg.to_json(), **overrides})
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1) + "\n")
    if cfg.restarts > 1 and args.resume is None:
        best, _ = fit_with_restarts(cfg, args.seed)
        print(f"best checkpoint: {best}")
    else:
        res = fit(cfg, seed=args.seed, resume=args.resume)
        print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def _load_rgb(path):
    with Image.open(path) as im:
        return datahub.to_unit(np.asarray(im.convert("RGB")))


def cmd_rotate(args):
    import torch

    from .checkpoint import load_checkpoint
    from .nets import iterate_generator

    if not 1 <= args.k <= datahub.MAX_K:
        raise ConfigError(f"k must be in 1..{datahub.MAX_K}")
    model, header = load_checkpoint(args.ckpt)
    vpi = header.get("views_per_iter", 1)
    if args.k % vpi:
        raise ConfigError(f"this model turns {vpi * datahub.STEP} degrees per call; k must be a multiple of {vpi}")
    policy = header.get("k_policy", {"kind": "fixed", "k": header["iteration_count_trained"]})
    trained = policy["k"] * vpi if policy["kind"] == "fixed" else None
    if trained is not None and trained != args.k:
        warnings.warn(f"model trained for k={trained}; k={args.k} extrapolates", stacklevel=1)
        print(f"warning: model trained for k={trained}; k={args.k} extrapolates", file=sys.stderr)

    img = _load_rgb(args.input)
    mult = 2 ** model.cfg.generator_depth
    h, w = img.shape[:2]
    if h % mult or w % mult:
        raise ConfigError(f"input is {h}x{w}; both sides must be multiples of {mult}")
    x = torch.from_numpy(img.transpose(2, 0, 1).copy()).unsqueeze(0)
    with torch.no_grad():
        final, inter = iterate_generator(model.gen, x, args.k // vpi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    step_deg = vpi * datahub.STEP
    frames = (inter + [final]) if args.intermediates else [final]
    first = 1 if args.intermediates else args.k // vpi
    written = []
    for i, frame in enumerate(frames, start=first):
        path = out / f"out_{i * step_deg:03d}.png"
        Image.fromarray(datahub.from_unit(frame[0].numpy().transpose(1, 2, 0))).save(path, format="PNG")
        written.append(path.name)
    side = {"checkpoint": str(args.ckpt), "input": str(args.input), "k": args.k,
            "config_hash": header.get("config_hash"), "outputs": written}
    (out / "rotate.json").write_text(json.dumps(side, indent=1) + "\n")
    print("\n".join(str(out / n) for n in written))
    return EXIT_OK


def _label_model(kind):
    from .evalsuite import RandomProjectionLabelModel, Vgg16LabelModel

    return Vgg16LabelModel() if kind == "vgg16" else RandomProjectionLabelModel()


def cmd_eval(args):
    from .evalsuite import evaluate_model

    metrics = [m for m in args.metrics.split(",") if m]
    man = datahub.load_manifest(args.data)
    label = _label_model(args.label_model) if "kl" in metrics else None
    rep = evaluate_model(args.ckpt, man, args.split, metrics, label_model=label, ks=args.ks,
                         name=args.name, focal_scale=args.focal_scale)
    rep.meta["label_model"] = args.label_model
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out)
    rep.write_csv(out.with_suffix(".csv"))
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _print_table(rep)
    return EXIT_OK


def _print_table(rep):
    print("model".ljust(16) + "".join(m.rjust(18) for m in rep.metrics))
    for model in rep.models:
        cells = []
        for m in rep.metrics:
            a = rep.aggregates[model][m]
            cells.append("n/a".rjust(18) if a["mean"] is None else f"{a['mean']:.4f} ± {a['std']:.4f}".rjust(18))
        print(model.ljust(16) + "".join(cells))


def cmd_report(args):
    from .evalsuite import MetricReport, combine_reports, rotation_sweep

    reports = [MetricReport.load(p) for p in args.inputs]
    rep = combine_reports(reports)
    if not args.friedman:
        rep.friedman = {}
    rep.meta["config_hash"] = config_hash(rep.meta)
    rep.save(args.out)
    _print_table(rep)
    for metric, f in rep.friedman.items():
        print(f"friedman {metric}: chi2={f['statistic']:.3f} p={f['p']:.4g} "
              + " ".join(f"{m}:{r:.2f}" for m, r in f["mean_ranks"].items()))
    sweep_path = Path(args.sweep) if args.sweep else Path(args.out).with_suffix(".sweep.csv")
    with open(sweep_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle", "model", args.metric, "n"])
        for row in rotation_sweep(rep, args.metric):
            w.writerow(row)
    return EXIT_OK


def cmd_grid(inputs, targets, outputs, ks, model_names, input_names):
    """Montage with one row per (input, model): input | k_1 .. k_n | target.

    ``outputs[i][m]`` lists the generated images of input i by model m, one per k.
    Returns (uint8 montage, label dict).
    """
    if not model_names:
        raise ValueError("grid needs at least one model")
    shapes = {np.asarray(a).shape for a in inputs} | {np.asarray(t).shape for t in targets}
    shapes |= {np.asarray(o).shape for per_in in outputs for per_m in per_in for o in per_m}
    if len(shapes) != 1:
        raise ValueError(f"all images must share one size, got {sorted(shapes)}")
    rows, labels = [], []
    for i, name in enumerate(input_names):
        for m, model in enumerate(model_names):
            cells = [inputs[i], *outputs[i][m], targets[i]]
            rows.append(np.concatenate([datahub.from_unit(c) for c in cells], axis=1))
            labels.append({"input": name, "model": model})
    montage = np.concatenate(rows, axis=0)
    columns = ["input"] + [f"{k * datahub.STEP}deg" for k in ks] + ["target"]
    return montage, {"rows": labels, "columns": columns,
                     "cell_size": list(np.asarray(inputs[0]).shape[:2])}


def _grid(args):
    from .evalsuite import _model_runner

    man = datahub.load_manifest(args.data)
    runners = [_model_runner(m, 1.2) for m in args.models]
    kmax = max(args.ks)
    inputs, targets, outputs, names = [], [], [], []
    for obj, base in args.pairs:
        s = datahub.sample_pair(man, obj, base, kmax)
        inputs.append(s.input)
        targets.append(s.target)
        names.append(f"{obj}:{base:03d}")
        outputs.append([[run(s.input[None], k)[0] for k in args.ks] for _, run, _ in runners])
    montage, labels = cmd_grid(inputs, targets, outputs, args.ks, [n for n, _, _ in runners], names)
    labels["config_hash"] = config_hash({"models": args.models, "pairs": args.pairs, "ks": args.ks})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(montage).save(out, format="PNG")
    out.with_suffix(".json").write_text(json.dumps(labels, indent=1) + "\n")
    print(out)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "rotate": cmd_rotate, "eval": cmd_eval,
            "report": cmd_report, "grid": _grid}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, datahub.DatasetError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDivergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
