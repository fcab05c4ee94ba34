"""Alternating generator/discriminator training, iteration-count policies, curriculum."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datahub
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .losses import LossWeights, assemble_losses, draw_idl
from .nets import DESK, PAPER, IterGAN, NetConfig, iterate_generator

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
MAX_K = datahub.MAX_K
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class ConfigError(ValueError):
    pass


class NumericDivergence(RuntimeError):
    def __init__(self, msg, batch=None):
        super().__init__(msg)
        self.batch = batch


# ----------------------------------------------------------------------------
# iteration-count policies


@dataclass(frozen=True)
class KPolicy:
    kind: str = "fixed"  # fixed | sampled | curriculum
    k: int = 6

    def __post_init__(self):
        if self.kind not in ("fixed", "sampled", "curriculum"):
            raise ConfigError(f"unknown k policy {self.kind!r}")
        if self.kind == "fixed" and not 1 <= self.k <= MAX_K:
            raise ConfigError(f"fixed k must lie in 1..{MAX_K}")

    @property
    def k_max(self):
        return self.k if self.kind == "fixed" else MAX_K


@dataclass(frozen=True)
class CurriculumState:
    epoch: int
    k_max: int
    phases: tuple[tuple[int, int], ...]


def curriculum_schedule(total_epochs):
    """Phase table ((start_epoch, k_max), ...): k_max = 1 for the first quarter,
    then 6, 18 and 36 over equal thirds of the rest (rounded down)."""
    if total_epochs < 4:
        raise ConfigError("curriculum needs at least 4 epochs")
    first = total_epochs // 4
    third = (total_epochs - first) // 3
    return ((0, 1), (first, 6), (first + third, 18), (first + 2 * third, 36))


def curriculum_state(phases, epoch):
    k_max = phases[0][1]
    for start, km in phases:
        if epoch >= start:
            k_max = km
    return CurriculumState(epoch, k_max, tuple(phases))


def sample_k(policy: KPolicy, rng, state: CurriculumState | None = None):
    if policy.kind == "fixed":
        return policy.k
    if policy.kind == "sampled":
        return int(rng.integers(1, MAX_K + 1))
    if state is None:
        raise ConfigError("curriculum policy needs a curriculum state")
    return int(rng.integers(1, state.k_max + 1))


# ----------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class Variant:
    name: str
    k_policy: KPolicy
    views_per_iter: int     # turntable steps covered by one generator call
    use_mask: bool
    unsup_idl: bool
    sup_idl: bool

    def weights(self, lambda_l1=100.0, lambda_idl=0.1):
        return LossWeights(lambda_l1=lambda_l1,
                           lambda_u=lambda_idl if self.unsup_idl else 0.0,
                           lambda_s=lambda_idl if self.sup_idl else 0.0,
                           use_mask_l1=self.use_mask, use_unsup_idl=self.unsup_idl,
                           use_sup_idl=self.sup_idl)


_BASES = {
    "ig6": (KPolicy("fixed", 6), 1),
    "iga": (KPolicy("sampled"), 1),
    "igk": (KPolicy("curriculum"), 1),
    "p2p-30": (KPolicy("fixed", 1), 6),
    "p2p-65": (KPolicy("fixed", 1), 1),
}


def parse_variant(name) -> Variant:
    """``ig6``, ``ig6-mu``, ``igk-m``, ``iga-mus``, ``p2p-30``, ``p2p-30-m`` ..."""
    name = name.lower()
    for base, (policy, vpi) in _BASES.items():
        if name == base or name.startswith(base + "-"):
            flags = name[len(base) + 1:]
            if set(flags) - set("mus") or len(set(flags)) != len(flags):
                raise ConfigError(f"bad variant flags {flags!r} in {name!r}")
            if base.startswith("p2p") and set(flags) & set("us"):
                raise ConfigError(f"{base} runs a single generator call; IDL needs k > 1")
            return Variant(name, policy, vpi, "m" in flags, "u" in flags, "s" in flags)
    raise ConfigError(f"unknown variant {name!r}")


# ----------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    variant: str = "ig6"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lr_decay_epochs: int = 0  # Pix2Pix-style linear decay to zero over the last N epochs
    lambda_l1: float = 100.0
    lambda_idl: float = 0.1
    seed: int | None = None
    data_root: str = "data/synth"
    out_dir: str = "runs/default"
    net: NetConfig = field(default_factory=lambda: DESK)
    checkpoint_every: int = 5
    restarts: int = 1
    pair_subsample: float = 1.0
    max_batches_per_epoch: int | None = None

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        self.betas = tuple(self.betas)
        self.variant_spec  # validates

    @property
    def variant_spec(self) -> Variant:
        return parse_variant(self.variant)

    @property
    def weights(self) -> LossWeights:
        return self.variant_spec.weights(self.lambda_l1, self.lambda_idl)

    def to_json(self):
        d = dataclasses.asdict(self)
        d["net"] = self.net.to_dict()
        d["betas"] = list(self.betas)
        return {"version": CONFIG_VERSION, **d}

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def hash(self):
        """Identifies the training settings; file locations are left out so
        the same run is recognised from any working directory."""
        d = self.to_json()
        for key in LOCATION_FIELDS:
            d.pop(key, None)
        return config_hash(d)


LOCATION_FIELDS = ("data_root", "out_dir")


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def paper_preset(**overrides):
    """Full-scale settings: 256x256 Pix2Pix sizing, 20 epochs, 3 restarts."""
    base = dict(variant="ig6", epochs=20, batch_size=1, lambda_l1=100.0, lambda_idl=0.1,
                net=PAPER, restarts=3, checkpoint_every=1)
    base.update(overrides)
    return TrainConfig(**base)


def desk_preset(**overrides):
    base = dict(variant="ig6", epochs=30, batch_size=8, net=DESK, restarts=1)
    base.update(overrides)
    return TrainConfig(**base)


def validate_config(cfg: TrainConfig, man: datahub.TurntableManifest):
    v = cfg.variant_spec
    h, w = man.resolution
    mult = 2 ** cfg.net.generator_depth
    if h % mult or w % mult:
        raise ConfigError(f"dataset resolution {h}x{w} is not a multiple of {mult}")
    if v.use_mask and not man.has_masks:
        raise ConfigError(f"variant {v.name} needs object masks; dataset has none")
    if v.sup_idl and not man.has_intermediates:
        raise ConfigError(f"variant {v.name} needs intermediate views; dataset lacks them")
    if v.k_policy.k_max * v.views_per_iter > MAX_K:
        raise ConfigError("target rotation exceeds 180 degrees")
    if not man.pairs_train:
        raise ConfigError("dataset has no training pairs")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if not 0 <= cfg.lr_decay_epochs <= cfg.epochs:
        raise ConfigError("lr_decay_epochs must lie in 0..epochs")
    if v.k_policy.kind == "curriculum":
        curriculum_schedule(cfg.epochs)


def lr_factor(epoch, epochs, decay_epochs):
    """Multiplier on the base step size: 1 until the last ``decay_epochs``
    epochs, then linearly down towards 0."""
    if decay_epochs <= 0:
        return 1.0
    return 1.0 - max(0, epoch - (epochs - decay_epochs) + 1) / (decay_epochs + 1)


# ----------------------------------------------------------------------------
# training


@dataclass
class Trainer:
    model: IterGAN
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    g_steps: int = 0
    d_steps: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig, seed: int):
        v = cfg.variant_spec
        model = IterGAN(cfg.net, unsup_idl=v.unsup_idl, sup_idl=v.sup_idl, seed=seed)
        opt_g = torch.optim.Adam(model.gen.parameters(), lr=cfg.lr, betas=cfg.betas)
        opt_d = torch.optim.Adam(list(model.disc_parameters()), lr=cfg.lr, betas=cfg.betas)
        return cls(model, opt_g, opt_d)


def train_step(trainer: Trainer, batch, weights: LossWeights, rng):
    """One generator update on L_G, then one discriminator update on L_D / 2.

    ``batch["iters"]`` (default ``batch["k"]``) is the number of generator calls.
    Returns the (L_G, L_D) breakdowns; L_D is reported unhalved.
    """
    model = trainer.model
    model.train()
    A, T = batch["A"], batch["T"]
    iters = batch.get("iters", batch["k"])
    Bk, inter = iterate_generator(model.gen, A, iters)
    draws = draw_idl(rng, A.shape[0], iters)
    g, d = assemble_losses(weights, model.blocks(), A, Bk, inter, T, batch.get("M"),
                           batch.get("T_inter"), draws=draws)
    for name, part in (("generator", g), ("discriminator", d)):
        if not torch.isfinite(part.total):
            raise NumericDivergence(f"non-finite {name} loss {part.as_floats()}", batch)

    trainer.opt_g.zero_grad(set_to_none=True)
    g.total.backward()
    trainer.opt_g.step()
    trainer.g_steps += 1

    trainer.opt_d.zero_grad(set_to_none=True)
    (0.5 * d.total).backward()
    trainer.opt_d.step()
    trainer.d_steps += 1
    return g, d


LOG_COLUMNS = ["step", "epoch", "k", "g_total", "g_adv", "g_l1", "g_idl_u", "g_idl_s",
               "d_total", "d_real", "d_fake", "d_idl_u", "d_idl_s"]


def _log_row(step, epoch, k, g, d):
    row = {"step": step, "epoch": epoch, "k": k}
    for prefix, part in (("g", g), ("d", d)):
        for name, val in part.as_floats().items():
            row[f"{prefix}_{name}"] = f"{val:.9g}"
    return row


@dataclass
class FitResult:
    checkpoint: Path
    log_path: Path
    trainer: Trainer
    history: list[dict]


def _dump_batch(out_dir, batch):
    path = Path(out_dir) / "diverged_batch.npz"
    arrays = {k: v.detach().numpy() for k, v in batch.items() if torch.is_tensor(v)}
    np.savez(path, k=batch["k"], **arrays)
    return path


def fit(cfg: TrainConfig, seed=None, out_dir=None, resume=None, manifest=None) -> FitResult:
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise ConfigError("a seed is required")
    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = manifest or datahub.load_manifest(cfg.data_root)
    validate_config(cfg, man)
    v, weights = cfg.variant_spec, cfg.weights

    torch.manual_seed(seed)
    trainer = Trainer.create(cfg, seed)
    start_epoch = 0
    if resume is not None:
        header = read_header(resume)
        if NetConfig.from_dict(header["net_config"]) != cfg.net:
            raise ConfigError(f"resume checkpoint net config {header['net_config']} != {cfg.net.to_dict()}")
        load_checkpoint(resume, trainer.opt_g, trainer.opt_d, model=trainer.model)
        start_epoch = header["epoch"]
        trainer.g_steps = trainer.d_steps = header.get("g_steps", 0)

    phases = curriculum_schedule(cfg.epochs) if v.k_policy.kind == "curriculum" else None
    header_extra = {"variant": v.name, "views_per_iter": v.views_per_iter,
                    "k_policy": dataclasses.asdict(v.k_policy), "config_hash": cfg.hash()}
    log_path = out_dir / "train_log.csv"
    history = []
    mode = "a" if resume is not None and log_path.exists() else "w"
    ckpt = out_dir / "final.ckpt"

    def save(path, epoch):
        save_checkpoint(path, trainer.model, iteration_count_trained=v.k_policy.k_max,
                        epoch=epoch, seed=seed, opt_g=trainer.opt_g, opt_d=trainer.opt_d,
                        extra={**header_extra, "g_steps": trainer.g_steps})

    with open(log_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, restval="")
        if mode == "w":
            writer.writeheader()
        for epoch in range(start_epoch, cfg.epochs):
            rng = datahub.epoch_rng(seed, epoch)
            for opt in (trainer.opt_g, trainer.opt_d):
                for group in opt.param_groups:
                    group["lr"] = cfg.lr * lr_factor(epoch, cfg.epochs, cfg.lr_decay_epochs)
            state = curriculum_state(phases, epoch) if phases else None

            def k_fn(r):
                return sample_k(v.k_policy, r, state) * v.views_per_iter

            batches = datahub.iter_batches(man, man.pairs_train, cfg.batch_size, rng, k_fn,
                                           with_intermediates=v.sup_idl, subsample=cfg.pair_subsample)
            for b_idx, batch in enumerate(batches):
                if cfg.max_batches_per_epoch is not None and b_idx >= cfg.max_batches_per_epoch:
                    break
                batch["iters"] = batch["k"] // v.views_per_iter
                try:
                    g, d = train_step(trainer, batch, weights, rng)
                except NumericDivergence as e:
                    dump = _dump_batch(out_dir, e.batch)
                    raise NumericDivergence(f"{e} (batch dumped to {dump})", e.batch) from e
                row = _log_row(trainer.g_steps, epoch, batch["iters"], g, d)
                writer.writerow(row)
                history.append(row)
            fh.flush()
            log.info("epoch %d done, step %d, %s", epoch, trainer.g_steps, history[-1] if history else "")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                save(out_dir / f"epoch{epoch + 1:03d}.ckpt", epoch + 1)
    save(ckpt, cfg.epochs)
    trainer.model.eval()
    return FitResult(ckpt, log_path, trainer, history)


def fit_with_restarts(cfg: TrainConfig, seed, out_dir=None, restarts=None, manifest=None):
    """Train ``restarts`` times (seeds seed, seed+1, ...) and keep the run with the
    lowest seen-test L1^M (plain L1 when the dataset has no masks)."""
    from .evalsuite import evaluate_model

    restarts = cfg.restarts if restarts is None else restarts
    out_dir = Path(out_dir or cfg.out_dir)
    man = manifest or datahub.load_manifest(cfg.data_root)
    metric = "l1m" if man.has_masks else "l1"
    results = []
    for r in range(restarts):
        res = fit(cfg, seed=seed + r, out_dir=out_dir / f"restart{r}", manifest=man)
        rep = evaluate_model(res.checkpoint, man, "seen_test", [metric])
        score = rep.aggregates[rep.models[0]][metric]["mean"]
        results.append((score, r, res))
        log.info("restart %d: seen-test %s = %.5f", r, metric, score)
    score, r, best = min(results, key=lambda x: (x[0], x[1]))
    shutil.copyfile(best.checkpoint, out_dir / "best.ckpt")
    (out_dir / "restarts.json").write_text(json.dumps(
        {"metric": metric, "scores": [s for s, _, _ in results], "best": r}, indent=1))
    return out_dir / "best.ckpt", results


__all__ = [
    "CheckpointError", "ConfigError", "CurriculumState", "FitResult", "KPolicy", "NumericDivergence",
    "TrainConfig", "Trainer", "Variant", "curriculum_schedule", "curriculum_state", "desk_preset",
    "fit", "fit_with_restarts", "lr_factor", "paper_preset", "parse_variant", "sample_k", "train_step",
    "validate_config",
]
