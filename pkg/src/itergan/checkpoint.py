"""Checkpoint container.

A safetensors file (little-endian, fixed layout) whose metadata carries a JSON
header ``{format_version, net_config, iteration_count_trained, epoch, seed, ...}``
and whose tensors are named ``<block>.<param>`` for blocks theta, phi, mu, nu.
Optimizer moments, when saved, live under ``opt_g.*`` / ``opt_d.*``.
"""
from __future__ import annotations

import json

import torch
from safetensors.torch import load_file, save_file, safe_open

from .nets import IterGAN, NetConfig

FORMAT_VERSION = 1
BLOCKS = ("theta", "phi", "mu", "nu")


class CheckpointError(ValueError):
    pass


def _opt_tensors(prefix, opt):
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for name, t in st.items():
            out[f"{prefix}.{idx}.{name}"] = torch.as_tensor(t).detach().clone().contiguous()
    return out


def _restore_opt(opt, prefix, tensors):
    sd = opt.state_dict()
    state = {}
    for key, t in tensors.items():
        if not key.startswith(prefix + "."):
            continue
        _, idx, name = key.split(".", 2)
        state.setdefault(int(idx), {})[name] = t
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(path, model: IterGAN, *, iteration_count_trained, epoch, seed, extra=None,
                    opt_g=None, opt_d=None):
    header = {
        "format_version": FORMAT_VERSION,
        "net_config": model.cfg.to_dict(),
        "iteration_count_trained": int(iteration_count_trained),
        "epoch": int(epoch),
        "seed": int(seed),
        "blocks": sorted(model.blocks()),
    }
    header.update(extra or {})
    tensors = {}
    for block, module in model.blocks().items():
        for name, t in module.state_dict().items():
            tensors[f"{block}.{name}"] = t.detach().cpu().contiguous()
    if opt_g is not None:
        tensors.update(_opt_tensors("opt_g", opt_g))
    if opt_d is not None:
        tensors.update(_opt_tensors("opt_d", opt_d))
    save_file(tensors, str(path), metadata={"header": json.dumps(header, sort_keys=True)})


def read_header(path):
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if "header" not in meta:
        raise CheckpointError(f"{path} has no checkpoint header")
    header = json.loads(meta["header"])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')!r}")
    return header


def load_checkpoint(path, opt_g=None, opt_d=None, model=None):
    """Returns (model in eval mode, header)."""
    header = read_header(path)
    cfg = NetConfig.from_dict(header["net_config"])
    blocks = set(header["blocks"])
    if model is None:
        model = IterGAN(cfg, unsup_idl="mu" in blocks, sup_idl="nu" in blocks)
    elif model.cfg != cfg:
        raise CheckpointError(f"checkpoint net config {cfg} does not match model {model.cfg}")
    tensors = load_file(str(path))
    for block, module in model.blocks().items():
        sub = {k[len(block) + 1:]: v for k, v in tensors.items() if k.startswith(block + ".")}
        module.load_state_dict(sub)
    if opt_g is not None:
        _restore_opt(opt_g, "opt_g", tensors)
    if opt_d is not None:
        _restore_opt(opt_d, "opt_d", tensors)
    model.eval()
    return model, header
