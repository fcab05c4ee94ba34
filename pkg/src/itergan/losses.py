"""Adversarial, reconstruction and intermediate-discriminator objectives.

Images are NCHW tensors in [-1, 1]; masks are N x H x W in {0, 1}.
Discriminators are any callables returning per-patch probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 100.0
    lambda_u: float = 0.0
    lambda_s: float = 0.0
    use_mask_l1: bool = False
    use_unsup_idl: bool = False
    use_sup_idl: bool = False

    def __post_init__(self):
        if not self.lambda_l1 > 0:
            raise ValueError("lambda_l1 must be positive")
        if (self.lambda_u > 0) != self.use_unsup_idl:
            raise ValueError("lambda_u must be positive exactly when unsupervised IDL is on")
        if (self.lambda_s > 0) != self.use_sup_idl:
            raise ValueError("lambda_s must be positive exactly when supervised IDL is on")
        if self.lambda_u < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, torch.Tensor]
    weights: dict[str, float]
    flags: set[str] = field(default_factory=set)

    def as_floats(self):
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.terms.items()})
        return out


def _combine(terms, weights, flags=None):
    total = sum(weights[k] * v for k, v in terms.items())
    return LossBreakdown(total, terms, weights, flags or set())


def bce(scores, label):
    """Mean binary cross-entropy of patch probabilities against a constant label."""
    s = scores.clamp(EPS, 1 - EPS)
    if label:
        return -torch.log(s).mean()
    return -torch.log1p(-s).mean()


def l1(B, T):
    return (B - T).abs().mean()


def masked_l1(B, T, M):
    """Object-weighted L1: object pixels count twice, background once.

    The per-pixel error sums over channels.  A term whose region is empty is
    dropped.  Averages over the batch.
    """
    if B.shape != T.shape:
        raise ValueError(f"shape mismatch {tuple(B.shape)} vs {tuple(T.shape)}")
    if M.dim() == B.dim():
        M = M.squeeze(1)
    if M.shape != (B.shape[0],) + tuple(B.shape[2:]):
        raise ValueError(f"mask shape {tuple(M.shape)} does not match images {tuple(B.shape)}")
    M = M.to(B.dtype)
    per_px = (T - B).abs().sum(dim=1)
    n_obj = M.sum(dim=(1, 2))
    n_bg = (1 - M).sum(dim=(1, 2))
    obj = torch.where(n_obj > 0, 2 * (M * per_px).sum(dim=(1, 2)) / n_obj.clamp(min=1), torch.zeros_like(n_obj))
    bg = torch.where(n_bg > 0, ((1 - M) * per_px).sum(dim=(1, 2)) / n_bg.clamp(min=1), torch.zeros_like(n_bg))
    return (obj + bg).mean()


def gen_loss_base(disc, A, Bk, T, lambda_l1, use_mask=False, M=None):
    if use_mask and M is None:
        raise ValueError("mask loss requested but no mask supplied")
    recon = masked_l1(Bk, T, M) if use_mask else l1(Bk, T)
    terms = {"adv": bce(disc(Bk, A), 1), "l1": recon}
    return _combine(terms, {"adv": 1.0, "l1": lambda_l1})


def disc_loss_base(disc, A, Bk, T):
    """Unhalved; the training step scales the assembled loss by 1/2."""
    terms = {"real": bce(disc(T, A), 1), "fake": bce(disc(Bk, A), 0)}
    return _combine(terms, {"real": 1.0, "fake": 1.0})


def gen_loss_unsup(disc_u, Bi):
    return bce(disc_u(Bi), 1)


def disc_loss_unsup(disc_u, Bi, real):
    return bce(disc_u(Bi), 0) + bce(disc_u(real), 1)


def gen_loss_sup(disc_s, A, Bi):
    return bce(disc_s(Bi, A), 1)


def disc_loss_sup(disc_s, A, Bi, Ti):
    return bce(disc_s(Bi, A), 0) + bce(disc_s(Ti, A), 1)


@dataclass
class IdlDraws:
    """Per-batch-element random choices for the intermediate discriminators."""
    unsup_index: np.ndarray     # in 1..k
    real_is_input: np.ndarray   # coin: A (True) or T (False) as the real image
    sup_index: np.ndarray | None  # in 1..k-1, None when k == 1


def draw_idl(rng, batch_size, k):
    return IdlDraws(
        unsup_index=rng.integers(1, k + 1, size=batch_size),
        real_is_input=rng.random(batch_size) < 0.5,
        sup_index=rng.integers(1, k, size=batch_size) if k > 1 else None,
    )


def _gather(stack, index):
    # stack: list of length L of N x C x H x W; index: 1-based, one per batch element
    idx = torch.as_tensor(np.asarray(index) - 1)
    return torch.stack(stack)[idx, torch.arange(len(idx))]


def assemble_losses(weights: LossWeights, nets, A, Bk, inter, T, M=None, T_inter=None,
                    rng=None, draws=None, detach_fake=True):
    """Generator and discriminator objectives for one batch, per the variant flags.

    ``nets`` maps "phi" / "mu" / "nu" to discriminators.  ``inter`` holds the
    generated B^1..B^{k-1}.  Returns (L_G, L_D); L_D is unhalved.
    """
    k = len(inter) + 1
    if weights.use_mask_l1 and M is None:
        raise ValueError("mask L1 enabled but batch has no masks")
    if weights.use_unsup_idl and "mu" not in nets:
        raise ValueError("unsupervised IDL enabled but no unconditional discriminator")
    if weights.use_sup_idl and "nu" not in nets:
        raise ValueError("supervised IDL enabled but no conditional IDL discriminator")
    if weights.use_sup_idl and k > 1 and (T_inter is None or len(T_inter) != k - 1):
        raise ValueError("supervised IDL needs the k-1 intermediate targets")
    if draws is None and (weights.use_unsup_idl or weights.use_sup_idl):
        draws = draw_idl(rng if rng is not None else np.random.default_rng(), A.shape[0], k)

    fake = Bk.detach() if detach_fake else Bk
    g = gen_loss_base(nets["phi"], A, Bk, T, weights.lambda_l1, weights.use_mask_l1, M)
    d = disc_loss_base(nets["phi"], A, fake, T)

    if weights.use_unsup_idl:
        Bi = _gather(list(inter) + [Bk], draws.unsup_index)
        coin = torch.as_tensor(draws.real_is_input).view(-1, 1, 1, 1)
        real = torch.where(coin, A, T)
        g.terms["idl_u"] = gen_loss_unsup(nets["mu"], Bi)
        g.weights["idl_u"] = weights.lambda_u
        d.terms["idl_u"] = disc_loss_unsup(nets["mu"], Bi.detach() if detach_fake else Bi, real)
        d.weights["idl_u"] = weights.lambda_u

    if weights.use_sup_idl:
        if k == 1:
            zero = Bk.new_zeros(())
            g.terms["idl_s"], d.terms["idl_s"] = zero, zero
            g.flags.add("sup_idl_inapplicable_k1")
            d.flags.add("sup_idl_inapplicable_k1")
        else:
            Bi = _gather(list(inter), draws.sup_index)
            Ti = _gather(list(T_inter), draws.sup_index)
            g.terms["idl_s"] = gen_loss_sup(nets["nu"], A, Bi)
            d.terms["idl_s"] = disc_loss_sup(nets["nu"], A, Bi.detach() if detach_fake else Bi, Ti)
        g.weights["idl_s"] = weights.lambda_s
        d.weights["idl_s"] = weights.lambda_s

    g.total = sum(g.weights[n] * v for n, v in g.terms.items())
    d.total = sum(d.weights[n] * v for n, v in d.terms.items())
    return g, d
