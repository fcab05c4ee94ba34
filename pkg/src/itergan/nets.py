"""Generator and discriminators in the Pix2Pix family, plus iterated generation.

The generator is a U-Net (strided 4x4 convolutions down, transposed convolutions
up, skip connections at every level, tanh output).  Discriminators are
PatchGAN classifiers that emit a grid of per-patch probabilities.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

DISC_VARIANTS = ("conditional_main", "unconditional_idl", "conditional_idl")


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    generator_depth: int = 6
    base_channels: int = 32
    discriminator_layers: int = 3
    norm: str = "instance"
    dropout: float = 0.5

    def __post_init__(self):
        if self.image_size % (2 ** self.generator_depth):
            raise ValueError(
                f"image_size {self.image_size} must be divisible by 2**generator_depth "
                f"= {2 ** self.generator_depth}"
            )
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm kind {self.norm!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


DESK = NetConfig()
# Pix2Pix sizing: unet_256 with ngf=64, 70x70 PatchGAN.
PAPER = NetConfig(image_size=256, generator_depth=8, base_channels=64)


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=False, track_running_stats=False)
    return nn.Identity()


def _width(base, level):
    return base * min(2 ** level, 8)


def init_weights(module: nn.Module, seed: int | None = None) -> None:
    """Zero-mean Gaussian (std 0.02) conv weights, zero biases."""
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()


class UnetGenerator(nn.Module):
    def __init__(self, cfg: NetConfig = DESK, in_channels: int = 3, out_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        depth, base = cfg.generator_depth, cfg.base_channels
        widths = [_width(base, i) for i in range(depth)]

        self.down = nn.ModuleList()
        for i in range(depth):
            cin = in_channels if i == 0 else widths[i - 1]
            layers = [] if i == 0 else [nn.LeakyReLU(0.2)]
            layers.append(nn.Conv2d(cin, widths[i], 4, 2, 1))
            if 0 < i < depth - 1:
                layers.append(_norm(cfg.norm, widths[i]))
            self.down.append(nn.Sequential(*layers))

        # up[j] mirrors down[depth-1-j]; every level but the innermost sees a skip concat.
        self.up = nn.ModuleList()
        for j in range(depth):
            level = depth - 1 - j
            cin = widths[level] if j == 0 else 2 * widths[level]
            if level == 0:
                layers = [nn.ReLU(), nn.ConvTranspose2d(cin, out_channels, 4, 2, 1), nn.Tanh()]
            else:
                layers = [nn.ReLU(), nn.ConvTranspose2d(cin, widths[level - 1], 4, 2, 1),
                          _norm(cfg.norm, widths[level - 1])]
                if j < 3 and cfg.dropout > 0:
                    layers.append(nn.Dropout(cfg.dropout))
            self.up.append(nn.Sequential(*layers))

    def forward(self, x):
        multiple = 2 ** self.cfg.generator_depth
        if x.shape[-1] % multiple or x.shape[-2] % multiple:
            raise ValueError(
                f"input spatial size {tuple(x.shape[-2:])} must be a multiple of {multiple}"
            )
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        x = self.up[0](skips[-1])
        for j in range(1, len(self.up)):
            x = self.up[j](torch.cat([skips[-1 - j], x], dim=1))
        return x


class PatchDiscriminator(nn.Module):
    """PatchGAN; with 3 strided layers each output score sees a 70x70 input patch."""

    def __init__(self, cfg: NetConfig = DESK, variant: str = "conditional_main"):
        super().__init__()
        if variant not in DISC_VARIANTS:
            raise ValueError(f"unknown discriminator variant {variant!r}")
        self.variant = variant
        self.conditional = variant != "unconditional_idl"
        base, n = cfg.base_channels, cfg.discriminator_layers
        cin = 6 if self.conditional else 3

        layers = [nn.Conv2d(cin, base, 4, 2, 1), nn.LeakyReLU(0.2)]
        for i in range(1, n):
            layers += [nn.Conv2d(_width(base, i - 1), _width(base, i), 4, 2, 1),
                       _norm(cfg.norm, _width(base, i)), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(_width(base, n - 1), _width(base, n), 4, 1, 1),
                   _norm(cfg.norm, _width(base, n)), nn.LeakyReLU(0.2),
                   nn.Conv2d(_width(base, n), 1, 4, 1, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, primary, conditional=None):
        if self.conditional and conditional is None:
            raise ValueError(f"{self.variant} discriminator needs a conditioning image")
        if not self.conditional and conditional is not None:
            raise ValueError("unconditional discriminator takes a single image")
        if conditional is not None:
            if conditional.shape != primary.shape:
                raise ValueError(f"shape mismatch {tuple(conditional.shape)} vs {tuple(primary.shape)}")
            primary = torch.cat([conditional, primary], dim=1)
        return self.net(primary)


def patch_grid_size(size: int, layers: int) -> int:
    """Output grid side length for a square input of side `size`."""
    for _ in range(layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


def receptive_field(layers: int) -> int:
    rf, jump = 1, 1
    strides = [2] * layers + [1, 1]
    for s in strides:
        rf += 3 * jump
        jump *= s
    return rf


def generator_forward(gen: UnetGenerator, image: torch.Tensor) -> torch.Tensor:
    return gen(image)


def iterate_generator(gen, image, k):
    """Apply `gen` k times; returns (B^k, [B^1 .. B^{k-1}])."""
    if k < 1:
        raise ValueError(f"iteration count must be >= 1, got {k}")
    outs = []
    x = image
    for _ in range(k):
        x = gen(x)
        outs.append(x)
    return outs[-1], outs[:-1]


def discriminator_forward(disc: PatchDiscriminator, primary, conditional=None):
    return disc(primary, conditional)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class IterGAN(nn.Module):
    """Holds theta (generator), phi (main D) and the optional IDL discriminators mu, nu."""

    def __init__(self, cfg: NetConfig = DESK, unsup_idl=False, sup_idl=False, seed=0):
        super().__init__()
        self.cfg = cfg
        self.gen = UnetGenerator(cfg)
        self.disc = PatchDiscriminator(cfg, "conditional_main")
        self.disc_u = PatchDiscriminator(cfg, "unconditional_idl") if unsup_idl else None
        self.disc_s = PatchDiscriminator(cfg, "conditional_idl") if sup_idl else None
        for i, m in enumerate(self.blocks().values()):
            init_weights(m, seed * 4 + i)

    def blocks(self):
        out = {"theta": self.gen, "phi": self.disc}
        if self.disc_u is not None:
            out["mu"] = self.disc_u
        if self.disc_s is not None:
            out["nu"] = self.disc_s
        return out

    def disc_parameters(self):
        for name, m in self.blocks().items():
            if name != "theta":
                yield from m.parameters()
