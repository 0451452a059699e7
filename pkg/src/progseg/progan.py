"""Progressively grown U-Net generator and discriminator.

The encoder always has its full depth and consumes the full-resolution image.
The decoder and discriminator start with enough blocks to reach ``base_res``
from the 1×1 bottleneck and gain one block per :func:`grow` call, doubling the
output resolution. Every stage owns a 1×1 mask head (generator) and a 1×1
``from_mask`` head (discriminator); the previous stage's heads are kept and
used for the fade-in blend::

    out = alpha * head_s(new block) + (1 - alpha) * upsample2(head_{s-1}(previous block))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import (BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Module, ModuleList,
                 concat_channels, init_params)
from .tensor import Rng, Tensor

# per-channel encoder widths at full scale (256×256 input)
FULL_WIDTHS = (64, 128, 256, 512, 512, 512, 512, 512)
DESK_WIDTHS = (8, 16, 32, 32, 32, 32)


def _log2(n: int, what: str) -> int:
    k = int(round(math.log2(n))) if n > 0 else -1
    if k < 0 or 2 ** k != n:
        raise ContractError(f"{what} must be a power of two, got {n}")
    return k


@dataclass
class Architecture:
    full_res: int = 64
    base_res: int = 8
    widths: tuple = DESK_WIDTHS
    dropout: float = 0.5
    dropout_blocks: int = 3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-9
    discriminator_sees_input: bool = False
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        depth = _log2(self.full_res, "full_res")
        _log2(self.base_res, "base_res")
        if len(self.widths) != depth:
            raise ContractError(
                f"{self.full_res}px input needs {depth} encoder widths, got {len(self.widths)}")
        if not 1 <= self.base_res <= self.full_res:
            raise ContractError(f"base_res {self.base_res} outside [1, {self.full_res}]")

    @property
    def depth(self) -> int:
        """Encoder depth: stride-2 blocks from full resolution down to 1×1."""
        return len(self.widths)

    @property
    def max_stages(self) -> int:
        return _log2(self.full_res // self.base_res, "full_res/base_res") + 1

    def decoder_depth(self, stage: int) -> int:
        return _log2(self.base_res, "base_res") + stage - 1

    def resolution(self, stage: int) -> int:
        return self.base_res * 2 ** (stage - 1)

    # channel bookkeeping; level k means spatial size 2**k
    def skip_width(self, k: int) -> int:
        return self.widths[self.depth - k - 1] if k < self.depth else 0

    def up_width(self, k: int) -> int:
        return self.widths[self.depth - k - 1] if k < self.depth else self.widths[0]

    def feature_width(self, k: int) -> int:
        """Channels of the decoder output (after the skip concat) at level k."""
        if k == 0:
            return self.widths[-1]
        return self.up_width(k) + self.skip_width(k)

    def disc_width(self, k: int) -> int:
        return self.widths[-1] if k == 0 else self.up_width(k)


@dataclass
class GrowthState:
    stage: int = 1
    resolution: int = 8
    alpha: float = 1.0
    iters_in_stage: int = 0

    def as_dict(self) -> dict:
        return {"stage": self.stage, "resolution": self.resolution,
                "alpha": float(self.alpha), "iters_in_stage": self.iters_in_stage}


def initial_state(arch: Architecture) -> GrowthState:
    return GrowthState(1, arch.resolution(1), 1.0, 0)


class EncoderBlock(Module):
    def __init__(self, in_ch, out_ch, norm, arch):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 4, 2, 1)
        self.bn = BatchNorm2d(out_ch, arch.bn_momentum, arch.bn_eps) if norm else None

    def forward(self, x):
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h)
        return T.leaky_relu(h, 0.2)


class DecoderBlock(Module):
    def __init__(self, in_ch, out_ch, dropout, arch):
        super().__init__()
        self.conv = ConvTranspose2d(in_ch, out_ch, 4, 2, 1)
        self.bn = BatchNorm2d(out_ch, arch.bn_momentum, arch.bn_eps)
        self.drop = dropout

    def forward(self, x):
        h = self.bn(self.conv(x))
        if self.drop is not None:
            h = self.drop(h)
        return T.relu(h)


class DiscBlock(Module):
    def __init__(self, in_ch, out_ch, arch):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 4, 2, 1)
        self.bn = BatchNorm2d(out_ch, arch.bn_momentum, arch.bn_eps)

    def forward(self, x):
        return T.leaky_relu(self.bn(self.conv(x)), 0.2)


def mask_activation(t: Tensor) -> Tensor:
    """tanh mapped onto [0, 1]."""
    return T.scale(T.add(T.tanh(t), 1.0), 0.5)


def _blend(new: Tensor, old: Tensor, alpha: float) -> Tensor:
    return T.add(T.scale(new, alpha), T.scale(old, 1.0 - alpha))


class Generator(Module):
    """U-Net with a fixed full-depth encoder and a growing decoder."""

    def __init__(self, arch: Architecture, rng: Rng):
        super().__init__()
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "init_rng", rng)
        object.__setattr__(self, "noise", rng.spawn("dropout"))
        self.encoder = ModuleList()
        in_ch = arch.in_channels
        for i, w in enumerate(arch.widths):
            norm = 0 < i < arch.depth - 1
            self.encoder.append(EncoderBlock(in_ch, w, norm, arch))
            in_ch = w
        init_params(self.encoder, rng)
        self.decoder = ModuleList()
        self.heads = ModuleList()
        for _ in range(arch.decoder_depth(1)):
            self._add_block(rng)
        self._add_head(rng)

    @property
    def n_stages(self) -> int:
        return len(self.heads)

    def _add_block(self, rng):
        arch = self.arch
        k = len(self.decoder) + 1
        drop = Dropout(arch.dropout, self.noise) if (
            arch.dropout > 0 and k <= arch.dropout_blocks and k < arch.depth) else None
        block = DecoderBlock(arch.feature_width(k - 1), arch.up_width(k), drop, arch)
        init_params(block, rng)
        self.decoder.append(block)

    def _add_head(self, rng):
        k = len(self.decoder)
        head = Conv2d(self.arch.feature_width(k), 1, 1, 1, 0)
        init_params(head, rng)
        self.heads.append(head)

    def grow(self) -> None:
        self._add_block(self.init_rng)
        self._add_head(self.init_rng)

    def encode(self, x: Tensor) -> list:
        arch = self.arch
        if x.ndim != 4 or x.shape[1] != arch.in_channels or x.shape[2:] != (arch.full_res,) * 2:
            raise ShapeError(
                f"generator expects (b,{arch.in_channels},{arch.full_res},{arch.full_res}), "
                f"got {x.shape}")
        feats = []
        h = x
        for blk in self.encoder:
            h = blk(h)
            feats.append(h)
        return feats

    def forward(self, x: Tensor, gs: GrowthState) -> Tensor:
        return generator_forward(self, x, gs)


class Discriminator(Module):
    """Scores a mask (optionally with its image) at the active stage resolution."""

    def __init__(self, arch: Architecture, rng: Rng):
        super().__init__()
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "init_rng", rng)
        self.blocks = ModuleList()
        self.from_mask = ModuleList()
        for _ in range(arch.decoder_depth(1)):
            self._add_block(rng)
        self._add_head(rng)
        self.score = Conv2d(arch.disc_width(0), 1, 1, 1, 0)
        init_params(self.score, rng)

    @property
    def n_stages(self) -> int:
        return len(self.from_mask)

    @property
    def in_channels(self) -> int:
        return 1 + (self.arch.in_channels if self.arch.discriminator_sees_input else 0)

    def _add_block(self, rng):
        k = len(self.blocks) + 1
        block = DiscBlock(self.arch.disc_width(k), self.arch.disc_width(k - 1), self.arch)
        init_params(block, rng)
        self.blocks.append(block)

    def _add_head(self, rng):
        k = len(self.blocks)
        head = Conv2d(self.in_channels, self.arch.disc_width(k), 1, 1, 0)
        init_params(head, rng)
        self.from_mask.append(head)

    def grow(self) -> None:
        self._add_block(self.init_rng)
        self._add_head(self.init_rng)

    def forward(self, mask: Tensor, gs: GrowthState, image: Tensor | None = None) -> Tensor:
        return discriminator_forward(self, image, mask, gs)


def _active_heads(gs: GrowthState) -> set:
    used = {gs.stage - 1}
    if gs.stage > 1 and gs.alpha < 1.0:
        used.add(gs.stage - 2)
    return used


def active_parameters(model, gs: GrowthState, heads: str) -> list:
    """(name, param) pairs that take part in the forward pass at ``gs``.

    Per-stage heads outside the current (and, while fading, previous) stage
    are skipped; they receive no gradient.
    """
    used = _active_heads(gs)
    out = []
    for name, p in model.named_parameters():
        parts = name.split(".")
        if parts[0] == heads and int(parts[1]) not in used:
            continue
        out.append((name, p))
    return out


def _check_stage(model, gs: GrowthState):
    if not 1 <= gs.stage <= model.n_stages:
        raise ContractError(f"stage {gs.stage} not available (model has {model.n_stages})")
    if not 0.0 <= gs.alpha <= 1.0:
        raise ContractError(f"alpha {gs.alpha} outside [0, 1]")


def generator_forward(g: Generator, x: Tensor, gs: GrowthState) -> Tensor:
    """Mask in [0,1] of shape (b,1,r,r) at the stage resolution r."""
    _check_stage(g, gs)
    arch = g.arch
    feats = g.encode(x)
    depth = arch.decoder_depth(gs.stage)
    h = feats[-1]
    prev = h
    for k in range(1, depth + 1):
        prev = h
        u = g.decoder[k - 1](h)
        skip = arch.depth - k
        h = concat_channels(u, feats[skip - 1]) if skip >= 1 else u
    out = mask_activation(g.heads[gs.stage - 1](h))
    if gs.stage > 1 and gs.alpha < 1.0:
        old = mask_activation(g.heads[gs.stage - 2](prev))
        out = _blend(out, T.upsample_nearest2(old), gs.alpha)
    return out


def discriminator_forward(d: Discriminator, x_img: Tensor | None, mask: Tensor,
                          gs: GrowthState) -> Tensor:
    """Scores of shape (b,1), clamped into [1e-7, 1 - 1e-7]."""
    _check_stage(d, gs)
    arch = d.arch
    r = arch.resolution(gs.stage)
    if mask.ndim != 4 or mask.shape[1:] != (1, r, r):
        raise ShapeError(f"discriminator expects mask (b,1,{r},{r}), got {mask.shape}")
    inp = mask
    if arch.discriminator_sees_input:
        if x_img is None or x_img.shape != (mask.shape[0], arch.in_channels, r, r):
            raise ShapeError(f"discriminator expects image (b,{arch.in_channels},{r},{r})")
        inp = T.concat([x_img, mask], axis=1)
    depth = arch.decoder_depth(gs.stage)
    h = T.leaky_relu(d.from_mask[gs.stage - 1](inp), 0.2)
    h = d.blocks[depth - 1](h)
    if gs.stage > 1 and gs.alpha < 1.0:
        old = T.leaky_relu(d.from_mask[gs.stage - 2](T.downsample_nearest2(inp)), 0.2)
        h = _blend(h, old, gs.alpha)
    for k in range(depth - 1, 0, -1):
        h = d.blocks[k - 1](h)
    h = T.reduce_mean(h, axes=(2, 3), keepdims=True)
    s = d.score(h)
    s = T.reshape(s, (s.shape[0], 1))
    return T.clamp(T.sigmoid(s), 1e-7, 1.0 - 1e-7)


def grow(g: Generator, d: Discriminator | None, gs: GrowthState) -> GrowthState:
    """Add one decoder block and head (and the matching discriminator block).

    New layers draw from each model's own init stream. Existing parameters are
    left untouched; the new state starts at alpha 0.
    """
    if gs.alpha < 1.0:
        raise ContractError(f"cannot grow while fading in (alpha={gs.alpha})")
    if gs.stage >= g.arch.max_stages:
        raise ContractError(f"already at the final stage ({gs.stage})")
    if g.n_stages == gs.stage:
        g.grow()
    if d is not None and d.n_stages == gs.stage:
        d.grow()
    stage = gs.stage + 1
    return GrowthState(stage, g.arch.resolution(stage), 0.0, 0)


def predict_proba(g: Generator, x: Tensor, gs: GrowthState, mode: str = "deterministic",
                  batch_size: int = 64) -> np.ndarray:
    """Mask-head output as an array (b, r, r) without recording a graph.

    ``mode`` is ``deterministic`` (running batch-norm stats, dropout off) or
    ``stochastic`` (running stats, dropout on: the noise source stays live).
    """
    if mode not in ("deterministic", "stochastic"):
        raise ContractError(f"unknown inference mode {mode!r}")
    was = g.training
    g.eval()
    drops = [m for m in g.modules() if isinstance(m, Dropout)]
    for m in drops:
        m.active = mode == "stochastic"
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    outs = []
    try:
        with T.no_grad():
            for i in range(0, xd.shape[0], batch_size):
                out = generator_forward(g, Tensor(xd[i:i + batch_size], dtype=xd.dtype), gs)
                outs.append(out.data[:, 0])
    finally:
        for m in drops:
            m.active = None
        g.train(was)
    return np.concatenate(outs, axis=0)


def infer_mask(g: Generator, x, gs: GrowthState, threshold: float = 0.5,
               mode: str = "deterministic") -> np.ndarray:
    """Binary uint8 mask (b, r, r): 1 where the head output is >= threshold."""
    return (predict_proba(g, x, gs, mode) >= threshold).astype(np.uint8)


def parameter_count(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


@dataclass
class Models:
    """Generator, optional discriminator and their growth state."""

    generator: Generator
    discriminator: Discriminator | None
    state: GrowthState
    arch: Architecture = field(repr=False, default=None)


def build_models(arch: Architecture, rng: Rng, with_discriminator: bool = True) -> Models:
    g = Generator(arch, rng.spawn("generator"))
    d = Discriminator(arch, rng.spawn("discriminator")) if with_discriminator else None
    return Models(g, d, initial_state(arch), arch)
