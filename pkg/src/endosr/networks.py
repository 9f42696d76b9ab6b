"""Attention U-Net generator, spatial attention block and conditional PatchGAN discriminator.

Layer notation: ``Ck`` is conv(k filters) -> batchnorm -> activation, ``CDk``
adds 50% dropout before the activation. Encoder convolutions are 4x4/stride 2
with leaky ReLU(0.2); decoder stages are 4x4/stride 2 transposed convolutions
with ReLU whose output is concatenated with the mirrored encoder feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError, NumericalError

LIFT = 8  # the U-Net works on an 8x-upsampled grid of the LR input
SAB_KEYS = ("theta.weight", "theta.bias", "phi.weight", "phi.bias", "g.weight", "g.bias")


# --------------------------------------------------------------------- attention


def sab_forward(x, weights: Mapping, max_positions: int | None = None):
    """Non-local spatial attention with a residual connection.

    ``x`` is (C, H, W) or (B, C, H, W); ``weights`` maps the names in
    ``SAB_KEYS`` to 1x1 convolution weights (C, C, 1, 1) and biases (C,).
    With positions flattened to rows::

        psi = relu(theta(x) @ phi(x)^T)            N x N
        S   = softmax_over_positions(psi @ g(x))   N x C, columns sum to 1
        out = x + N * S * g(x)                     elementwise, reshaped to C x H x W

    The factor N makes uniform attention pass ``g(x)`` through unchanged.
    If ``max_positions`` is set and H*W exceeds it, the projections are
    computed on a 2x average-pooled copy (repeatedly) and the attended
    features are upsampled back with nearest-neighbour before the residual add.
    """
    squeeze = False
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if x.dim() == 3:
        x, squeeze = x.unsqueeze(0), True
    if x.dim() != 4:
        raise ConfigurationError(f"attention input must be CxHxW or BxCxHxW, got {tuple(x.shape)}")
    b, c, h, w = x.shape
    params = {}
    for key in SAB_KEYS:
        if key not in weights:
            raise ConfigurationError(f"attention weights missing {key!r}")
        t = weights[key]
        t = torch.as_tensor(t, dtype=x.dtype)
        want = (c, c, 1, 1) if key.endswith("weight") else (c,)
        if tuple(t.shape) != want:
            raise ConfigurationError(f"attention {key} has shape {tuple(t.shape)}, expected {want}")
        params[key] = t

    pooled, factor = x, 1
    if max_positions is not None:
        while pooled.shape[2] * pooled.shape[3] > max_positions and min(pooled.shape[2:]) >= 2:
            pooled = F.avg_pool2d(pooled, 2, ceil_mode=True)
            factor *= 2
    n = pooled.shape[2] * pooled.shape[3]

    def project(name):
        y = F.conv2d(pooled, params[f"{name}.weight"], params[f"{name}.bias"])
        return y.flatten(2).transpose(1, 2)  # B x N x C

    theta, phi, g = project("theta"), project("phi"), project("g")
    psi = torch.relu(theta @ phi.transpose(1, 2))
    s = torch.softmax(psi @ g, dim=1)
    attended = (n * s * g).transpose(1, 2).reshape(b, c, pooled.shape[2], pooled.shape[3])
    if factor > 1:
        attended = F.interpolate(attended, scale_factor=factor, mode="nearest")[:, :, :h, :w]
    out = x + attended
    return out[0] if squeeze else out


def attention_map(x, weights: Mapping) -> torch.Tensor:
    """The softmax matrix S (B x N x C) of :func:`sab_forward`, for inspection."""
    if x.dim() == 3:
        x = x.unsqueeze(0)

    def project(name):
        return F.conv2d(x, weights[f"{name}.weight"], weights[f"{name}.bias"]).flatten(2).transpose(1, 2)

    theta, phi, g = project("theta"), project("phi"), project("g")
    return torch.softmax(torch.relu(theta @ phi.transpose(1, 2)) @ g, dim=1)


class SpatialAttention(nn.Module):
    def __init__(self, channels: int, max_positions: int | None = None):
        super().__init__()
        self.theta = nn.Conv2d(channels, channels, 1)
        self.phi = nn.Conv2d(channels, channels, 1)
        self.g = nn.Conv2d(channels, channels, 1)
        self.max_positions = max_positions

    def forward(self, x):
        return sab_forward(x, dict(self.named_parameters()), self.max_positions)


# --------------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorConfig:
    """Encoder C64-SAB-C128-C256-C512x5, decoder CD1024x3-C1024-C512-C256-C128 at ``base_filters=64``.

    ``depth`` is the number of encoder convolutions; the paper layout is 8.
    Channel counts scale with ``base_filters`` (capped at 8x). Decoder counts
    are channels after the skip concatenation.
    """

    scale: int = 8
    base_filters: int = 64
    depth: int = 8
    use_attention: bool = True
    in_channels: int = 3
    out_channels: int = 3
    dropout: float = 0.5
    n_dropout_layers: int = 3
    sab_max_positions: int | None = 4096

    def __post_init__(self):
        if self.scale < 1:
            raise ConfigurationError(f"scale must be >= 1, got {self.scale}")
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.dropout not in (0.0, 0.5):
            raise ConfigurationError(f"dropout rate must be 0 or 0.5, got {self.dropout}")
        if self.base_filters < 1:
            raise ConfigurationError("base_filters must be >= 1")

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_filters * min(2**i, 8) for i in range(self.depth)]

    @property
    def decoder_channels(self) -> list[int]:
        """Channels after each decoder stage's concatenation (e.g. 1024 ... 128)."""
        enc = self.encoder_channels
        return [2 * enc[self.depth - 2 - k] for k in range(self.depth - 1)]

    @property
    def min_lr_size(self) -> int:
        return math.ceil(2**self.depth / LIFT)

    def layer_specs(self) -> list[dict]:
        """Human-readable layer table (kind, filters, kernel, stride, activation, ...)."""
        specs = []
        enc = self.encoder_channels
        for i, k in enumerate(enc):
            specs.append(dict(kind="conv_down", filters=k, kernel=4, stride=2, activation="leaky_relu(0.2)",
                              batchnorm=0 < i < self.depth - 1, dropout_rate=0.0))
            if i == 0 and self.use_attention:
                specs.append(dict(kind="sab", filters=k, kernel=1, stride=1, activation=None,
                                  batchnorm=False, dropout_rate=0.0))
        for k, ch in enumerate(self.decoder_channels):
            specs.append(dict(kind="conv_up", filters=ch, kernel=4, stride=2, activation="relu", batchnorm=True,
                              dropout_rate=self.dropout if k < self.n_dropout_layers else 0.0,
                              skip_partner=self.depth - 2 - k))
        specs.append(dict(kind="output", filters=self.out_channels, kernel=4, stride=2, activation="tanh",
                          batchnorm=False, dropout_rate=0.0, resize_to=self.scale))
        return specs


class Dropout(nn.Module):
    """Dropout driven by an explicit ``torch.Generator`` so training is resumable bit-for-bit."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype, device=x.device) >= self.p
        return x * keep / (1.0 - self.p)


class DownBlock(nn.Module):
    def __init__(self, cin, cout, batchnorm: bool):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, 2, 1, bias=not batchnorm)
        self.norm = nn.BatchNorm2d(cout) if batchnorm else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class UpBlock(nn.Module):
    def __init__(self, cin, cout, dropout: float):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False)
        self.norm = nn.BatchNorm2d(cout)
        self.drop = Dropout(dropout)

    def forward(self, x, skip):
        y = torch.relu(self.drop(self.norm(self.conv(x))))
        return torch.cat([y, skip], dim=1)


class Generator(nn.Module):
    """LR image in [-1, 1] (B, C, h, w) -> SR image in [-1, 1] (B, C, r*h, r*w).

    The LR input is bicubic-lifted by 8, edge-padded on the bottom/right to a
    multiple of 2**depth, run through the U-Net and cropped back. For r = 8
    the final transposed convolution yields the output directly; for other r a
    learned resize stage (transposed conv, bilinear resize to r*h x r*w, 3x3
    conv) replaces it.
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder_channels
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for i, k in enumerate(enc):
            self.down.append(DownBlock(cin, k, batchnorm=0 < i < cfg.depth - 1))
            cin = k
        self.attention = SpatialAttention(enc[0], cfg.sab_max_positions) if cfg.use_attention else None
        self.up = nn.ModuleList()
        for k, ch in enumerate(cfg.decoder_channels):
            p = cfg.dropout if k < cfg.n_dropout_layers else 0.0
            self.up.append(UpBlock(cin, ch // 2, p))
            cin = ch
        if cfg.scale == LIFT:
            self.output = nn.ConvTranspose2d(cin, cfg.out_channels, 4, 2, 1)
            self.resize_conv = None
        else:
            self.output = nn.ConvTranspose2d(cin, enc[0], 4, 2, 1)
            self.resize_conv = nn.Conv2d(enc[0], cfg.out_channels, 3, 1, 1)

    def set_dropout_generator(self, gen: torch.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.generator = gen

    def forward(self, lr):
        cfg = self.cfg
        if lr.dim() != 4 or lr.shape[1] != cfg.in_channels:
            raise InputError(f"generator expects (B, {cfg.in_channels}, h, w), got {tuple(lr.shape)}")
        h, w = lr.shape[2:]
        if min(h, w) < cfg.min_lr_size:
            raise ConfigurationError(
                f"LR input {h}x{w} too small for a {cfg.depth}-level encoder; "
                f"minimum input size is {cfg.min_lr_size}x{cfg.min_lr_size}")
        gh, gw = LIFT * h, LIFT * w
        x = F.interpolate(lr, size=(gh, gw), mode="bicubic", align_corners=False)
        unit = 2**cfg.depth
        ph, pw = (-gh) % unit, (-gw) % unit
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i == 0 and self.attention is not None:
                x = self.attention(x)
            skips.append(x)
        x = skips.pop()
        for block in self.up:
            x = block(x, skips.pop())
        x = x[:, :, : gh // 2, : gw // 2]
        x = self.output(x)
        if self.resize_conv is not None:
            x = F.interpolate(torch.relu(x), size=(cfg.scale * h, cfg.scale * w), mode="bilinear",
                              align_corners=False)
            x = self.resize_conv(x)
        return torch.tanh(x)


# --------------------------------------------------------------------- discriminator


@dataclass(frozen=True)
class DiscriminatorConfig:
    """C64-C128-C256-C512 then a 1-channel conv and sigmoid; strides 2,2,2,1,1, padding 1."""

    base_filters: int = 64
    n_layers: int = 4
    image_channels: int = 3
    kernel: int = 4
    padding: int = 1

    @property
    def channels(self) -> list[int]:
        return [self.base_filters * min(2**i, 8) for i in range(self.n_layers)]

    @property
    def strides(self) -> list[int]:
        return [2] * (self.n_layers - 1) + [1, 1]

    def output_size(self, n: int) -> int:
        for s in self.strides:
            n = (n + 2 * self.padding - self.kernel) // s + 1
        return n

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for s in self.strides:
            rf += (self.kernel - 1) * jump
            jump *= s
        return rf


class Discriminator(nn.Module):
    """Scores (LR, candidate) pairs; LR is bicubic-upsampled to the candidate size and concatenated."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = 2 * cfg.image_channels
        strides = cfg.strides
        for i, k in enumerate(cfg.channels):
            layers.append(nn.Conv2d(cin, k, cfg.kernel, strides[i], cfg.padding, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(k))
            layers.append(nn.LeakyReLU(0.2))
            cin = k
        layers.append(nn.Conv2d(cin, 1, cfg.kernel, strides[-1], cfg.padding))
        self.body = nn.Sequential(*layers)

    def forward(self, lr, candidate):
        """Patch probability map (B, 1, m, m)."""
        if lr.dim() != 4 or candidate.dim() != 4 or lr.shape[:2] != candidate.shape[:2]:
            raise InputError(f"mismatched discriminator inputs {tuple(lr.shape)} / {tuple(candidate.shape)}")
        lh, lw = lr.shape[2:]
        ch, cw = candidate.shape[2:]
        if ch % lh or cw % lw or ch // lh != cw // lw:
            raise InputError(f"candidate {ch}x{cw} is not an integer multiple of LR {lh}x{lw}")
        cond = F.interpolate(lr, size=(ch, cw), mode="bicubic", align_corners=False)
        return torch.sigmoid(self.body(torch.cat([cond, candidate], dim=1)))

    def score(self, lr, candidate):
        """Per-sample mean of the patch map."""
        return self.forward(lr, candidate).mean(dim=(1, 2, 3))


# --------------------------------------------------------------------- init / gradients


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """Convs ~ N(0, 0.02), batchnorm scale ~ N(1, 0.02), all biases 0."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=generator) * 0.02)
                m.bias.zero_()
    return module


def backward(loss: torch.Tensor, module: nn.Module, retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradients of ``loss`` for every trainable parameter of ``module`` (None-free, finite)."""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], retain_graph=retain_graph, allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in layer {name}")
        out[name] = g
    return out


def check_finite_gradients(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in layer {name}")
