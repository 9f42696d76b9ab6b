"""Frozen VGG-style feature extractor with named ReLU taps.

Tap ``relu{i}_{j}`` is the ReLU after the j-th convolution of block i (blocks are
separated by 2x2 max-pooling), so ``relu5_4`` of the full VGG-19 layout is the
deepest tap. Weights come from a checkpoint file, an imported torchvision
VGG-19 state dict, or a fixed-seed random initialization for tests and
desk-scale runs.
"""

from __future__ import annotations

import re
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import ConfigurationError

VGG19_BLOCKS = ((64, 64), (128, 128), (256, 256, 256, 256), (512, 512, 512, 512), (512, 512, 512, 512))
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
_TAP = re.compile(r"^relu(\d+)_(\d+)$")


class FeatureExtractor(nn.Module):
    """Inputs are images in [0, 1], shape (B, 3, H, W); ImageNet normalization is applied inside."""

    def __init__(self, blocks: Sequence[Sequence[int]] = VGG19_BLOCKS, in_channels: int = 3,
                 normalize: bool = True):
        super().__init__()
        self.blocks = tuple(tuple(int(c) for c in b) for b in blocks)
        self.normalize = normalize
        self.convs = nn.ModuleDict()
        cin = in_channels
        for i, block in enumerate(self.blocks, 1):
            for j, cout in enumerate(block, 1):
                self.convs[f"conv{i}_{j}"] = nn.Conv2d(cin, cout, 3, 1, 1)
                cin = cout
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN[:in_channels]).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD[:in_channels]).view(1, -1, 1, 1))
        self.requires_grad_(False)
        self.eval()

    @property
    def tap_names(self) -> list[str]:
        return [f"relu{i}_{j}" for i, b in enumerate(self.blocks, 1) for j in range(1, len(b) + 1)]

    def tap_channels(self, tap: str) -> int:
        i, j = self.tap_index(tap)
        return self.blocks[i - 1][j - 1]

    def tap_index(self, tap: str) -> tuple[int, int]:
        m = _TAP.match(tap)
        if not m or tap not in self.tap_names:
            raise ConfigurationError(f"unknown feature tap {tap!r}; available: {', '.join(self.tap_names)}")
        return int(m.group(1)), int(m.group(2))

    def train(self, mode: bool = True):
        # always frozen; batch statistics are never used
        return super().train(False)

    def forward(self, x, taps: Sequence[str]) -> dict[str, torch.Tensor]:
        wanted = {t: self.tap_index(t) for t in taps}
        last = max(wanted.values())
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = {}
        for i, block in enumerate(self.blocks, 1):
            if i > 1:
                x = F.max_pool2d(x, 2)
            for j in range(1, len(block) + 1):
                x = torch.relu(self.convs[f"conv{i}_{j}"](x))
                name = f"relu{i}_{j}"
                if name in wanted:
                    out[name] = x
                if (i, j) == last:
                    return out
        return out

    # ------------------------------------------------------------ construction

    @classmethod
    def random(cls, width: float = 1.0, seed: int = 0, blocks: Sequence[Sequence[int]] = VGG19_BLOCKS,
               normalize: bool = True, gain: float = 1.0) -> "FeatureExtractor":
        """VGG layout with channel counts scaled by ``width`` and He-normal weights from ``seed``.

        ``gain`` multiplies every layer's weight scale; activations at depth k
        shrink roughly as ``gain**k``, which sets the magnitude of the feature
        losses relative to the pixel loss.
        """
        scaled = [[max(1, int(round(c * width))) for c in b] for b in blocks]
        fx = cls(scaled, normalize=normalize)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for conv in fx.convs.values():
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (gain * (2.0 / fan_in) ** 0.5))
                conv.bias.zero_()
        return fx

    def save(self, path) -> None:
        meta = {"kind": "feature_extractor", "blocks": [list(b) for b in self.blocks], "normalize": self.normalize}
        checkpoint.save(path, checkpoint.module_tensors(self, "extractor"), meta)

    @classmethod
    def from_checkpoint(cls, path) -> "FeatureExtractor":
        tensors, meta = checkpoint.load(path)
        if not meta or meta.get("kind") != "feature_extractor":
            raise ConfigurationError(f"{path} is not a feature-extractor checkpoint")
        fx = cls(meta["blocks"], normalize=meta.get("normalize", True))
        checkpoint.load_module(fx, tensors, "extractor")
        return fx

    @classmethod
    def from_torchvision_vgg19(cls, state_dict: Mapping[str, torch.Tensor]) -> "FeatureExtractor":
        """Import ``torchvision.models.vgg19().state_dict()`` weights (the ``features.N`` convs)."""
        fx = cls(VGG19_BLOCKS)
        conv_keys = sorted({int(k.split(".")[1]) for k in state_dict if k.startswith("features.") and
                            k.endswith(".weight")})
        names = list(fx.convs.keys())
        if len(conv_keys) < len(names):
            raise ConfigurationError(f"expected {len(names)} VGG-19 conv layers, found {len(conv_keys)}")
        with torch.no_grad():
            for name, idx in zip(names, conv_keys):
                fx.convs[name].weight.copy_(state_dict[f"features.{idx}.weight"])
                fx.convs[name].bias.copy_(state_dict[f"features.{idx}.bias"])
        return fx
