"""Full-reference image quality: PSNR, SSIM, GMSD and a feature-based perceptual distance.

Images are (H, W, C) arrays in [0, 1]. SSIM and GMSD work on Rec.601 luma by
default (``color="luma"``); ``color="rgb"`` averages the per-channel maps.
Their quality maps cover the valid filtering region only, so an SSIM map is
(H-10) x (W-10) and a GMS map (H-2) x (W-2); :meth:`QualityMap.padded` edge-pads
them back to H x W for display.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .errors import ConfigurationError, InputError, StorageError
from .features import FeatureExtractor
from .imagecore import as_image, gaussian_kernel

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
GMS_C = 0.0026  # 170 / 255^2
PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
PREWITT_Y = PREWITT_X.T.copy()
LPIPS_TAPS = ("relu1_2", "relu2_2", "relu3_4", "relu4_4", "relu5_4")


@dataclass
class QualityMap:
    kind: str  # "ssim" or "gms"
    values: np.ndarray
    window: int
    border: int  # rows/cols trimmed on each side relative to the input

    def padded(self) -> np.ndarray:
        return np.pad(self.values, self.border, mode="edge")


def _pair(sr, hr):
    sr, hr = as_image(sr, "sr"), as_image(hr, "hr")
    if sr.shape != hr.shape:
        raise InputError(f"sr {sr.shape} and hr {hr.shape} differ in shape")
    return sr, hr


def _planes(img: np.ndarray, color: str) -> list[np.ndarray]:
    if color == "luma":
        if img.shape[2] == 3:
            return [np.ascontiguousarray(img @ LUMA_WEIGHTS)]
        return [np.ascontiguousarray(img[:, :, 0])]
    if color == "rgb":
        return [np.ascontiguousarray(img[:, :, c]) for c in range(img.shape[2])]
    raise ConfigurationError(f"color mode must be 'luma' or 'rgb', got {color!r}")


def mse(sr, hr) -> float:
    sr, hr = _pair(sr, hr)
    return float(np.mean((sr - hr) ** 2))


def psnr(sr, hr, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all samples; ``math.inf`` when MSE is 0."""
    err = mse(sr, hr)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _ssim_plane(x, y, peak):
    window = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(a):
        return kernels.correlate_valid(np.ascontiguousarray(a), window)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(sr, hr, peak: float = 1.0, color: str = "luma") -> tuple[float, QualityMap]:
    sr, hr = _pair(sr, hr)
    if min(sr.shape[:2]) < SSIM_WINDOW:
        raise InputError(f"image {sr.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    maps = [_ssim_plane(a, b, peak) for a, b in zip(_planes(sr, color), _planes(hr, color))]
    smap = np.mean(maps, axis=0)
    return float(smap.mean()), QualityMap("ssim", smap, SSIM_WINDOW, SSIM_WINDOW // 2)


def gradient_magnitude(plane: np.ndarray) -> np.ndarray:
    gx = kernels.correlate_valid(plane, PREWITT_X)
    gy = kernels.correlate_valid(plane, PREWITT_Y)
    return np.sqrt(gx * gx + gy * gy)


def gmsd(sr, hr, c: float = GMS_C, color: str = "luma") -> tuple[float, QualityMap]:
    """Standard deviation of the gradient-magnitude-similarity map."""
    sr, hr = _pair(sr, hr)
    if min(sr.shape[:2]) < 3:
        raise InputError(f"image {sr.shape[:2]} smaller than the 3x3 gradient operator")
    maps = []
    for a, b in zip(_planes(sr, color), _planes(hr, color)):
        ga, gb = gradient_magnitude(a), gradient_magnitude(b)
        maps.append((2.0 * ga * gb + c) / (ga * ga + gb * gb + c))
    gms = np.mean(maps, axis=0)
    return float(gms.std()), QualityMap("gms", gms, 3, 1)


def local_deviation_map(qmap: QualityMap, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Gaussian-weighted local standard deviation of a map (per-window GMSD for display)."""
    k = gaussian_kernel(window, sigma)
    v = np.pad(qmap.values, window // 2, mode="edge")
    mean = kernels.correlate_valid(v, k)
    sq = kernels.correlate_valid(v * v, k)
    return np.sqrt(np.maximum(sq - mean * mean, 0.0))


def _to_batch(img: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)[None])).to(dtype)


def perceptual_distance(sr, hr, extractor: FeatureExtractor | None, taps: Sequence[str] = LPIPS_TAPS,
                        tap_weights: dict | None = None, eps: float = 1e-10) -> float:
    """LPIPS-style distance.

    For each tap the features are unit-normalized along channels at every
    pixel, the squared difference is weighted per channel (default weight 1),
    summed over channels and averaged over pixels; the tap results are summed.
    """
    if extractor is None:
        raise ConfigurationError("perceptual distance needs a feature extractor")
    sr, hr = _pair(sr, hr)
    if sr.shape[2] == 1:
        sr, hr = np.repeat(sr, 3, axis=2), np.repeat(hr, 3, axis=2)
    dtype = next(iter(extractor.parameters())).dtype
    with torch.no_grad():
        fa = extractor(_to_batch(sr, dtype), taps)
        fb = extractor(_to_batch(hr, dtype), taps)
    total = 0.0
    for tap in taps:
        a, b = fa[tap][0].double(), fb[tap][0].double()
        a = a / (torch.sqrt((a * a).sum(dim=0, keepdim=True)) + eps)
        b = b / (torch.sqrt((b * b).sum(dim=0, keepdim=True)) + eps)
        w = torch.ones(a.shape[0], dtype=torch.float64)
        if tap_weights and tap in tap_weights:
            w = torch.as_tensor(np.asarray(tap_weights[tap], dtype=np.float64))
        total += float((w[:, None, None] * (a - b) ** 2).sum(dim=0).mean())
    return total


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    gmsd: float
    lpips: float
    peak: float = 1.0

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "gmsd": self.gmsd, "lpips": self.lpips}


def evaluate(sr, hr, extractor: FeatureExtractor | None, peak: float = 1.0, color: str = "luma",
             with_maps: bool = False):
    """All four metrics for one image pair; optionally also the SSIM and GMS maps."""
    s, smap = ssim(sr, hr, peak, color)
    g, gmap = gmsd(sr, hr, color=color)
    report = MetricReport(psnr(sr, hr, peak), s, g, perceptual_distance(sr, hr, extractor), peak)
    if with_maps:
        return report, smap, gmap
    return report


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """(mean, population std) with pairwise summation; infinities propagate."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InputError("cannot aggregate an empty metric list")
    if np.isinf(arr).any():
        return float(arr.mean()), math.nan
    return float(arr.mean()), float(arr.std())


# ------------------------------------------------------------------ map output


def write_float_grid(path, values: np.ndarray) -> None:
    """Raw map: u32 height, u32 width (little-endian), then float32 row-major samples."""
    values = np.asarray(values, dtype="<f4")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", *values.shape))
            fh.write(values.tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write map {path}: {exc}") from exc


def read_float_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * h * w:
        raise StorageError(f"{path}: float grid size does not match its header")
    return np.frombuffer(data[8:], dtype="<f4").reshape(h, w).copy()


def false_color(values: np.ndarray, lo: float, hi: float, similar_high: bool = True) -> np.ndarray:
    """Blue for similar, red for dissimilar, through white; returns (H, W, 3) in [0, 1].

    ``similar_high`` says whether large values mean similar (SSIM, GMS) or not
    (local deviation maps).
    """
    t = np.clip((np.asarray(values, dtype=np.float64) - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    if similar_high:
        t = 1.0 - t  # t = 0 similar, 1 dissimilar
    rgb = np.empty(t.shape + (3,))
    low = t < 0.5
    u = np.where(low, t * 2.0, (t - 0.5) * 2.0)
    rgb[..., 0] = np.where(low, u, 1.0)
    rgb[..., 1] = np.where(low, u, 1.0 - u)
    rgb[..., 2] = np.where(low, 1.0, 1.0 - u)
    return rgb
