"""Image containers, blur/resample/noise degradation and the bicubic baseline.

Images are numpy arrays of shape (H, W, C) with C in {1, 3}. Files and metrics
use the [0, 1] range; networks see [-1, 1] (see :func:`to_network_range`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import ConfigurationError, InputError, StorageError

KERNEL_SUM_TOL = 1e-6


def as_image(img, name: str = "image") -> np.ndarray:
    """Validate and return ``img`` as a float64 (H, W, C) array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InputError(f"{name} must be HxW or HxWxC with C in (1, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"{name} is empty: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite samples")
    return arr


def to_network_range(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def from_network_range(img: np.ndarray) -> np.ndarray:
    return np.clip((img + 1.0) * 0.5, 0.0, 1.0)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized ``size`` x ``size`` Gaussian."""
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ConfigurationError(f"gaussian sigma must be > 0, got {sigma}")
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _check_kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ConfigurationError(f"blur kernel must be 2-D with odd sides, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ConfigurationError("blur kernel has non-finite entries")
    if abs(k.sum() - 1.0) > KERNEL_SUM_TOL:
        raise ConfigurationError(f"blur kernel must sum to 1 (+-{KERNEL_SUM_TOL}), sums to {k.sum():.9g}")
    return k


@dataclass(frozen=True)
class DegradationConfig:
    """Blur kernel, integer scale factor, noise level and RNG seed of the LR synthesis."""

    scale: int = 8
    noise_sigma: float = 0.0
    seed: int = 0
    blur_kernel: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if int(self.scale) != self.scale or self.scale < 1:
            raise ConfigurationError(f"scale must be a positive integer, got {self.scale}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in 64 unsigned bits")
        if self.blur_kernel is not None:
            object.__setattr__(self, "blur_kernel", _check_kernel(self.blur_kernel))

    @property
    def kernel(self) -> np.ndarray:
        if self.blur_kernel is not None:
            return self.blur_kernel
        return default_blur_kernel(self.scale)


def default_blur_kernel(scale: int) -> np.ndarray:
    # 5x5 Gaussian whose width tracks the downsampling factor
    return gaussian_kernel(5, scale / 4.0)


def gaussian_blur(img, kernel) -> np.ndarray:
    """Convolve each channel with ``kernel``; borders replicate the edge pixels."""
    img = as_image(img)
    k = _check_kernel(kernel)
    if k.shape == (1, 1):
        return img.copy()
    ph, pw = k.shape[0] // 2, k.shape[1] // 2
    flipped = np.ascontiguousarray(k[::-1, ::-1])
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        padded = np.pad(img[:, :, c], ((ph, ph), (pw, pw)), mode="edge")
        out[:, :, c] = kernels.correlate_valid(np.ascontiguousarray(padded), flipped)
    return out


def cubic_weight(x, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resample_weights(n_in: int, n_out: int, antialias: bool = True):
    """Tap indices and weights mapping ``n_in`` samples onto ``n_out``.

    Returns ``(index, weight)`` of shape (n_out, taps). Indices are clamped to
    the valid range (edge replication) and each row of weights sums to 1.
    """
    if n_in < 1 or n_out < 1:
        raise InputError(f"resample sizes must be >= 1, got {n_in} -> {n_out}")
    ratio = n_in / n_out
    stretch = ratio if (antialias and ratio > 1.0) else 1.0
    support = 2.0 * stretch
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5
    first = np.floor(centers - support).astype(np.int64) + 1
    taps = int(np.ceil(2.0 * support)) + 1
    index = first[:, None] + np.arange(taps, dtype=np.int64)[None, :]
    weight = cubic_weight((index - centers[:, None]) / stretch)
    weight /= weight.sum(axis=1, keepdims=True)
    index = np.clip(index, 0, n_in - 1)
    return np.ascontiguousarray(index), np.ascontiguousarray(weight)


def resample_bicubic(img, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    img = as_image(img)
    if out_h < 1 or out_w < 1:
        raise InputError(f"output size must be >= 1x1, got {out_h}x{out_w}")
    h, w, c = img.shape
    if (out_h, out_w) == (h, w):
        return np.clip(img, 0.0, 1.0)
    rows_idx, rows_w = resample_weights(h, out_h, antialias)
    cols_idx, cols_w = resample_weights(w, out_w, antialias)
    flat = np.ascontiguousarray(img.reshape(h, w * c))
    tmp = kernels.resample_rows(flat, rows_idx, rows_w).reshape(out_h, w, c)
    tmp = np.ascontiguousarray(tmp.transpose(1, 0, 2).reshape(w, out_h * c))
    out = kernels.resample_rows(tmp, cols_idx, cols_w).reshape(out_w, out_h, c).transpose(1, 0, 2)
    return np.clip(out, 0.0, 1.0)


def noise_field(shape, sigma: float, seed: int) -> np.ndarray:
    """The raw N(0, sigma^2) field that :func:`add_gaussian_noise` adds."""
    if sigma < 0:
        raise ConfigurationError(f"noise sigma must be >= 0, got {sigma}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    return rng.normal(0.0, sigma, size=shape) if sigma > 0 else np.zeros(shape)


def add_gaussian_noise(img, sigma: float, seed: int) -> np.ndarray:
    img = as_image(img)
    if sigma < 0:
        raise ConfigurationError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    return np.clip(img + noise_field(img.shape, sigma, seed), 0.0, 1.0)


def divisible_crop(img, scale: int) -> np.ndarray:
    """Center-crop so both sides are multiples of ``scale``."""
    img = as_image(img)
    h, w = img.shape[:2]
    if h < scale or w < scale:
        raise InputError(f"image {h}x{w} is smaller than the scale factor {scale}")
    nh, nw = h - h % scale, w - w % scale
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top : top + nh, left : left + nw]


def degrade(hr, cfg: DegradationConfig) -> np.ndarray:
    """blur -> antialiased bicubic downsample by ``cfg.scale`` -> additive noise."""
    hr = divisible_crop(hr, cfg.scale)
    h, w = hr.shape[:2]
    blurred = gaussian_blur(hr, cfg.kernel)
    lr = resample_bicubic(blurred, h // cfg.scale, w // cfg.scale, antialias=True)
    return add_gaussian_noise(lr, cfg.noise_sigma, cfg.seed)


def bicubic_upscale(lr, scale: int) -> np.ndarray:
    """The bicubic baseline: plain Catmull-Rom upsampling by ``scale``."""
    lr = as_image(lr)
    return resample_bicubic(lr, lr.shape[0] * scale, lr.shape[1] * scale, antialias=False)


def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read image {path}: {exc}") from exc
    return as_image(arr, str(path))


def image_size(path) -> tuple[int, int]:
    """(height, width) from the file header without decoding pixels."""
    try:
        with Image.open(path) as im:
            w, h = im.size
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read image {path}: {exc}") from exc
    return h, w


def to_uint8(img) -> np.ndarray:
    img = as_image(img)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img) -> None:
    path = Path(path)
    data = to_uint8(img)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(path, format="PNG")
    except OSError as exc:
        raise StorageError(f"cannot write image {path}: {exc}") from exc
