import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from endosr.errors import ConfigurationError, InputError, StorageError
from endosr.imagecore import (DegradationConfig, add_gaussian_noise, bicubic_upscale, cubic_weight, degrade,
                              divisible_crop, gaussian_blur, gaussian_kernel, noise_field, read_png,
                              resample_bicubic, resample_weights, to_uint8, write_png)


def brute_convolve(img, k):
    """Direct convolution with clamped (edge-replicated) source indices."""
    h, w, c = img.shape
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros_like(img)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for u in range(kh):
                    for v in range(kw):
                        si = min(max(i - (u - ph), 0), h - 1)
                        sj = min(max(j - (v - pw), 0), w - 1)
                        acc += k[u, v] * img[si, sj, ch]
                out[i, j, ch] = acc
    return out


def keys_cubic(x):
    x = abs(x)
    if x <= 1:
        return 1.5 * x**3 - 2.5 * x**2 + 1
    if x < 2:
        return -0.5 * x**3 + 2.5 * x**2 - 4 * x + 2
    return 0.0


def brute_resample_1d(v, n_out, antialias):
    """Kernel-sum evaluation of one output sample at a time."""
    n_in = len(v)
    ratio = n_in / n_out
    s = ratio if antialias and ratio > 1 else 1.0
    out = []
    for o in range(n_out):
        center = (o + 0.5) * ratio - 0.5
        num = den = 0.0
        for i in range(math.floor(center - 2 * s) - 1, math.ceil(center + 2 * s) + 2):
            wt = keys_cubic((i - center) / s)
            num += wt * v[min(max(i, 0), n_in - 1)]
            den += wt
        out.append(num / den)
    return np.array(out)


def brute_resample(img, oh, ow, antialias):
    h, w, c = img.shape
    tmp = np.stack([np.stack([brute_resample_1d(img[:, j, ch], oh, antialias) for j in range(w)], 1)
                    for ch in range(c)], 2)
    out = np.stack([np.stack([brute_resample_1d(tmp[i, :, ch], ow, antialias) for i in range(oh)], 0)
                    for ch in range(c)], 2)
    return np.clip(out, 0, 1)


def test_constant_image_survives_blur():
    img = np.full((12, 9, 3), 0.5)
    k = gaussian_kernel(5, 1.3)
    np.testing.assert_allclose(gaussian_blur(img, k), img, atol=1e-12)


def test_identity_kernel():
    img = np.random.default_rng(0).random((7, 5, 3))
    np.testing.assert_array_equal(gaussian_blur(img, [[1.0]]), img)


def test_blur_matches_nested_loops_on_impulse():
    img = np.zeros((9, 9, 1))
    img[4, 4] = 1.0
    k = gaussian_kernel(5, 1.0)
    np.testing.assert_allclose(gaussian_blur(img, k), brute_convolve(img, k), atol=1e-14)


def test_blur_asymmetric_kernel_is_a_convolution():
    rng = np.random.default_rng(1)
    img = rng.random((8, 6, 3))
    k = rng.random((3, 5))
    k /= k.sum()
    np.testing.assert_allclose(gaussian_blur(img, k), brute_convolve(img, k), atol=1e-13)


def test_blur_preserves_mean_on_periodic_interior():
    rng = np.random.default_rng(2)
    img = np.pad(rng.random((20, 20, 1)) * 0.2 + 0.4, ((6, 6), (6, 6), (0, 0)), constant_values=0.5)
    out = gaussian_blur(img, gaussian_kernel(5, 2.0))
    assert abs(out.mean() - img.mean()) < 1e-5


@pytest.mark.parametrize("kernel", [np.ones((2, 2)) / 4, np.ones((3, 3)) / 8, np.ones((3, 4)) / 12])
def test_bad_kernels_rejected(kernel):
    with pytest.raises(ConfigurationError):
        gaussian_blur(np.zeros((4, 4, 1)), kernel)


def test_cubic_weight_interpolates():
    np.testing.assert_allclose(cubic_weight([0, 1, 2, 2.5]), [1, 0, 0, 0], atol=1e-15)
    xs = np.linspace(-1, 1, 5)
    # partition of unity at integer offsets
    for t in (0.1, 0.37, 0.5):
        assert math.isclose(sum(cubic_weight(t - k) for k in range(-2, 3)), 1.0, abs_tol=1e-12)
    assert np.all(np.isfinite(cubic_weight(xs)))


def test_resample_weights_rows_sum_to_one():
    for n_in, n_out in [(16, 2), (10, 7), (5, 40), (1024, 128)]:
        idx, wt = resample_weights(n_in, n_out)
        np.testing.assert_allclose(wt.sum(axis=1), 1.0, atol=1e-12)
        assert idx.min() >= 0 and idx.max() < n_in


def test_ramp_downsample_matches_kernel_sum():
    ramp = np.tile(np.linspace(0, 1, 4)[None, :, None], (4, 1, 1))
    got = resample_bicubic(ramp, 2, 2, antialias=True)
    np.testing.assert_allclose(got, brute_resample(ramp, 2, 2, True), atol=1e-12)


@pytest.mark.parametrize("shape,out", [((9, 13, 3), (4, 5)), ((6, 6, 1), (15, 9)), ((12, 10, 3), (12, 3))])
@pytest.mark.parametrize("antialias", [True, False])
def test_resample_matches_kernel_sum(shape, out, antialias):
    img = np.random.default_rng(3).random(shape)
    got = resample_bicubic(img, *out, antialias=antialias)
    np.testing.assert_allclose(got, brute_resample(img, *out, antialias), atol=1e-12)


def test_resample_identity():
    img = np.random.default_rng(4).random((11, 7, 3))
    np.testing.assert_allclose(resample_bicubic(img, 11, 7), img, atol=1e-6)


def test_resample_output_clamped():
    img = np.zeros((8, 8, 1))
    img[::2] = 1.0
    out = resample_bicubic(img, 29, 29, antialias=False)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_upscale_constant():
    img = np.full((5, 4, 3), 0.3)
    np.testing.assert_allclose(bicubic_upscale(img, 8), 0.3, atol=1e-12)


def test_noise_zero_sigma_identity():
    img = np.random.default_rng(5).random((6, 6, 3))
    np.testing.assert_array_equal(add_gaussian_noise(img, 0.0, 9), img)


def test_noise_is_seeded():
    img = np.full((16, 16, 3), 0.5)
    a = add_gaussian_noise(img, 0.05, 123)
    b = add_gaussian_noise(img, 0.05, 123)
    c = add_gaussian_noise(img, 0.05, 124)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_noise_moments():
    n = noise_field((256, 256, 1), 0.1, 2024)
    assert abs(n.mean()) < 0.005
    assert abs(n.std() - 0.1) < 0.01
    img = np.full((256, 256, 1), 0.5)
    out = add_gaussian_noise(img, 0.1, 2024)
    np.testing.assert_allclose(out, np.clip(img + n, 0, 1))


def test_negative_noise_rejected():
    with pytest.raises(ConfigurationError):
        add_gaussian_noise(np.zeros((2, 2, 1)), -0.1, 0)
    with pytest.raises(ConfigurationError):
        DegradationConfig(noise_sigma=-1.0)


@pytest.mark.parametrize("size,scale,lr", [(1024, 8, 128), (1020, 10, 102), (1020, 12, 85), (1024, 12, 85)])
def test_degrade_dimensions(size, scale, lr):
    hr = np.full((size, size, 3), 0.25)
    out = degrade(hr, DegradationConfig(scale=scale))
    assert out.shape == (lr, lr, 3)


def test_degrade_composition_order():
    rng = np.random.default_rng(6)
    hr = rng.random((40, 48, 3))
    cfg = DegradationConfig(scale=4, noise_sigma=0.02, seed=77)
    manual = add_gaussian_noise(resample_bicubic(gaussian_blur(hr, cfg.kernel), 10, 12), 0.02, 77)
    np.testing.assert_array_equal(degrade(hr, cfg), manual)
    assert degrade(hr, cfg).tobytes() == degrade(hr, cfg).tobytes()


def test_degrade_too_small():
    with pytest.raises(InputError):
        degrade(np.zeros((7, 7, 3)), DegradationConfig(scale=8))


def test_divisible_crop_is_centered():
    img = np.arange(13 * 11, dtype=float).reshape(13, 11, 1) / 200
    out = divisible_crop(img, 4)
    assert out.shape == (12, 8, 1)
    np.testing.assert_array_equal(out, img[0:12, 1:9])


def test_default_kernel_tracks_scale():
    k8 = DegradationConfig(scale=8).kernel
    np.testing.assert_allclose(k8, gaussian_kernel(5, 2.0))
    assert k8.shape == (5, 5)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(7).random((5, 6, 3))
    write_png(tmp_path / "a" / "x.png", img)
    back = read_png(tmp_path / "a" / "x.png")
    np.testing.assert_array_equal(to_uint8(back), to_uint8(img))
    with pytest.raises(StorageError):
        read_png(tmp_path / "missing.png")


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), oh=st.integers(1, 12), ow=st.integers(1, 12),
       seed=st.integers(0, 2**16))
def test_resample_finite_and_bounded(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w, 3))
    out = resample_bicubic(img, oh, ow)
    assert out.shape == (oh, ow, 3)
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1
