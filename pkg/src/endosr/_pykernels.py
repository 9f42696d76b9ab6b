"""Pure numpy implementations of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def correlate_valid(img, kernel):
    img = np.ascontiguousarray(img, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if kh > img.shape[0] or kw > img.shape[1]:
        raise ValueError("kernel larger than image")
    windows = np.lib.stride_tricks.sliding_window_view(img, (kh, kw))
    return np.einsum("ijab,ab->ij", windows, kernel)


def resample_rows(src, index, weight):
    src = np.ascontiguousarray(src, dtype=np.float64)
    return np.einsum("ik,ikj->ij", weight, src[index])


def signed_rank_tail_counts(ranks, w_obs, tol=1e-9):
    ranks = np.asarray(ranks, dtype=np.float64)
    n = ranks.size
    if n > 30:
        raise ValueError("exact enumeration limited to n <= 30")
    ge = le = two = 0
    # chunk over the high bits so memory stays bounded for n up to ~24
    low = min(n, 16)
    low_masks = np.arange(1 << low, dtype=np.int64)
    low_bits = (low_masks[:, None] >> np.arange(low)) & 1
    low_w = (2 * low_bits - 1) @ ranks[:low]
    aw = abs(w_obs)
    for high in range(1 << (n - low)):
        hb = (high >> np.arange(n - low)) & 1
        w = low_w + (2 * hb - 1) @ ranks[low:]
        ge += int(np.count_nonzero(w >= w_obs - tol))
        le += int(np.count_nonzero(w <= w_obs + tol))
        two += int(np.count_nonzero(np.abs(w) >= aw - tol))
    return ge, le, two, 1 << n
