"""Shared independent oracles for the test suite.

These are deliberately naive (explicit loops) and stay independent of the
library code paths they verify.
"""

import numpy as np
import pytest

from regiondistill.aoi import AoiMasks


def conv2d_loops(x, kernel, bias, stride=1, pad=0):
    """Nested-loop convolution oracle, summation order (di, dj, cin)."""
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    xp = np.zeros((hp, wp, cin))
    xp[pad : pad + h, pad : pad + w] = x
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    out = np.zeros((h_out, w_out, cout))
    for i in range(h_out):
        for j in range(w_out):
            for co in range(cout):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, ci] * kernel[di, dj, ci, co]
                out[i, j, co] = acc + bias[co]
    return out


def dilate_loops(binary_map, kernel_size):
    """Brute-force binary dilation by a k x k footprint (odd k)."""
    h, w = binary_map.shape
    r = kernel_size // 2
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            lo_i, hi_i = max(0, i - r), min(h, i + r + 1)
            lo_j, hi_j = max(0, j - r), min(w, j + r + 1)
            if binary_map[lo_i:hi_i, lo_j:hi_j].any():
                out[i, j] = 1.0
    return out


def moments_loops(features, mask, eps=1e-6):
    """Per-position loop oracle for masked mean/variance/third moments."""
    coords = [(i, j) for i in range(mask.shape[0]) for j in range(mask.shape[1]) if mask[i, j]]
    c = features.shape[2]
    if not coords:
        return np.zeros(c), np.zeros(c), np.zeros(c)
    m = len(coords)
    mu1 = np.zeros(c)
    for i, j in coords:
        mu1 += features[i, j]
    mu1 /= m
    mu2 = np.zeros(c)
    for i, j in coords:
        mu2 += (features[i, j] - mu1) ** 2
    mu2 /= m
    mu3 = np.zeros(c)
    for i, j in coords:
        mu3 += ((features[i, j] - mu1) / (mu2 + eps)) ** 3
    mu3 /= m
    return mu1, mu2, mu3


def random_feature_masks(rng, h, w, n, min_region=1):
    """Random binary class masks at feature resolution with known presence."""
    masks = np.zeros((h, w, n))
    for k in range(n):
        count = int(rng.integers(min_region, h * w + 1))
        if rng.random() < 0.15 and min_region == 0:
            continue  # leave the class absent
        idx = rng.choice(h * w, size=max(count, min_region), replace=False)
        flat = masks[:, :, k].reshape(-1)
        flat[idx] = 1.0
    return masks


def aoi_from_feature_masks(masks, kernel_size=5):
    """Wrap ready-made feature-resolution masks in an AoiMasks instance."""
    present = masks.any(axis=(0, 1))
    return AoiMasks(
        n=masks.shape[2],
        kernel_size=kernel_size,
        maps=masks,
        present=present,
        feature_maps=masks,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
