"""Areas-of-interest: per-class masks dilated from ground-truth labels.

A label map is smoothed with a uniform averaging kernel (zero padding) and
thresholded strictly above zero, which is exactly binary dilation by the
kernel footprint. The resulting masks are a superset of the labels and may
overlap across classes. Masks are matched to a feature resolution by
OR-pooling over each feature cell's preimage, so any class present at full
resolution stays present at every coarser resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensorio import write_pgm


@dataclass
class LabelMaps:
    """One-hot ground-truth label maps, class 0 = background."""

    n: int
    maps: np.ndarray  # (h, w, n) float64 in {0, 1}, exactly one 1 per pixel


@dataclass
class AoiMasks:
    """Binary per-class region masks at label and, optionally, feature resolution."""

    n: int
    kernel_size: int
    maps: np.ndarray  # (h, w, n) float64 in {0, 1}; classes may overlap
    present: np.ndarray  # (n,) bool
    feature_maps: Optional[np.ndarray] = None  # (h_f, w_f, n) once downsampled


def one_hot(target, n: int) -> LabelMaps:
    """Encode a class-index map (h, w) as one-hot maps (h, w, n)."""
    target = np.asarray(target)
    if target.ndim != 2:
        raise ShapeError(f"class-index map must be 2-D, got shape {target.shape}")
    if n < 1:
        raise ConfigError(f"class count must be >= 1, got {n}")
    if target.min() < 0 or target.max() >= n:
        raise IndexError(f"class indices must lie in 0..{n - 1}")
    maps = np.zeros(target.shape + (n,), dtype=np.float64)
    np.put_along_axis(maps, target[..., None].astype(np.int64), 1.0, axis=2)
    return LabelMaps(n=n, maps=maps)


def _box_counts(binary: np.ndarray, kernel_size: int) -> np.ndarray:
    """Per-pixel count of ones inside the centered k x k window (zero padded)."""
    h, w = binary.shape[:2]
    r = kernel_size // 2
    cum = np.zeros((h + 1, w + 1) + binary.shape[2:], dtype=np.int64)
    cum[1:, 1:] = binary.astype(np.int64).cumsum(axis=0).cumsum(axis=1)
    top = np.clip(np.arange(h) - r, 0, h)
    bot = np.clip(np.arange(h) + r + 1, 0, h)
    left = np.clip(np.arange(w) - r, 0, w)
    right = np.clip(np.arange(w) + r + 1, 0, w)
    return (
        cum[bot][:, right]
        - cum[top][:, right]
        - cum[bot][:, left]
        + cum[top][:, left]
    )


def generate_aoi(labels: LabelMaps, kernel_size: int = 5) -> AoiMasks:
    """Dilate each class map by the kernel footprint (full resolution).

    Equivalent to smoothing with an all-ones averaging kernel under zero
    padding and keeping everything strictly above zero.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    counts = _box_counts(labels.maps > 0.0, kernel_size)
    maps = (counts > 0).astype(np.float64)
    present = maps.any(axis=(0, 1))
    return AoiMasks(n=labels.n, kernel_size=kernel_size, maps=maps, present=present)


def downsample_aoi(aoi: AoiMasks, h_f: int, w_f: int) -> AoiMasks:
    """OR-pool masks onto an (h_f, w_f) grid and fill feature_maps/present.

    Each full-resolution pixel (i, j) belongs to cell (i*h_f//h, j*w_f//w);
    a cell is set for class k iff any covered pixel has the mask set.
    """
    h, w, _ = aoi.maps.shape
    if h_f > h or w_f > w:
        raise ConfigError(f"target {h_f}x{w_f} larger than source {h}x{w}")
    if h_f < 1 or w_f < 1:
        raise ConfigError(f"target size must be >= 1, got {h_f}x{w_f}")
    row_cells = (np.arange(h) * h_f) // h
    col_cells = (np.arange(w) * w_f) // w
    row_starts = np.searchsorted(row_cells, np.arange(h_f))
    col_starts = np.searchsorted(col_cells, np.arange(w_f))
    counts = np.add.reduceat(aoi.maps > 0.0, row_starts, axis=0)
    counts = np.add.reduceat(counts, col_starts, axis=1)
    feature_maps = (counts > 0).astype(np.float64)
    present = feature_maps.any(axis=(0, 1))
    return AoiMasks(
        n=aoi.n,
        kernel_size=aoi.kernel_size,
        maps=aoi.maps,
        present=present,
        feature_maps=feature_maps,
    )


def export_aoi_pgm(aoi: AoiMasks, directory, prefix: str = "aoi") -> list:
    """Dump each class mask as a 0/255 PGM image for eyeballing."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(aoi.n):
        path = directory / f"{prefix}_class{k}.pgm"
        write_pgm(path, (aoi.maps[:, :, k] > 0).astype(np.uint8) * 255)
        paths.append(path)
    return paths
