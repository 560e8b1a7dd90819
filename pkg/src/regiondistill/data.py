"""Synthetic road-scene generator and dataset I/O.

Scenes are h x w RGB images over a dark gradient background with thin,
elongated class-structured markings: solid lane lines, dashed lines, and
crossing bars. The two lane classes deliberately overlap in appearance
(brightness ranges intersect) so that telling them apart needs their
position and orientation, not just color. Generation is a pure function of
(spec, seed).

On disk a dataset is a directory with manifest.json, img_%05d.tns (float64
RGB in the tensor file format) and gt_%05d.pgm (binary P5, pixel value =
class index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensorio import read_pgm, read_tensor, write_pgm, write_tensor

GEOMETRY_KINDS = ("solid", "dashed", "bars")


@dataclass(frozen=True)
class ElementSpec:
    """One drawable class: geometry family plus its parameter ranges.

    For lanes (solid/dashed), position is the horizontal center as a
    fraction of width and angle is the horizontal drift in pixels per row.
    For crossing bars, position is the vertical band center and angle is
    unused. Width is the stroke width in pixels.
    """

    kind: str
    position: Tuple[float, float]
    angle: Tuple[float, float]
    width: Tuple[int, int]
    color: Tuple[float, float, float]
    color_jitter: float = 0.1


@dataclass(frozen=True)
class SceneSpec:
    h: int
    w: int
    n: int  # classes including background
    elements: Tuple[ElementSpec, ...]  # one per class 1..n-1, draw order
    noise: float = 0.05
    background: Tuple[float, float] = (0.08, 0.30)  # vertical gradient endpoints


@dataclass
class SceneSample:
    image: np.ndarray  # (h, w, 3) float64 in [0, 1]
    target: np.ndarray  # (h, w) int64, values < n


def default_scene_spec(h: int = 64, w: int = 64, n: int = 4, noise: float = 0.05) -> SceneSpec:
    """Background + left lane + right lane + crossing; extra classes cycle kinds.

    Lane brightnesses overlap so the classes are visually confusable; the
    left lane leans right and the right lane leans left, like perspective.
    """
    if n < 2:
        raise ConfigError(f"need at least 2 classes, got {n}")
    base = [
        ElementSpec(
            kind="solid",
            position=(0.18, 0.35),
            angle=(0.10, 0.30),
            width=(2, 3),
            color=(0.78, 0.76, 0.58),
            color_jitter=0.12,
        ),
        ElementSpec(
            kind="solid",
            position=(0.65, 0.82),
            angle=(-0.30, -0.10),
            width=(2, 3),
            color=(0.72, 0.72, 0.60),
            color_jitter=0.12,
        ),
        ElementSpec(
            kind="bars",
            position=(0.38, 0.62),
            angle=(0.0, 0.0),
            width=(2, 3),
            color=(0.85, 0.86, 0.92),
            color_jitter=0.08,
        ),
        ElementSpec(
            kind="dashed",
            position=(0.42, 0.58),
            angle=(-0.08, 0.08),
            width=(2, 3),
            color=(0.80, 0.70, 0.45),
            color_jitter=0.10,
        ),
    ]
    elements = tuple(base[(k - 1) % len(base)] for k in range(1, n))
    return validate_spec(SceneSpec(h=h, w=w, n=n, elements=elements, noise=noise))


def validate_spec(spec: SceneSpec) -> SceneSpec:
    if spec.n < 2:
        raise ConfigError(f"class count must be >= 2, got {spec.n}")
    if spec.n > 8:
        raise ConfigError(f"class count must be <= 8, got {spec.n}")
    if len(spec.elements) != spec.n - 1:
        raise ConfigError(
            f"need one element per non-background class: {spec.n - 1}, got {len(spec.elements)}"
        )
    if spec.h < 8 or spec.w < 8:
        raise ConfigError(f"scene must be at least 8x8, got {spec.h}x{spec.w}")
    for i, el in enumerate(spec.elements):
        if el.kind not in GEOMETRY_KINDS:
            raise ConfigError(f"element {i}: unknown geometry kind {el.kind!r}")
        for name, rng in (("position", el.position), ("angle", el.angle), ("width", el.width)):
            if rng[1] < rng[0]:
                raise ConfigError(f"element {i}: empty {name} range {rng}")
        if not (0.0 <= el.position[0] and el.position[1] <= 1.0):
            raise ConfigError(f"element {i}: position range {el.position} outside [0, 1]")
        if el.width[0] < 1:
            raise ConfigError(f"element {i}: width must be >= 1")
        if el.width[1] >= min(spec.h, spec.w):
            raise ConfigError(f"element {i}: geometry does not fit inside {spec.h}x{spec.w}")
    if spec.noise < 0.0:
        raise ConfigError(f"noise amplitude must be >= 0, got {spec.noise}")
    if spec.background[1] < spec.background[0]:
        raise ConfigError(f"empty background range {spec.background}")
    return spec


def _draw_lane(target, mask_value, rng, spec: SceneSpec, el: ElementSpec, dashed: bool):
    h, w = spec.h, spec.w
    xc = rng.uniform(*el.position) * w
    slope = rng.uniform(*el.angle)
    width = int(rng.integers(el.width[0], el.width[1] + 1))
    phase = int(rng.integers(0, 8)) if dashed else 0
    rows = []
    for y in range(h):
        if dashed and ((y + phase) // 4) % 2 == 1:
            continue
        x = xc + slope * (y - h / 2.0)
        x0 = int(np.floor(x - width / 2.0))
        x0 = max(0, min(w - width, x0))
        target[y, x0 : x0 + width] = mask_value
        rows.append(y)
    return bool(rows)


def _draw_bars(target, mask_value, rng, spec: SceneSpec, el: ElementSpec):
    h, w = spec.h, spec.w
    yc = rng.uniform(*el.position) * h
    thickness = int(rng.integers(el.width[0], el.width[1] + 1))
    gap = thickness + int(rng.integers(2, 5))
    x_lo = int(rng.uniform(0.05, 0.25) * w)
    x_hi = int(rng.uniform(0.75, 0.95) * w)
    drew = False
    for b in (-1, 0, 1):
        y0 = int(round(yc)) + b * gap - thickness // 2
        y0 = max(0, min(h - thickness, y0))
        target[y0 : y0 + thickness, x_lo:x_hi] = mask_value
        drew = drew or x_hi > x_lo
    return drew


def generate_scene(spec: SceneSpec, seed: int) -> SceneSample:
    """Render one sample; deterministic in (spec, seed).

    Classes are drawn in order 1..n-1; later classes occlude earlier ones
    in both the image and the target. Degenerate draws (a class ending up
    with zero pixels) are retried with fresh parameters.
    """
    validate_spec(spec)
    rng = np.random.default_rng(np.uint64(seed))
    h, w = spec.h, spec.w

    g0, g1 = spec.background
    top = rng.uniform(g0, g1)
    bottom = rng.uniform(g0, g1)
    ramp = np.linspace(top, bottom, h)[:, None, None]
    image = np.broadcast_to(ramp, (h, w, 3)).copy()
    if spec.noise > 0.0:
        image = image + rng.uniform(-spec.noise, spec.noise, size=(h, w, 3))

    target = np.zeros((h, w), dtype=np.int64)
    class_color = {}
    for k, el in enumerate(spec.elements, start=1):
        for attempt in range(100):
            scratch = target.copy()
            scratch[scratch == k] = 0
            if el.kind == "bars":
                ok = _draw_bars(scratch, k, rng, spec, el)
            else:
                ok = _draw_lane(scratch, k, rng, spec, el, dashed=(el.kind == "dashed"))
            if ok and (scratch == k).any():
                target = scratch
                break
        else:
            raise ConfigError(f"class {k}: geometry cannot fit after 100 attempts")
        jitter = rng.uniform(-el.color_jitter, el.color_jitter)
        class_color[k] = np.clip(np.asarray(el.color) + jitter, 0.0, 1.0)

    # paint classes over the background, later classes occlude earlier ones
    texture = rng.uniform(-0.03, 0.03, size=(h, w))
    for k in range(1, spec.n):
        mask = target == k
        if not mask.any():
            continue
        image[mask] = class_color[k][None, :] + texture[mask, None]
        if spec.noise > 0.0:
            image[mask] += rng.uniform(-spec.noise, spec.noise, size=(int(mask.sum()), 3))
    image = np.clip(image, 0.0, 1.0)
    return SceneSample(image=image, target=target)


def generate_dataset(spec: SceneSpec, seed: int, count: int) -> List[SceneSample]:
    """Per-sample seeds are seed XOR index, so samples are independent."""
    return [generate_scene(spec, np.uint64(seed) ^ np.uint64(i)) for i in range(count)]


def downsample_target(target, h_o: int, w_o: int) -> np.ndarray:
    """Majority vote per preimage cell.

    Ties are broken toward the smallest non-background class among the
    tied ones, falling back to background.
    """
    target = np.asarray(target, dtype=np.int64)
    if target.ndim != 2:
        raise ShapeError(f"target must be 2-D, got shape {target.shape}")
    h, w = target.shape
    if h_o > h or w_o > w or h_o < 1 or w_o < 1:
        raise ConfigError(f"target size {h_o}x{w_o} invalid for source {h}x{w}")
    n_vals = int(target.max()) + 1
    row_cells = (np.arange(h) * h_o) // h
    col_cells = (np.arange(w) * w_o) // w
    counts = np.zeros((h_o, w_o, n_vals), dtype=np.int64)
    np.add.at(
        counts,
        (row_cells[:, None], col_cells[None, :], target),
        1,
    )
    max_count = counts.max(axis=2, keepdims=True)
    tied = counts == max_count
    nonzero_tied = tied[:, :, 1:]
    any_nonzero = nonzero_tied.any(axis=2)
    smallest_nonzero = nonzero_tied.argmax(axis=2) + 1
    return np.where(any_nonzero, smallest_nonzero, 0).astype(np.int64)


# --- dataset directory I/O ---------------------------------------------------

@dataclass
class Dataset:
    n: int
    h: int
    w: int
    samples: List[SceneSample]


def write_dataset(samples: Sequence[SceneSample], path, n: int) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images, targets = [], []
    for i, sample in enumerate(samples):
        img_name = f"img_{i:05d}.tns"
        gt_name = f"gt_{i:05d}.pgm"
        write_tensor(path / img_name, sample.image)
        write_pgm(path / gt_name, sample.target.astype(np.uint8))
        images.append(img_name)
        targets.append(gt_name)
    h, w = (samples[0].image.shape[:2]) if samples else (0, 0)
    manifest = {"n": n, "h": h, "w": w, "count": len(samples), "images": images, "targets": targets}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"{manifest_path}: missing manifest")
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: corrupt manifest: {exc}") from exc
    try:
        n = int(manifest["n"])
        h = int(manifest["h"])
        w = int(manifest["w"])
        images = list(manifest["images"])
        targets = list(manifest["targets"])
        count = int(manifest["count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: malformed manifest: {exc}") from exc
    if len(images) != count or len(targets) != count:
        raise FormatError(f"{manifest_path}: manifest count disagrees with file lists")
    samples = []
    for img_name, gt_name in zip(images, targets):
        image = read_tensor(path / img_name)
        if image.ndim != 3 or image.shape != (h, w, 3):
            raise FormatError(f"{path / img_name}: image dims {image.shape} != ({h}, {w}, 3)")
        target = read_pgm(path / gt_name).astype(np.int64)
        if target.shape != (h, w):
            raise FormatError(f"{path / gt_name}: target dims {target.shape} != ({h}, {w})")
        if target.max() >= n:
            raise FormatError(f"{path / gt_name}: label {int(target.max())} exceeds n={n}")
        samples.append(SceneSample(image=image, target=target))
    return Dataset(n=n, h=h, w=w, samples=samples)
