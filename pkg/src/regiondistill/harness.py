"""Experiment orchestration: teacher pretraining, student distillation runs,
evaluation, and artifact export.

Configs are flat ``key = value`` text files with dotted keys and ``#``
comments. One experiment = one dataset + one pretrained teacher + one
student run per (variant, seed); seeds vary the student initialization and
the sample order, never the data or the teacher, so rows with the same
seed form paired comparisons across variants.

Everything a run produces lands under the output directory: metrics.csv
(one row per variant x seed), summary.csv (per-variant median/min/max),
losses/*.csv curves, graphs/*.json affinity dumps for three fixed test
samples, preds/* prediction images, and checkpoints.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import distill, model
from .aoi import AoiMasks, LabelMaps, downsample_aoi, generate_aoi, one_hot
from .data import (
    Dataset,
    SceneSpec,
    default_scene_spec,
    downsample_target,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .errors import ConfigError, ContractError
from .metrics import F1Score, confusion_matrix, f1_from_confusion, iou_from_confusion
from .model import (
    LossConfig,
    Network,
    NetworkConfig,
    TapPairing,
    TeacherSignals,
    build_network,
    load_checkpoint,
    parse_layers,
    predict,
    save_checkpoint,
    teacher_signals,
    train_step,
)
from .tensorio import write_pgm, write_ppm

VARIANTS = ("none", "mu1", "mu2", "mu3", "moments", "attention", "full", "kd")
ABLATION_VARIANTS = VARIANTS
DEFAULT_VARIANTS = ("none", "full")
GRAPH_SAMPLE_COUNT = 3

CSV_COMMENT = (
    "# regiondistill metrics. F1 of a class absent from both prediction and "
    "ground truth is vacuous and reported as 1."
)

# distinct render colors for prediction images, background first
PALETTE = np.array(
    [
        (40, 40, 40),
        (230, 70, 70),
        (70, 130, 235),
        (245, 220, 80),
        (80, 200, 130),
        (200, 90, 210),
        (90, 210, 210),
        (240, 150, 60),
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec
    train_count: int = 200
    val_count: int = 20
    test_count: int = 50
    data_seed: int = 9000
    teacher: NetworkConfig = None  # filled by default_config when omitted
    student_layers: Tuple[model.LayerSpec, ...] = None
    student_taps: Tuple[int, ...] = (1, 2)
    pairing: TapPairing = TapPairing(pairs=((0, 0), (1, 1)))
    alpha1: float = 0.1
    alpha2: float = 0.1
    moment_orders: Tuple[int, ...] = (1, 2, 3)
    attention: bool = True
    kd_temperature: float = 4.0
    lr: float = 0.01
    teacher_steps: int = 3000
    student_steps: int = 1500
    background_weight: float = 0.4
    aoi_kernel: int = 5
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)
    out_dir: str = "runs/default"
    teacher_miou_floor: float = 0.6
    log_interval: int = 100

    def validate(self) -> "ExperimentConfig":
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("alpha1/alpha2 must be >= 0")
        if self.teacher_steps < 0 or self.student_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.kd_temperature <= 0:
            raise ConfigError("kd temperature must be > 0")
        if any(r not in (1, 2, 3) for r in self.moment_orders):
            raise ConfigError(f"moment orders must be within 1,2,3: {self.moment_orders}")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("train/test counts must be >= 1")
        return self

    def student_config(self, seed: int) -> NetworkConfig:
        return NetworkConfig(
            layers=self.student_layers,
            n_classes=self.scene.n,
            taps=self.student_taps,
            seed=seed,
        )


def default_config(**overrides) -> ExperimentConfig:
    scene = default_scene_spec()
    cfg = ExperimentConfig(
        scene=scene,
        teacher=model.default_teacher_config(n_classes=scene.n),
        student_layers=model.default_student_config(n_classes=scene.n).layers,
    )
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


# --- config file parsing ------------------------------------------------------

def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _parse_int_list(value: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def _parse_pairing(value: str) -> TapPairing:
    pairs = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        s, sep, t = part.partition(":")
        if not sep:
            raise ConfigError(f"pairing entries look like S:T, got {part!r}")
        pairs.append((int(s), int(t)))
    return TapPairing(pairs=tuple(pairs))


def config_from_mapping(values: Dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from flat dotted keys, defaults elsewhere."""
    cfg = default_config()
    scene_kwargs = {"h": cfg.scene.h, "w": cfg.scene.w, "n": cfg.scene.n, "noise": cfg.scene.noise}
    teacher = cfg.teacher
    updates: Dict = {}

    handlers = {
        "scene.h": lambda v: scene_kwargs.__setitem__("h", int(v)),
        "scene.w": lambda v: scene_kwargs.__setitem__("w", int(v)),
        "scene.n": lambda v: scene_kwargs.__setitem__("n", int(v)),
        "scene.noise": lambda v: scene_kwargs.__setitem__("noise", float(v)),
        "data.train": lambda v: updates.__setitem__("train_count", int(v)),
        "data.val": lambda v: updates.__setitem__("val_count", int(v)),
        "data.test": lambda v: updates.__setitem__("test_count", int(v)),
        "data.seed": lambda v: updates.__setitem__("data_seed", int(v)),
        "teacher.layers": lambda v: updates.__setitem__("_teacher_layers", parse_layers(v)),
        "teacher.taps": lambda v: updates.__setitem__("_teacher_taps", _parse_int_list(v)),
        "teacher.seed": lambda v: updates.__setitem__("_teacher_seed", int(v)),
        "teacher.steps": lambda v: updates.__setitem__("teacher_steps", int(v)),
        "student.layers": lambda v: updates.__setitem__("student_layers", parse_layers(v)),
        "student.taps": lambda v: updates.__setitem__("student_taps", _parse_int_list(v)),
        "student.steps": lambda v: updates.__setitem__("student_steps", int(v)),
        "pairing": lambda v: updates.__setitem__("pairing", _parse_pairing(v)),
        "loss.alpha1": lambda v: updates.__setitem__("alpha1", float(v)),
        "loss.alpha2": lambda v: updates.__setitem__("alpha2", float(v)),
        "loss.moments": lambda v: updates.__setitem__("moment_orders", _parse_int_list(v)),
        "loss.attention": lambda v: updates.__setitem__("attention", _parse_bool(v)),
        "loss.kd_temperature": lambda v: updates.__setitem__("kd_temperature", float(v)),
        "loss.background_weight": lambda v: updates.__setitem__("background_weight", float(v)),
        "aoi.kernel": lambda v: updates.__setitem__("aoi_kernel", int(v)),
        "train.lr": lambda v: updates.__setitem__("lr", float(v)),
        "train.log_interval": lambda v: updates.__setitem__("log_interval", int(v)),
        "eval.teacher_miou_floor": lambda v: updates.__setitem__("teacher_miou_floor", float(v)),
        "seeds": lambda v: updates.__setitem__("seeds", _parse_int_list(v)),
        "out": lambda v: updates.__setitem__("out_dir", v),
    }
    for key, value in values.items():
        handler = handlers.get(key)
        if handler is None:
            raise ConfigError(f"unknown config key {key!r}")
        handler(value)

    scene = default_scene_spec(**scene_kwargs)
    teacher = NetworkConfig(
        layers=updates.pop("_teacher_layers", teacher.layers),
        n_classes=scene.n,
        taps=updates.pop("_teacher_taps", teacher.taps),
        seed=updates.pop("_teacher_seed", teacher.seed),
    )
    student_layers = updates.pop("student_layers", cfg.student_layers)
    cfg = replace(cfg, scene=scene, teacher=teacher, student_layers=student_layers, **updates)
    return cfg.validate()


def load_config(path=None, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    values: Dict[str, str] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    if overrides:
        values.update(overrides)
    return config_from_mapping(values)


def config_echo(cfg: ExperimentConfig) -> str:
    """Render the effective configuration back as config-file text."""
    layers = lambda ls: ",".join(f"{s.out_channels}x{s.kernel_size}x{s.stride}" for s in ls)
    ints = lambda xs: ",".join(str(x) for x in xs)
    lines = [
        f"scene.h = {cfg.scene.h}",
        f"scene.w = {cfg.scene.w}",
        f"scene.n = {cfg.scene.n}",
        f"scene.noise = {cfg.scene.noise!r}",
        f"data.train = {cfg.train_count}",
        f"data.val = {cfg.val_count}",
        f"data.test = {cfg.test_count}",
        f"data.seed = {cfg.data_seed}",
        f"teacher.layers = {layers(cfg.teacher.layers)}",
        f"teacher.taps = {ints(cfg.teacher.taps)}",
        f"teacher.seed = {cfg.teacher.seed}",
        f"teacher.steps = {cfg.teacher_steps}",
        f"student.layers = {layers(cfg.student_layers)}",
        f"student.taps = {ints(cfg.student_taps)}",
        f"student.steps = {cfg.student_steps}",
        f"pairing = {','.join(f'{s}:{t}' for s, t in cfg.pairing.pairs)}",
        f"loss.alpha1 = {cfg.alpha1!r}",
        f"loss.alpha2 = {cfg.alpha2!r}",
        f"loss.moments = {ints(cfg.moment_orders)}",
        f"loss.attention = {str(cfg.attention).lower()}",
        f"loss.kd_temperature = {cfg.kd_temperature!r}",
        f"loss.background_weight = {cfg.background_weight!r}",
        f"aoi.kernel = {cfg.aoi_kernel}",
        f"train.lr = {cfg.lr!r}",
        f"train.log_interval = {cfg.log_interval}",
        f"eval.teacher_miou_floor = {cfg.teacher_miou_floor!r}",
        f"seeds = {ints(cfg.seeds)}",
        f"out = {cfg.out_dir}",
    ]
    return "\n".join(lines) + "\n"


def loss_config_for_variant(cfg: ExperimentConfig, variant: str) -> LossConfig:
    base = dict(
        alpha1=cfg.alpha1,
        alpha2=cfg.alpha2,
        kd_temperature=cfg.kd_temperature,
        background_weight=cfg.background_weight,
        pairing=cfg.pairing,
        kd=False,
    )
    if variant == "none":
        base.update(moment_orders=(), attention=False)
    elif variant == "full":
        base.update(moment_orders=cfg.moment_orders, attention=cfg.attention)
    elif variant in ("mu1", "mu2", "mu3"):
        base.update(moment_orders=(int(variant[2]),), attention=False)
    elif variant == "moments":
        base.update(moment_orders=(1, 2, 3), attention=False)
    elif variant == "attention":
        base.update(moment_orders=(), attention=True)
    elif variant == "kd":
        base.update(moment_orders=(), attention=False, kd=True)
    else:
        raise ConfigError(f"unknown variant {variant!r}; known: {', '.join(VARIANTS)}")
    return LossConfig(**base)


# --- per-sample preparation ----------------------------------------------------

@dataclass
class PreparedSample:
    image: np.ndarray
    target: np.ndarray
    labels: LabelMaps
    aoi: AoiMasks  # full resolution


def prepare_samples(dataset: Dataset, aoi_kernel: int) -> List[PreparedSample]:
    prepared = []
    for sample in dataset.samples:
        labels = one_hot(sample.target, dataset.n)
        aoi = generate_aoi(labels, aoi_kernel)
        prepared.append(
            PreparedSample(image=sample.image, target=sample.target, labels=labels, aoi=aoi)
        )
    return prepared


def cache_teacher_signals(teacher: Network, prepared: Sequence[PreparedSample]) -> List[TeacherSignals]:
    """Teacher outputs per sample, with per-tap affinity graphs precomputed
    (the teacher side of the distillation loss is constant across steps)."""
    cached = []
    for p in prepared:
        signals = teacher_signals(teacher, p.image)
        graphs = []
        for f_t in signals.taps:
            aoi_t = downsample_aoi(p.aoi, f_t.shape[0], f_t.shape[1])
            graphs.append(distill.build_affinity_graph(distill.moment_pool(f_t, aoi_t)))
        signals.tap_graphs = graphs
        cached.append(signals)
    return cached


# --- evaluation ----------------------------------------------------------------

@dataclass
class EvalResult:
    confusion: np.ndarray
    iou: np.ndarray  # (n,), NaN for classes absent everywhere
    miou: float
    f1: List[F1Score]


def evaluate_predictions(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], n: int) -> EvalResult:
    cm = np.zeros((n, n), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        cm += confusion_matrix(pred, gt, n)
    iou, miou = iou_from_confusion(cm)
    f1 = [f1_from_confusion(cm, k) for k in range(n)]
    return EvalResult(confusion=cm, iou=iou, miou=miou, f1=f1)


def evaluate_network(net: Network, dataset: Dataset) -> EvalResult:
    preds = []
    gts = []
    for sample in dataset.samples:
        pred = predict(net, sample.image)
        gt = downsample_target(sample.target, pred.shape[0], pred.shape[1])
        preds.append(pred)
        gts.append(gt)
    return evaluate_predictions(preds, gts, dataset.n)


# --- training loops -------------------------------------------------------------

def _sample_order(seed: int, count: int, steps: int) -> np.ndarray:
    """Shuffled epochs, deterministic in seed; sample-sequential batch of 1."""
    rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(0xA5A5A5A5A5A5A5A5))
    order = []
    while len(order) < steps:
        order.extend(rng.permutation(count).tolist())
    return np.asarray(order[:steps], dtype=np.int64)


def train_network(
    net: Network,
    prepared: Sequence[PreparedSample],
    loss_config: LossConfig,
    lr: float,
    steps: int,
    order_seed: int,
    teacher_cache: Optional[Sequence[TeacherSignals]] = None,
    log_interval: int = 100,
) -> List[Tuple[int, distill.LossReport]]:
    """Run SGD for `steps` single-sample steps; returns the logged loss curve."""
    order = _sample_order(order_seed, len(prepared), steps)
    curve: List[Tuple[int, distill.LossReport]] = []
    for step in range(steps):
        p = prepared[order[step]]
        teacher = teacher_cache[order[step]] if teacher_cache is not None else None
        report, _ = train_step(net, p.image, p.labels, p.aoi, teacher, loss_config, lr)
        if step % log_interval == 0 or step == steps - 1:
            curve.append((step, report))
    if steps == 0:
        # untrained evaluation pass: lr=0 leaves parameters untouched
        p = prepared[0]
        teacher = teacher_cache[0] if teacher_cache is not None else None
        report, _ = train_step(net, p.image, p.labels, p.aoi, teacher, loss_config, 0.0)
        curve.append((0, report))
    return curve


# --- experiment driver -----------------------------------------------------------

@dataclass
class RunRow:
    variant: str
    seed: int
    miou: float
    iou: np.ndarray
    f1: List[F1Score]
    loss_seg: float
    loss_m: float
    loss_a: float
    steps: int
    wall_ms: float
    curve: List[Tuple[int, distill.LossReport]] = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    teacher_miou: float
    rows: List[RunRow]
    warnings: List[str]
    out_dir: Path


def _float_repr(x: float) -> str:
    return repr(float(x))


def metrics_csv_header(n: int) -> str:
    cols = ["variant", "seed", "miou"]
    for k in range(n):
        cols.append(f"iou_{k}")
        cols.append(f"f1_{k}")
    cols += ["loss_seg", "loss_m", "loss_a", "steps", "wall_ms"]
    return ",".join(cols)


def run_row_to_csv(row: RunRow) -> str:
    fields = [row.variant, str(row.seed), _float_repr(row.miou)]
    for k in range(len(row.f1)):
        iou_k = row.iou[k]
        fields.append(_float_repr(0.0 if np.isnan(iou_k) else iou_k))
        fields.append(_float_repr(row.f1[k].f1))
    fields += [
        _float_repr(row.loss_seg),
        _float_repr(row.loss_m),
        _float_repr(row.loss_a),
        str(row.steps),
        _float_repr(row.wall_ms),
    ]
    return ",".join(fields)


def write_metrics_csv(rows: Sequence[RunRow], n: int, path) -> None:
    lines = [CSV_COMMENT, metrics_csv_header(n)]
    lines += [run_row_to_csv(r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary_csv(rows: Sequence[RunRow], path) -> None:
    by_variant: Dict[str, List[float]] = {}
    order: List[str] = []
    for row in rows:
        if row.variant not in by_variant:
            by_variant[row.variant] = []
            order.append(row.variant)
        by_variant[row.variant].append(row.miou)
    lines = ["variant,median_miou,min_miou,max_miou,runs"]
    for variant in order:
        vals = by_variant[variant]
        lines.append(
            f"{variant},{_float_repr(float(np.median(vals)))},"
            f"{_float_repr(min(vals))},{_float_repr(max(vals))},{len(vals)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_loss_curve_csv(curve: Sequence[Tuple[int, distill.LossReport]], path) -> None:
    lines = ["step,seg,affinity,attention,alpha1,alpha2,total"]
    for step, rep in curve:
        lines.append(
            f"{step},{_float_repr(rep.seg)},{_float_repr(rep.affinity)},"
            f"{_float_repr(rep.attention)},{_float_repr(rep.alpha1)},"
            f"{_float_repr(rep.alpha2)},{_float_repr(rep.total)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def prediction_image(pred: np.ndarray) -> np.ndarray:
    return PALETTE[np.clip(pred, 0, len(PALETTE) - 1)]


def ensure_datasets(cfg: ExperimentConfig, out_dir: Path) -> Tuple[Dataset, Dataset, Dataset]:
    """Generate (or reuse on-disk) the train/val/test splits under out/data."""
    splits = {}
    offsets = {"train": 0x100000, "val": 0x200000, "test": 0x300000}
    counts = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}
    for name in ("train", "val", "test"):
        split_dir = out_dir / "data" / name
        if (split_dir / "manifest.json").exists():
            splits[name] = read_dataset(split_dir)
            continue
        samples = generate_dataset(cfg.scene, cfg.data_seed ^ offsets[name], counts[name])
        write_dataset(samples, split_dir, cfg.scene.n)
        splits[name] = read_dataset(split_dir)
    return splits["train"], splits["val"], splits["test"]


def pretrain_teacher(
    cfg: ExperimentConfig,
    prepared: Sequence[PreparedSample],
    out_dir: Path,
    log=lambda msg: print(msg, file=sys.stderr),
) -> Tuple[Network, List[Tuple[int, distill.LossReport]]]:
    """Train (or load a previously trained) teacher with the plain seg loss."""
    ckpt = out_dir / "teacher.ckpt"
    if ckpt.exists():
        net = load_checkpoint(ckpt)
        if net.config == cfg.teacher:
            return net, []
        log(f"teacher checkpoint config differs, retraining: {ckpt}")
    net = build_network(cfg.teacher)
    seg_only = LossConfig(
        alpha1=0.0,
        alpha2=0.0,
        moment_orders=(),
        attention=False,
        kd=False,
        background_weight=cfg.background_weight,
        pairing=cfg.pairing,
    )
    curve = train_network(
        net,
        prepared,
        seg_only,
        cfg.lr,
        cfg.teacher_steps,
        order_seed=cfg.teacher.seed,
        log_interval=cfg.log_interval,
    )
    save_checkpoint(net, ckpt)
    write_loss_curve_csv(curve, out_dir / "losses" / "teacher.csv")
    return net, curve


def export_run_artifacts(
    cfg: ExperimentConfig,
    out_dir: Path,
    variant: str,
    seed: int,
    student: Network,
    teacher: Network,
    test_prepared: Sequence[PreparedSample],
) -> None:
    """Graph JSON for the first test samples plus prediction images."""
    graphs_dir = out_dir / "graphs"
    preds_dir = out_dir / "preds"
    graphs_dir.mkdir(parents=True, exist_ok=True)
    preds_dir.mkdir(parents=True, exist_ok=True)
    si, ti = cfg.pairing.pairs[-1]
    for i, p in enumerate(test_prepared[:GRAPH_SAMPLE_COUNT]):
        _, student_taps = model.forward(student, p.image)
        f_s = student_taps[si]
        aoi_s = downsample_aoi(p.aoi, f_s.shape[0], f_s.shape[1])
        graph_s = distill.build_affinity_graph(distill.moment_pool(f_s, aoi_s))
        (graphs_dir / f"{variant}_seed{seed}_sample{i}.json").write_text(
            distill.export_graph(graph_s)
        )
        teacher_path = graphs_dir / f"teacher_sample{i}.json"
        if not teacher_path.exists():
            _, teacher_taps = model.forward(teacher, p.image)
            f_t = teacher_taps[ti]
            aoi_t = downsample_aoi(p.aoi, f_t.shape[0], f_t.shape[1])
            graph_t = distill.build_affinity_graph(distill.moment_pool(f_t, aoi_t))
            teacher_path.write_text(distill.export_graph(graph_t))
        pred = predict(student, p.image)
        write_ppm(preds_dir / f"{variant}_seed{seed}_sample{i}.ppm", prediction_image(pred))
        write_pgm(preds_dir / f"{variant}_seed{seed}_sample{i}.pgm", pred.astype(np.uint8))


def run_experiment(
    cfg: ExperimentConfig,
    variants: Sequence[str] = DEFAULT_VARIANTS,
    log=lambda msg: print(msg, file=sys.stderr),
) -> ExperimentResult:
    """Datasets -> teacher -> one student per (variant, seed) -> files + rows."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "losses").mkdir(exist_ok=True)
    (out_dir / "config_echo.txt").write_text(config_echo(cfg))
    warnings: List[str] = []

    train_set, _, test_set = ensure_datasets(cfg, out_dir)
    train_prepared = prepare_samples(train_set, cfg.aoi_kernel)
    test_prepared = prepare_samples(test_set, cfg.aoi_kernel)

    teacher, _ = pretrain_teacher(cfg, train_prepared, out_dir, log=log)
    teacher_eval = evaluate_network(teacher, test_set)
    log(f"teacher test mIoU: {teacher_eval.miou:.4f}")
    if teacher_eval.miou < cfg.teacher_miou_floor:
        msg = (
            f"teacher mIoU {teacher_eval.miou:.4f} below floor "
            f"{cfg.teacher_miou_floor:.4f}; continuing anyway"
        )
        warnings.append(msg)
        log("warning: " + msg)

    needs_teacher = any(loss_config_for_variant(cfg, v).wants_teacher for v in variants)
    teacher_cache = cache_teacher_signals(teacher, train_prepared) if needs_teacher else None

    rows: List[RunRow] = []
    for variant in variants:
        loss_cfg = loss_config_for_variant(cfg, variant)
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            student = build_network(cfg.student_config(seed))
            curve = train_network(
                student,
                train_prepared,
                loss_cfg,
                cfg.lr,
                cfg.student_steps,
                order_seed=seed,
                teacher_cache=teacher_cache if loss_cfg.wants_teacher else None,
                log_interval=cfg.log_interval,
            )
            result = evaluate_network(student, test_set)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            last = curve[-1][1]
            row = RunRow(
                variant=variant,
                seed=seed,
                miou=result.miou,
                iou=result.iou,
                f1=result.f1,
                loss_seg=last.seg,
                loss_m=last.affinity,
                loss_a=last.attention,
                steps=cfg.student_steps,
                wall_ms=wall_ms,
                curve=curve,
            )
            rows.append(row)
            save_checkpoint(student, out_dir / f"student_{variant}_seed{seed}.ckpt")
            write_loss_curve_csv(curve, out_dir / "losses" / f"{variant}_seed{seed}.csv")
            export_run_artifacts(cfg, out_dir, variant, seed, student, teacher, test_prepared)
            log(f"variant={variant} seed={seed} mIoU={result.miou:.4f} ({wall_ms:.0f} ms)")

    write_metrics_csv(rows, cfg.scene.n, out_dir / "metrics.csv")
    write_summary_csv(rows, out_dir / "summary.csv")
    return ExperimentResult(
        config=cfg,
        teacher_miou=teacher_eval.miou,
        rows=rows,
        warnings=warnings,
        out_dir=out_dir,
    )
