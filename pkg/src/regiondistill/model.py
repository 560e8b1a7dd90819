"""Small conv+relu networks with named feature taps and manual backprop.

A network is a stack of conv+relu layers (padding fixed to k//2) followed
by a 1x1 conv head producing per-pixel class logits. Tap indices select
layers whose post-activation features are exposed for distillation. There
is no autodiff: train_step chains the analytic backward passes of every op
explicitly and applies vanilla SGD.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import distill
from .aoi import AoiMasks, LabelMaps, downsample_aoi
from .data import downsample_target
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .ops import conv2d, conv2d_backward, relu, relu_backward, weighted_softmax_ce
from .tensorio import tensor_from_stream, tensor_to_bytes

CHECKPOINT_MAGIC = "REGIONDISTILL-CKPT v1"


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel_size: int
    stride: int


@dataclass(frozen=True)
class NetworkConfig:
    layers: Tuple[LayerSpec, ...]
    n_classes: int
    taps: Tuple[int, ...]  # layer indices (0-based) whose post-relu output is exposed
    seed: int
    in_channels: int = 3


@dataclass
class Network:
    config: NetworkConfig
    kernels: List[np.ndarray]  # per layer, (k, k, cin, cout)
    biases: List[np.ndarray]  # per layer, (cout,)
    head_kernel: np.ndarray  # (1, 1, c_last, n_classes)
    head_bias: np.ndarray  # (n_classes,)

    def parameters(self):
        """Named parameter tensors in a fixed order."""
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"layer{i}.kernel", k
            yield f"layer{i}.bias", b
        yield "head.kernel", self.head_kernel
        yield "head.bias", self.head_bias

    def copy(self) -> "Network":
        return Network(
            config=self.config,
            kernels=[k.copy() for k in self.kernels],
            biases=[b.copy() for b in self.biases],
            head_kernel=self.head_kernel.copy(),
            head_bias=self.head_bias.copy(),
        )


@dataclass(frozen=True)
class TapPairing:
    """Pairs of (student tap index, teacher tap index) into the taps lists."""

    pairs: Tuple[Tuple[int, int], ...]


@dataclass
class TeacherSignals:
    """Frozen teacher outputs for one image: tapped features plus logits.

    tap_graphs optionally carries the teacher's affinity graph per tap,
    precomputed from the same sample's AOI; train_step falls back to
    computing them from the tap features when absent.
    """

    taps: List[np.ndarray]
    logits: np.ndarray
    tap_graphs: Optional[List["distill.AffinityGraph"]] = None


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 0.1
    alpha2: float = 0.1
    moment_orders: Tuple[int, ...] = (1, 2, 3)
    attention: bool = True
    kd: bool = False
    kd_temperature: float = 4.0
    background_weight: float = 0.4
    pairing: TapPairing = TapPairing(pairs=((0, 0), (1, 1)))

    @property
    def wants_teacher(self) -> bool:
        return bool(self.moment_orders) or self.attention or self.kd


def default_teacher_config(n_classes: int = 4, seed: int = 777) -> NetworkConfig:
    """8 conv layers, 16 to 64 channels, two stride-2 layers, taps after layers 4 and 8."""
    layers = (
        LayerSpec(16, 3, 1),
        LayerSpec(32, 3, 2),
        LayerSpec(32, 3, 1),
        LayerSpec(48, 3, 1),
        LayerSpec(48, 3, 2),
        LayerSpec(64, 3, 1),
        LayerSpec(64, 3, 1),
        LayerSpec(64, 3, 1),
    )
    return NetworkConfig(layers=layers, n_classes=n_classes, taps=(3, 7), seed=seed)


def default_student_config(n_classes: int = 4, seed: int = 1) -> NetworkConfig:
    """3 conv layers, 8 to 16 channels, two stride-2 layers, taps after layers 2 and 3."""
    layers = (
        LayerSpec(8, 3, 1),
        LayerSpec(16, 3, 2),
        LayerSpec(16, 3, 2),
    )
    return NetworkConfig(layers=layers, n_classes=n_classes, taps=(1, 2), seed=seed)


def build_network(config: NetworkConfig) -> Network:
    """Initialize weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.

    Bit-reproducible: parameters are a pure function of (config, seed).
    """
    if not config.layers:
        raise ConfigError("network needs at least one layer")
    if config.n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {config.n_classes}")
    if config.in_channels < 1:
        raise ConfigError(f"in_channels must be >= 1, got {config.in_channels}")
    for i, spec in enumerate(config.layers):
        if spec.out_channels < 1 or spec.kernel_size < 1 or spec.stride < 1:
            raise ConfigError(f"layer {i}: bad spec {spec}")
    for t in config.taps:
        if not (0 <= t < len(config.layers)):
            raise ConfigError(f"tap index {t} outside 0..{len(config.layers) - 1}")

    rng = np.random.default_rng(np.uint64(config.seed))
    kernels, biases = [], []
    cin = config.in_channels
    for spec in config.layers:
        k = spec.kernel_size
        fan_in = k * k * cin
        fan_out = k * k * spec.out_channels
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        kernels.append(rng.uniform(-limit, limit, size=(k, k, cin, spec.out_channels)))
        biases.append(np.zeros(spec.out_channels))
        cin = spec.out_channels
    limit = np.sqrt(6.0 / (cin + config.n_classes))
    head_kernel = rng.uniform(-limit, limit, size=(1, 1, cin, config.n_classes))
    head_bias = np.zeros(config.n_classes)
    return Network(
        config=config,
        kernels=kernels,
        biases=biases,
        head_kernel=head_kernel,
        head_bias=head_bias,
    )


def parameter_count(net: Network) -> int:
    return sum(int(np.prod(p.shape)) for _, p in net.parameters())


def _forward_cache(net: Network, image: np.ndarray):
    """Run the stack keeping pre- and post-activation tensors for backprop."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != net.config.in_channels:
        raise ShapeError(
            f"image must be (h, w, {net.config.in_channels}), got shape {image.shape}"
        )
    pre_acts, post_acts = [], []
    x = image
    for spec, kernel, bias in zip(net.config.layers, net.kernels, net.biases):
        z = conv2d(x, kernel, bias, stride=spec.stride, pad=spec.kernel_size // 2)
        if z.shape[0] < 1 or z.shape[1] < 1:
            raise ShapeError("spatial dims collapsed below 1")
        x = relu(z)
        pre_acts.append(z)
        post_acts.append(x)
    logits = conv2d(x, net.head_kernel, net.head_bias, stride=1, pad=0)
    return logits, pre_acts, post_acts


def forward(net: Network, image) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Logits at the network's output resolution plus tapped post-relu features."""
    logits, _, post_acts = _forward_cache(net, image)
    return logits, [post_acts[t] for t in net.config.taps]


def predict(net: Network, image) -> np.ndarray:
    logits, _ = forward(net, image)
    return logits.argmax(axis=2).astype(np.int64)


def teacher_signals(net: Network, image) -> TeacherSignals:
    logits, tapped = forward(net, image)
    return TeacherSignals(taps=tapped, logits=logits)


def _backward_and_update(
    net: Network,
    image: np.ndarray,
    pre_acts: List[np.ndarray],
    post_acts: List[np.ndarray],
    d_logits: np.ndarray,
    tap_grads: Dict[int, np.ndarray],
    lr: float,
) -> None:
    d_hk, d_hb, d_post = None, None, None
    d_hin, d_hk, d_hb = conv2d_backward(post_acts[-1], net.head_kernel, d_logits)
    d_post = d_hin
    layer_grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(net.kernels)
    for l in reversed(range(len(net.kernels))):
        if l in tap_grads:
            d_post = d_post + tap_grads[l]
        d_pre = relu_backward(pre_acts[l], d_post)
        spec = net.config.layers[l]
        inp = post_acts[l - 1] if l > 0 else image
        d_in, d_k, d_b = conv2d_backward(
            inp, net.kernels[l], d_pre, stride=spec.stride, pad=spec.kernel_size // 2
        )
        layer_grads[l] = (d_k, d_b)
        d_post = d_in
    for l, (d_k, d_b) in enumerate(layer_grads):
        net.kernels[l] -= lr * d_k
        net.biases[l] -= lr * d_b
    net.head_kernel -= lr * d_hk
    net.head_bias -= lr * d_hb


def train_step(
    net: Network,
    image,
    label_maps: LabelMaps,
    aoi: AoiMasks,
    teacher: Optional[TeacherSignals],
    loss_config: LossConfig,
    lr: float,
) -> Tuple[distill.LossReport, Network]:
    """One SGD step on the full loss; mutates and returns the given network.

    The segmentation target is the majority-downsampled label map at the
    network's output resolution. When distillation is enabled the teacher
    signals are required and stay constant (no gradient flows into them).
    For the probability-map baseline the KL term is weighted by alpha1 and
    reported in the affinity slot of the LossReport.
    """
    image = np.asarray(image, dtype=np.float64)
    logits, pre_acts, post_acts = _forward_cache(net, image)
    h_o, w_o, n = logits.shape

    target_full = label_maps.maps.argmax(axis=2)
    target_small = downsample_target(target_full, h_o, w_o)
    class_weights = np.ones(n)
    class_weights[0] = loss_config.background_weight
    seg, d_logits = weighted_softmax_ce(logits, target_small, class_weights)

    affinity_terms: List[float] = []
    attention_terms: List[float] = []
    tap_grads: Dict[int, np.ndarray] = {}

    if loss_config.wants_teacher:
        if teacher is None:
            raise ContractError("distillation enabled but no teacher signals given")
    if loss_config.moment_orders or loss_config.attention:
        for si, ti in loss_config.pairing.pairs:
            if not (0 <= si < len(net.config.taps)) or not (0 <= ti < len(teacher.taps)):
                raise ContractError(f"tap pairing ({si}, {ti}) outside available taps")
            layer = net.config.taps[si]
            f_s = post_acts[layer]
            f_t = teacher.taps[ti]
            grad = np.zeros_like(f_s)
            if loss_config.moment_orders:
                aoi_s = downsample_aoi(aoi, f_s.shape[0], f_s.shape[1])
                if teacher.tap_graphs is not None:
                    graph_t = teacher.tap_graphs[ti]
                else:
                    aoi_t = downsample_aoi(aoi, f_t.shape[0], f_t.shape[1])
                    graph_t = distill.build_affinity_graph(distill.moment_pool(f_t, aoi_t))
                l_m, d_f, _ = distill.affinity_distill(
                    f_s, aoi_s, graph_t, loss_config.moment_orders
                )
                affinity_terms.append(l_m)
                grad = grad + loss_config.alpha1 * d_f
            if loss_config.attention:
                l_a, d_f = distill.attention_distill(f_s, f_t)
                attention_terms.append(l_a)
                grad = grad + loss_config.alpha2 * d_f
            if layer in tap_grads:
                tap_grads[layer] = tap_grads[layer] + grad
            else:
                tap_grads[layer] = grad
    if loss_config.kd:
        l_kd, d_kd = distill.kd_probability_loss(
            logits, teacher.logits, loss_config.kd_temperature
        )
        affinity_terms.append(l_kd)
        d_logits = d_logits + loss_config.alpha1 * d_kd

    report = distill.total_loss(
        seg, affinity_terms, attention_terms, loss_config.alpha1, loss_config.alpha2
    )
    _backward_and_update(net, image, pre_acts, post_acts, d_logits, tap_grads, lr)
    return report, net


# --- checkpoints --------------------------------------------------------------

def _config_header(config: NetworkConfig) -> str:
    layers = ",".join(f"{s.out_channels}x{s.kernel_size}x{s.stride}" for s in config.layers)
    taps = ",".join(str(t) for t in config.taps)
    return (
        f"{CHECKPOINT_MAGIC}\n"
        f"in_channels = {config.in_channels}\n"
        f"n_classes = {config.n_classes}\n"
        f"layers = {layers}\n"
        f"taps = {taps}\n"
        f"seed = {config.seed}\n"
        f"---\n"
    )


def parse_layers(text: str) -> Tuple[LayerSpec, ...]:
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        fields = part.split("x")
        if len(fields) != 3:
            raise FormatError(f"bad layer spec {part!r}, want CHANNELSxKERNELxSTRIDE")
        specs.append(LayerSpec(int(fields[0]), int(fields[1]), int(fields[2])))
    return tuple(specs)


def _parse_config_header(lines: List[str]) -> NetworkConfig:
    values = {}
    for line in lines:
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    try:
        taps_text = values["taps"]
        taps = tuple(int(t) for t in taps_text.split(",") if t.strip()) if taps_text else ()
        return NetworkConfig(
            layers=parse_layers(values["layers"]),
            n_classes=int(values["n_classes"]),
            taps=taps,
            seed=int(values["seed"]),
            in_channels=int(values["in_channels"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint header malformed: {exc}") from exc


def save_checkpoint(net: Network, path) -> None:
    """Text config echo, a JSON index table, then TNS1 parameter blobs."""
    blobs = [(name, tensor_to_bytes(p)) for name, p in net.parameters()]
    index = {"tensors": [name for name, _ in blobs], "bytes": [len(b) for _, b in blobs]}
    with open(path, "wb") as fh:
        fh.write(_config_header(net.config).encode("ascii"))
        fh.write((json.dumps(index) + "\n").encode("ascii"))
        for _, blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Network:
    blob = Path(path).read_bytes()
    marker = b"\n---\n"
    pos = blob.find(marker)
    if not blob.startswith(CHECKPOINT_MAGIC.encode("ascii")) or pos < 0:
        raise FormatError(f"{path}: not a checkpoint file")
    header_lines = blob[:pos].decode("ascii").splitlines()[1:]
    config = _parse_config_header(header_lines)
    rest = blob[pos + len(marker) :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing parameter index")
    try:
        index = json.loads(rest[:nl].decode("ascii"))
        names = list(index["tensors"])
        sizes = [int(s) for s in index["bytes"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt parameter index: {exc}") from exc

    tensors = {}
    import io

    fh = io.BytesIO(rest[nl + 1 :])
    for name, size in zip(names, sizes):
        start = fh.tell()
        tensors[name] = tensor_from_stream(fh)
        if fh.tell() - start != size:
            raise FormatError(f"{path}: tensor {name} size disagrees with index")
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after parameters")

    net = build_network(config)
    try:
        for i in range(len(net.kernels)):
            net.kernels[i] = tensors[f"layer{i}.kernel"]
            net.biases[i] = tensors[f"layer{i}.bias"]
        net.head_kernel = tensors["head.kernel"]
        net.head_bias = tensors["head.bias"]
    except KeyError as exc:
        raise FormatError(f"{path}: missing parameter tensor {exc}") from exc
    for (name, p), expect in zip(net.parameters(), names):
        if name != expect:
            raise FormatError(f"{path}: parameter order mismatch at {name}")
    return net
