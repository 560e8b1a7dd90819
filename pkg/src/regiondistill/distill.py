"""Region-level distillation: moment pooling, affinity graphs, losses.

The structural signal distilled from teacher to student is an inter-region
affinity graph. Features inside each class region (AOI mask) are reduced to
three per-channel statistics: mean, variance, and a skewness-like third
statistic whose denominator is the variance (not its cube root). Nodes are
those moment vectors; edges are cosine similarities between nodes, one edge
tensor slice per moment order. Matching the student's edge tensor to the
teacher's yields the affinity loss; an attention-map loss complements it at
pixel level. All gradients into student features are analytic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .aoi import AoiMasks
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .ops import log_softmax, resize_nearest

MOMENT_EPS = 1e-6  # added to the variance in the third-moment denominator
COSINE_EPS = 1e-12  # added to the norm product in cosine similarity
ATTENTION_EPS = 1e-12  # below this Frobenius norm the attention map is all-zero
ALL_ORDERS = (1, 2, 3)


@dataclass
class MomentSet:
    """Per-class moment vectors; zero rows for classes absent from the masks."""

    n: int
    c: int
    mu1: np.ndarray  # (n, c)
    mu2: np.ndarray  # (n, c), elementwise >= 0
    mu3: np.ndarray  # (n, c)
    present: np.ndarray  # (n,) bool


@dataclass
class AffinityGraph:
    """Cosine-similarity edges over moment nodes, one slice per moment order."""

    n: int
    edges: np.ndarray  # (n, n, 3) in [-1, 1]; zero where invalid
    nodes: MomentSet
    valid: np.ndarray  # (n, n) bool, both endpoints present


@dataclass
class LossReport:
    seg: float
    affinity: float
    attention: float
    alpha1: float
    alpha2: float
    total: float


def _check_mask_shapes(features: np.ndarray, aoi: AoiMasks) -> np.ndarray:
    if features.ndim != 3:
        raise ShapeError(f"features must be (h_f, w_f, c), got shape {features.shape}")
    if aoi.feature_maps is None:
        raise ShapeError("AOI masks have no feature-resolution maps; downsample first")
    if aoi.feature_maps.shape[:2] != features.shape[:2]:
        raise ShapeError(
            f"AOI feature maps {aoi.feature_maps.shape[:2]} do not match "
            f"features {features.shape[:2]}"
        )
    return aoi.feature_maps > 0.0


def moment_pool(features, aoi: AoiMasks) -> MomentSet:
    """Reduce features inside each class mask to mean/variance/third moments.

    Over the masked positions P_k with m = |P_k|, per channel:
      mu1 = mean(F), mu2 = mean((F - mu1)^2),
      mu3 = mean(((F - mu1) / (mu2 + eps))^3).
    Absent classes get zero vectors.
    """
    features = np.asarray(features, dtype=np.float64)
    masks = _check_mask_shapes(features, aoi)
    n = aoi.n
    c = features.shape[2]
    mu1 = np.zeros((n, c))
    mu2 = np.zeros((n, c))
    mu3 = np.zeros((n, c))
    for k in range(n):
        mask = masks[:, :, k]
        if not mask.any():
            continue
        vals = features[mask]  # (m, c)
        mean = vals.mean(axis=0)
        dev = vals - mean
        var = (dev * dev).mean(axis=0)
        t = dev / (var + MOMENT_EPS)
        mu1[k] = mean
        mu2[k] = var
        mu3[k] = (t * t * t).mean(axis=0)  # t**3 via np.power is 10x slower
    return MomentSet(n=n, c=c, mu1=mu1, mu2=mu2, mu3=mu3, present=aoi.present.copy())


def moment_pool_backward(features, aoi: AoiMasks, d_mu1, d_mu2, d_mu3) -> np.ndarray:
    """Exact gradient of moment_pool into the features.

    Chains through mu1 inside mu2 and through both mu1 and mu2 inside mu3.
    Overlapping class masks accumulate additively.
    """
    features = np.asarray(features, dtype=np.float64)
    masks = _check_mask_shapes(features, aoi)
    n = aoi.n
    c = features.shape[2]
    for name, g in (("d_mu1", d_mu1), ("d_mu2", d_mu2), ("d_mu3", d_mu3)):
        if np.asarray(g).shape != (n, c):
            raise ShapeError(f"{name} must have shape ({n}, {c}), got {np.asarray(g).shape}")
    d_mu1 = np.asarray(d_mu1, dtype=np.float64)
    d_mu2 = np.asarray(d_mu2, dtype=np.float64)
    d_mu3 = np.asarray(d_mu3, dtype=np.float64)

    d_features = np.zeros_like(features)
    for k in range(n):
        mask = masks[:, :, k]
        m = int(mask.sum())
        if m == 0:
            continue
        vals = features[mask]
        mean = vals.mean(axis=0)
        dev = vals - mean
        var = (dev * dev).mean(axis=0)
        v = var + MOMENT_EPS
        t = dev / v
        t2 = t * t
        mu3 = (t2 * t).mean(axis=0)
        s2 = t2.sum(axis=0)
        # d mu1 / d x_i = 1/m
        # d mu2 / d x_i = (2/m) * dev_i
        # d mu3 / d x_i = (3/(m*v)) * (t_i^2 - S2/m - 2*dev_i*mu3)
        grad = (
            d_mu1[k] / m
            + d_mu2[k] * (2.0 / m) * dev
            + d_mu3[k] * (3.0 / m) * (t2 - s2 / m - 2.0 * dev * mu3) / v
        )
        d_features[mask] += grad
    return d_features


def build_affinity_graph(moments: MomentSet) -> AffinityGraph:
    """Cosine similarity between every pair of moment vectors, per order.

    edge(k1, k2, r) = <mu_r(k1), mu_r(k2)> / (||mu_r(k1)|| ||mu_r(k2)|| + eps).
    Pairs with an absent endpoint are invalid and forced to zero.
    """
    n = moments.n
    valid = moments.present[:, None] & moments.present[None, :]
    edges = np.zeros((n, n, 3))
    for r, mu in enumerate((moments.mu1, moments.mu2, moments.mu3)):
        norms = np.linalg.norm(mu, axis=1)
        gram = mu @ mu.T
        gram = (gram + gram.T) * 0.5  # enforce exact symmetry
        denom = norms[:, None] * norms[None, :] + COSINE_EPS
        edges[:, :, r] = np.where(valid, gram / denom, 0.0)
    return AffinityGraph(n=n, edges=edges, nodes=moments, valid=valid)


def affinity_graph_backward(moments: MomentSet, d_edges) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of the edge tensor with respect to the moment vectors.

    Pairs involving a zero moment vector contribute no gradient: cosine
    similarity is undefined at the origin and its epsilon-regularized
    derivative there would blow up, so the edge is treated as a constant 0.
    """
    d_edges = np.asarray(d_edges, dtype=np.float64)
    n = moments.n
    if d_edges.shape != (n, n, 3):
        raise ShapeError(f"d_edges must have shape ({n}, {n}, 3), got {d_edges.shape}")
    grads = []
    valid = moments.present[:, None] & moments.present[None, :]
    for r, mu in enumerate((moments.mu1, moments.mu2, moments.mu3)):
        norms = np.linalg.norm(mu, axis=1)
        d_mu = np.zeros_like(mu)
        for k1 in range(n):
            for k2 in range(n):
                g = d_edges[k1, k2, r]
                if g == 0.0 or not valid[k1, k2]:
                    continue
                u, v = mu[k1], mu[k2]
                nu, nv = norms[k1], norms[k2]
                if nu == 0.0 or nv == 0.0:
                    continue
                denom = nu * nv + COSINE_EPS
                dot = float(u @ v)
                d_mu[k1] += g * (v / denom - dot * nv * (u / nu) / denom**2)
                d_mu[k2] += g * (u / denom - dot * nu * (v / nv) / denom**2)
        grads.append(d_mu)
    return grads[0], grads[1], grads[2]


def affinity_loss(
    graph_s: AffinityGraph,
    graph_t: AffinityGraph,
    orders: Sequence[int] = ALL_ORDERS,
) -> Tuple[float, np.ndarray]:
    """Mean squared edge mismatch between student and teacher graphs.

    L = (1/(|orders| * n_p^2)) * sum_r sum_{valid (k1,k2)} (C_S - C_T)^2
    with n_p the number of present classes, so sparse samples are not
    systematically down-weighted; with all classes present and all three
    orders this is 1/(3 n^2). Diagonal terms are included (they contribute
    zero when both self-similarities are 1). Returns (L, dEdges_S).
    """
    if graph_s.n != graph_t.n:
        raise ContractError(f"graph sizes differ: {graph_s.n} vs {graph_t.n}")
    if not np.array_equal(graph_s.valid, graph_t.valid):
        raise ContractError("graphs were built from different class-presence masks")
    orders = tuple(orders)
    if not orders or any(r not in ALL_ORDERS for r in orders):
        raise ConfigError(f"orders must be a non-empty subset of {ALL_ORDERS}, got {orders}")
    n_p = int(graph_s.valid.diagonal().sum())
    d_edges = np.zeros_like(graph_s.edges)
    if n_p == 0:
        return 0.0, d_edges
    scale = 1.0 / (len(orders) * n_p * n_p)
    loss = 0.0
    for r in orders:
        diff = np.where(graph_s.valid, graph_s.edges[:, :, r - 1] - graph_t.edges[:, :, r - 1], 0.0)
        loss += scale * float((diff * diff).sum())
        d_edges[:, :, r - 1] = 2.0 * scale * diff
    return loss, d_edges


def attention_map(features) -> np.ndarray:
    """Channel-wise sum of squares, L2-normalized over the whole map.

    Zero features map to the all-zero attention map rather than dividing
    by (nearly) zero.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ShapeError(f"features must be (h_f, w_f, c), got shape {features.shape}")
    raw = (features * features).sum(axis=2)
    norm = np.linalg.norm(raw)
    if norm < ATTENTION_EPS:
        return np.zeros_like(raw)
    return raw / norm


def attention_map_backward(features, d_map) -> np.ndarray:
    """Gradient of attention_map into the features (zero for zero features)."""
    features = np.asarray(features, dtype=np.float64)
    d_map = np.asarray(d_map, dtype=np.float64)
    if d_map.shape != features.shape[:2]:
        raise ShapeError(
            f"d_map shape {d_map.shape} does not match features {features.shape[:2]}"
        )
    raw = (features * features).sum(axis=2)
    norm = np.linalg.norm(raw)
    if norm < ATTENTION_EPS:
        return np.zeros_like(features)
    d_raw = d_map / norm - (float((d_map * raw).sum()) / norm**3) * raw
    return d_raw[..., None] * (2.0 * features)


def attention_loss(a_s, a_t) -> Tuple[float, np.ndarray]:
    """Summed squared difference of attention maps; teacher resized if needed."""
    a_s = np.asarray(a_s, dtype=np.float64)
    a_t = np.asarray(a_t, dtype=np.float64)
    if a_s.ndim != 2 or a_t.ndim != 2:
        raise ShapeError("attention maps must be 2-D")
    if a_t.shape != a_s.shape:
        a_t = resize_nearest(a_t, a_s.shape[0], a_s.shape[1])
    diff = a_s - a_t
    return float((diff * diff).sum()), 2.0 * diff


def total_loss(
    seg: float,
    affinity_terms: Sequence[float],
    attention_terms: Sequence[float],
    alpha1: float,
    alpha2: float,
) -> LossReport:
    """Weighted sum: seg + alpha1 * sum(affinity) + alpha2 * sum(attention)."""
    components = [seg, *affinity_terms, *attention_terms]
    if any(v < 0.0 for v in components):
        raise ContractError(f"loss components must be non-negative, got {components}")
    if alpha1 < 0.0 or alpha2 < 0.0:
        raise ContractError(f"weights must be non-negative, got {alpha1}, {alpha2}")
    affinity = float(sum(affinity_terms))
    attention = float(sum(attention_terms))
    return LossReport(
        seg=float(seg),
        affinity=affinity,
        attention=attention,
        alpha1=float(alpha1),
        alpha2=float(alpha2),
        total=float(seg + alpha1 * affinity + alpha2 * attention),
    )


def kd_probability_loss(student_logits, teacher_logits, temperature: float):
    """Probability-map distillation baseline.

    Mean over pixels of KL(softmax(teacher/T) || softmax(student/T)).
    Returns (loss, dStudentLogits).
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    student = np.asarray(student_logits, dtype=np.float64)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if student.shape != teacher.shape or student.ndim != 3:
        raise ShapeError(
            f"logit shapes must match and be (h, w, n): {student.shape} vs {teacher.shape}"
        )
    pixels = student.shape[0] * student.shape[1]
    log_ps = log_softmax(student / temperature, axis=2)
    log_pt = log_softmax(teacher / temperature, axis=2)
    p_t = np.exp(log_pt)
    loss = float((p_t * (log_pt - log_ps)).sum() / pixels)
    d_student = (np.exp(log_ps) - p_t) / (temperature * pixels)
    return loss, d_student


def affinity_distill(
    features_s,
    aoi_s: AoiMasks,
    graph_t: AffinityGraph,
    orders: Sequence[int] = ALL_ORDERS,
) -> Tuple[float, np.ndarray, AffinityGraph]:
    """Full chain: student features -> moments -> graph -> loss -> dFeatures.

    The teacher graph is a constant; no gradient flows into it.
    """
    moments = moment_pool(features_s, aoi_s)
    graph_s = build_affinity_graph(moments)
    loss, d_edges = affinity_loss(graph_s, graph_t, orders)
    d_mus = affinity_graph_backward(moments, d_edges)
    d_features = moment_pool_backward(features_s, aoi_s, *d_mus)
    return loss, d_features, graph_s


def attention_distill(features_s, features_t) -> Tuple[float, np.ndarray]:
    """Attention-map loss between feature stacks plus its gradient into the student."""
    a_s = attention_map(features_s)
    a_t = attention_map(features_t)
    loss, d_as = attention_loss(a_s, a_t)
    d_features = attention_map_backward(features_s, d_as)
    return loss, d_features


# --- serialization -----------------------------------------------------------

def export_graph(graph: AffinityGraph) -> str:
    """Serialize a graph to JSON; floats keep full precision (shortest
    decimal that round-trips float64 exactly).

    The serialized edge payload holds 3*n^2 scalars, versus h_f*w_f*n for a
    probability map over the same feature grid.
    """
    doc = {
        "n": graph.n,
        "c": graph.nodes.c,
        "present": [bool(p) for p in graph.nodes.present],
        "edges": graph.edges.tolist(),
        "valid": graph.valid.tolist(),
        "nodes": {
            "mu1": graph.nodes.mu1.tolist(),
            "mu2": graph.nodes.mu2.tolist(),
            "mu3": graph.nodes.mu3.tolist(),
        },
    }
    return json.dumps(doc, indent=1)


def import_graph(text: str) -> AffinityGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"graph document is not valid JSON: {exc}") from exc
    try:
        n = int(doc["n"])
        c = int(doc["c"])
        present = np.asarray(doc["present"], dtype=bool)
        edges = np.asarray(doc["edges"], dtype=np.float64)
        valid = np.asarray(doc["valid"], dtype=bool)
        mus = [np.asarray(doc["nodes"][key], dtype=np.float64) for key in ("mu1", "mu2", "mu3")]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"graph document missing or malformed field: {exc}") from exc
    if present.shape != (n,) or edges.shape != (n, n, 3) or valid.shape != (n, n):
        raise FormatError("graph document field shapes are inconsistent with n")
    if any(mu.shape != (n, c) for mu in mus):
        raise FormatError("graph node vectors are inconsistent with (n, c)")
    nodes = MomentSet(n=n, c=c, mu1=mus[0], mu2=mus[1], mu3=mus[2], present=present)
    return AffinityGraph(n=n, edges=edges, nodes=nodes, valid=valid)


def edges_to_pgm_values(graph: AffinityGraph, order: int) -> np.ndarray:
    """Map one order's edge matrix from [-1, 1] to uint8 [0, 255] for heatmaps."""
    if order not in ALL_ORDERS:
        raise ConfigError(f"order must be one of {ALL_ORDERS}, got {order}")
    e = np.clip(graph.edges[:, :, order - 1], -1.0, 1.0)
    return np.round((e + 1.0) * 127.5).astype(np.uint8)
