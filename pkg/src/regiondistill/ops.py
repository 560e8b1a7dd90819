"""Differentiable primitives with hand-written backward passes.

Everything runs in float64 on plain numpy arrays. Layouts: images and
feature maps are (h, w, c); convolution kernels are (kh, kw, cin, cout).
There is no autodiff tape; each forward op has a matching backward
function and the network code chains them explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    h, w, c = x.shape
    out = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=np.float64)
    out[pad : pad + h, pad : pad + w] = x
    return out


def _check_conv_args(x, kernel, bias, stride, pad):
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (h, w, cin), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh, kw, cin, cout), got shape {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be a positive int, got {stride}")
    if pad < 0:
        raise ConfigError(f"pad must be non-negative, got {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )


def conv2d(x, kernel, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct 2-D convolution (cross-correlation) with zero padding.

    Evaluates the convolution sum by accumulating one shifted input slice
    per kernel offset; no FFT and no materialized im2col buffer.
    """
    x, kernel, bias = _as_f64(x), _as_f64(kernel), _as_f64(bias)
    _check_conv_args(x, kernel, bias, stride, pad)
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    h_out = conv_output_extent(h, kh, stride, pad)
    w_out = conv_output_extent(w, kw, stride, pad)
    xp = _pad2d(x, pad)
    acc = np.zeros((h_out * w_out, cout), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[
                di : di + (h_out - 1) * stride + 1 : stride,
                dj : dj + (w_out - 1) * stride + 1 : stride,
                :,
            ]
            acc += patch.reshape(h_out * w_out, cin) @ kernel[di, dj]
    return acc.reshape(h_out, w_out, cout) + bias


def conv2d_backward(x, kernel, upstream, stride: int = 1, pad: int = 0):
    """Gradients of a scalar loss through conv2d.

    Returns (dInput, dKernel, dBias) for the given upstream gradient,
    which must match the conv2d output shape.
    """
    x, kernel, upstream = _as_f64(x), _as_f64(kernel), _as_f64(upstream)
    bias_probe = np.zeros(kernel.shape[3], dtype=np.float64)
    _check_conv_args(x, kernel, bias_probe, stride, pad)
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    h_out = conv_output_extent(h, kh, stride, pad)
    w_out = conv_output_extent(w, kw, stride, pad)
    if upstream.shape != (h_out, w_out, cout):
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} does not match conv output "
            f"({h_out}, {w_out}, {cout})"
        )
    xp = _pad2d(x, pad)
    d_xp = np.zeros_like(xp)
    d_kernel = np.zeros_like(kernel)
    g2 = upstream.reshape(h_out * w_out, cout)
    for di in range(kh):
        for dj in range(kw):
            rows = slice(di, di + (h_out - 1) * stride + 1, stride)
            cols = slice(dj, dj + (w_out - 1) * stride + 1, stride)
            patch = xp[rows, cols, :].reshape(h_out * w_out, cin)
            d_kernel[di, dj] = patch.T @ g2
            d_xp[rows, cols, :] += (g2 @ kernel[di, dj].T).reshape(h_out, w_out, cin)
    d_bias = upstream.sum(axis=(0, 1))
    d_x = d_xp[pad : pad + h, pad : pad + w] if pad else d_xp
    return d_x, d_kernel, d_bias


def relu(x) -> np.ndarray:
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    """Pass upstream where the input was strictly positive; 0 at and below 0."""
    x, upstream = _as_f64(x), _as_f64(upstream)
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_backward shapes differ: {x.shape} vs {upstream.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def weighted_softmax_ce(logits, target, class_weights):
    """Class-weighted pixelwise cross entropy.

    loss = sum_p w[t_p] * (-log softmax(logits_p)[t_p]) / sum_p w[t_p]

    Returns (loss, dLogits) where dLogits is the exact gradient of the
    normalized loss.
    """
    logits = _as_f64(logits)
    target = np.asarray(target)
    class_weights = _as_f64(class_weights)
    if logits.ndim != 3:
        raise ShapeError(f"logits must be (h, w, n), got shape {logits.shape}")
    h, w, n = logits.shape
    if target.shape != (h, w):
        raise ShapeError(f"target must be ({h}, {w}), got {target.shape}")
    if class_weights.shape != (n,):
        raise ShapeError(f"class_weights must have shape ({n},), got {class_weights.shape}")
    if np.any(class_weights <= 0.0):
        raise ConfigError("class_weights must be strictly positive")
    if target.min() < 0 or target.max() >= n:
        raise IndexError(f"target labels must lie in 0..{n - 1}")
    target = target.astype(np.int64)

    logp = log_softmax(logits, axis=2)
    wmap = class_weights[target]
    total_weight = wmap.sum()
    nll = -np.take_along_axis(logp, target[..., None], axis=2)[..., 0]
    loss = float((wmap * nll).sum() / total_weight)

    probs = np.exp(logp)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=2)
    d_logits = (wmap / total_weight)[..., None] * (probs - onehot)
    return loss, d_logits


def resize_nearest(x, h_out: int, w_out: int) -> np.ndarray:
    """Nearest-neighbor resize over the two leading axes; source index floor(i*h/h')."""
    x = _as_f64(x)
    if x.ndim < 2:
        raise ShapeError(f"resize_nearest wants at least 2 dims, got shape {x.shape}")
    if h_out < 1 or w_out < 1:
        raise ConfigError(f"target size must be >= 1, got {h_out}x{w_out}")
    h, w = x.shape[:2]
    rows = (np.arange(h_out) * h) // h_out
    cols = (np.arange(w_out) * w) // w_out
    return x[rows][:, cols].copy()


@dataclass
class FdCheckReport:
    """Outcome of one finite-difference gradient comparison."""

    max_rel_err: float
    step: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def fd_check(
    value_fn: Callable[[Sequence[np.ndarray]], np.ndarray],
    grad_fn: Callable[[Sequence[np.ndarray], np.ndarray], Sequence[Optional[np.ndarray]]],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    check: Optional[Sequence[int]] = None,
) -> FdCheckReport:
    """Compare analytic gradients against central finite differences.

    A random linear functional L(x) = sum(R * value_fn(inputs)) is probed:
    grad_fn(inputs, R) must return one gradient per input (None for inputs
    that receive no gradient), and each returned gradient is compared
    coordinate-by-coordinate against (L(x+step) - L(x-step)) / (2*step).
    Relative error uses |a - n| / (|a| + |n| + 1e-6). Report-only: the
    caller decides what to do with a failing report.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out = value_fn(inputs)
    probe = rng.standard_normal(np.asarray(out).shape)
    analytic = grad_fn(inputs, probe)
    if check is None:
        check = [i for i, g in enumerate(analytic) if g is not None]

    max_err = 0.0
    for idx in check:
        grad = analytic[idx]
        if grad is None:
            raise ConfigError(f"input {idx} selected for checking but has no gradient")
        flat = inputs[idx].reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float((np.asarray(value_fn(inputs)) * probe).sum())
            flat[i] = orig - step
            f_minus = float((np.asarray(value_fn(inputs)) * probe).sum())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[i] - numeric) / (abs(gflat[i]) + abs(numeric) + 1e-6)
            if err > max_err:
                max_err = err
    return FdCheckReport(max_rel_err=max_err, step=step, tolerance=tolerance)
