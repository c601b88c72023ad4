"""Differentiable primitives for the segmentation network and its losses.

Image tensors use (batch, channel, height, width) layout throughout.
"""
from __future__ import annotations

import enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError, StateError
from .tensor import Tensor, as_tensor, make_node

NO_LABEL = 255


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(x.data.sum()), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_node(np.asarray(x.data.mean()), (x,), bw, "mean")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), bw, "relu")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    # (B, C, kh, kw, Ho, Wo) -> (B, C*kh*kw, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"channel axis mismatch: input has {C} channels, weight expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel height/width must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"height/width axes ({H}, {W}) smaller than kernel ({kh}, {kw}) after padding")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"bias shape {bias.shape} does not match output channels {O}")

    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.data.reshape(B, C, H * W)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = _im2col(xp, kh, kw, stride)
    w2 = weight.data.reshape(O, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    def bw(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.zeros_like(w2)
        for b in range(B):
            gw += g2[b] @ cols[b].T
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(B, C, kh, kw, Ho, Wo)
                dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
                gx = dxp[:, :, pad:pad + H, pad:pad + W]
        return gx, gw.reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw if bias is not None else (lambda g: bw(g)[:2]), "conv2d")


# ---------------------------------------------------------------------------
# instance normalisation


class NormMode(str, enum.Enum):
    PER_INSTANCE = "PerInstance"
    STORED_STATS = "StoredStats"
    ACCUMULATE = "Accumulate"


class NormStats:
    """Per-channel running statistics stored in a norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.zeros(channels, dtype=np.float64)
        self.count = 0
        self.last_batch: tuple[np.ndarray, np.ndarray] | None = None

    def reset(self) -> None:
        self.mean[:] = 0.0
        self.var[:] = 0.0
        self.count = 0

    def update(self, mean_i: np.ndarray, var_i: np.ndarray) -> None:
        """Running average: after n updates mean/var are the plain averages."""
        self.count += 1
        a = 1.0 / self.count
        self.mean = (1.0 - a) * self.mean + a * mean_i
        self.var = (1.0 - a) * self.var + a * var_i

    def copy(self) -> "NormStats":
        new = NormStats(self.mean.shape[0])
        new.mean = self.mean.copy()
        new.var = self.var.copy()
        new.count = self.count
        return new


def instance_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: NormMode | str = NormMode.PER_INSTANCE,
    stats: NormStats | None = None,
    eps: float = 1e-5,
) -> Tensor:
    mode = NormMode(mode)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"affine parameters must have shape ({C},)")
    g4 = gamma.data[None, :, None, None]

    if mode is NormMode.STORED_STATS:
        if stats is None or stats.count == 0:
            raise StateError("StoredStats mode requires populated norm statistics")
        mu = stats.mean.astype(x.dtype)[None, :, None, None]
        inv = (1.0 / np.sqrt(stats.var + eps)).astype(x.dtype)[None, :, None, None]
        xhat = (x.data - mu) * inv
        out = xhat * g4 + beta.data[None, :, None, None]

        def bw_stored(g):
            return g * g4 * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_node(out, (x, gamma, beta), bw_stored, "instance_norm")

    if H * W < 2:
        raise ShapeError("per-instance normalisation needs at least 2 spatial positions")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g4 + beta.data[None, :, None, None]
    if mode is NormMode.ACCUMULATE and stats is not None:
        stats.last_batch = (mu[:, :, 0, 0].astype(np.float64), var[:, :, 0, 0].astype(np.float64))

    def bw(g):
        dxhat = g * g4
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_node(out, (x, gamma, beta), bw, "instance_norm")


# ---------------------------------------------------------------------------
# softmax family and losses


def _softmax_np(z: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(z: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_logits(logits: Tensor) -> None:
    if logits.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) logits, got {logits.shape}")
    if logits.shape[1] < 2:
        raise ShapeError("need at least 2 classes on the channel axis")


def softmax(logits: Tensor) -> Tensor:
    """Channel softmax per pixel."""
    _check_logits(logits)
    s = _softmax_np(logits.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (logits,), bw, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    _check_logits(logits)
    ls = _log_softmax_np(logits.data)
    s = np.exp(ls)

    def bw(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return make_node(ls, (logits,), bw, "log_softmax")


def hard_ce_masked(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, int]:
    """Mean cross-entropy over pixels whose label is not NO_LABEL.

    Returns ``(loss, n_labeled)``. With no labeled pixel the loss is 0 and
    every logit receives a zero gradient.
    """
    _check_logits(logits)
    B, C, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape == (H, W) and B == 1:
        labels = labels[None]
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = (labels != NO_LABEL) & ((labels < 0) | (labels >= C))
    if np.any(bad):
        raise ValueError(f"label values must be in [0, {C}) or NO_LABEL={NO_LABEL}")

    mask = labels != NO_LABEL
    n = int(mask.sum())
    if n == 0:
        zero = np.zeros((), dtype=logits.dtype)
        return make_node(zero, (logits,), lambda g: (np.zeros_like(logits.data),), "hard_ce"), 0

    safe = np.where(mask, labels, 0).astype(np.intp)
    ls = _log_softmax_np(logits.data)
    picked = np.take_along_axis(ls, safe[:, None], axis=1)[:, 0]
    loss = -(picked * mask).sum() / n

    def bw(g):
        grad = np.exp(ls)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= (mask[:, None] * (g / n))
        return (grad,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "hard_ce"), n


def soft_ce(logits: Tensor, target) -> Tensor:
    """Mean over pixels of -sum_c target_c * log softmax(logits)_c.

    ``target`` is always treated as a constant: a Tensor argument contributes
    only its values, never a gradient path.
    """
    _check_logits(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != logits.shape:
        if t.ndim == 3 and (1,) + t.shape == logits.shape:
            t = t[None]
        else:
            raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    if np.any(t < -1e-12) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("soft target must lie on the probability simplex per pixel")
    t = t.astype(logits.dtype, copy=False)
    B, C, H, W = logits.shape
    n = B * H * W
    ls = _log_softmax_np(logits.data)
    loss = -(t * ls).sum() / n

    def bw(g):
        s = np.exp(ls)
        return ((s * t.sum(axis=1, keepdims=True) - t) * (g / n),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "soft_ce")


def entropy(prob: Tensor) -> Tensor:
    """Mean per-pixel Shannon entropy of a (B, C, H, W) probability map, 0 ln 0 = 0."""
    if prob.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) probabilities, got {prob.shape}")
    p = prob.data
    B, C, H, W = p.shape
    n = B * H * W
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    val = -(p * logp).sum() / n

    def bw(g):
        return (np.where(pos, -(logp + 1.0), 0.0) * (g / n),)

    return make_node(np.asarray(val, dtype=p.dtype), (prob,), bw, "entropy")
