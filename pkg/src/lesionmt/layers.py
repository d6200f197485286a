"""Differentiable network layers and losses built on :mod:`lesionmt.tensor`.

Image tensors are NCHW. Convolution is cross-correlation computed as a patch
gather (im2col) followed by one matrix product; the gather/scatter kernels
live in :mod:`lesionmt.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidShapeError, ShapeMismatchError
from .tensor import Node, _graph, add_channel_bias, matmul

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0
ACTIVATIONS = ("relu", "sigmoid", "identity")

# sigmoid output is kept strictly inside (0, 1) even where float64 saturates
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


@dataclass
class Conv2dParams:
    weight: Node  # [out_ch, in_ch, kh, kw]
    bias: Node | None  # [out_ch]
    stride: int = 1
    padding: int = 0

    @classmethod
    def same(cls, weight: Node, bias: Node | None = None) -> "Conv2dParams":
        """Stride 1 with the padding that preserves spatial extent."""
        return cls(weight, bias, 1, (weight.shape[2] - 1) // 2)


def conv2d(x: Node, p: Conv2dParams) -> Node:
    w, b, stride, pad = p.weight, p.bias, int(p.stride), int(p.padding)
    inputs = (x, w) if b is None else (x, w, b)
    g = _graph(*inputs)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects 4-d input and weight, got {xv.shape} and {wv.shape}")
    n, c, h, wd = xv.shape
    oc, ic, kh, kw = wv.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise InvalidShapeError(f"invalid stride {stride} / padding {pad}")
    if c != ic:
        raise ShapeMismatchError(f"conv2d: input has {c} channels, weight expects {ic}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeMismatchError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if b is not None and b.value.shape != (oc,):
        raise ShapeMismatchError(f"conv2d: bias shape {b.value.shape} != ({oc},)")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    pointwise = kh == 1 and kw == 1 and stride == 1
    # cols: [n, c*kh*kw, oh*ow]; one GEMM per sample lands directly in NCHW order
    if pointwise:
        cols = xp.reshape(n, c, h * wd)
    else:
        cols = kernels.im2col(xp, kh, kw, stride, oh, ow)
    w2 = wv.reshape(oc, -1)
    out = np.matmul(w2, cols).reshape(n, oc, oh, ow)
    if b is not None:
        out += b.value.reshape(1, oc, 1, 1)

    def bw(gr):
        g3 = gr.reshape(n, oc, oh * ow)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if pointwise:
                gxp = gcols.reshape(n, c, hp, wp)
            else:
                gxp = kernels.col2im(gcols, (n, c, hp, wp), kh, kw, stride, oh, ow)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, (gr.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return g.record(out, "conv2d", inputs, bw)


def maxpool2d(x: Node, window: int = 2, stride: int = 2) -> Node:
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 windows with stride 2 are supported")
    xv = x.value
    if xv.ndim != 4 or xv.shape[2] % 2 or xv.shape[3] % 2:
        raise ShapeMismatchError(f"maxpool2d needs even spatial extents, got {xv.shape}")
    vals, idx = kernels.maxpool2(xv)
    return x.graph.record(vals, "maxpool2d", (x,), lambda gr: (kernels.maxpool2_backward(gr, idx),))


def upsample2x_nearest(x: Node) -> Node:
    xv = x.value
    if xv.ndim != 4:
        raise ShapeMismatchError(f"upsample2x_nearest expects NCHW, got {xv.shape}")
    n, c, h, w = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=2), 2, axis=3)

    def bw(gr):
        return (gr.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return x.graph.record(out, "upsample2x", (x,), bw)


def concat_channels(a: Node, b: Node) -> Node:
    g = _graph(a, b)
    av, bv = a.value, b.value
    if av.ndim != 4 or bv.ndim != 4:
        raise ShapeMismatchError(f"concat_channels expects NCHW, got {av.shape} and {bv.shape}")
    if av.shape[0] != bv.shape[0] or av.shape[2:] != bv.shape[2:]:
        raise ShapeMismatchError(f"concat_channels: batch/spatial mismatch {av.shape} vs {bv.shape}")
    c1 = av.shape[1]

    def bw(gr):
        return gr[:, :c1], gr[:, c1:]

    return g.record(np.concatenate([av, bv], axis=1), "concat", (a, b), bw)


def relu(x: Node) -> Node:
    xv = x.value
    pos = xv > 0
    # maximum (unlike where) lets NaN through, so divergence reaches the loss
    return x.graph.record(np.maximum(xv, 0.0), "relu", (x,), lambda gr: (np.where(pos, gr, 0.0),))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _SIG_LO, _SIG_HI)


def sigmoid(x: Node) -> Node:
    s = _stable_sigmoid(x.value)
    return x.graph.record(s, "sigmoid", (x,), lambda gr: (gr * s * (1.0 - s),))


def activation(kind: str, x: Node) -> Node:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def global_avg_pool(x: Node) -> Node:
    xv = x.value
    if xv.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects NCHW, got {xv.shape}")
    n, c, h, w = xv.shape
    area = h * w

    def bw(gr):
        return (np.broadcast_to((gr / area)[:, :, None, None], xv.shape).copy(),)

    return x.graph.record(xv.mean(axis=(2, 3)), "gap", (x,), bw)


def avg_pool(x: Node, factor: int) -> Node:
    """Non-overlapping ``factor`` x ``factor`` average pooling."""
    xv = x.value
    n, c, h, w = xv.shape
    if h % factor or w % factor:
        raise ShapeMismatchError(f"avg_pool factor {factor} does not divide {h}x{w}")
    oh, ow = h // factor, w // factor
    out = xv.reshape(n, c, oh, factor, ow, factor).mean(axis=(3, 5))
    k2 = factor * factor

    def bw(gr):
        g6 = np.broadcast_to((gr / k2)[:, :, :, None, :, None], (n, c, oh, factor, ow, factor))
        return (g6.reshape(n, c, h, w).copy(),)

    return x.graph.record(out, "avg_pool", (x,), bw)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """x[n, f] @ weight[f, o] (+ bias[o])."""
    out = matmul(x, weight)
    return add_channel_bias(out, bias) if bias is not None else out


def bce_loss(pred: Node, target, pos_weight: float = 1.0) -> Node:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps].

    ``pos_weight`` scales the positive-target term (class re-weighting knob).
    """
    t = np.asarray(target, dtype=np.float64)
    pv = pred.value
    if t.shape != pv.shape:
        raise ShapeMismatchError(f"bce_loss: pred {pv.shape} vs target {t.shape}")
    p = np.clip(pv, BCE_EPS, 1.0 - BCE_EPS)
    w = float(pos_weight)
    n = pv.size
    terms = w * t * np.log(p) + (1.0 - t) * np.log1p(-p)
    loss = -terms.sum() / n
    inside = (pv >= BCE_EPS) & (pv <= 1.0 - BCE_EPS)

    def bw(gr):
        d = -(w * t / p - (1.0 - t) / (1.0 - p)) / n
        return (np.where(inside, d, 0.0) * gr[0],)

    return pred.graph.record(np.array([loss]), "bce", (pred,), bw)


def soft_dice_loss(pred: Node, target, smooth: float = DICE_SMOOTH) -> Node:
    """Batch mean of 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s) per sample."""
    t = np.asarray(target, dtype=np.float64)
    pv = pred.value
    if t.shape != pv.shape:
        raise ShapeMismatchError(f"soft_dice_loss: pred {pv.shape} vs target {t.shape}")
    n = pv.shape[0]
    axes = tuple(range(1, pv.ndim))
    inter = (pv * t).sum(axis=axes)
    denom = pv.sum(axis=axes) + t.sum(axis=axes) + smooth
    num = 2.0 * inter + smooth
    loss = float(np.mean(1.0 - num / denom))
    bshape = (n,) + (1,) * (pv.ndim - 1)

    def bw(gr):
        d = -(2.0 * t * denom.reshape(bshape) - num.reshape(bshape)) / (denom.reshape(bshape) ** 2)
        return (d * (gr[0] / n),)

    return pred.graph.record(np.array([loss]), "dice", (pred,), bw)
