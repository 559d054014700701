"""Differentiable layers over NCHW float64 arrays.

Every backward function *accumulates* parameter gradients into the
:class:`ParameterStore` instead of overwriting them.  Two layers that refer
to the same parameter id therefore share one weight tensor and receive the
sum of their gradient contributions, which is all hard weight sharing needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

IGNORE_LABEL = 255


@dataclass
class Param:
    """One layer's learnable arrays plus their gradient and momentum buffers."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    grad_w: np.ndarray = field(init=False)
    grad_b: Optional[np.ndarray] = field(init=False)
    mom_w: np.ndarray = field(init=False)
    mom_b: Optional[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.grad_w = np.zeros_like(self.weight)
        self.mom_w = np.zeros_like(self.weight)
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
            self.grad_b = np.zeros_like(self.bias)
            self.mom_b = np.zeros_like(self.bias)
        else:
            self.grad_b = None
            self.mom_b = None

    def arrays(self):
        """Yield ``(role, value, grad, momentum)`` for weight then bias."""
        yield "weight", self.weight, self.grad_w, self.mom_w
        if self.bias is not None:
            yield "bias", self.bias, self.grad_b, self.mom_b


class ParameterStore:
    """Parameters keyed by id.  Layers look weights up here on every call."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, pid: str, weight, bias=None) -> Param:
        if pid in self._params:
            raise KeyError(f"parameter {pid!r} already registered")
        p = Param(weight, bias)
        self._params[pid] = p
        return p

    def __getitem__(self, pid: str) -> Param:
        return self._params[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad_w[...] = 0.0
            if p.grad_b is not None:
                p.grad_b[...] = 0.0

    def num_scalars(self, pids: Optional[Sequence[str]] = None) -> int:
        pids = self._params if pids is None else pids
        total = 0
        for pid in pids:
            for _, value, _, _ in self._params[pid].arrays():
                total += value.size
        return total


@dataclass
class OptimizerConfig:
    lr_weight: float = 1e-2
    lr_bias: Optional[float] = None
    momentum: float = 0.99
    decay: float = 0.0005

    def __post_init__(self):
        if self.lr_bias is None:
            self.lr_bias = 2.0 * self.lr_weight
        if self.lr_weight < 0 or self.lr_bias < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.decay < 0:
            raise ValueError("decay must be nonnegative")


@dataclass
class LossConfig:
    reduction: str = "mean"
    num_classes: int = 2

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


# ---------------------------------------------------------------- im2col


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(cols, n, c, hp, wp, kh, kw, stride, oh, ow):
    """Scatter-add ``cols`` of shape (n, oh, ow, c, kh, kw) into an (n, c, hp, wp) image."""
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    if kh % stride == 0 and kw % stride == 0 and stride > 1:
        mh, mw = kh // stride, kw // stride
        fh = (oh - 1 + mh) * stride
        fw = (ow - 1 + mw) * stride
        out = np.zeros((n, c, fh // stride, stride, fw // stride, stride))
        blocks = cols.reshape(n, oh, ow, c, mh, stride, mw, stride)
        for a in range(mh):
            for b in range(mw):
                out[:, :, a:a + oh, :, b:b + ow, :] += blocks[:, :, :, :, a, :, b, :].transpose(0, 3, 1, 4, 2, 5)
        out = out.reshape(n, c, fh, fw)
        if (fh, fw) == (hp, wp):
            return out
        full = np.zeros((n, c, hp, wp))
        full[:, :, :fh, :fw] = out
        return full
    out = np.zeros((n, c, hp, wp))
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * (oh - 1) + 1:stride, v:v + stride * (ow - 1) + 1:stride] += (
                cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    return out


# ---------------------------------------------------------------- convolution


def conv2d_forward(x, pid, stride, pad, store, return_cols=False):
    """Cross-correlation ``out[n,o,i,j] = b[o] + sum w[o,c,u,v] x_pad[n,c,i*s+u,j*s+v]``.

    With ``return_cols`` the im2col matrix is returned as well so that
    :func:`conv2d_backward` can reuse it.
    """
    p = store[pid]
    w = p.weight
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ShapeError(f"{pid}: input has {x.shape[1]} channels, kernel expects {c}")
    if pad < 0:
        raise ValueError("pad must be nonnegative")
    n = x.shape[0]
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(o, -1).T
    if p.bias is not None:
        out += p.bias
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return (out, cols) if return_cols else out


def conv2d_backward(x, grad_out, pid, stride, pad, store, cols=None, input_grad=True):
    """Accumulate weight/bias gradients for ``pid`` and return the input gradient.

    ``input_grad=False`` skips the input gradient and returns None.
    """
    p = store[pid]
    w = p.weight
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ShapeError(f"{pid}: input has {x.shape[1]} channels, kernel expects {c}")
    n, _, h, wd = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(f"{pid}: grad_out shape {grad_out.shape} != forward output {(n, o, oh, ow)}")
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride, pad)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    p.grad_w += (g.T @ cols).reshape(w.shape)
    if p.bias is not None:
        p.grad_b += g.sum(axis=0)
    if not input_grad:
        return None
    if kh == kw == 1 and stride == 1 and pad == 0:
        return (g @ w.reshape(o, c)).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    if stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh == kw:
        # input gradient as a correlation of grad_out with the flipped kernel
        flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gcols, _, _ = _im2col(grad_out, kh, kw, 1, kh - 1 - pad)
        return (gcols @ flipped.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    dcols = g @ w.reshape(o, -1)
    dx = _col2im(dcols, n, c, h + 2 * pad, wd + 2 * pad, kh, kw, stride, oh, ow)
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + wd]
    return dx


# ---------------------------------------------------------------- transpose convolution


def bilinear_kernel(channels: int, factor: int) -> np.ndarray:
    """Channel-diagonal bilinear upsampling kernel of size ``2 * factor``."""
    size = 2 * factor
    center = factor - 0.5
    og = np.arange(size)
    filt1d = 1.0 - np.abs(og - center) / factor
    filt = np.outer(filt1d, filt1d)
    w = np.zeros((channels, channels, size, size))
    for i in range(channels):
        w[i, i] = filt
    return w


def _tconv_geometry(factor):
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    return 2 * factor, factor, factor // 2


def tconv2d(x, pid, factor, store):
    """Learnable ``factor``-times upsampling (kernel 2f, stride f, crop f//2).

    Weights are stored as ``(c_in, c_out, k, k)``; the map is the exact adjoint
    of ``conv2d_forward`` with the same array, stride ``f`` and pad ``f // 2``.
    """
    k, s, off = _tconv_geometry(factor)
    w = store[pid].weight
    cin, cout = w.shape[0], w.shape[1]
    n, c, h, wd = x.shape
    if c != cin:
        raise ShapeError(f"{pid}: input has {c} channels, kernel expects {cin}")
    cols = x.transpose(0, 2, 3, 1).reshape(-1, cin) @ w.reshape(cin, -1)
    fh, fw = (h - 1) * s + k, (wd - 1) * s + k
    full = _col2im(cols, n, cout, fh, fw, k, k, s, h, wd)
    out = full[:, :, off:off + h * factor, off:off + wd * factor]
    if store[pid].bias is not None:
        out = out + store[pid].bias[None, :, None, None]
    return out


def tconv2d_backward(x, grad_out, pid, factor, store):
    k, s, off = _tconv_geometry(factor)
    p = store[pid]
    w = p.weight
    cin, cout = w.shape[0], w.shape[1]
    n, c, h, wd = x.shape
    if grad_out.shape != (n, cout, h * factor, wd * factor):
        raise ShapeError(f"{pid}: grad_out shape {grad_out.shape} mismatches forward output")
    fh, fw = (h - 1) * s + k, (wd - 1) * s + k
    gfull = np.zeros((n, cout, fh, fw))
    gfull[:, :, off:off + h * factor, off:off + wd * factor] = grad_out
    cols, oh, ow = _im2col(gfull, k, k, s, 0)
    xm = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    p.grad_w += (xm.T @ cols).reshape(w.shape)
    if p.bias is not None:
        p.grad_b += grad_out.sum(axis=(0, 2, 3))
    dx = cols @ w.reshape(cin, -1).T
    return dx.reshape(n, oh, ow, cin).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------- pooling / activation / dropout


def maxpool2_forward(x):
    """2x2/stride-2 max pooling.  Returns ``(out, argmax)``; ties go to the first index."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(grad_out, arg):
    n, c, ph, pw = grad_out.shape
    routed = (np.arange(4) == arg[..., None]) * grad_out[..., None]
    return routed.reshape(n, c, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ph, 2 * pw)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0.0)


def dropout_mask(shape, rate: float, seed: int) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped units, ``1/(1-rate)`` for kept ones."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep * (1.0 / (1.0 - rate))


def dropout(x, rate: float, seed: int, training: bool):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, seed)


# ---------------------------------------------------------------- loss


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_perpixel(logits, labels, cfg: LossConfig = LossConfig()):
    """Per-pixel softmax cross-entropy.  Returns ``(loss, grad_logits)``.

    Pixels labelled :data:`IGNORE_LABEL` contribute neither loss nor gradient.
    """
    n, k, h, w = logits.shape
    if k != cfg.num_classes:
        raise ShapeError(f"logits have {k} channels, expected {cfg.num_classes}")
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != IGNORE_LABEL
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= k):
        raise ValueError("label out of range")
    safe = np.where(valid, labels, 0).astype(np.int64)
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    per_pixel = np.where(valid, lse - picked, 0.0)
    count = int(valid.sum())
    scale = 1.0
    if cfg.reduction == "mean":
        scale = 1.0 / count if count else 0.0
    loss = float(per_pixel.sum() * scale)
    grad = softmax(logits)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= valid[:, None] * scale
    return loss, grad


# ---------------------------------------------------------------- optimizer


def sgd_momentum_step(store: ParameterStore, cfg: OptimizerConfig):
    """``v <- mu v - lr (g + decay p); p <- p + v``, then zero the gradients."""
    mu, lam = cfg.momentum, cfg.decay
    for p in store._params.values():
        for role, value, grad, mom in p.arrays():
            lr = cfg.lr_weight if role == "weight" else cfg.lr_bias
            if lam:
                step = grad + lam * value
            else:
                step = grad
            mom *= mu
            mom -= lr * step
            value += mom
            grad[...] = 0.0
    return store


# ---------------------------------------------------------------- gradient check


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return np.abs(a - b) / denom


def grad_check(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    eps: float = 1e-5,
    probes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic ``grads`` with central differences of the scalar ``f``.

    ``params`` are perturbed in place and restored.  With ``probes`` set, that
    many randomly chosen entries per array are checked instead of all of them.
    Returns the maximum relative error.
    """
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for arr, g in zip(params, grads):
        if not arr.flags.c_contiguous:
            raise ValueError("grad_check perturbs parameters in place; arrays must be contiguous")
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        if probes is None:
            idx = range(flat.size)
        else:
            idx = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            worst = max(worst, float(rel_error(gflat[i], num)))
    return worst
