"""Differentiable primitives on batched arrays.

Every forward function takes arrays laid out as ``(N, C, *spatial)`` and
returns ``(out, cache)``; the matching backward takes the cache and the
upstream gradient. Spatial rank is inferred from the weight or given as
``dims`` (2 or 3). Single-sample convenience wrappers live at the bottom.
"""

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, NumericalError

BCE_EPS = 1e-7


_COL_BLOCK = 1 << 18
_state = {"inference": False, "margins": None}


@contextlib.contextmanager
def inference():
    """Skip caching for backward inside this block (forward-only passes)."""
    prev = _state["inference"]
    _state["inference"] = True
    try:
        yield
    finally:
        _state["inference"] = prev


@contextlib.contextmanager
def record_margins():
    """Collect distances to non-differentiable points seen during forward.

    Yields a list that receives, per ReLU call, the smallest ``|x|`` and, per
    max-pool call, the smallest gap between a window's two largest values.
    Finite-difference checks are only meaningful when these exceed the step.
    """
    prev = _state["margins"]
    _state["margins"] = margins = []
    try:
        yield margins
    finally:
        _state["margins"] = prev


def _spatial_axes(d):
    return tuple(range(2, 2 + d))


def conv_out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- convolution

def conv_forward(x, w, b, stride=1, pad=0):
    """N-d cross-correlation with zero padding (2-d or 3-d)."""
    d = w.ndim - 2
    if x.ndim != d + 2:
        raise ConfigError(f"input rank {x.ndim} does not match {d}-d kernel (expected {d + 2})")
    if x.shape[1] != w.shape[1]:
        raise ConfigError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ConfigError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    if stride < 1 or pad < 0:
        raise ConfigError("stride must be >= 1 and pad >= 0")
    ksize = w.shape[2:]
    for n, k in zip(x.shape[2:], ksize):
        if k > n + 2 * pad:
            raise ConfigError(f"kernel extent {k} exceeds padded input extent {n + 2 * pad}")

    N, C = x.shape[:2]
    O = w.shape[0]
    # channels-last patches: one row per output position, so the product is
    # (positions x taps) @ (taps x O), which BLAS handles well for small O
    xl = _channels_last_padded(x, pad)
    win = sliding_window_view(xl, ksize, axis=tuple(range(1, 1 + d)))
    if stride > 1:
        win = win[(slice(None),) + (slice(None, None, stride),) * d]
    out_sp = win.shape[1:1 + d]
    L = math.prod(out_sp)
    ck = C * math.prod(ksize)
    # (N, *out, C, *k) -> (N, *out, *k, C)
    win = win.transpose((0,) + tuple(range(1, 1 + d)) + tuple(range(2 + d, 2 + 2 * d)) + (1 + d,))
    wmat = _tap_matrix(w)
    out = np.empty((N, L, O), dtype=np.result_type(x, w))
    keep = not _state["inference"]
    cols = np.empty((N, L, ck), dtype=x.dtype) if keep else None
    # gather and multiply in cache-sized slabs of samples
    step = max(1, _COL_BLOCK // max(1, ck * L))
    for s in range(0, N, step):
        e = min(N, s + step)
        dst = cols[s:e] if keep else np.empty((e - s, L, ck), dtype=x.dtype)
        dst.reshape((e - s,) + out_sp + ksize + (C,))[...] = win[s:e]
        out[s:e] = (dst.reshape(-1, ck) @ wmat.T).reshape(e - s, L, O)
    out += b
    out = np.moveaxis(out.reshape((N,) + out_sp + (O,)), -1, 1)
    cache = (x.shape, cols.reshape(N * L, ck) if keep else None, w, stride, pad)
    return np.ascontiguousarray(out), cache


def _channels_last_padded(x, pad):
    d = x.ndim - 2
    xl = np.moveaxis(x, 1, -1)
    if not pad:
        return np.ascontiguousarray(xl)
    out = np.zeros((x.shape[0],) + tuple(n + 2 * pad for n in x.shape[2:]) + (x.shape[1],), dtype=x.dtype)
    out[(slice(None),) + (slice(pad, -pad),) * d] = xl
    return out


def _tap_matrix(w):
    """``(O, C, *k)`` kernel as ``(O, prod(k) * C)`` matching the patch rows."""
    return np.ascontiguousarray(np.moveaxis(w, 1, -1)).reshape(w.shape[0], -1)


def conv_backward(dout, cache):
    x_shape, cols, w, stride, pad = cache
    if cols is None:
        raise RuntimeError("conv forward ran under inference(); nothing cached for backward")
    d = w.ndim - 2
    O = w.shape[0]
    ksize = w.shape[2:]
    N, C = x_shape[:2]
    out_sp = dout.shape[2:]
    dmat = np.ascontiguousarray(np.moveaxis(dout, 1, -1)).reshape(-1, O)
    dw = np.moveaxis((dmat.T @ cols).reshape((O,) + ksize + (C,)), -1, 1)
    db = dmat.sum(axis=0)
    dcols = (dmat @ _tap_matrix(w)).reshape((N,) + out_sp + ksize + (C,))
    padded = tuple(n + 2 * pad for n in x_shape[2:])
    dxp = np.zeros((N,) + padded + (C,), dtype=dout.dtype)
    for off in np.ndindex(*ksize):
        sl = tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_sp))
        dxp[(slice(None),) + sl] += dcols[(slice(None),) * (1 + d) + off]
    if pad:
        dxp = dxp[(slice(None),) + (slice(pad, -pad),) * d]
    return np.ascontiguousarray(np.moveaxis(dxp, -1, 1)), np.ascontiguousarray(dw), db


# -------------------------------------------------------------------- pooling

def max_pool_forward(x, window, stride=None, dims=2):
    """Max pooling; trailing remainder that does not fill a window is dropped."""
    stride = window if stride is None else stride
    if x.ndim != dims + 2:
        raise ConfigError(f"max_pool expects rank {dims + 2} input, got {x.ndim}")
    for n in x.shape[2:]:
        if window > n:
            raise ConfigError(f"pool window {window} exceeds extent {n}")
    ksize = (window,) * dims
    win = sliding_window_view(x, ksize, axis=_spatial_axes(dims))
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * dims]
    flat = win.reshape(win.shape[:2 + dims] + (-1,))
    idx = flat.argmax(axis=-1)
    if _state["margins"] is not None and flat.shape[-1] > 1:
        top2 = np.sort(flat, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        # windows of exact zeros come from dead or dropped units and cannot flip
        live = (top2[..., 1] != 0) | (top2[..., 0] != 0)
        _state["margins"].append(float(np.min(gap[live])) if live.any() else np.inf)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, window, stride, dims)


def max_pool_backward(dout, cache):
    x_shape, idx, window, stride, dims = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    out_sp = dout.shape[2:]
    for k, off in enumerate(np.ndindex(*(window,) * dims)):
        sl = tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_sp))
        dx[(slice(None), slice(None)) + sl] += np.where(idx == k, dout, 0)
    return dx


# ----------------------------------------------------------------- upsampling

def upsample_nn_forward(x, factor, dims=2):
    if factor < 1:
        raise ConfigError("upsampling factor must be >= 1")
    if x.ndim != dims + 2:
        raise ConfigError(f"upsample expects rank {dims + 2} input, got {x.ndim}")
    out = x
    for ax in _spatial_axes(dims):
        out = np.repeat(out, factor, axis=ax)
    return out, (x.shape, factor, dims)


def upsample_nn_backward(dout, cache):
    x_shape, factor, dims = cache
    shape = list(x_shape[:2])
    for n in x_shape[2:]:
        shape += [n, factor]
    g = dout.reshape(shape)
    return g.sum(axis=tuple(range(3, 3 + 2 * dims, 2)))


# ---------------------------------------------------------------------- dense

def dense_forward(x, w, b):
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ConfigError(f"dense shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w.T + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


# ---------------------------------------------------------------- activations

def relu_forward(x):
    if _state["margins"] is not None:
        _state["margins"].append(float(np.min(np.abs(x))))
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.logaddexp(0.0, z)


# -------------------------------------------------------------------- dropout

def dropout_forward(x, p, rng=None, mode="train"):
    """Inverted dropout.

    ``rng`` is either one generator for the whole batch or a sequence with one
    generator per batch element, so that a sample's mask does not depend on
    how samples are grouped into batches.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "mc", "eval"):
        raise ConfigError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ConfigError("dropout in train/mc mode needs a random generator")
    scale = 1.0 / (1.0 - p)
    # a unit is kept when a uniform 32-bit draw clears round(p * 2**32)
    cut = np.uint32(min(round(p * 2.0 ** 32), 2 ** 32 - 1))
    if isinstance(rng, (list, tuple)):
        if len(rng) != x.shape[0]:
            raise ConfigError(f"{len(rng)} generators for batch of {x.shape[0]}")
        keep = np.empty(x.shape, dtype=bool)
        for i, g in enumerate(rng):
            np.greater_equal(_uniform_bits(g, x.shape[1:]), cut, out=keep[i])
    else:
        keep = _uniform_bits(rng, x.shape) >= cut
    if _state["inference"]:
        # same values as x * mask below, without materializing the mask
        out = x * keep
        out *= x.dtype.type(scale)
        return out, None
    mask = keep.astype(x.dtype) * x.dtype.type(scale)
    return x * mask, mask


def _uniform_bits(rng, shape):
    """Uniform uint32 array; each raw 64-bit draw supplies two values."""
    n = math.prod(shape)
    raw = rng.bit_generator.random_raw((n + 1) // 2)
    return raw.view(np.uint32)[:n].reshape(shape)


def dropout_backward(dout, mask):
    return dout * mask


# ----------------------------------------------------------------------- loss

def sigmoid_bce_loss(logits, targets, weights=None):
    """Weighted mean binary cross-entropy on logits.

    Each log-probability term is capped at ``-log(1e-7)``, the same bound as
    clamping probabilities to ``[eps, 1-eps]``; below the cap the terms use
    the stable softplus form. Returns ``(loss, dloss/dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
    if z.shape != y.shape:
        raise ConfigError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if np.any(w < 0):
        raise ConfigError("loss weights must be non-negative")
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits")
    wsum = w.sum()
    if wsum <= 0:
        raise ConfigError("loss weights sum to zero")
    cap = -math.log(BCE_EPS)
    pos_term = np.minimum(_softplus(-z), cap)
    neg_term = np.minimum(_softplus(z), cap)
    loss = float(np.sum(w * (y * pos_term + (1 - y) * neg_term)) / wsum)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    grad = w * (sigmoid(z) - y) / wsum
    return loss, grad.astype(np.result_type(logits, np.float32), copy=False)


# ------------------------------------------------------- single-sample forms

def conv2d_forward(x, w, b, stride=1, pad=0):
    if x.ndim != 3 or w.ndim != 4:
        raise ConfigError("conv2d expects x[Cin,H,W] and w[Cout,Cin,kH,kW]")
    return conv_forward(x[None], w, b, stride, pad)[0][0]


def conv3d_forward(x, w, b, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 5:
        raise ConfigError("conv3d expects x[Cin,D,H,W] and w[Cout,Cin,kD,kH,kW]")
    return conv_forward(x[None], w, b, stride, pad)[0][0]


def max_pool(x, window, stride=None, dims=2):
    """Pool a ``[C, *spatial]`` tensor; returns ``(out, argmax indices)``."""
    out, cache = max_pool_forward(x[None], window, stride, dims)
    return out[0], cache[1][0]


def upsample_nn(x, factor, dims=2):
    return upsample_nn_forward(x[None], factor, dims)[0][0]


def dense(x, w, b):
    return dense_forward(x[None], w, b)[0][0]


def dropout(x, p, rng=None, mode="train"):
    y, mask = dropout_forward(x[None], p, rng, mode)
    return y[0], mask[0]
