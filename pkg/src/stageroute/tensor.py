"""Minimal reverse-mode autodiff engine over dense numpy buffers.

Design contract:
  - A Tensor wraps a row-major numpy array plus an optional grad buffer of
    the same shape. Ops record closures onto a dynamic graph; calling
    ``backward()`` on a scalar loss fills ``grad`` for every reachable
    tensor with ``requires_grad=True``.
  - Tensors are treated as immutable once an op has consumed them, except
    for grad buffers (and leaf ``data`` between training steps).
  - A graph can be backwarded exactly once; reuse raises GraphError. Grads
    accumulate across backward calls until the caller zeroes them.
  - Kernels are single-threaded numpy and bit-deterministic for fixed
    inputs, which the experiment harness relies on.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .errors import ConfigError, GraphError, ShapeError


class Precision(Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self):
        return np.float32 if self is Precision.SINGLE else np.float64


class Tensor:
    """Dense N-d array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "stage_tag",
                 "_backward", "_parents", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.stage_tag = None  # (side, index) set for stage outputs
        self._backward = None
        self._parents = ()
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Leaf view of the same buffer, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Reverse-mode pass from a scalar loss.

        Populates ``grad`` on every reachable requires_grad tensor. Grads
        accumulate into existing buffers; optimizers zero them between
        steps. Raises GraphError for a non-scalar loss or when any node of
        the graph was already consumed by a previous backward.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        # Iterative topological order (graphs can be a few thousand nodes deep).
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node._consumed:
                raise GraphError("graph was already consumed by a previous backward")
        for node in topo:
            if node._parents:
                node._consumed = True
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # arithmetic sugar; all graph recording happens in the module functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


_GRAD_ENABLED = True


class no_grad:
    """Context that skips graph recording (evaluation-only forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)  # copy; g is often a view
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a):
    a = _wrap(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def relu(a):
    a = _wrap(a)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), backward)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    """Sum reduction. Gradient broadcasts back over the reduced axes."""
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.data.ndim,)
    else:
        axes = tuple(ax % a.data.ndim for ax in axis)

    def backward(g):
        gk = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        _accumulate(a, np.broadcast_to(gk, a.data.shape))

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, int):
        count = a.data.shape[axis]
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = _wrap(a)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


# ------------------------------------------------------------- shape surgery

def concat_channels(*maps):
    """Concatenate feature maps along the channel axis (axis 1).

    The first argument occupies the leading channels. Batch and spatial
    dims must match exactly.
    """
    if len(maps) < 1:
        raise ShapeError("concat_channels needs at least one input")
    tensors = [_wrap(m) for m in maps]
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(first) or s[0] != first[0] or s[2:] != first[2:]:
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {first} vs {s}")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, lo:hi])

    return _make(out_data, tensors, backward)


def slice_channels(a, start, stop):
    """Contiguous channel slice ``a[:, start:stop]``."""
    a = _wrap(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _make(a.data[:, start:stop], (a,), backward)


# ----------------------------------------------------------------- softmaxes

def softmax_axis(a, axis):
    """Stable softmax along ``axis``; outputs are positive and sum to 1."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _make(out_data, (a,), backward)


def log_softmax_axis(a, axis):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        soft = np.exp(out_data)
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


# ------------------------------------------------------------------- rmsnorm

def rmsnorm_channels(a, gain, epsilon=1e-6):
    """RMS-normalize each channel vector independently per (b, h, w) position.

    out[b, :, h, w] = x / sqrt(mean_c(x^2) + eps) * gain
    """
    a, gain = _wrap(a), _wrap(gain)
    if a.data.ndim != 4:
        raise ShapeError(f"rmsnorm_channels expects [B,C,H,W], got {a.data.shape}")
    C = a.data.shape[1]
    if gain.data.shape != (C,):
        raise ShapeError(f"gain must have shape ({C},), got {gain.data.shape}")
    g4 = gain.data.reshape(1, C, 1, 1)
    ms = (a.data * a.data).mean(axis=1, keepdims=True)
    r = np.sqrt(ms + epsilon)
    xn = a.data / r
    out_data = xn * g4

    def backward(g):
        _accumulate(gain, (g * xn).sum(axis=(0, 2, 3)))
        gg = g * g4
        s = (gg * a.data).sum(axis=1, keepdims=True)
        _accumulate(a, gg / r - a.data * (s / (C * r * r * r)))

    return _make(out_data, (a, gain), backward)


def rms_query_logits(v, query, gain, epsilon=1e-6):
    """Per-position logit <query, RMSNorm(v) * gain>, fused.

    Equals tsum(mul(rmsnorm_channels(v, gain, eps), query[None,:,None,None]),
    axis=1, keepdims=True) without materializing the normalized map; the
    attention hot path uses this.
    """
    v, query, gain = _wrap(v), _wrap(query), _wrap(gain)
    if v.data.ndim != 4:
        raise ShapeError(f"rms_query_logits expects [B,C,H,W], got {v.data.shape}")
    C = v.data.shape[1]
    if query.data.shape != (C,) or gain.data.shape != (C,):
        raise ShapeError(
            f"query/gain must have shape ({C},), got {query.data.shape}, {gain.data.shape}")
    ms = (v.data * v.data).mean(axis=1, keepdims=True)
    r = np.sqrt(ms + epsilon)
    a = (query.data * gain.data).reshape(1, C, 1, 1)
    s = (a * v.data).sum(axis=1, keepdims=True)
    out_data = s / r

    def backward(g):
        # d/dv of (a.v)/r with r = sqrt(mean_c v^2 + eps)
        _accumulate(v, g * (a / r) - v.data * (g * s / (C * r * r * r)))
        vn_sum = (g * v.data / r).sum(axis=(0, 2, 3))
        _accumulate(query, gain.data * vn_sum)
        _accumulate(gain, query.data * vn_sum)

    return _make(out_data, (v, query, gain), backward)


def attention_combine(alpha, values):
    """Per-position convex combination sum_n alpha[:, n] * values[n].

    ``alpha`` is [B, N, H, W]; each value is [B, C, H, W]. Weights are
    shared across channels. Fused form of the slice/mul/add chain.
    """
    alpha = _wrap(alpha)
    values = [_wrap(v) for v in values]
    n = alpha.data.shape[1]
    if n != len(values):
        raise ShapeError(f"alpha has {n} entries but {len(values)} values given")
    out_data = alpha.data[:, 0:1] * values[0].data
    for i in range(1, n):
        out_data += alpha.data[:, i:i + 1] * values[i].data

    def backward(g):
        dalpha = np.empty_like(alpha.data)
        for i, v in enumerate(values):
            _accumulate(v, alpha.data[:, i:i + 1] * g)
            dalpha[:, i] = (g * v.data).sum(axis=1)
        _accumulate(alpha, dalpha)

    return _make(out_data, (alpha, *values), backward)


# ------------------------------------------------------------------- conv2d

def _conv2d_backward(g, x_data, w_data, cols, pad, parents):
    """Gradients for conv2d. Module-level so tests can swap it out.

    For k=3, ``cols`` is the [B, C*9, Ho*Wo] patch tensor saved by the
    forward pass.
    """
    x, w, b = parents
    B, C, H, W = x_data.shape
    outC, _, k, _ = w_data.shape
    Ho, Wo = g.shape[2], g.shape[3]
    if k == 1:
        gm = np.ascontiguousarray(g).reshape(B, outC, Ho * Wo)
        if w.requires_grad:
            dw = np.tensordot(g, x_data, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(w, dw.reshape(w_data.shape))
        if x.requires_grad:
            dx = np.matmul(w_data[:, :, 0, 0].T[None], gm)
            _accumulate(x, dx.reshape(B, C, H, W))
    else:
        gm = np.ascontiguousarray(g).reshape(B, outC, Ho * Wo)
        wm = w_data.reshape(outC, C * k * k)
        if w.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, dw.reshape(w_data.shape))
        if x.requires_grad:
            dcols = np.matmul(wm.T[None], gm).reshape(B, C, k * k, Ho, Wo)
            dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x_data.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + Ho, kj:kj + Wo] += dcols[:, :, ki * k + kj]
            dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
            _accumulate(x, dx)
    if b is not None and b.requires_grad:
        _accumulate(b, g.sum(axis=(0, 2, 3)))


def conv2d(x, weight, bias=None, padding="same"):
    """2-d convolution (cross-correlation) with square kernels of size 1 or 3.

    ``padding="same"`` preserves spatial size; ``"none"`` is a valid
    convolution. Linear in input and weights.
    """
    x, weight = _wrap(x), _wrap(weight)
    bias = _wrap(bias) if bias is not None else None
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input/weights, got {x.data.shape}, {weight.data.shape}")
    outC, inC, k, k2 = weight.data.shape
    if k != k2 or k not in (1, 3):
        raise ConfigError(f"conv2d supports square kernels of size 1 or 3, got {k}x{k2}")
    if padding not in ("same", "none"):
        raise ConfigError(f"padding must be 'same' or 'none', got {padding!r}")
    B, C, H, W = x.data.shape
    if C != inC:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weights expect {inC}")
    if bias is not None and bias.data.shape != (outC,):
        raise ShapeError(f"bias must have shape ({outC},), got {bias.data.shape}")

    pad = (k - 1) // 2 if padding == "same" else 0
    cols = None
    if k == 1:
        xr = x.data.reshape(B, C, H * W)
        out = np.matmul(weight.data[:, :, 0, 0][None], xr).reshape(B, outC, H, W)
    else:
        # patch tensor in [B, C*9, Ho*Wo] layout: shift copies stay
        # cache-friendly and the GEMM output needs no transpose
        if pad:
            xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.data.dtype)
            xp[:, :, pad:pad + H, pad:pad + W] = x.data
        else:
            xp = x.data
        Ho, Wo = H + 2 * pad - (k - 1), W + 2 * pad - (k - 1)
        patches = np.empty((B, C, k * k, Ho, Wo), dtype=x.data.dtype)
        for ki in range(k):
            for kj in range(k):
                patches[:, :, ki * k + kj] = xp[:, :, ki:ki + Ho, kj:kj + Wo]
        cols = patches.reshape(B, C * k * k, Ho * Wo)
        out = np.matmul(weight.data.reshape(outC, C * k * k)[None], cols)
        out = out.reshape(B, outC, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, outC, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    x_data, w_data = x.data, weight.data

    def backward(g):
        _conv2d_backward(g, x_data, w_data, cols, pad,
                         (x, weight, bias))

    return _make(out, parents, backward)


# ------------------------------------------------------------------ pooling

def _pool_bounds(size, target):
    # start = floor(i*size/target); end = ceil((i+1)*size/target)
    return [(math.floor(i * size / target), math.ceil((i + 1) * size / target))
            for i in range(target)]


def adaptive_max_pool(x, target_h, target_w):
    """Max-pool onto a (target_h, target_w) grid with floor/ceil windows.

    Gradient routes to the first attaining element of each window in
    row-major order.
    """
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_max_pool expects [B,C,H,W], got {x.data.shape}")
    B, C, H, W = x.data.shape
    if target_h > H or target_w > W:
        raise ShapeError(
            f"pool target ({target_h},{target_w}) exceeds input ({H},{W}); "
            "use bilinear_resize to upsample")
    if target_h < 1 or target_w < 1:
        raise ShapeError("pool target must be at least 1x1")

    disjoint = H % target_h == 0 and W % target_w == 0
    if disjoint:
        kh, kw = H // target_h, W // target_w
        v = x.data.reshape(B, C, target_h, kh, target_w, kw)
        v = v.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, target_h, target_w, kh * kw)
        arg = v.argmax(axis=-1)
        out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
        oh = np.arange(target_h).reshape(1, 1, target_h, 1)
        ow = np.arange(target_w).reshape(1, 1, 1, target_w)
        src_h = oh * kh + arg // kw
        src_w = ow * kw + arg % kw
    else:
        out = np.empty((B, C, target_h, target_w), dtype=x.data.dtype)
        src_h = np.empty((B, C, target_h, target_w), dtype=np.int64)
        src_w = np.empty_like(src_h)
        hb = _pool_bounds(H, target_h)
        wb = _pool_bounds(W, target_w)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                window = x.data[:, :, h0:h1, w0:w1]
                flat = window.reshape(B, C, -1)
                arg = flat.argmax(axis=-1)
                out[:, :, i, j] = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
                src_h[:, :, i, j] = h0 + arg // (w1 - w0)
                src_w[:, :, i, j] = w0 + arg % (w1 - w0)

    bidx = np.arange(B).reshape(B, 1, 1, 1)
    cidx = np.arange(C).reshape(1, C, 1, 1)
    flat_idx = (((bidx * C + cidx) * H + src_h) * W + src_w).ravel()

    def backward(g):
        dx = np.zeros(B * C * H * W, dtype=x.data.dtype)
        if disjoint:
            # windows do not overlap, so indices are unique
            dx[flat_idx] = g.ravel()
        else:
            np.add.at(dx, flat_idx, g.ravel())
        _accumulate(x, dx.reshape(B, C, H, W))

    return _make(out, (x,), backward)


def max_pool2x2(x):
    """Stride-2 2x2 max pool (the encoder Down step)."""
    x = _wrap(x)
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got {H}x{W}")
    return adaptive_max_pool(x, H // 2, W // 2)


# ------------------------------------------------------------------- resize

_LERP_CACHE = {}
_SCATTER_CACHE = {}


def _lerp_coords(size, target):
    # half-pixel centers with edge clamping
    key = (size, target)
    if key not in _LERP_CACHE:
        src = (np.arange(target, dtype=np.float64) + 0.5) * (size / target) - 0.5
        src = np.clip(src, 0.0, size - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, size - 1)
        _LERP_CACHE[key] = (i0, i1, src - i0)
    return _LERP_CACHE[key]


def _scatter_matrix(size, target, dtype):
    key = (size, target, np.dtype(dtype).str)
    if key not in _SCATTER_CACHE:
        i0, i1, t = _lerp_coords(size, target)
        s = np.zeros((size, target), dtype=np.float64)
        np.add.at(s, (i0, np.arange(target)), 1.0 - t)
        np.add.at(s, (i1, np.arange(target)), t)
        _SCATTER_CACHE[key] = s.astype(dtype)
    return _SCATTER_CACHE[key]


def bilinear_resize(x, target_h, target_w):
    """Bilinear resize with half-pixel-center sampling and edge clamping.

    Separable row/column lerp in the form ``a + t*(b - a)``, which is exact
    on constant inputs at any precision.
    """
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [B,C,H,W], got {x.data.shape}")
    B, C, H, W = x.data.shape
    if target_h < 1 or target_w < 1:
        raise ShapeError("resize target must be at least 1x1")

    r0, r1, tr = _lerp_coords(H, target_h)
    trc = tr.astype(x.data.dtype).reshape(1, 1, target_h, 1)
    a = x.data[:, :, r0, :]
    y = a + trc * (x.data[:, :, r1, :] - a)

    c0, c1, tc = _lerp_coords(W, target_w)
    tcc = tc.astype(x.data.dtype).reshape(1, 1, 1, target_w)
    a2 = y[:, :, :, c0]
    out = a2 + tcc * (y[:, :, :, c1] - a2)

    def backward(g):
        sc = _scatter_matrix(W, target_w, g.dtype)   # [W, target_w]
        sr = _scatter_matrix(H, target_h, g.dtype)   # [H, target_h]
        dy = (np.ascontiguousarray(g).reshape(-1, target_w) @ sc.T)
        dy = dy.reshape(B, C, target_h, W)
        dyt = np.ascontiguousarray(dy.transpose(0, 1, 3, 2)).reshape(-1, target_h)
        dx = (dyt @ sr.T).reshape(B, C, W, H).transpose(0, 1, 3, 2)
        _accumulate(x, dx)

    return _make(out, (x,), backward)


def upsample2x(x):
    """Bilinear x2 upsample (the decoder Up step)."""
    x = _wrap(x)
    B, C, H, W = x.data.shape
    return bilinear_resize(x, 2 * H, 2 * W)
