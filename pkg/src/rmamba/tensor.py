"""Dense float tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable operation appends a node
to the active tape (append order is already topological), so one reverse
traversal fills gradients for every reachable leaf. Gradients accumulate by
summation across fan-out and across repeated backward calls.
"""
from __future__ import annotations

import contextlib
import functools
import os
import threading

import numpy as np

DEFAULT_DTYPE = np.float32


class NumericsError(ArithmeticError):
    """Raised when a forward op produces NaN/Inf while debug checks are on."""


_local = threading.local()


def _state():
    st = getattr(_local, "state", None)
    if st is None:
        debug = os.environ.get("RMAMBA_DEBUG", "0").strip().lower() not in ("", "0", "false", "off")
        st = {"tape": Tape(), "grad": True, "dtype": DEFAULT_DTYPE, "debug": debug}
        _local.state = st
    return st


def set_debug_checks(enabled: bool):
    """Toggle NaN/Inf detection on every forward op (off in normal runs)."""
    _state()["debug"] = bool(enabled)


def debug_checks_enabled() -> bool:
    return _state()["debug"]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / data paths)."""
    st = _state()
    prev, st["grad"] = st["grad"], False
    try:
        yield
    finally:
        st["grad"] = prev


def grad_enabled() -> bool:
    return _state()["grad"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype given to newly created tensors."""
    st = _state()
    prev, st["dtype"] = st["dtype"], np.dtype(dtype)
    try:
        yield
    finally:
        st["dtype"] = prev


def current_dtype():
    return np.dtype(_state()["dtype"])


class _Node:
    __slots__ = ("out", "inputs", "backward", "needs")

    def __init__(self, out, inputs, backward, needs):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.needs = needs


class Tape:
    """Ordered record of executed differentiable ops.

    Usable as a context manager; `with Tape():` installs a fresh tape and
    restores the previous one on exit, which is how the trainer scopes each
    optimization step.
    """

    def __init__(self):
        self._nodes = []
        self._prev = None

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        self._nodes.clear()

    def __enter__(self):
        st = _state()
        self._prev = st["tape"]
        st["tape"] = self
        return self

    def __exit__(self, *exc):
        st = _state()
        st["tape"] = self._prev
        self._prev = None
        return False


def current_tape() -> Tape:
    return _state()["tape"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_leaf", "_tape", "_idx")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # reductions can hand back numpy scalars; keep their float dtype
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=current_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True
        self._tape = None
        self._idx = -1

    # --- metadata ---------------------------------------------------------
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

    def numpy(self):
        return self.data

    def detach(self):
        t = Tensor(self.data, requires_grad=False)
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"

    # --- autodiff ---------------------------------------------------------
    def backward(self):
        """Populate .grad on every requires_grad leaf reachable from this scalar."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if self._leaf or self._tape is None:
            raise ValueError("backward on a detached tensor (no recorded graph)")
        nodes = self._tape._nodes
        grads = {id(self): np.ones_like(self.data)}
        for k in range(self._idx, -1, -1):
            node = nodes[k]
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, need, g in zip(node.inputs, node.needs, in_grads):
                if not need or g is None:
                    continue
                if inp._leaf:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = g if prev is None else prev + g

    # --- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def flip(self, axis):
        return flip(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(arr, inputs, make_backward):
    """Wrap a forward result; record a tape node when gradients are live.

    `make_backward(needs)` returns `bw(grad_out) -> tuple of per-input grads`,
    built after knowing which inputs actually need gradients.
    """
    st = _state()
    if st["debug"] and not np.all(np.isfinite(arr)):
        raise NumericsError("non-finite values in forward op output")
    out = Tensor(arr)
    if st["grad"] and any(t.requires_grad for t in inputs):
        needs = tuple(t.requires_grad for t in inputs)
        out.requires_grad = True
        out._leaf = False
        tape = st["tape"]
        out._tape = tape
        out._idx = len(tape._nodes)
        tape._nodes.append(_Node(out, tuple(inputs), make_backward(needs), needs))
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise / broadcasting ops ----------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    arr = a.data + b.data

    def make_bw(needs):
        def bw(g):
            ga = _unbroadcast(g, a.shape) if needs[0] else None
            gb = _unbroadcast(g, b.shape) if needs[1] else None
            return ga, gb
        return bw

    return _record(arr, (a, b), make_bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    arr = a.data - b.data

    def make_bw(needs):
        def bw(g):
            ga = _unbroadcast(g, a.shape) if needs[0] else None
            gb = _unbroadcast(-g, b.shape) if needs[1] else None
            return ga, gb
        return bw

    return _record(arr, (a, b), make_bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    arr = a.data * b.data

    def make_bw(needs):
        def bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if needs[0] else None
            gb = _unbroadcast(g * a.data, b.shape) if needs[1] else None
            return ga, gb
        return bw

    return _record(arr, (a, b), make_bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    arr = a.data / b.data

    def make_bw(needs):
        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if needs[1] else None
            return ga, gb
        return bw

    return _record(arr, (a, b), make_bw)


def neg(a):
    a = as_tensor(a)

    def make_bw(needs):
        return lambda g: (-g,)

    return _record(-a.data, (a,), make_bw)


def _unary(a, arr, dlocal):
    """Elementwise op with local derivative array `dlocal`."""
    def make_bw(needs):
        return lambda g: (g * dlocal,)

    return _record(arr, (a,), make_bw)


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _unary(a, e, e)


def log(a):
    a = as_tensor(a)
    return _unary(a, np.log(a.data), 1.0 / a.data)


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _unary(a, s, s * (1.0 - s))


def _sigmoid_np(x):
    # stable both directions
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _unary(a, a.data * s, s * (1.0 + a.data * (1.0 - s)))


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(a.dtype)
    return _unary(a, a.data * mask, mask)


def softplus(a):
    a = as_tensor(a)
    x = a.data
    arr = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return _unary(a, arr.astype(x.dtype, copy=False), _sigmoid_np(x))


def clamp(a, lo, hi):
    a = as_tensor(a)
    arr = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return _unary(a, arr, mask)


_ACTIVATIONS = {"sigmoid": sigmoid, "silu": silu, "relu": relu}


def activation(x, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}, expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# --- reductions -------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    arr = a.data.sum(axis=axis, keepdims=keepdims)

    def make_bw(needs):
        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)
        return bw

    return _record(arr, (a,), make_bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    arr = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / arr.size

    def make_bw(needs):
        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, a.shape).copy() / scale,)
        return bw

    return _record(arr, (a,), make_bw)


# --- shape ops ---------------------------------------------------------------

def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.shape

    def make_bw(needs):
        return lambda g: (g.reshape(orig),)

    return _record(a.data.reshape(shape), (a,), make_bw)


def transpose(a, *axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = tuple(np.argsort(axes))

    def make_bw(needs):
        return lambda g: (g.transpose(inv),)

    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), make_bw)


def flip(a, axis):
    a = as_tensor(a)

    def make_bw(needs):
        return lambda g: (np.flip(g, axis=axis),)

    return _record(np.ascontiguousarray(np.flip(a.data, axis=axis)), (a,), make_bw)


def narrow(a, idx):
    """Basic slicing; gradient scatters back into a zero tensor."""
    a = as_tensor(a)
    arr = a.data[idx]
    if arr.ndim == 0:
        arr = arr.reshape(())

    def make_bw(needs):
        def bw(g):
            gx = np.zeros(a.shape, dtype=a.dtype)
            gx[idx] = g
            return (gx,)
        return bw

    return _record(np.ascontiguousarray(arr), (a,), make_bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    arr = np.stack([t.data for t in tensors], axis=axis)

    def make_bw(needs):
        def bw(g):
            parts = np.moveaxis(g, axis, 0)
            return tuple(np.ascontiguousarray(parts[i]) if needs[i] else None
                         for i in range(len(tensors)))
        return bw

    return _record(arr, tuple(tensors), make_bw)


def pad2d(a, pad):
    """Zero-pad the trailing two (spatial) axes by `pad` on every side."""
    a = as_tensor(a)
    if pad == 0:
        widths = None
        arr = a.data
    else:
        widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
        arr = np.pad(a.data, widths)

    def make_bw(needs):
        def bw(g):
            if pad == 0:
                return (g,)
            sl = (Ellipsis, slice(pad, g.shape[-2] - pad), slice(pad, g.shape[-1] - pad))
            return (np.ascontiguousarray(g[sl]),)
        return bw

    return _record(arr, (a,), make_bw)


# --- linear / normalization ---------------------------------------------------

def linear(x, weight, bias=None):
    """Affine map over the trailing axis: y[..., o] = sum_i x[..., i] w[o, i] + b[o]."""
    x, weight = as_tensor(x), as_tensor(weight)
    din = x.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != din:
        raise ValueError(f"linear: weight {weight.shape} incompatible with input trailing dim {din}")
    arr = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
        arr = arr + bias.data
        inputs.append(bias)

    def make_bw(needs):
        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g @ weight.data) if needs[0] else None
            gw = (g2.T @ x.data.reshape(-1, din)) if needs[1] else None
            out = [gx, gw]
            if bias is not None:
                out.append(g2.sum(axis=0) if needs[2] else None)
            return tuple(out)
        return bw

    return _record(arr, tuple(inputs), make_bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the trailing (channel) axis, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    arr = gamma.data * xhat + beta.data

    def make_bw(needs):
        def bw(g):
            gx = None
            if needs[0]:
                gxh = g * gamma.data
                gx = inv_std * (gxh - gxh.mean(axis=-1, keepdims=True)
                                - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
            ggamma = (g * xhat).reshape(-1, c).sum(axis=0) if needs[1] else None
            gbeta = g.reshape(-1, c).sum(axis=0) if needs[2] else None
            return gx, ggamma, gbeta
        return bw

    return _record(arr, (x, gamma, beta), make_bw)


# --- convolution ---------------------------------------------------------------

@functools.lru_cache(maxsize=128)
def _col2im_index(c, hp, wp, kh, kw, stride, ho, wo):
    ch = np.repeat(np.arange(c), kh * kw)
    di = np.tile(np.repeat(np.arange(kh), kw), c)
    dj = np.tile(np.arange(kw), c * kh)
    oh = np.repeat(np.arange(ho), wo) * stride
    ow = np.tile(np.arange(wo), ho) * stride
    rows = di[:, None] + oh[None, :]
    cols = dj[:, None] + ow[None, :]
    idx = (ch[:, None] * hp + rows) * wp + cols
    return idx.ravel()


def _im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, ho, wo), strides=(s0, s1, s2, s3, s2 * stride, s3 * stride))
    return win.reshape(n, c * kh * kw, ho * wo), ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2D cross-correlation, NCHW input, OIHW weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(x.data, [(0, 0), (0, 0), (padding, padding), (padding, padding)]) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2 = weight.data.reshape(cout, -1)
    arr = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias {bias.shape} != ({cout},)")
        arr = arr + bias.data[None, :, None, None]
        inputs.append(bias)
    hp, wp = xp.shape[-2:]

    def make_bw(needs):
        def bw(g):
            g2 = g.reshape(n, cout, ho * wo)
            gx = None
            if needs[0]:
                gcols = np.matmul(w2.T, g2)  # [n, cin*kh*kw, ho*wo]
                flat_idx = _col2im_index(cin, hp, wp, kh, kw, stride, ho, wo)
                gxp = np.empty((n, cin * hp * wp), dtype=np.float64)
                for b in range(n):
                    gxp[b] = np.bincount(flat_idx, weights=gcols[b].ravel(), minlength=cin * hp * wp)
                gxp = gxp.reshape(n, cin, hp, wp).astype(x.dtype, copy=False)
                gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
                gx = np.ascontiguousarray(gx)
            gw = None
            if needs[1]:
                gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            out = [gx, gw]
            if bias is not None:
                out.append(g2.sum(axis=(0, 2)) if needs[2] else None)
            return tuple(out)
        return bw

    return _record(arr, tuple(inputs), make_bw)


# --- bilinear resize -----------------------------------------------------------

@functools.lru_cache(maxsize=256)
def _resize_coeffs(n_in, n_out):
    if n_in == n_out:
        i0 = np.arange(n_out)
        return i0, i0, np.zeros(n_out)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x, out_h, out_w):
    """Bilinear spatial resize of an NCHW tensor (corner alignment off)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError("bilinear_resize expects an NCHW tensor")
    n, c, h, w = x.shape
    y0, y1, fy = _resize_coeffs(h, out_h)
    x0, x1, fx = _resize_coeffs(w, out_w)
    dt = x.dtype
    w00 = ((1 - fy)[:, None] * (1 - fx)[None, :]).astype(dt)
    w01 = ((1 - fy)[:, None] * fx[None, :]).astype(dt)
    w10 = (fy[:, None] * (1 - fx)[None, :]).astype(dt)
    w11 = (fy[:, None] * fx[None, :]).astype(dt)
    y0c, y1c = y0[:, None], y1[:, None]
    x0c, x1c = x0[None, :], x1[None, :]
    d = x.data
    arr = (w00 * d[:, :, y0c, x0c] + w01 * d[:, :, y0c, x1c]
           + w10 * d[:, :, y1c, x0c] + w11 * d[:, :, y1c, x1c])

    def make_bw(needs):
        def bw(g):
            gx = np.zeros((n, c, h, w), dtype=dt)
            sl = (slice(None), slice(None))
            np.add.at(gx, sl + (y0c, x0c), g * w00)
            np.add.at(gx, sl + (y0c, x1c), g * w01)
            np.add.at(gx, sl + (y1c, x0c), g * w10)
            np.add.at(gx, sl + (y1c, x1c), g * w11)
            return (gx,)
        return bw

    return _record(arr, (x,), make_bw)


# --- finite differences ----------------------------------------------------------

def finite_diff_grad(f, x, h=1e-3):
    """Central-difference gradient estimate of scalar-valued f at tensor x."""
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    x = as_tensor(x)
    base = x.data.astype(np.float64, copy=True)
    out = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(*base.shape):
            pert = base.copy()
            pert[idx] = base[idx] + h
            fp = f(Tensor(pert.astype(x.dtype))).item()
            pert[idx] = base[idx] - h
            fm = f(Tensor(pert.astype(x.dtype))).item()
            out[idx] = (fp - fm) / (2.0 * h)
    return out.astype(x.dtype)
