"""Parameter-holding building blocks on top of the tensor core."""
from __future__ import annotations

import numpy as np

from .tensor import (Tensor, conv2d, current_dtype, layer_norm, linear, pad2d,
                     silu, transpose)


def param(values) -> Tensor:
    """Trainable tensor in the active default dtype."""
    return Tensor(np.asarray(values, dtype=current_dtype()), requires_grad=True)


def trunc_normal(rng, shape, std=0.02):
    """Truncated normal init: resample draws beyond two standard deviations."""
    z = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(z) > 2.0
        if not bad.any():
            break
        z[bad] = rng.standard_normal(int(bad.sum()))
    np.clip(z, -2.0, 2.0, out=z)
    return param(z * std)


def zeros_param(shape):
    return param(np.zeros(shape))


def ones_param(shape):
    return param(np.ones(shape))


class Module:
    """Minimal container: walks attributes to find parameters and children."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            yield from _walk(name, val)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"parameter {name}: shape {tuple(arr.shape)} != expected {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)


def _walk(name, val):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())


class Linear(Module):
    def __init__(self, rng, din, dout, bias=True):
        self.weight = trunc_normal(rng, (dout, din))
        self.bias = zeros_param((dout,)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, bias=True):
        self.stride = stride
        self.padding = padding
        self.weight = trunc_normal(rng, (cout, cin, kernel, kernel))
        self.bias = zeros_param((cout,)) if bias else None

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    """Per-channel kxk conv, composed from shifted slices of the padded input."""

    def __init__(self, rng, channels, kernel=3, bias=True):
        self.kernel = kernel
        self.padding = kernel // 2
        self.weight = trunc_normal(rng, (channels, kernel, kernel))
        self.bias = zeros_param((channels,)) if bias else None

    def __call__(self, x):
        n, c, h, w = x.shape
        xp = pad2d(x, self.padding)
        out = None
        for i in range(self.kernel):
            for j in range(self.kernel):
                tap = xp[:, :, i:i + h, j:j + w] * self.weight[:, i, j].reshape(1, c, 1, 1)
                out = tap if out is None else out + tap
        if self.bias is not None:
            out = out + self.bias.reshape(1, c, 1, 1)
        return out


class ChannelNorm(Module):
    """Layer norm over the channel axis of an NCHW map."""

    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))

    def __call__(self, x):
        xl = transpose(x, 0, 2, 3, 1)
        yl = layer_norm(xl, self.gamma, self.beta, eps=self.eps)
        return transpose(yl, 0, 3, 1, 2)


class LayerNormLast(Module):
    """Layer norm over the trailing axis (channels-last layouts)."""

    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Mlp(Module):
    """Pointwise feed-forward over channels of an NCHW map, silu between."""

    def __init__(self, rng, channels, ratio=4):
        hidden = channels * ratio
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)

    def __call__(self, x):
        xl = transpose(x, 0, 2, 3, 1)
        yl = self.fc2(silu(self.fc1(xl)))
        return transpose(yl, 0, 3, 1, 2)
