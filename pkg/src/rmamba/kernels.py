"""Recurrence kernels for the selective scan.

The state update h_t = a_t * h_{t-1} + b_t (elementwise, h_0 = 0) is the hot
inner loop of the whole network. Kernels come in two flavors selected at
import time by the RMAMBA_NUMBA env flag:

  * numba @njit scalar loops (default when numba is importable),
  * vectorized numpy fallbacks (RMAMBA_NUMBA=0, or numba missing).

Both flavors perform the same multiply/add sequence per element, so for the
sequential and parallel algorithms the two backends agree bitwise. All
kernels are single-threaded and deterministic.

Array layout is [N, L, D, S]: batch, sequence position, channel, state.
"""
from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("RMAMBA_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "off", "no")

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    HAVE_NUMBA = False

USE_NUMBA = NUMBA_REQUESTED and HAVE_NUMBA


def combine(first, second):
    """Associative composition of recurrence steps (a, b): later applied to earlier.

    Applying (a, b) means h -> a * h + b. Composing the earlier step `first`
    with the later step `second` yields (a2 * a1, a2 * b1 + b2).
    """
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


# --- numpy fallbacks ---------------------------------------------------------

def scan_sequential_numpy(a, bu):
    h = np.empty_like(a)
    acc = bu[:, 0].copy()
    h[:, 0] = acc
    for t in range(1, a.shape[1]):
        acc = a[:, t] * acc + bu[:, t]
        h[:, t] = acc
    return h

def scan_backward_numpy(a, h, gh):
    ga = np.empty_like(a)
    gbu = np.empty_like(a)
    length = a.shape[1]
    acc = gh[:, length - 1].copy()
    for t in range(length - 1, -1, -1):
        if t < length - 1:
            acc = gh[:, t] + a[:, t + 1] * acc
        gbu[:, t] = acc
        if t > 0:
            ga[:, t] = acc * h[:, t - 1]
        else:
            ga[:, 0] = 0.0
    return ga, gbu

def scan_parallel_numpy(a, bu):
    ac = a.copy()
    h = bu.copy()
    length = a.shape[1]
    step = 1
    while step < length:
        h[:, step:] = h[:, step:] + ac[:, step:] * h[:, :-step]
        ac[:, step:] = ac[:, step:] * ac[:, :-step]
        step *= 2
    return h


# --- numba kernels -----------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _scan_sequential_nb(a, bu, h):
        n, length, d, s = a.shape
        for b in range(n):
            for j in range(d):
                for k in range(s):
                    h[b, 0, j, k] = bu[b, 0, j, k]
            for t in range(1, length):
                for j in range(d):
                    for k in range(s):
                        h[b, t, j, k] = a[b, t, j, k] * h[b, t - 1, j, k] + bu[b, t, j, k]

    @njit(cache=True)
    def _scan_backward_nb(a, h, gh, ga, gbu):
        n, length, d, s = a.shape
        for b in range(n):
            for j in range(d):
                for k in range(s):
                    acc = gh[b, length - 1, j, k]
                    for t in range(length - 1, -1, -1):
                        if t < length - 1:
                            acc = gh[b, t, j, k] + a[b, t + 1, j, k] * acc
                        gbu[b, t, j, k] = acc
                        if t > 0:
                            ga[b, t, j, k] = acc * h[b, t - 1, j, k]
                        else:
                            ga[b, 0, j, k] = 0.0

    @njit(cache=True)
    def _scan_parallel_nb(a, bu, ac, h):
        n, length, d, s = a.shape
        ac[:] = a
        h[:] = bu
        step = 1
        while step < length:
            for b in range(n):
                for t in range(length - 1, step - 1, -1):
                    for j in range(d):
                        for k in range(s):
                            h[b, t, j, k] = h[b, t, j, k] + ac[b, t, j, k] * h[b, t - step, j, k]
                            ac[b, t, j, k] = ac[b, t, j, k] * ac[b, t - step, j, k]
            step *= 2

    def scan_sequential_numba(a, bu):
        h = np.empty_like(a)
        _scan_sequential_nb(a, bu, h)
        return h

    def scan_backward_numba(a, h, gh):
        ga = np.empty_like(a)
        gbu = np.empty_like(a)
        _scan_backward_nb(a, h, gh, ga, gbu)
        return ga, gbu

    def scan_parallel_numba(a, bu):
        ac = np.empty_like(a)
        h = np.empty_like(a)
        _scan_parallel_nb(a, bu, ac, h)
        return h

    # Fused recurrence + readout. The decay factors `a` arrive precomputed
    # (numpy's SIMD exp is far faster than a scalar exp per element here),
    # so the kernel body is pure multiply/add:
    #   h_t = a_t (.) h_{t-1} + delta_t B_t u_t;  y_t = <C_t, h_t> + D u_t

    @njit(cache=True)
    def _fused_scan_fwd_nb(u, delta, B, C, a, D_skip, h, y):
        n, length, d, s = a.shape
        for b in range(n):
            for t in range(length):
                for j in range(d):
                    du = delta[b, t, j] * u[b, t, j]
                    acc = 0.0
                    for k in range(s):
                        hprev = h[b, t - 1, j, k] if t > 0 else 0.0
                        hv = a[b, t, j, k] * hprev + du * B[b, t, k]
                        h[b, t, j, k] = hv
                        acc += C[b, t, k] * hv
                    y[b, t, j] = acc + D_skip[j] * u[b, t, j]

    @njit(cache=True)
    def _fused_scan_bwd_nb(u, delta, B, C, a, D_skip, h, gy,
                           gu, gdelta, gB, gC, ga, gD):
        n, length, d, s = a.shape
        for b in range(n):
            carried = np.zeros((d, s), dtype=a.dtype)
            for t in range(length - 1, -1, -1):
                for j in range(d):
                    gyv = gy[b, t, j]
                    uval = u[b, t, j]
                    dt = delta[b, t, j]
                    guv = gyv * D_skip[j]
                    gD[j] += gyv * uval
                    gduv = 0.0
                    for k in range(s):
                        hv = h[b, t, j, k]
                        gC[b, t, k] += gyv * hv
                        gh = gyv * C[b, t, k]
                        if t < length - 1:
                            gh += a[b, t + 1, j, k] * carried[j, k]
                        carried[j, k] = gh
                        bval = B[b, t, k]
                        gduv += gh * bval
                        gB[b, t, k] += gh * dt * uval
                        ga[b, t, j, k] = gh * (h[b, t - 1, j, k] if t > 0 else 0.0)
                    gu[b, t, j] = guv + gduv * dt
                    gdelta[b, t, j] = gduv * uval

    def fused_scan_forward(u, delta, B, C, a, D_skip):
        h = np.empty_like(a)
        y = np.empty_like(u)
        _fused_scan_fwd_nb(u, delta, B, C, a, D_skip, h, y)
        return y, h

    def fused_scan_backward(u, delta, B, C, a, D_skip, h, gy):
        gu = np.empty_like(u)
        gdelta = np.empty_like(u)
        gB = np.zeros_like(B)
        gC = np.zeros_like(C)
        ga = np.empty_like(a)
        gD = np.zeros_like(D_skip)
        _fused_scan_bwd_nb(u, delta, B, C, a, D_skip, h, gy,
                           gu, gdelta, gB, gC, ga, gD)
        return gu, gdelta, gB, gC, ga, gD

else:  # pragma: no cover
    scan_sequential_numba = None
    scan_backward_numba = None
    scan_parallel_numba = None
    fused_scan_forward = None
    fused_scan_backward = None


# --- active backend ------------------------------------------------------------

if USE_NUMBA:
    scan_sequential = scan_sequential_numba
    scan_backward = scan_backward_numba
    scan_parallel = scan_parallel_numba
else:
    scan_sequential = scan_sequential_numpy
    scan_backward = scan_backward_numpy
    scan_parallel = scan_parallel_numpy


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def available_backends():
    names = ["numpy"]
    if HAVE_NUMBA:
        names.insert(0, "numba")
    return names


def backend_fns(name):
    """(sequential, parallel, backward) triple for a named backend."""
    if name == "numba":
        if not HAVE_NUMBA:
            raise ValueError("numba backend unavailable")
        return scan_sequential_numba, scan_parallel_numba, scan_backward_numba
    if name == "numpy":
        return scan_sequential_numpy, scan_parallel_numpy, scan_backward_numpy
    raise ValueError(f"unknown backend {name!r}")
