"""Timing harness for the scan kernels: sequential vs parallel, numba vs numpy."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class BenchRow:
    length: int
    algorithm: str   # sequential | parallel
    backend: str     # numba | numpy
    ns_per_element: float


def _make_inputs(length, d=32, s=16, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.7, 0.999, size=(1, length, d, s)).astype(np.float32)
    bu = rng.uniform(-1.0, 1.0, size=(1, length, d, s)).astype(np.float32)
    return a, bu


def _time_call(fn, a, bu, min_repeats=3, min_seconds=0.15):
    fn(a, bu)  # warm up (jit compile, cache touch)
    times = []
    total = 0.0
    while len(times) < min_repeats or total < min_seconds:
        t0 = time.perf_counter()
        fn(a, bu)
        dt = time.perf_counter() - t0
        times.append(dt)
        total += dt
        if len(times) > 50:
            break
    return min(times)


def run_bench(lengths, d=32, s=16, backends=None):
    """Time each (algorithm, backend) pair; ns per scanned element."""
    rows = []
    for name in backends or kernels.available_backends():
        seq_fn, par_fn, _ = kernels.backend_fns(name)
        for length in lengths:
            a, bu = _make_inputs(length, d=d, s=s)
            n_elems = a.size
            for alg, fn in (("sequential", seq_fn), ("parallel", par_fn)):
                best = _time_call(fn, a, bu)
                rows.append(BenchRow(length, alg, name, best / n_elems * 1e9))
    return rows


def sequential_slope_ratio(rows):
    """Max/min ns-per-element across lengths for the active backend's sequential scan."""
    active = kernels.backend_name()
    vals = [r.ns_per_element for r in rows if r.algorithm == "sequential" and r.backend == active]
    if len(vals) < 2:
        raise ValueError("need at least two lengths to measure scaling")
    return max(vals) / min(vals)


def format_table(rows):
    lines = [f"{'L':>6}  {'algorithm':<10}  {'backend':<6}  {'ns/elem':>9}"]
    for r in rows:
        lines.append(f"{r.length:>6}  {r.algorithm:<10}  {r.backend:<6}  {r.ns_per_element:>9.2f}")
    return "\n".join(lines)
