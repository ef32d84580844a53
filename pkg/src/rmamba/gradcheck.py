"""Finite-difference verification of every differentiable op and the full model.

All checks run in float64: central differences at h=1e-3 are meaningless in
float32 rounding noise, while the code path under test is dtype-generic.
The pass criterion everywhere is |analytic - numeric| <= max(1e-4, 1e-3 |numeric|).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import desk_model_config
from .decoder import AttentionMode, RMAStage
from .losses import bce_loss, combined_loss, dice_loss
from .layers import DepthwiseConv2d
from .model import build_model
from .ss2d import SS2D, SsmParams, selective_scan_1d
from .tensor import Tape, Tensor, finite_diff_grad, no_grad
from .vss import VssBlock

RTOL = 1e-3
ATOL = 1e-4
H_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    ok: bool
    max_err: float

    def line(self):
        status = "ok" if self.ok else "FAIL"
        return f"{status:4s}  {self.name}  (max err {self.max_err:.2e})"


def _max_err(analytic, numeric):
    diff = np.abs(analytic - numeric)
    allow = np.maximum(ATOL, RTOL * np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(allow > 0, diff / allow, 0.0)
    return float(ratio.max()) if ratio.size else 0.0


def check_fn(name, f, x_arr, h=H_STEP) -> CheckResult:
    """Compare backward() against central differences for scalar f(x)."""
    x = Tensor(np.asarray(x_arr, dtype=np.float64), requires_grad=True)
    with Tape():
        f(x).backward()
    analytic = x.grad
    numeric = finite_diff_grad(f, x, h=h)
    err = _max_err(analytic, numeric)
    return CheckResult(name, err <= 1.0, err)


def _sampled_param_checks(name, loss_fn, named_params, rng, per_param=3, h=H_STEP):
    """Check sampled entries of each parameter against finite differences."""
    for _, p in named_params:
        p.grad = None  # earlier checks may share these modules
    with Tape():
        loss_fn().backward()
    grads = {n: p.grad.copy() for n, p in named_params}
    worst = 0.0
    with no_grad():
        for pname, p in named_params:
            flat = p.data.reshape(-1)
            k = min(per_param, flat.size)
            for idx in rng.choice(flat.size, size=k, replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = loss_fn().item()
                flat[idx] = orig - h
                fm = loss_fn().item()
                flat[idx] = orig
                numeric = (fp - fm) / (2.0 * h)
                analytic = grads[pname].reshape(-1)[idx]
                err = _max_err(np.array(analytic), np.array(numeric))
                worst = max(worst, err)
    return CheckResult(name, worst <= 1.0, worst)


def _elementwise_checks(rng):
    x_pm = rng.uniform(-1.0, 1.0, size=(3, 4))
    x_pos = rng.uniform(0.3, 2.0, size=(3, 4))
    x_off_zero = np.where(np.abs(x_pm) < 0.15, 0.4, x_pm)  # keep away from relu kink
    w = rng.uniform(-1.0, 1.0, size=(4,))
    yield check_fn("add.broadcast", lambda t: (t + Tensor(w)).sum(), x_pm)
    yield check_fn("sub", lambda t: (1.5 - t).sum(), x_pm)
    yield check_fn("mul.broadcast", lambda t: (t * Tensor(w) * t).sum(), x_pm)
    yield check_fn("div", lambda t: (t / Tensor(x_pos)).sum(), x_pm)
    yield check_fn("div.denominator", lambda t: (Tensor(x_pm) / t).sum(), x_pos)
    yield check_fn("neg", lambda t: (-t).sum(), x_pm)
    yield check_fn("exp", lambda t: T.exp(t).sum(), x_pm)
    yield check_fn("log", lambda t: T.log(t).sum(), x_pos)
    yield check_fn("sigmoid", lambda t: T.sigmoid(t).sum(), x_pm)
    yield check_fn("silu", lambda t: T.silu(t).sum(), x_pm)
    yield check_fn("relu", lambda t: T.relu(t).sum(), x_off_zero)
    yield check_fn("softplus", lambda t: T.softplus(t).sum(), x_pm)
    # inside, well outside, and nowhere near the clamp bounds at +-0.8
    clamp_in = np.where(np.abs(x_pm) > 0.6, np.sign(x_pm) * 0.95, x_pm * 0.5)
    yield check_fn("clamp", lambda t: (T.clamp(t, -0.8, 0.8) * 2.0).sum(), clamp_in)
    yield check_fn("sum.axis", lambda t: (t.sum(axis=1) * Tensor(np.arange(3.0))).sum(), x_pm)
    yield check_fn("mean.axis", lambda t: (t.mean(axis=0, keepdims=True) * 2.0).sum(), x_pm)
    yield check_fn("mean.all", lambda t: t.mean() * 3.0, x_pm)


def _shape_checks(rng):
    x = rng.uniform(-1.0, 1.0, size=(2, 3, 4))
    w = rng.uniform(-1.0, 1.0, size=(2, 3, 4))
    yield check_fn("reshape", lambda t: (T.reshape(t, 6, 4) * Tensor(w.reshape(6, 4))).sum(), x)
    yield check_fn("transpose", lambda t: (T.transpose(t, 2, 0, 1) * Tensor(w.transpose(2, 0, 1))).sum(), x)
    yield check_fn("flip", lambda t: (t.flip(1) * Tensor(w)).sum(), x)
    x4 = rng.uniform(-1.0, 1.0, size=(1, 2, 3, 3))
    w4 = rng.uniform(-1.0, 1.0, size=(1, 2, 5, 5))
    yield check_fn("pad2d", lambda t: (T.pad2d(t, 1) * Tensor(w4)).sum(), x4)
    yield check_fn("slice", lambda t: (t[:, 1:, 1:-1] * 2.0).sum() + (t[:, 0] * 3.0).sum(), x)
    wup = rng.uniform(-1.0, 1.0, size=(1, 2, 6, 6))
    yield check_fn("bilinear_resize.up", lambda t: (T.bilinear_resize(t, 6, 6) * Tensor(wup)).sum(), x4)
    wdn = rng.uniform(-1.0, 1.0, size=(1, 2, 2, 2))
    yield check_fn("bilinear_resize.down", lambda t: (T.bilinear_resize(t, 2, 2) * Tensor(wdn)).sum(), x4)


def _dense_checks(rng):
    x = rng.uniform(-1.0, 1.0, size=(2, 5, 3))
    w = rng.uniform(-1.0, 1.0, size=(4, 3))
    b = rng.uniform(-1.0, 1.0, size=(4,))
    yield check_fn("linear.x", lambda t: T.linear(t, Tensor(w), Tensor(b)).sum(), x)
    yield check_fn("linear.w", lambda t: (T.linear(Tensor(x), t, Tensor(b)) * 0.5).sum(), w)
    yield check_fn("linear.b", lambda t: T.linear(Tensor(x), Tensor(w), t).sum(), b)

    xn = rng.uniform(-1.0, 1.0, size=(2, 3, 5))
    gamma = rng.uniform(0.5, 1.5, size=(5,))
    beta = rng.uniform(-0.5, 0.5, size=(5,))
    wn = rng.uniform(-1.0, 1.0, size=(2, 3, 5))
    mixer = Tensor(wn)
    yield check_fn("layer_norm.x", lambda t: (T.layer_norm(t, Tensor(gamma), Tensor(beta)) * mixer).sum(), xn)
    yield check_fn("layer_norm.gamma", lambda t: (T.layer_norm(Tensor(xn), t, Tensor(beta)) * mixer).sum(), gamma)
    yield check_fn("layer_norm.beta", lambda t: (T.layer_norm(Tensor(xn), Tensor(gamma), t) * mixer).sum(), beta)


def _conv_checks(rng):
    x = rng.uniform(-1.0, 1.0, size=(2, 3, 6, 6))
    w = rng.uniform(-0.5, 0.5, size=(4, 3, 3, 3))
    b = rng.uniform(-0.5, 0.5, size=(4,))
    for stride, pad, tag in ((1, 0, "s1p0"), (1, 1, "s1p1"), (2, 1, "s2p1")):
        yield check_fn(f"conv2d.x.{tag}",
                       lambda t, s=stride, p=pad: T.conv2d(t, Tensor(w), Tensor(b), stride=s, padding=p).sum(), x)
        yield check_fn(f"conv2d.w.{tag}",
                       lambda t, s=stride, p=pad: (T.conv2d(Tensor(x), t, Tensor(b), stride=s, padding=p) * 0.7).sum(), w)
    yield check_fn("conv2d.b", lambda t: T.conv2d(Tensor(x), Tensor(w), t, padding=1).sum(), b)
    # even-kernel patch embedding, as the encoder stem uses
    w4 = rng.uniform(-0.5, 0.5, size=(2, 3, 4, 4))
    yield check_fn("conv2d.x.k4s4", lambda t: T.conv2d(t, Tensor(w4), stride=4).sum(), rng.uniform(-1, 1, size=(1, 3, 8, 8)))

    rng_dw = np.random.default_rng(7)
    with T.default_dtype(np.float64):
        dw = DepthwiseConv2d(rng_dw, 3, kernel=3)
    xdw = rng.uniform(-1.0, 1.0, size=(2, 3, 5, 5))
    yield check_fn("depthwise_conv.x", lambda t: dw(t).sum(), xdw)
    yield _sampled_param_checks("depthwise_conv.params",
                                lambda: dw(Tensor(xdw)).sum(),
                                list(dw.named_parameters()), rng, per_param=4)


def _scan_checks(rng):
    with T.default_dtype(np.float64):
        params = SsmParams(np.random.default_rng(11), d_inner=3, d_state=4)
    u = rng.uniform(-1.0, 1.0, size=(1, 3, 6))
    wmix = Tensor(rng.uniform(-1.0, 1.0, size=(1, 3, 6)))
    yield check_fn("selective_scan.u", lambda t: (selective_scan_1d(t, params) * wmix).sum(), u)
    yield _sampled_param_checks("selective_scan.params",
                                lambda: (selective_scan_1d(Tensor(u), params) * wmix).sum(),
                                list(params.named_parameters()), rng, per_param=4)


def _block_checks(rng):
    with T.default_dtype(np.float64):
        ss2d = SS2D(np.random.default_rng(13), channels=4, d_state=4, expand=2)
        vss = VssBlock(np.random.default_rng(17), channels=4, d_state=4, expand=2, ffn_ratio=2)
        stage = RMAStage(np.random.default_rng(19), AttentionMode.RMA, d_state=4, expand=1, ffn_ratio=1)
    x = rng.uniform(-1.0, 1.0, size=(1, 4, 4, 4))
    yield check_fn("ss2d.x", lambda t: ss2d(t).sum(), x, h=1e-4)
    yield _sampled_param_checks("ss2d.params", lambda: ss2d(Tensor(x)).sum(),
                                list(ss2d.named_parameters()), rng, per_param=2, h=1e-4)
    x3 = rng.uniform(-1.0, 1.0, size=(1, 4, 3, 3))
    yield check_fn("vss.x", lambda t: vss(t).sum(), x3, h=1e-4)
    feat = rng.uniform(-1.0, 1.0, size=(1, 32, 4, 4))
    coarse = rng.uniform(-1.0, 1.0, size=(1, 1, 2, 2))
    yield check_fn("rma_stage.feat", lambda t: stage(Tensor(coarse), t)[0].sum(), feat)
    yield check_fn("rma_stage.logits", lambda t: stage(t, Tensor(feat))[0].sum(), coarse)


def _loss_checks(rng):
    target = (rng.uniform(0, 1, size=(1, 1, 8, 8)) > 0.5).astype(np.float64)
    probs = rng.uniform(0.1, 0.9, size=(1, 1, 8, 8))
    yield check_fn("bce_loss", lambda t: bce_loss(T.sigmoid(t), Tensor(target)), probs)
    yield check_fn("dice_loss", lambda t: dice_loss(T.sigmoid(t), Tensor(target)), probs)
    toy = rng.uniform(-1.0, 1.0, size=(1, 1, 8, 8))
    yield check_fn("combined_loss",
                   lambda t: combined_loss([T.sigmoid(t)], Tensor(target)), toy)
    small = rng.uniform(-1.0, 1.0, size=(1, 1, 4, 4))
    # 4x4 side map gets upsampled to the 8x8 target inside combined_loss
    yield check_fn("combined_loss.resized",
                   lambda t: combined_loss([T.sigmoid(t)], Tensor(target)), small)


def _model_check(rng):
    cfg = desk_model_config(variant="T")
    with T.default_dtype(np.float64):
        model = build_model(cfg, seed=3)
    image = rng.uniform(0.0, 1.0, size=(1, 3, 64, 64))
    target = np.zeros((1, 1, 64, 64))
    target[:, :, 16:40, 20:52] = 1.0

    def loss_fn():
        return combined_loss(model(Tensor(image)), Tensor(target))

    named = list(model.named_parameters())
    picks = [named[i] for i in range(0, len(named), max(1, len(named) // 12))][:12]
    return _sampled_param_checks("model.end_to_end", loss_fn, picks, rng, per_param=2, h=1e-4)


def run_all(verbose=False, log=print):
    """Run the whole suite; returns (results, elapsed_seconds)."""
    rng = np.random.default_rng(1234)
    start = time.perf_counter()
    results = []
    with T.default_dtype(np.float64):
        for group in (_elementwise_checks, _shape_checks, _dense_checks,
                      _conv_checks, _scan_checks, _block_checks, _loss_checks):
            for res in group(rng):
                results.append(res)
                if verbose:
                    log(res.line())
        res = _model_check(rng)
        results.append(res)
        if verbose:
            log(res.line())
    return results, time.perf_counter() - start
