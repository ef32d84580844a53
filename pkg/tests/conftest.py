import numpy as np
import pytest

from rmamba.ss2d import SsmParams


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def softplus_scalar(x):
    return float(np.log1p(np.exp(min(x, 30.0))) if x <= 30.0 else x)


def selective_scan_oracle(u, params: SsmParams):
    """Naive per-step scalar-loop reference for the full selective scan op.

    Follows the stated recurrence directly: delta = softplus(Wd u + bd),
    B = WB u, C = WC u, A = -exp(A_log), a = exp(delta A),
    h_t = a (.) h_{t-1} + delta B u_t, y_t = <C_t, h_t> + D u_t.
    Everything in float64 python loops; independent of the vectorized path.
    """
    wd = np.asarray(params.proj_delta.weight.data, dtype=np.float64)
    bd = np.asarray(params.proj_delta.bias.data, dtype=np.float64)
    wb = np.asarray(params.proj_B.weight.data, dtype=np.float64)
    wc = np.asarray(params.proj_C.weight.data, dtype=np.float64)
    a_cont = -np.exp(np.asarray(params.A_log.data, dtype=np.float64))
    d_skip = np.asarray(params.D_skip.data, dtype=np.float64)

    u = np.asarray(u, dtype=np.float64)
    n_batch, d_inner, length = u.shape
    d_state = a_cont.shape[1]
    y = np.zeros((n_batch, d_inner, length))
    for n in range(n_batch):
        h = np.zeros((d_inner, d_state))
        for t in range(length):
            ut = u[n, :, t]
            delta = np.array([softplus_scalar(v) for v in (wd @ ut + bd)])
            b_t = wb @ ut
            c_t = wc @ ut
            for j in range(d_inner):
                acc = 0.0
                for k in range(d_state):
                    a_jk = np.exp(delta[j] * a_cont[j, k])
                    h[j, k] = a_jk * h[j, k] + delta[j] * b_t[k] * ut[j]
                    acc += c_t[k] * h[j, k]
                y[n, j, t] = acc + d_skip[j] * ut[j]
    return y


def recurrence_oracle(a, bu):
    """Scalar-loop reference for h_t = a_t * h_{t-1} + bu_t."""
    a = np.asarray(a, dtype=np.float64)
    bu = np.asarray(bu, dtype=np.float64)
    h = np.zeros_like(a)
    n, length, d, s = a.shape
    for b in range(n):
        for j in range(d):
            for k in range(s):
                acc = 0.0
                for t in range(length):
                    acc = a[b, t, j, k] * acc + bu[b, t, j, k]
                    h[b, t, j, k] = acc
    return h
