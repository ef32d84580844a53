import numpy as np
import pytest

from rmamba.ss2d import SS2D, expand_routes, merge_routes
from rmamba.tensor import Tensor, no_grad


def test_route_example_2x2():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    row_f, row_b, col_f, col_b = [r.data[0, 0] for r in expand_routes(x)]
    np.testing.assert_array_equal(row_f, [1, 2, 3, 4])
    np.testing.assert_array_equal(row_b, [4, 3, 2, 1])
    np.testing.assert_array_equal(col_f, [1, 3, 2, 4])
    np.testing.assert_array_equal(col_b, [4, 2, 3, 1])


def test_route_1x1_all_equal():
    x = Tensor(np.array([[[[7.5]]]], dtype=np.float32))
    for r in expand_routes(x):
        np.testing.assert_array_equal(r.data, [[[7.5]]])


def test_routes_are_permutations():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(1, 2, 3, 5)).astype(np.float32)
    for r in expand_routes(Tensor(x)):
        for c in range(2):
            np.testing.assert_array_equal(np.sort(r.data[0, c]), np.sort(x[0, c].ravel()))


@pytest.mark.parametrize("seed", range(6))
def test_route_round_trip_exact(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    x = rng.uniform(-1, 1, size=(2, 3, h, w)).astype(np.float32)
    routes = expand_routes(Tensor(x))
    # inverse of each route alone: zero out the other three
    for i in range(4):
        seqs = [routes[j] if j == i else Tensor(np.zeros_like(routes[j].data)) for j in range(4)]
        merged = merge_routes(seqs, h, w)
        np.testing.assert_array_equal(merged.data, x)


def test_merge_expand_identity_is_exactly_4x():
    rng = np.random.default_rng(9)
    for _ in range(5):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x = rng.uniform(-1, 1, size=(1, 4, h, w)).astype(np.float32)
        merged = merge_routes(expand_routes(Tensor(x)), h, w)
        np.testing.assert_array_equal(merged.data, 4.0 * x)


def test_merge_is_linear():
    rng = np.random.default_rng(10)
    h, w = 3, 4
    seqs_a = [Tensor(rng.uniform(-1, 1, size=(1, 2, h * w)).astype(np.float32)) for _ in range(4)]
    seqs_b = [Tensor(rng.uniform(-1, 1, size=(1, 2, h * w)).astype(np.float32)) for _ in range(4)]
    lhs = merge_routes([a + b for a, b in zip(seqs_a, seqs_b)], h, w)
    rhs = merge_routes(seqs_a, h, w) + merge_routes(seqs_b, h, w)
    np.testing.assert_allclose(lhs.data, rhs.data, atol=1e-6)


def test_merge_length_mismatch():
    seqs = [Tensor(np.zeros((1, 2, 6), dtype=np.float32)) for _ in range(4)]
    with pytest.raises(ValueError):
        merge_routes(seqs, 2, 2)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 5), (4, 4), (7, 3)])
def test_ss2d_shape_preserving(h, w):
    ss2d = SS2D(np.random.default_rng(0), channels=6, d_state=4)
    x = np.random.default_rng(1).uniform(-1, 1, size=(2, 6, h, w)).astype(np.float32)
    with no_grad():
        y = ss2d(Tensor(x))
    assert y.shape == (2, 6, h, w)


def test_ss2d_zero_projections_give_zero_map():
    ss2d = SS2D(np.random.default_rng(0), channels=4, d_state=4)
    for name, p in ss2d.named_parameters():
        if "proj" in name:
            p.data = np.zeros_like(p.data)
    x = np.random.default_rng(2).uniform(-1, 1, size=(1, 4, 5, 5)).astype(np.float32)
    with no_grad():
        y = ss2d(Tensor(x))
    np.testing.assert_array_equal(y.data, np.zeros_like(x))


def test_ss2d_parallel_path_matches_sequential():
    x = np.random.default_rng(4).uniform(-1, 1, size=(1, 4, 6, 6)).astype(np.float32)
    seq = SS2D(np.random.default_rng(7), channels=4, d_state=4, parallel_scan=False)
    par = SS2D(np.random.default_rng(7), channels=4, d_state=4, parallel_scan=True)
    with no_grad():
        y_seq = seq(Tensor(x))
        y_par = par(Tensor(x))
    np.testing.assert_allclose(y_par.data, y_seq.data, atol=1e-5)
