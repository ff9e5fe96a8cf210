import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcfstream.lewis import (LewisParams, LewisRangeError, SketchStack, barrier_curvature,
                             build_tau, lewis_fixed_point, lewis_refine_dense, query_tau,
                             refinement_depth, weight_range)
from mcfstream.linalg import incidence_dense
from mcfstream.stream import EdgeStream
from oracles import lewis_oracle


def grounded_instance(N, t, h, u, x, eps_tau=0.5, eps_sigma=0.5, c_jl=1.0, seed=0, **kw):
    """Build weights for a graph whose last vertex is grounded; return (stack, params, stream)."""
    t, h, u, x = map(np.asarray, (t, h, u, x))
    m = len(t)
    s = EdgeStream.from_arrays(N, np.zeros(N, int), t, h, np.ones(m, int), u)
    par = LewisParams.from_sizes(N - 1, m, eps_tau, eps_sigma, c_jl=c_jl, **kw)
    stack = build_tau(s, lambda blk: x[blk.ids], par, seed=seed, ground=N - 1)
    return stack, par, s


def oracle(N, t, h, u, x, p):
    A = incidence_dense(np.asarray(t), np.asarray(h), N)[:, :N - 1]
    return lewis_oracle(A, barrier_curvature(np.asarray(x, float), np.asarray(u, float)), p)


def test_parameter_formulas():
    par = LewisParams.from_sizes(10, 50, 0.1)
    assert math.isclose(par.p, 1 - 1 / (4 * math.log(4 * 50 / 10)))
    assert par.eps_sigma == pytest.approx(0.01)
    rate = abs(1 - par.p / 2)
    assert par.k == math.ceil(math.log((50 / 10) / 0.05) / math.log(1 / rate))
    with pytest.raises(ValueError):
        LewisParams(n=2, m=2, p=1.5, eps_tau=0.1, eps_sigma=0.01)


def test_curvature_uses_plus_sign():
    assert barrier_curvature(1.0, 4.0) == pytest.approx(1 + 1 / 9)


def test_zero_levels_give_one():
    stack = SketchStack(np.zeros((0, 3, 4)), (), 0.9, 0.5, 0.5)
    out = query_tau(stack, np.array([0]), np.array([1]), np.array([1.0]), np.array([2.0]))
    assert out[0] == 1.0


def test_single_edge_to_ground():
    stack, par, _ = grounded_instance(2, [0], [1], [4], [1.0])
    q = query_tau(stack, np.array([0]), np.array([1]), np.array([1.0]), np.array([4.0]))
    ref = oracle(2, [0], [1], [4], [1.0], par.p)
    assert ref[0] == pytest.approx(2.0, rel=1e-9)
    assert abs(math.log(q[0] / ref[0])) <= par.eps_tau


def test_tree_sum_rule():
    # spanning tree rooted at the grounded vertex: m = n, full column rank
    rng = np.random.default_rng(3)
    N = 9
    t = np.arange(N - 1)
    h = np.array([rng.integers(i + 1, N) for i in range(N - 1)])
    u = rng.integers(2, 9, N - 1)
    x = u * rng.uniform(0.2, 0.8, N - 1)
    stack, par, _ = grounded_instance(N, t, h, u, x)
    q = query_tau(stack, t, h, x, u)
    n = N - 1
    # leverage scores of a full-rank square system are all one
    target = n + n * (n / len(t))
    assert math.exp(-par.eps_tau) * target <= q.sum() <= math.exp(par.eps_tau) * target
    ref = oracle(N, t, h, u, x, par.p)
    assert np.allclose(ref, 2.0)


def test_k4_symmetric():
    t, h = np.triu_indices(4, 1)
    u = np.full(6, 4)
    x = np.full(6, 2.0)
    s = EdgeStream.from_arrays(4, np.zeros(4, int), t, h, np.ones(6, int), u)
    par = LewisParams.from_sizes(4, 6, 0.5, 0.5, c_jl=1.0)
    stack = build_tau(s, lambda blk: x[blk.ids], par, seed=1)
    q = query_tau(stack, t, h, x, u)
    assert np.max(np.abs(np.log(q / q.mean()))) <= par.eps_tau


def test_parallel_edges_identical():
    N = 4
    t = np.array([0, 0, 1, 2, 0])
    h = np.array([1, 1, 2, 3, 3])
    u = np.array([5, 5, 3, 2, 4])
    x = np.array([1.5, 1.5, 1.0, 1.0, 2.0])
    stack, _, _ = grounded_instance(N, t, h, u, x)
    q = query_tau(stack, t, h, x, u)
    assert q[0] == q[1]


def test_path_matches_fixed_point():
    N = 3
    t, h, u = np.array([0, 1]), np.array([1, 2]), np.array([4, 6])
    x = u / 2.0
    stack, par, _ = grounded_instance(N, t, h, u, x, eps_tau=0.25, eps_sigma=0.25)
    q = query_tau(stack, t, h, x, u)
    ref = oracle(N, t, h, u, x, par.p)
    assert np.all(np.abs(np.log(q / ref)) <= par.eps_tau)


def test_package_fixed_point_agrees_with_oracle():
    rng = np.random.default_rng(8)
    N, m = 7, 20
    t = rng.integers(0, N, m)
    h = (t + rng.integers(1, N, m)) % N
    u = rng.integers(1, 9, m).astype(float)
    x = u * rng.uniform(0.1, 0.9, m)
    A = incidence_dense(t, h, N)[:, :N - 1]
    p = 0.9
    phi2 = barrier_curvature(x, u)
    assert np.allclose(lewis_fixed_point(A, phi2, p), lewis_oracle(A, phi2, p), rtol=1e-9)


def test_passes_and_words():
    rng = np.random.default_rng(4)
    N, m = 6, 15
    t = rng.integers(0, N, m)
    h = (t + rng.integers(1, N, m)) % N
    u = rng.integers(1, 9, m)
    x = u / 2.0
    s = EdgeStream.from_arrays(N, np.zeros(N, int), t, h, np.ones(m, int), u)
    par = LewisParams.from_sizes(N - 1, m, 0.5, 0.5, c_jl=1.0)
    before = s.meters.current_words
    stack = build_tau(s, lambda blk: x[blk.ids], par, seed=0, ground=N - 1, meters=s.meters)
    assert s.meters.passes == par.k
    assert s.meters.current_words - before == par.k * (par.rows * (N - 1) + 1)
    assert stack.P.shape == (par.k, N, par.rows)
    assert np.all(stack.P[:, N - 1, :] == 0.0)


def test_determinism():
    rng = np.random.default_rng(6)
    N, m = 8, 30
    t = rng.integers(0, N, m)
    h = (t + rng.integers(1, N, m)) % N
    u = rng.integers(1, 9, m)
    x = u * rng.uniform(0.1, 0.9, m)
    a, _, _ = grounded_instance(N, t, h, u, x, seed=11)
    b, _, _ = grounded_instance(N, t, h, u, x, seed=11)
    assert np.array_equal(a.P, b.P)
    assert np.array_equal(query_tau(a, t, h, x, u), query_tau(b, t, h, x, u))


def test_strict_mode_surfaces_out_of_range():
    P = np.zeros((2, 3, 2))
    P[:, 1, :] = 100.0
    stack = SketchStack(P, (1, 2), 0.9, 0.5, 0.1)
    args = (np.array([0]), np.array([1]), np.array([1.0]), np.array([2.0]))
    lo, hi = weight_range(stack)
    assert query_tau(stack, *args)[0] == hi
    with pytest.raises(LewisRangeError):
        query_tau(stack, *args, strict=True)


def test_dense_refinement_contracts():
    rng = np.random.default_rng(2)
    for _ in range(5):
        N, m = int(rng.integers(4, 10)), int(rng.integers(12, 40))
        t = rng.integers(0, N, m)
        h = (t + rng.integers(1, N, m)) % N
        u = rng.integers(1, 9, m).astype(float)
        x = u * rng.uniform(0.05, 0.95, m)
        A = incidence_dense(t, h, N)[:, :N - 1]
        p = 1 - 1 / (4 * math.log(4 * m / (N - 1)))
        phi2 = barrier_curvature(x, u)
        exact = lewis_oracle(A, phi2, p)
        ws = lewis_refine_dense(A, phi2, p, 8)
        errs = [np.max(np.abs(np.log(w / exact))) for w in ws]
        for a, b in zip(errs, errs[1:]):
            assert b <= abs(1 - p / 2) * a + 1e-12


def test_refinement_depth_reaches_target():
    p = 0.9
    k = refinement_depth(50, 10, p, 0.1)
    rate = abs(1 - p / 2)
    assert (50 / 10) * rate ** k <= 0.1 / 2 < (50 / 10) * rate ** (k - 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(3, 12), st.integers(0, 10 ** 6))
def test_weights_stay_in_range(N, seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(N, 4 * N))
    t = rng.integers(0, N, m)
    h = (t + rng.integers(1, N, m)) % N
    u = rng.integers(1, 9, m)
    x = u * rng.uniform(0.01, 0.99, m)
    stack, par, _ = grounded_instance(N, t, h, u, x, seed=seed)
    q = query_tau(stack, t, h, x, u)
    lo, hi = weight_range(stack)
    assert np.all(q >= lo) and np.all(q <= hi)
    assert lo == pytest.approx(par.n_over_m * math.exp(-par.eps_tau))
