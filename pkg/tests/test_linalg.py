import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcfstream.linalg import (JLMatrix, SolverError, SparsifierBuilder, SparsifierDataError,
                              incidence_apply, incidence_dense, incidence_transpose_apply,
                              laplacian_dense, laplacian_solve, sketch_project)
from mcfstream.lewis import leverage_scores_dense
from oracles import generalized_spectrum, pinv_solve


def random_graph(n, m, rng, connected=True):
    t, h = [], []
    if connected:
        perm = rng.permutation(n)
        for i in range(n - 1):
            t.append(perm[i]), h.append(perm[i + 1])
    while len(t) < m:
        a, b = rng.integers(0, n, 2)
        if a != b:
            t.append(a), h.append(b)
    return np.array(t), np.array(h)


def test_sign_convention():
    t, h = np.array([0, 1]), np.array([1, 2])
    y = np.array([5.0, 7.0, 11.0])
    assert list(incidence_apply(t, h, y)) == [2.0, 4.0]
    # A^T x = inflow - outflow
    x = np.array([3.0, 1.0])
    assert list(incidence_transpose_apply(t, h, x, 3)) == [-3.0, 2.0, 1.0]
    A = incidence_dense(t, h, 3)
    assert np.array_equal(A @ y, incidence_apply(t, h, y))
    assert np.array_equal(A.T @ x, incidence_transpose_apply(t, h, x, 3))


def test_two_node_closed_form():
    L = laplacian_dense(np.array([0]), np.array([1]), np.array([2.0]), 2)
    assert np.allclose(laplacian_solve(L, np.array([1.0, -1.0])), [0.25, -0.25], atol=1e-15)


def test_zero_rhs():
    L = laplacian_dense(np.array([0, 1]), np.array([1, 2]), np.ones(2), 3)
    assert np.all(laplacian_solve(L, np.zeros(3)) == 0.0)


def test_random_tree_matches_pseudoinverse():
    rng = np.random.default_rng(0)
    n = 10
    t = np.arange(1, n)
    h = np.array([rng.integers(0, i) for i in range(1, n)])
    w = rng.random(n - 1) + 0.1
    L = laplacian_dense(t, h, w, n)
    b = rng.standard_normal(n)
    b -= b.mean()
    assert np.allclose(laplacian_solve(L, b), pinv_solve(L, b), atol=1e-10)


def test_solver_oracle_equivalence_100_seeds():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 51))
        t, h = random_graph(n, int(rng.integers(n - 1, 3 * n)), rng)
        w = np.exp(rng.uniform(-3, 3, len(t)))
        L = laplacian_dense(t, h, w, n)
        b = rng.standard_normal(n)
        b -= b.mean()
        y = laplacian_solve(L, b)
        ref = pinv_solve(L, b)
        worst = max(worst, np.linalg.norm(y - ref) / np.linalg.norm(ref))
    assert worst < 1e-8


def test_grounded_solve_pins_vertex():
    rng = np.random.default_rng(1)
    t, h = random_graph(6, 12, rng)
    L = laplacian_dense(t, h, rng.random(12) + 0.5, 6)
    b = rng.standard_normal(6)
    y = laplacian_solve(L, b, ground=5)
    assert y[5] == 0.0
    assert np.allclose((L @ y)[:5], b[:5], atol=1e-10)


def test_unbalanced_rhs_is_an_error():
    L = laplacian_dense(np.array([0, 2]), np.array([1, 3]), np.ones(2), 4)
    with pytest.raises(SolverError, match="component"):
        laplacian_solve(L, np.array([1.0, 0.0, 0.0, 0.0]))


def test_disconnected_components_solved_separately():
    L = laplacian_dense(np.array([0, 2]), np.array([1, 3]), np.array([1.0, 4.0]), 4)
    y = laplacian_solve(L, np.array([1.0, -1.0, 2.0, -2.0]))
    assert np.allclose(y, [0.5, -0.5, 0.25, -0.25])


def test_sparsifier_small_graph_verbatim():
    rng = np.random.default_rng(2)
    t, h = random_graph(5, 8, rng)
    w = rng.random(8) + 0.5
    sb = SparsifierBuilder(5, 0.5, seed=1)
    sb.add(t, h, w, np.arange(8))
    H = sb.finish()
    assert H.size == 8 and sb.reductions == 0
    ev = generalized_spectrum(H.dense(), laplacian_dense(t, h, w, 5))
    assert np.allclose(ev, 1.0)


def test_sparsifier_complete_graph_spectrum():
    n = 8
    t, h = np.triu_indices(n, 1)
    w = np.ones(len(t))
    sb = SparsifierBuilder(n, 0.5, seed=4)
    sb.add(t, h, w, np.arange(len(t)))
    H = sb.finish()
    ev = generalized_spectrum(H.dense(), laplacian_dense(t, h, w, n))
    assert ev.min() >= math.exp(-0.5) and ev.max() <= math.exp(0.5)


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_sparsifier_rejects_bad_weight(bad):
    sb = SparsifierBuilder(3, 0.5)
    with pytest.raises(SparsifierDataError, match="edge 11"):
        sb.add(np.array([0, 1]), np.array([1, 2]), np.array([1.0, bad]), np.array([10, 11]))


def test_sparsifier_deterministic_and_export_roundtrip():
    rng = np.random.default_rng(5)
    t, h = random_graph(12, 300, rng)
    w = rng.random(300) + 0.1
    outs = []
    for _ in range(2):
        sb = SparsifierBuilder(12, 0.7, seed=9, c=1.0)
        for lo in range(0, 300, 40):
            sb.add(t[lo:lo + 40], h[lo:lo + 40], w[lo:lo + 40], np.arange(lo, min(lo + 40, 300)))
        outs.append(sb.finish())
    assert np.array_equal(outs[0].weights, outs[1].weights)
    sb = SparsifierBuilder(12, 0.7, seed=9, c=1.0)
    sb.add(t[:150], h[:150], w[:150], np.arange(150))
    other = SparsifierBuilder(12, 0.7, seed=9, c=1.0)
    other.load(sb.export())
    other.add(t[150:], h[150:], w[150:], np.arange(150, 300))
    sb.add(t[150:], h[150:], w[150:], np.arange(150, 300))
    assert np.array_equal(other.finish().weights, sb.finish().weights)


def test_jl_columns_reproducible_from_id():
    jl = JLMatrix(6, 42)
    full = jl.dense(20)
    assert np.array_equal(jl.columns([3, 17]), full[:, [3, 17]].T)
    assert set(np.unique(full * math.sqrt(6))) <= {-1.0, 1.0}
    assert np.allclose(jl.apply(np.eye(20)[4]), full[:, 4])


def test_jl_norm_preservation_rate():
    eps_sigma, n, m = 0.5, 50, 200
    r = JLMatrix.rows_for(n, eps_sigma, 8.0)
    jl = JLMatrix(r, 7)
    R = jl.dense(m)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((m, 10000))
    X /= np.linalg.norm(X, axis=0)
    sq = np.sum((R @ X) ** 2, axis=0)
    fail = np.mean((sq < 1 - eps_sigma) | (sq > 1 + eps_sigma))
    assert fail <= 0.01


def test_sketch_project_path_graph_leverage():
    # path P_3 with identity weights: every edge has leverage 1
    t, h = np.array([0, 1]), np.array([1, 2])
    r = 400
    jl = JLMatrix(r, 3)
    rbt = np.zeros((3, r))
    cols = jl.columns(np.arange(2))
    np.add.at(rbt, h, cols)
    np.subtract.at(rbt, t, cols)
    M = laplacian_dense(t, h, np.ones(2), 3)
    P = sketch_project(rbt.T, M).T
    lev = np.sum((P[h] - P[t]) ** 2, axis=1)
    exact = leverage_scores_dense(incidence_dense(t, h, 3))
    assert np.allclose(exact, 1.0)
    assert np.all(np.abs(lev - exact) <= 0.25)
    P2 = sketch_project(rbt.T, M).T
    assert np.array_equal(P, P2)


def test_single_edge_leverage_is_one():
    A = incidence_dense(np.array([0]), np.array([1]), 2)[:, :1]
    assert np.isclose(leverage_scores_dense(A)[0], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10 ** 6))
def test_incidence_sign_property(n, seed):
    rng = np.random.default_rng(seed)
    t, h = random_graph(n, 2 * n, rng)
    y = rng.standard_normal(n)
    x = rng.standard_normal(len(t))
    assert np.array_equal(incidence_apply(t, h, y), y[h] - y[t])
    # adjoint identity <A y, x> = <y, A^T x>
    assert np.isclose(incidence_apply(t, h, y) @ x, y @ incidence_transpose_apply(t, h, x, n))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 20), st.integers(0, 10 ** 6))
def test_spectral_sandwich_property(n, seed):
    rng = np.random.default_rng(seed)
    t, h = random_graph(n, 6 * n, rng)
    w = np.exp(rng.uniform(-2, 2, len(t)))
    eps = 0.5
    sb = SparsifierBuilder(n, eps, seed=seed)
    sb.add(t, h, w, np.arange(len(t)))
    ev = generalized_spectrum(sb.finish().dense(), laplacian_dense(t, h, w, n))
    assert ev.min() >= math.exp(-eps) - 1e-9 and ev.max() <= math.exp(eps) + 1e-9
