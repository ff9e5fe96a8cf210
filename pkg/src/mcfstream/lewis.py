"""Implicit regularized Lewis weights of a scaled incidence matrix.

For flows ``x`` with barrier curvature ``phi2 = 1/x^2 + 1/(u-x)^2`` the
weights are the fixed point

    tau = sigma(T^{1/2 - 1/p} Phi2^{-1/2} A) + n/m,

where ``sigma`` denotes leverage scores.  Starting from ``w = 1`` the
refinement

    w <- (w^{2/p - 1} (sigma_w + n/m))^{p/2}

contracts the log-error by ``|1 - p/2|`` per round.  Each round's
leverage scores are represented by a small matrix ``P = R B M^{-1}``
(``R`` a sign sketch, ``B`` the weighted incidence matrix, ``M`` a
sparsifier of ``B^T B``), so any edge recovers its weight from its two
endpoint columns of every level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import JLMatrix, SparsifierBuilder, mix64, sketch_project
from .kernels import tau_block
from .stream import account, begin_pass, end_pass

__all__ = [
    "LewisParams",
    "SketchStack",
    "LewisRangeError",
    "barrier_curvature",
    "refinement_depth",
    "build_tau",
    "query_tau",
    "leverage_scores_dense",
    "lewis_fixed_point",
    "lewis_refine_dense",
    "weight_range",
]


class LewisRangeError(RuntimeError):
    """A queried weight left its admissible range (sketch failure)."""


def barrier_curvature(x, u):
    """``1/x^2 + 1/(u-x)^2``, the second derivative of the log barrier."""
    x = np.asarray(x, dtype=float)
    return 1.0 / (x * x) + 1.0 / ((u - x) * (u - x))


def refinement_depth(m, n, p, eps_tau):
    """Number of refinement rounds to reach accuracy ``eps_tau`` from ``w = 1``."""
    rate = abs(1.0 - p / 2.0)
    target = (m / n) / (eps_tau / 2.0)
    if target <= 1.0:
        return 1
    return max(1, int(math.ceil(math.log(target) / math.log(1.0 / rate))))


@dataclass
class LewisParams:
    """Exponent, accuracies and sketch sizes for one weight computation.

    ``n`` and ``m`` are the column and row counts of the incidence matrix
    (``n`` excludes the grounded vertex).
    """

    n: int
    m: int
    p: float
    eps_tau: float
    eps_sigma: float
    c_jl: float = 8.0
    k: int | None = None
    rows: int | None = None
    sparsifier_eps: float = 0.5
    sparsifier_c: float = 16.0
    strict: bool = True

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.k is None:
            self.k = refinement_depth(self.m, self.n, self.p, self.eps_tau)
        if self.rows is None:
            self.rows = JLMatrix.rows_for(self.n, self.eps_sigma, self.c_jl)

    @classmethod
    def from_sizes(cls, n, m, eps_tau, eps_sigma=None, **kw):
        """Parameters with the default exponent ``p = 1 - 1/(4 log(4m/n))``."""
        p = 1.0 - 1.0 / (4.0 * math.log(4.0 * m / n))
        if eps_sigma is None:
            eps_sigma = eps_tau / 10.0
        return cls(n=n, m=m, p=p, eps_tau=eps_tau, eps_sigma=eps_sigma, **kw)

    @property
    def n_over_m(self):
        return self.n / self.m


@dataclass
class SketchStack:
    """The ``k`` projection matrices describing one set of weights.

    ``P`` has shape ``(k, N, r)``: level, vertex, sketch row.  The grounded
    vertex (if any) has an all-zero column.
    """

    P: np.ndarray
    seeds: tuple
    p: float
    n_over_m: float
    eps_tau: float
    binding: int = -1

    @property
    def k(self):
        return self.P.shape[0]

    def words(self):
        # the grounded column is identically zero and not stored
        k, N, r = self.P.shape
        return k * r * (N - 1) + k + 3


def query_tau(stack: SketchStack, tails, heads, x, u, levels=None, strict=False):
    """Weights of the given edges at flows ``x`` (vectorized).

    Parameters
    ----------
    stack : SketchStack
    tails, heads : ndarray of int
    x, u : ndarray
        Flow values at the stack's binding iterate and capacities.
    levels : int, optional
        Use only the first ``levels`` rounds (defaults to all).
    strict : bool
        Raise :class:`LewisRangeError` instead of clamping out-of-range
        results.
    """
    k = stack.k if levels is None else levels
    full = k == stack.k and k > 0
    lo, hi = weight_range(stack) if full else (0.0, np.inf)
    tails = np.ascontiguousarray(tails, dtype=np.int64)
    heads = np.ascontiguousarray(heads, dtype=np.int64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    u = np.ascontiguousarray(np.broadcast_to(u, x.shape), dtype=np.float64)
    out = np.empty(len(tails))
    stats = np.zeros(1, dtype=np.int64)
    tau_block(tails, heads, x, u, np.ascontiguousarray(stack.P[:k]), stack.p,
              stack.n_over_m, lo, hi, out, stats)
    if strict and stats[0]:
        raise LewisRangeError(f"{int(stats[0])} weights outside [{lo:.4g}, {hi:.4g}]")
    return out


def weight_range(stack):
    """Admissible interval ``[n/m e^{-eps}, (1 + n/m) e^{eps}]`` of final weights."""
    return (stack.n_over_m * math.exp(-stack.eps_tau),
            (1.0 + stack.n_over_m) * math.exp(stack.eps_tau))


def build_tau(stream, x_query, params: LewisParams, seed, ground=None, meters=None,
              binding=-1):
    """Construct a :class:`SketchStack` with one pass per refinement round.

    During round ``j`` every edge computes its round-``j-1`` weight from the
    levels built so far, and the pass simultaneously feeds the sparsifier
    of ``B^T B`` and accumulates ``R B`` for the level's sketch.

    Parameters
    ----------
    stream
        Object whose ``passes_blocks()`` yields edge blocks with float
        ``caps``.
    x_query : callable
        ``x_query(block) -> ndarray`` flows of the block's edges.
    params : LewisParams
    seed : int
    ground : int, optional
        Vertex removed from the incidence matrix.
    meters : Meters, optional
        Persistent words of each finished level are charged here.
    """
    N = params.n + (1 if ground is not None else 0)
    k, r = params.k, params.rows
    P = np.zeros((k, N, r))
    seeds = tuple(int(s) for s in _level_seeds(seed, k))
    for j in range(k):
        jl = JLMatrix(r, seeds[j])
        sb = SparsifierBuilder(N, params.sparsifier_eps, seed=seeds[j] ^ 0x5A5A,
                               c=params.sparsifier_c)
        partial = SketchStack(P[:j], seeds[:j], params.p, params.n_over_m, params.eps_tau)
        state = begin_pass(stream, {"rb": np.zeros((N, r)), "sparsifier": sb})
        rbt, sb = state["rb"], state["sparsifier"]
        for blk in stream.passes_blocks():
            x = x_query(blk)
            phi2 = barrier_curvature(x, blk.caps)
            w = query_tau(partial, blk.tails, blk.heads, x, blk.caps) if j else np.ones(len(x))
            d = w ** (1.0 - 2.0 / params.p) / phi2
            sb.add(blk.tails, blk.heads, d, blk.ids)
            cols = jl.columns(blk.ids) * np.sqrt(d)[:, None]
            np.add.at(rbt, blk.heads, cols)
            np.subtract.at(rbt, blk.tails, cols)
        state = end_pass(stream, {"rb": rbt, "sparsifier": sb})
        rbt, M = state["rb"], state["sparsifier"].finish()
        P[j] = sketch_project(rbt.T, M, ground=ground).T
        if meters is not None:
            account(meters, r * (N - 1 if ground is not None else N) + 1, "tau-level")
    return SketchStack(P, seeds, params.p, params.n_over_m, params.eps_tau, binding)


def _level_seeds(seed, k):
    base = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    out = []
    z = base
    for _ in range(k):
        z = mix64(z)
        out.append(int(z) & 0x7FFFFFFFFFFFFFFF)
    return out


# ----------------------------------------------------------------------------
# dense references


def leverage_scores_dense(B):
    """Leverage scores ``diag(B (B^T B)^+ B^T)`` of a tall matrix."""
    G = B.T @ B
    Gp = np.linalg.pinv(G, hermitian=True)
    return np.einsum("ij,jk,ik->i", B, Gp, B)


def lewis_fixed_point(A, phi2, p, tol=1e-12, max_iter=100000, damping=0.5):
    """Dense regularized Lewis weights by damped fixed-point iteration.

    Parameters
    ----------
    A : ndarray (m, n)
        Incidence matrix with the grounded column removed.
    phi2 : ndarray (m,)
        Barrier curvatures.
    p : float
    tol : float
        Stop when successive iterates agree to ``tol`` in log scale.
    """
    m, n = A.shape
    tau = np.ones(m)
    for _ in range(max_iter):
        B = A * np.sqrt(tau ** (1.0 - 2.0 / p) / phi2)[:, None]
        new = leverage_scores_dense(B) + n / m
        # geometric damping keeps the iteration contractive for p < 1
        upd = tau ** (1.0 - damping) * new ** damping
        if np.max(np.abs(np.log(upd / tau))) < tol:
            return upd
        tau = upd
    return tau


def lewis_refine_dense(A, phi2, p, k):
    """The sketch-free ``k``-round refinement from ``w = 1`` (all iterates)."""
    m, n = A.shape
    w = np.ones(m)
    out = [w]
    for _ in range(k):
        B = A * np.sqrt(w ** (1.0 - 2.0 / p) / phi2)[:, None]
        sig = leverage_scores_dense(B)
        w = (w ** (2.0 / p - 1.0) * (sig + n / m)) ** (p / 2.0)
        out.append(w)
    return out
