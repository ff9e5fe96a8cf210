"""Numerical kernels shared by the IPM: incidence products, Laplacian
solves, counter-based Johnson-Lindenstrauss sketches and a one-pass
spectral sparsifier.

Sign convention
---------------
For edge ``e = (tail, head)`` row ``e`` of the incidence matrix ``A`` has
``-1`` in column ``tail`` and ``+1`` in column ``head``, hence
``(A y)_e = y[head] - y[tail]`` and ``(A^T x)_w`` is the inflow minus the
outflow of ``x`` at vertex ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

__all__ = [
    "incidence_apply",
    "incidence_transpose_apply",
    "incidence_dense",
    "mix64",
    "hash_uniform",
    "JLMatrix",
    "Sparsifier",
    "SparsifierBuilder",
    "SolverError",
    "SparsifierDataError",
    "laplacian_solve",
    "laplacian_dense",
    "sketch_project",
    "effective_resistances",
]

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_ROWMIX = np.uint64(0xD1B54A32D192ED03)


class SolverError(RuntimeError):
    """Laplacian solve failed; carries the final relative residual."""

    def __init__(self, msg, residual=float("nan")):
        super().__init__(msg)
        self.residual = residual


class SparsifierDataError(ValueError):
    """A weight handed to the sparsifier was not strictly positive and finite."""


# ----------------------------------------------------------------------------
# incidence products


def incidence_apply(tails, heads, y):
    """Return ``A y`` restricted to the given edges: ``y[head] - y[tail]``."""
    y = np.asarray(y)
    return y[heads] - y[tails]


def incidence_transpose_apply(tails, heads, x, n, out=None):
    """Accumulate ``A^T x`` (inflow minus outflow) into a length-``n`` vector."""
    if out is None:
        out = np.zeros(n) if np.ndim(x) == 1 else np.zeros((n,) + np.shape(x)[1:])
    np.add.at(out, heads, x)
    np.subtract.at(out, tails, x)
    return out


def incidence_dense(tails, heads, n):
    """Dense ``m x n`` incidence matrix under the module sign convention."""
    m = len(tails)
    A = np.zeros((m, n))
    A[np.arange(m), heads] += 1.0
    A[np.arange(m), tails] -= 1.0
    return A


def laplacian_dense(tails, heads, weights, n):
    """Dense weighted Laplacian ``A^T diag(w) A``."""
    L = np.zeros((n, n))
    w = np.asarray(weights, dtype=float)
    np.add.at(L, (tails, tails), w)
    np.add.at(L, (heads, heads), w)
    np.add.at(L, (tails, heads), -w)
    np.add.at(L, (heads, tails), -w)
    return L


# ----------------------------------------------------------------------------
# counter-based randomness


def mix64(z):
    """SplitMix64 finalizer applied elementwise to a ``uint64`` array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLD
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed, a, b):
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    with np.errstate(over="ignore"):
        k = mix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) ^ (a * _GOLD))
        return mix64(k + b * _ROWMIX)


def hash_uniform(seed, a, b=0):
    """Reproducible uniforms in ``[0, 1)`` keyed by ``(seed, a, b)``."""
    z = _key(seed, a, b)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


class JLMatrix:
    """Random ``r x m`` sign matrix with entries ``±1/sqrt(r)``.

    Column ``e`` is regenerated on demand from ``(seed, e)``; nothing of
    size ``m`` is ever stored.

    Parameters
    ----------
    rows : int
    seed : int
    """

    def __init__(self, rows, seed):
        self.rows = int(rows)
        self.seed = int(seed)
        self._r = np.arange(self.rows, dtype=np.uint64)

    @staticmethod
    def rows_for(n, eps_sigma, c_jl):
        """Sketch dimension ``ceil(c_jl * log(n) / eps_sigma^2)``."""
        return max(1, int(math.ceil(c_jl * math.log(max(n, 2)) / eps_sigma ** 2)))

    def columns(self, ids):
        """Return the columns for edge ids as an array of shape ``(len(ids), rows)``."""
        ids = np.asarray(ids, dtype=np.uint64)
        z = _key(self.seed, ids[:, None], self._r[None, :])
        sign = 1.0 - 2.0 * (z >> np.uint64(63)).astype(np.float64)
        return sign / math.sqrt(self.rows)

    def dense(self, m):
        return self.columns(np.arange(m)).T

    def apply(self, vec):
        """``R @ vec`` for a length-``m`` vector."""
        vec = np.asarray(vec, dtype=float)
        return self.columns(np.arange(len(vec))).T @ vec


# ----------------------------------------------------------------------------
# Laplacian solves


@dataclass
class Sparsifier:
    """Weighted edge list whose Laplacian approximates a target Laplacian."""

    n: int
    tails: np.ndarray
    heads: np.ndarray
    weights: np.ndarray
    epsilon: float = 0.0

    @property
    def size(self):
        return len(self.weights)

    def laplacian(self):
        """Sparse CSR Laplacian of the weighted subgraph."""
        t, h, w = self.tails, self.heads, self.weights
        rows = np.concatenate([t, h, t, h])
        cols = np.concatenate([t, h, h, t])
        vals = np.concatenate([w, w, -w, -w])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def dense(self):
        return laplacian_dense(self.tails, self.heads, self.weights, self.n)

    def words(self):
        return 3 * self.size


def _as_dense(L):
    if isinstance(L, Sparsifier):
        return L.dense()
    if sp.issparse(L):
        return L.toarray()
    return np.asarray(L, dtype=float)


def laplacian_solve(L, rhs, tol=1e-10, ground=None):
    """Solve ``L y = rhs`` for a graph Laplacian.

    Each connected component is solved directly with a Cholesky
    factorisation of the component's Laplacian with one vertex removed.
    Without ``ground`` the answer is shifted to mean zero on every
    component.  With ``ground`` the potential of that vertex is pinned to
    zero and its equation is dropped, which is the convention used by
    the IPM (the auxiliary star vertex).

    Parameters
    ----------
    L : Sparsifier, sparse matrix or ndarray
    rhs : ndarray, shape (n,) or (n, k)
    tol : float
        Relative residual bound checked after the solve.
    ground : int, optional

    Returns
    -------
    ndarray
        Same shape as ``rhs``.

    Raises
    ------
    SolverError
        If a component's right-hand side does not sum to zero (beyond
        ``tol``) or the residual bound is missed.
    """
    Ld = _as_dense(L)
    n = Ld.shape[0]
    b = np.asarray(rhs, dtype=float)
    vec = b.ndim == 1
    B = b.reshape(n, -1).copy()
    Y = np.zeros_like(B)
    adj = sp.csr_matrix(np.abs(Ld) > 0)
    ncomp, labels = connected_components(adj, directed=False)
    scale = max(np.abs(B).max(initial=0.0), 1e-300)
    for c in range(ncomp):
        idx = np.flatnonzero(labels == c)
        has_ground = ground is not None and labels[ground] == c
        if not has_ground:
            tot = B[idx].sum(axis=0)
            if np.any(np.abs(tot) > max(tol, 1e-12) * scale * max(len(idx), 1) * 1e3):
                raise SolverError(f"right-hand side not balanced on component {c} "
                                  f"(vertices {idx[:8].tolist()}...)")
            B[idx] -= tot / len(idx)
        if len(idx) == 1:
            continue
        drop = ground if has_ground else idx[-1]
        keep = idx[idx != drop]
        sub = Ld[np.ix_(keep, keep)]
        try:
            fac = sla.cho_factor(sub, lower=True, check_finite=False)
            sol = sla.cho_solve(fac, B[keep], check_finite=False)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(sub, B[keep], rcond=None)[0]
        Y[keep] = sol
        if not has_ground:
            Y[idx] -= Y[idx].mean(axis=0)
    if ground is not None:
        Y[ground] = 0.0
        mask = np.ones(n, dtype=bool)
        mask[ground] = False
        res = (Ld @ Y - B)[mask]
        bn = np.linalg.norm(B[mask])
    else:
        res = Ld @ Y - B
        bn = np.linalg.norm(B)
    rel = np.linalg.norm(res) / bn if bn > 0 else 0.0
    # direct solves on badly scaled Laplacians lose a few digits; judge the
    # residual against the conditioning the factorisation can deliver
    if rel > max(tol, 1e3 * np.finfo(float).eps * _cond_hint(Ld)):
        raise SolverError(f"relative residual {rel:.3e} above tolerance", rel)
    return Y[:, 0] if vec else Y


def _cond_hint(Ld):
    d = np.abs(np.diag(Ld))
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(d.max() / d.min())


def effective_resistances(tails, heads, weights, n):
    """Exact effective resistances of the listed edges (dense pseudoinverse)."""
    L = laplacian_dense(tails, heads, weights, n)
    Lp = np.linalg.pinv(L, hermitian=True)
    return Lp[tails, tails] + Lp[heads, heads] - 2 * Lp[tails, heads]


# ----------------------------------------------------------------------------
# one-pass sparsifier


class SparsifierBuilder:
    """Merge-and-reduce spectral sparsifier fed one block at a time.

    Edges accumulate in a buffer.  Whenever the buffer exceeds
    ``budget = c * n * log(n) / eps^2`` edges, every buffered edge is kept
    independently with probability ``min(1, (c / 2) * w_e R_e log(n) / eps^2)``
    (``R_e`` is its effective resistance in the buffered graph) and
    re-weighted by the inverse probability.  The coin of each edge is
    derived from ``(seed, edge id, reduction round)`` so that two
    builders fed the same sequence make identical choices.

    Parameters
    ----------
    n : int
    epsilon : float
    seed : int
    c : float
        Oversampling constant.
    exact : bool
        Never reduce; return every edge verbatim.
    """

    def __init__(self, n, epsilon, seed=0, c=16.0, exact=False):
        self.n = int(n)
        self.epsilon = float(epsilon)
        self.seed = int(seed)
        self.c = float(c)
        self.exact = exact
        logn = math.log(max(self.n, 2))
        self.budget = int(math.ceil(self.c * self.n * logn / self.epsilon ** 2))
        self.reductions = 0
        self._t, self._h, self._w, self._id = [], [], [], []
        self._count = 0

    def add(self, tails, heads, weights, ids):
        w = np.asarray(weights, dtype=float)
        if w.size and (not np.all(np.isfinite(w)) or np.any(w <= 0)):
            bad = np.flatnonzero(~np.isfinite(w) | (w <= 0))[0]
            raise SparsifierDataError(
                f"edge {int(np.asarray(ids)[bad])} has weight {w[bad]!r}")
        self._t.append(np.asarray(tails, dtype=np.int64))
        self._h.append(np.asarray(heads, dtype=np.int64))
        self._w.append(w)
        self._id.append(np.asarray(ids, dtype=np.int64))
        self._count += len(w)
        if not self.exact and self._count > self.budget:
            self._reduce()

    def _flat(self):
        if len(self._t) > 1:
            self._t = [np.concatenate(self._t)]
            self._h = [np.concatenate(self._h)]
            self._w = [np.concatenate(self._w)]
            self._id = [np.concatenate(self._id)]
        if not self._t:
            e = np.zeros(0, dtype=np.int64)
            return e, e, np.zeros(0), e
        return self._t[0], self._h[0], self._w[0], self._id[0]

    def _reduce(self):
        t, h, w, ids = self._flat()
        R = effective_resistances(t, h, w, self.n)
        rho = 0.5 * self.c * math.log(max(self.n, 2)) / self.epsilon ** 2
        prob = np.minimum(1.0, rho * w * np.maximum(R, 0.0))
        u = hash_uniform(self.seed, ids, self.reductions + 1)
        keep = u < prob
        self.reductions += 1
        self._t, self._h = [t[keep]], [h[keep]]
        self._w, self._id = [w[keep] / prob[keep]], [ids[keep]]
        self._count = int(keep.sum())

    def export(self):
        """Buffer contents as plain arrays (for handing a pass to another party)."""
        t, h, w, ids = self._flat()
        return {"tails": t, "heads": h, "weights": w, "ids": ids,
                "reductions": np.array([self.reductions], dtype=np.int64)}

    def load(self, state):
        """Replace the buffer by the output of :meth:`export`."""
        self._t, self._h = [np.asarray(state["tails"])], [np.asarray(state["heads"])]
        self._w, self._id = [np.asarray(state["weights"])], [np.asarray(state["ids"])]
        self.reductions = int(state["reductions"][0])
        self._count = len(self._w[0])

    def finish(self) -> Sparsifier:
        t, h, w, _ = self._flat()
        return Sparsifier(self.n, t.copy(), h.copy(), w.copy(), self.epsilon)


def sketch_project(rb, M, ground=None, tol=1e-10):
    """Finish a sketched projection ``P = (R B) M^{-1}``.

    Parameters
    ----------
    rb : ndarray, shape (r, n)
        The accumulated product of the JL matrix with the weighted
        incidence matrix, gathered during one pass.
    M : Sparsifier or matrix
        Approximation of ``B^T B``.
    ground : int, optional
        Vertex whose potential is pinned to zero (its column of the
        result is zero).

    Returns
    -------
    ndarray, shape (r, n)
    """
    return laplacian_solve(M, np.asarray(rb).T, tol=tol, ground=ground).T
