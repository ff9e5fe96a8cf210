"""Bucketed steepest-descent direction of the centrality potential.

The potential is ``sum_e cosh(lam * v_e)`` over the per-edge centrality
errors ``v_e``.  Edges are grouped by a rounded ``(tau_e, v_e)`` pair, so
the descent direction over the mixed norm

    ||w||_mix = ||w||_inf + norm_scale * sqrt(sum_e tau_e w_e^2)

is constant on groups and is computed from the group table alone.  The
table is a few words per group, and any edge recovers its step entry by
rounding its own ``(tau_e, v_e)`` and looking the group up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import packed_keys

__all__ = [
    "PotentialParams",
    "BucketTable",
    "BucketAccumulator",
    "CentralityBlowup",
    "StaleGroupError",
    "round_grid_index",
    "round_geo_index",
    "group_keys",
    "flat_maximize",
    "flat_objective",
    "mixed_norm",
    "build_bucket_table",
    "solve_table",
    "query_g",
    "potential_gradient",
    "dense_step",
]

_IOFF = 1 << 20
_JOFF = 1 << 31


class CentralityBlowup(RuntimeError):
    """An edge's centrality error left the admissible range."""

    def __init__(self, edge, value):
        super().__init__(f"edge {edge}: centrality error {value:.6g} out of range")
        self.edge = edge
        self.value = value


class StaleGroupError(KeyError):
    """A queried edge rounds to a group missing from the table."""


@dataclass
class PotentialParams:
    """Constants of the potential and of the bucketing grid.

    Attributes
    ----------
    lam : float
        Sharpness of the cosh potential.
    gamma : float or None
        Fixed step length; ``None`` selects the step length by an exact
        line search on the group-level potential model, capped by
        ``gamma_max``.
    eps_prime : float
        Rounding grid for ``v`` and log-grid ratio for ``tau``.
    norm_scale : float
        Weight of the tau-norm part of the mixed norm.
    gamma_max : float
        Upper end of the line search.
    v_limit : float
        Largest admissible ``|v_e|`` before :class:`CentralityBlowup`.
    """

    lam: float
    gamma: float | None
    eps_prime: float
    norm_scale: float
    gamma_max: float = 0.5
    v_limit: float = 1.0


def round_grid_index(v, eps):
    """Index ``j`` with ``j * eps`` the nearest grid point (ties away from zero)."""
    v = np.asarray(v, dtype=float)
    return (np.sign(v) * np.floor(np.abs(v) / eps + 0.5)).astype(np.int64)


def round_geo_index(tau, eps):
    """Index ``i`` with ``(1 + eps) ** i`` the geometric rounding of ``tau``."""
    tau = np.asarray(tau, dtype=float)
    return np.floor(np.log(tau) / math.log1p(eps) + 0.5).astype(np.int64)


def group_keys(v, tau, eps):
    """Packed int64 group key of each ``(tau, v)`` pair.

    The packing is ``(i + 2^20) * 2^32 + (j + 2^31)`` with ``i`` the
    geometric index of ``tau`` and ``j`` the grid index of ``v``.
    """
    return packed_keys(v, tau, eps)


def _unpack(keys):
    keys = np.asarray(keys, dtype=np.int64)
    i = keys // (1 << 32) - _IOFF
    j = keys % (1 << 32) - _JOFF
    return i, j


# ----------------------------------------------------------------------------
# flat maximizer


class _Sorted:
    """Positive entries sorted by ``H / a2`` with the prefix sums ``_inner`` needs."""

    def __init__(self, H, a2):
        self.pos = H > 0
        Hp, ap = H[self.pos], a2[self.pos]
        self.key = Hp / ap
        self.Hp, self.ap = Hp, ap
        self.Hsum, self.asum = float(Hp.sum()), float(ap.sum())
        order = np.argsort(-self.key, kind="stable")
        self.ks = self.key[order]
        as_ = ap[order]
        q = Hp[order] ** 2 / as_
        self.capB = np.concatenate([[0.0], np.cumsum(as_)])[:-1]
        self.restQ = np.cumsum(q[::-1])[::-1]
        self.prev = np.concatenate([[np.inf], self.ks[:-1]])


def _inner(S: _Sorted, t):
    """Best ``w >= 0`` with ``w <= t`` and ``sum a2 w^2 <= (1 - t)^2``.

    Returns the maximizer over the positive entries and the objective
    ``sum H w``.
    """
    R2 = (1.0 - t) ** 2
    if t <= 0.0 or R2 <= 0.0 or len(S.ks) == 0:
        return np.zeros(len(S.Hp)), 0.0
    if t * t * S.asum <= R2:
        return np.full(len(S.Hp), t), t * S.Hsum
    den = R2 - t * t * S.capB
    with np.errstate(divide="ignore", invalid="ignore"):
        th = np.sqrt(S.restQ / den)
    # j entries capped: the top j keys sit at the cap, the rest strictly below it
    ok = (den > 0) & (S.prev >= th * t) & (S.ks <= th * t)
    if ok.any():
        theta = float(th[np.argmax(ok)])
    else:
        # bisection on theta (the budget used is monotone in theta)
        def used(th_):
            ww = np.minimum(t, S.key / th_)
            return float(np.sum(S.ap * ww * ww))
        lo, hi = 0.0, 1.0
        while used(hi) > R2:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid == 0.0 or used(mid) > R2:
                lo = mid
            else:
                hi = mid
        theta = hi
    wp = np.minimum(t, S.key / theta)
    return wp, float(np.sum(S.Hp * wp))


def flat_maximize(h_bar, v_bar, f_bar, iters=80):
    """Maximize ``<h * f^2, w>`` subject to ``||f * v * w||_2 + ||w||_inf <= 1``.

    Parameters
    ----------
    h_bar : array_like
        Group values of the linear functional.
    v_bar : array_like
        Positive group norm weights.
    f_bar : array_like
        Square roots of the group multiplicities.
    iters : int
        Golden-section iterations over the infinity-budget split.

    Returns
    -------
    ndarray
        The maximizer ``u_bar`` (same signs as ``h_bar``).
    """
    h = np.asarray(h_bar, dtype=float)
    v = np.asarray(v_bar, dtype=float)
    f = np.asarray(f_bar, dtype=float)
    if np.any(v <= 0) or np.any(f <= 0):
        raise ValueError("norm weights and multiplicities must be positive")
    if not np.any(h):
        return np.zeros_like(h)
    H = np.abs(h) * f * f
    a2 = (f * v) ** 2
    S = _Sorted(H, a2)
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = 0.0, 1.0
    x1, x2 = hi - gr * (hi - lo), lo + gr * (hi - lo)
    f1, f2 = _inner(S, x1)[1], _inner(S, x2)[1]
    for _ in range(iters):
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + gr * (hi - lo)
            f2 = _inner(S, x2)[1]
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - gr * (hi - lo)
            f1 = _inner(S, x1)[1]
    t = 0.5 * (lo + hi)
    w = np.zeros_like(h)
    w[S.pos] = _inner(S, t)[0]
    return np.sign(h) * w


def flat_objective(h_bar, f_bar, w):
    """Group objective ``sum f^2 h w``."""
    f = np.asarray(f_bar, dtype=float)
    return float(np.sum(f * f * np.asarray(h_bar) * np.asarray(w)))


def mixed_norm(w, tau, norm_scale):
    """``||w||_inf + norm_scale * sqrt(sum tau w^2)`` of a per-edge vector."""
    w = np.asarray(w, dtype=float)
    return float(np.abs(w).max(initial=0.0) + norm_scale * math.sqrt(np.sum(tau * w * w)))


def potential_gradient(v, lam):
    """Gradient of ``sum cosh(lam v)``: ``lam * sinh(lam v)``."""
    return lam * np.sinh(lam * np.asarray(v, dtype=float))


# ----------------------------------------------------------------------------
# bucket table


@dataclass
class BucketTable:
    """Solved group table for one IPM iteration.

    ``keys`` are sorted packed ``(tau index, v index)`` pairs; ``g`` holds
    the step entry ``-gamma * u_bar`` of each group.
    """

    keys: np.ndarray
    counts: np.ndarray
    v_rep: np.ndarray
    tau_rep: np.ndarray
    u_bar: np.ndarray
    g: np.ndarray
    gamma: float
    eps_prime: float
    binding: int = -1
    meta: dict = field(default_factory=dict)

    @property
    def k(self):
        return len(self.keys)

    def words(self):
        return 5 * self.k + 2

    def lookup(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, max(self.k - 1, 0))
        if self.k == 0 or np.any(self.keys[pos] != keys):
            raise StaleGroupError("edge rounds to a group absent from the table")
        return pos


class BucketAccumulator:
    """Counts edges per rounded group during a pass."""

    def __init__(self, params: PotentialParams):
        self.params = params
        self._counts: dict[int, int] = {}
        self.max_abs_v = 0.0

    def add(self, v, tau, ids=None):
        self.check(v, ids)
        if np.size(v):
            self.add_keys(group_keys(v, tau, self.params.eps_prime))

    def check(self, v, ids=None):
        """Track ``max |v|`` and raise on values beyond ``v_limit``."""
        v = np.asarray(v, dtype=float)
        if v.size == 0:
            return
        av = np.abs(v)
        worst = int(np.argmax(av))
        self.max_abs_v = max(self.max_abs_v, float(av[worst]))
        if not np.isfinite(av[worst]) or av[worst] > self.params.v_limit:
            edge = int(np.asarray(ids)[worst]) if ids is not None else worst
            raise CentralityBlowup(edge, float(v[worst]))

    def add_keys(self, keys):
        """Count precomputed group keys."""
        keys, cnt = np.unique(np.asarray(keys, dtype=np.int64), return_counts=True)
        for kk, cc in zip(keys.tolist(), cnt.tolist()):
            self._counts[kk] = self._counts.get(kk, 0) + cc

    def export(self):
        """Counts as sorted arrays (for handing a pass to another party)."""
        keys = np.array(sorted(self._counts), dtype=np.int64)
        counts = np.array([self._counts[k] for k in keys.tolist()], dtype=np.int64)
        return {"keys": keys, "counts": counts, "max_abs_v": np.array([self.max_abs_v])}

    def load(self, state):
        """Replace the counts by the output of :meth:`export`."""
        self._counts = dict(zip(np.asarray(state["keys"]).tolist(),
                                np.asarray(state["counts"]).tolist()))
        self.max_abs_v = float(state["max_abs_v"][0])

    def finish(self, binding=-1) -> BucketTable:
        keys = np.array(sorted(self._counts), dtype=np.int64)
        counts = np.array([self._counts[k] for k in keys.tolist()], dtype=np.int64)
        return solve_table(keys, counts, self.params, binding)


def _line_search(v_rep, u, counts, lam, gmax, iters=120):
    """Exact minimizer of ``sum counts cosh(lam (v - s u))`` over ``s in [0, gmax]``."""
    def dphi(s):
        return -float(np.sum(counts * lam * u * np.sinh(lam * (v_rep - s * u))))
    if dphi(0.0) >= 0.0:
        return 0.0
    if dphi(gmax) <= 0.0:
        return float(gmax)
    lo, hi = 0.0, float(gmax)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if dphi(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_table(keys, counts, params: PotentialParams, binding=-1) -> BucketTable:
    """Solve the grouped flat maximizer and attach the step entries."""
    keys = np.asarray(keys, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    i, j = _unpack(keys)
    eps = params.eps_prime
    v_rep = j * eps
    tau_rep = np.exp(i * math.log1p(eps))
    if len(keys) == 0:
        e = np.zeros(0)
        return BucketTable(keys, counts, e, e, e, e, 0.0, eps, binding)
    h = potential_gradient(v_rep, params.lam)
    f = np.sqrt(counts.astype(float))
    wts = params.norm_scale * np.sqrt(tau_rep)
    u = flat_maximize(h, wts, f)
    if params.gamma is None:
        gamma = _line_search(v_rep, u, counts, params.lam, params.gamma_max)
    else:
        gamma = float(params.gamma)
    return BucketTable(keys, counts, v_rep, tau_rep, u, -gamma * u, gamma, eps, binding)


def build_bucket_table(stream, v_query, tau_query, params: PotentialParams, binding=-1):
    """Build the table in one pass.

    ``v_query(block)`` and ``tau_query(block)`` return per-edge arrays for
    an :class:`~mcfstream.stream.EdgeBlock`.
    """
    acc = BucketAccumulator(params)
    for blk in stream.passes_blocks():
        acc.add(v_query(blk), tau_query(blk), blk.ids)
    return acc.finish(binding)


def query_g(table: BucketTable, v_e, tau_e):
    """Step entries of edges with centrality errors ``v_e`` and weights ``tau_e``."""
    pos = table.lookup(group_keys(v_e, tau_e, table.eps_prime))
    return table.g[pos]


def dense_step(v, tau, params: PotentialParams):
    """Per-edge step of a fully materialized ``(v, tau)`` pair (reference path)."""
    keys = group_keys(v, tau, params.eps_prime)
    uk, cnt = np.unique(keys, return_counts=True)
    table = solve_table(uk, cnt, params)
    return table.g[np.searchsorted(table.keys, keys)], table
