"""Compiled per-edge kernels shared by the streaming IPM and its mirror.

Every place that turns an edge's flow into its weight, centrality error
or bucket key goes through :func:`_level_eval`, so the bucket table built
during a pass and later implicit queries always round to the same group.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

IOFF = 1 << 20
JOFF = 1 << 31
SHIFT = 1 << 32


@nb.njit(cache=True, inline="always")
def _tau_edge(P, h, t, phi2, p, nm, lo, hi):
    # The refinement w <- (w^{2/p-1} (sigma + n/m))^{p/2} with
    # sigma = lev * w^{1-2/p} simplifies to (lev + n/m * w^{2/p-1})^{p/2},
    # so only q = w^{2/p-1} = X^{1-p/2} is carried between rounds.
    k, _, r = P.shape
    w = 1.0
    q = 1.0
    half = p / 2.0
    carry = 1.0 - half
    for j in range(k):
        nrm = 0.0
        for s in range(r):
            d = P[j, h, s] - P[j, t, s]
            nrm += d * d
        X = nrm / phi2 + nm * q
        if j == k - 1:
            w = math.exp(half * math.log(X))
        else:
            q = math.exp(carry * math.log(X))
    clamped = 0
    if k > 0:
        if w < lo:
            w = lo
            clamped = 1
        elif w > hi:
            w = hi
            clamped = 1
    return w, clamped


@nb.njit(cache=True, inline="always")
def _key(v, tau, eps, l1p):
    i = math.floor(math.log(tau) / l1p + 0.5)
    j = math.floor(abs(v) / eps + 0.5)
    if v < 0.0:
        j = -j
    return (np.int64(i) + IOFF) * SHIFT + (np.int64(j) + JOFF)


@nb.njit(cache=True, inline="always")
def _level_eval(x, c, u, h, t, yh, yt, P, mu, eps, l1p, p, nm, lo, hi):
    """Weight, centrality error and bucket key of one edge at one level."""
    a = 1.0 / x
    b = 1.0 / (u - x)
    phi1 = -a + b
    phi2 = a * a + b * b
    tau, clamped = _tau_edge(P, h, t, phi2, p, nm, lo, hi)
    s = c - (yh - yt)
    sq = math.sqrt(phi2)
    v = (s + mu * tau * phi1) / (mu * tau * sq)
    key = _key(v, tau, eps, l1p)
    return tau, v, key, phi2, sq, clamped


@nb.njit(cache=True, inline="always")
def _lookup(keys, lo, hi, key):
    a = lo
    b = hi
    while a < b:
        mid = (a + b) >> 1
        if keys[mid] < key:
            a = mid + 1
        else:
            b = mid
    if a < hi and keys[a] == key:
        return a
    return -1


@nb.njit(cache=True)
def chain(T, tails, heads, costs, caps, x0, Y, DY, DC, MU, P, tkeys, toff, tg,
          eps, l1p, p, nm, lo, hi, cap, out_x, out_tau, out_v, out_g, stats):
    """Replay ``T`` recorded steps for every edge of a block.

    ``out_x`` receives the flow after ``T`` steps.  ``out_tau``, ``out_v``
    and ``out_g`` receive the weight, centrality error and step entry used
    by step ``T`` (left untouched when ``T == 0``).  ``stats[0]`` counts
    clamped weights, ``stats[1]`` stale group lookups, ``stats[2]``
    proposed flows outside the open interval ``(0, u)`` and ``stats[3]``
    moves shortened to ``cap`` in the local norm ``sqrt(phi'') |dx|``.
    A cap below one keeps every flow strictly inside ``(0, u)``.
    """
    m = tails.shape[0]
    for e in range(m):
        out_x[e] = x0[e]
    # level-major order keeps one level's sketch columns hot in cache
    for l in range(T):
        Pl = P[l]
        Yl = Y[l]
        DYl = DY[l]
        DCl = DC[l]
        mu = MU[l]
        lo_k = toff[l]
        hi_k = toff[l + 1]
        last = l == T - 1
        for e in range(m):
            t = tails[e]
            h = heads[e]
            u = caps[e]
            x = out_x[e]
            tau, v, key, phi2, sq, cl = _level_eval(
                x, costs[e], u, h, t, Yl[h], Yl[t], Pl, mu, eps, l1p, p, nm, lo, hi)
            stats[0] += cl
            pos = _lookup(tkeys, lo_k, hi_k, key)
            if pos < 0:
                stats[1] += 1
                g = 0.0
            else:
                g = tg[pos]
            corr = (DYl[h] + DCl[h]) - (DYl[t] + DCl[t])
            xn = x + g / sq - corr / (tau * phi2)
            if not (xn > 0.0 and xn < u):
                stats[2] += 1
            loc = sq * (xn - x)
            if not (abs(loc) <= cap):
                stats[3] += 1
                if loc < 0.0:
                    xn = x + (-cap) / sq
                else:
                    xn = x + cap / sq
            if last:
                out_tau[e] = tau
                out_v[e] = v
                out_g[e] = g
            out_x[e] = xn


@nb.njit(cache=True)
def current_level(tails, heads, costs, caps, x, y, P, mu, eps, l1p, p, nm, lo, hi,
                  out_tau, out_v, out_key, out_phi2, stats):
    """Evaluate the in-progress step's quantities at the current flows."""
    m = tails.shape[0]
    for e in range(m):
        t = tails[e]
        h = heads[e]
        tau, v, key, phi2, sq, cl = _level_eval(
            x[e], costs[e], caps[e], h, t, y[h], y[t], P, mu, eps, l1p, p, nm, lo, hi)
        stats[0] += cl
        out_tau[e] = tau
        out_v[e] = v
        out_key[e] = key
        out_phi2[e] = phi2


@nb.njit(cache=True)
def tau_block(tails, heads, x, caps, P, p, nm, lo, hi, out, stats):
    """Weights of a block of edges from a (possibly partial) sketch stack."""
    for e in range(tails.shape[0]):
        xe = x[e]
        a = 1.0 / xe
        b = 1.0 / (caps[e] - xe)
        w, cl = _tau_edge(P, heads[e], tails[e], a * a + b * b, p, nm, lo, hi)
        out[e] = w
        stats[0] += cl


@nb.njit(cache=True)
def keys_block(v, tau, eps, l1p, out):
    for e in range(v.shape[0]):
        out[e] = _key(v[e], tau[e], eps, l1p)


def packed_keys(v, tau, eps):
    """Bucket keys computed by the compiled rounding rule."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    out = np.empty(len(v), dtype=np.int64)
    keys_block(v, tau, float(eps), math.log1p(eps), out)
    return out
