"""Robust interior-point driver with an implicit, replayable transcript.

The primal iterate is never stored.  Each iteration appends an
:class:`IterationRecord` (dual potentials, the two electrical corrections,
the path parameter, the weight sketches and the bucketed step), and the
flow of any edge after ``t`` iterations is recomputed from its initial
value by replaying those ``t`` records with the edge's own data.

One iteration (:func:`short_step`) costs ``k + 2`` passes:

1. ``k`` passes build the weight sketches at the current iterate;
2. one pass fills the bucket table, feeds the sparsifier of
   ``A^T T^{-1} Phi2^{-1} A`` and accumulates ``A^T x``;
3. one pass accumulates ``A^T Phi2^{-1/2} g``.

Two grounded Laplacian solves then give the corrections ``delta_y``
(re-centering) and ``delta_c`` (feasibility repair).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .gradient import BucketAccumulator, BucketTable, PotentialParams, solve_table
from .lewis import query_tau as _stack_tau
from .lewis import (LewisParams, SketchStack, _level_seeds, barrier_curvature, build_tau,
                    weight_range)
from .linalg import (JLMatrix, SparsifierBuilder, incidence_dense, incidence_transpose_apply,
                     laplacian_solve, mix64, sketch_project)
from .stream import account, begin_pass, end_pass

__all__ = [
    "IPMConfig",
    "IterationRecord",
    "Transcript",
    "NonConvergence",
    "CentralityViolation",
    "short_step",
    "run_ipm",
    "iteration_count",
    "query_x",
    "query_s",
    "query_tau",
    "query_g",
    "centrality_probe",
    "save_transcript",
    "load_transcript",
    "DenseMirror",
]

FORMAT_VERSION = 1


class NonConvergence(RuntimeError):
    """The iteration cap was reached; ``trace`` holds the centrality history."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class CentralityViolation(RuntimeError):
    """A replayed flow left ``(0, u)`` or a weight left its range."""


# ----------------------------------------------------------------------------
# configuration


@dataclass
class IPMConfig:
    """All constants of one IPM run.

    Use :meth:`strict` for the constants exactly as derived from ``C``,
    ``m`` and ``n``, or :meth:`relaxed` for the desk-scale profile.

    Attributes
    ----------
    profile : str
    C : float
    alpha, p : float
        ``alpha = 1/(4 log(4m/n))`` and the Lewis exponent ``p = 1 - alpha``.
    eps : float
        Centrality tolerance.
    lam, gamma : float
        Potential sharpness and step length (``gamma=None``: line search).
    r : float
        Relative decrease of the path parameter per iteration.
    eps_prime, eps_tau, eps_sigma : float
        Bucketing grid, weight accuracy and leverage accuracy.
    norm_scale : float
        Weight of the tau-norm part of the step norm.
    step_cap : float
        Largest move of one edge per step in its local norm
        ``sqrt(phi'') |dx|``; longer moves are shortened to this length and
        counted in ``Transcript.stats["damped"]``.  Any value below one keeps
        the flow strictly inside ``(0, u)``.
    """

    profile: str
    m: int
    n: int
    C: float
    alpha: float
    p: float
    eps: float
    lam: float
    gamma: float | None
    r: float
    eps_prime: float
    eps_tau: float
    eps_sigma: float
    norm_scale: float
    c_jl: float = 8.0
    gamma_max: float = 0.5
    v_limit: float = 1.0
    sparsifier_eps: float = 0.5
    sparsifier_c: float = 16.0
    lewis_rows: int | None = None
    lewis_depth: int | None = None
    seed: int = 0
    strict_checks: bool = True
    max_iter: int = 10 ** 7
    step_cap: float = 0.5

    @staticmethod
    def _alpha(m, n):
        return 1.0 / (4.0 * math.log(4.0 * m / n))

    @classmethod
    def strict(cls, m, n, C=100.0, **kw):
        """Constants derived from ``C``, ``m`` and ``n`` alone."""
        alpha = cls._alpha(m, n)
        eps = alpha / C
        lam = C * math.log(C * m / eps ** 2) / eps
        gamma = eps / (C * lam)
        r = eps * eps * gamma / math.sqrt(n)
        eps_prime = gamma / 60.0
        base = dict(profile="strict", m=m, n=n, C=C, alpha=alpha, p=1.0 - alpha, eps=eps,
                    lam=lam, gamma=gamma, r=r, eps_prime=eps_prime, eps_tau=eps_prime,
                    eps_sigma=eps_prime / 10.0, norm_scale=C * math.log(4.0 * m / n),
                    v_limit=1.0 + 10.0 * eps_prime)
        base.update(kw)
        return cls(**base)

    @classmethod
    def relaxed(cls, m, n, **kw):
        """Desk-scale profile.

        The Lewis exponent keeps its formula.  The remaining constants are
        chosen so that a run takes ``O(sqrt(n) log(mu_init/mu_target))``
        iterations with a modest constant: the path parameter shrinks by
        ``0.4/sqrt(n)`` per step, the step length is chosen by a line
        search on the group-level potential, and the sketches are sized
        for accuracy about one half.
        """
        alpha = cls._alpha(m, n)
        base = dict(profile="relaxed", m=m, n=n, C=4.0, alpha=alpha, p=1.0 - alpha, eps=1.0,
                    lam=4.0, gamma=None, r=0.4 / math.sqrt(n), eps_prime=0.01,
                    eps_tau=0.5, eps_sigma=0.5, norm_scale=0.1, c_jl=1.0, gamma_max=0.5,
                    v_limit=8.0, strict_checks=False)
        base.update(kw)
        return cls(**base)

    @classmethod
    def profile_for(cls, name, m, n, **kw):
        if name == "strict":
            return cls.strict(m, n, **kw)
        if name == "relaxed":
            return cls.relaxed(m, n, **kw)
        raise ValueError(f"unknown profile {name!r}")

    def lewis_params(self):
        return LewisParams(n=self.n, m=self.m, p=self.p, eps_tau=self.eps_tau,
                           eps_sigma=self.eps_sigma, c_jl=self.c_jl, k=self.lewis_depth,
                           rows=self.lewis_rows, sparsifier_eps=self.sparsifier_eps,
                           sparsifier_c=self.sparsifier_c, strict=self.strict_checks)

    def potential_params(self):
        return PotentialParams(lam=self.lam, gamma=self.gamma, eps_prime=self.eps_prime,
                               norm_scale=self.norm_scale, gamma_max=self.gamma_max,
                               v_limit=self.v_limit)

    def to_dict(self):
        return asdict(self)


def iteration_count(mu_init, mu_target, r):
    """Number of steps ``ceil(log(mu_init/mu_target) / -log(1-r))``."""
    if mu_init <= mu_target:
        return 0
    return int(math.ceil(math.log(mu_init / mu_target) / -math.log1p(-r)))


def _iter_seed(seed, t, salt):
    z = mix64(np.uint64((int(seed) * 1000003 + t * 7919 + salt) & 0xFFFFFFFFFFFFFFFF))
    return int(z) & 0x7FFFFFFFFFFFFFFF


def _lewis_seed(seed):
    # One sketch for the whole run: the weight estimate is then a fixed
    # function of x and drifts with the iterate instead of being redrawn
    # at every step, which would inject fresh noise into v each iteration.
    return _iter_seed(seed, 0, 1)


# ----------------------------------------------------------------------------
# transcript


@dataclass
class IterationRecord:
    """Everything one iteration leaves behind."""

    mu: float
    y: np.ndarray
    delta_y: np.ndarray
    delta_c: np.ndarray
    tau_stack: SketchStack
    g_table: BucketTable
    sparsifier_fingerprint: tuple
    probe_before: float = float("nan")
    feasibility: float = float("nan")


class _Grow:
    """Preallocated array that doubles along axis 0."""

    def __init__(self, shape_tail, dtype=np.float64, cap=16):
        self.a = np.zeros((cap,) + tuple(shape_tail), dtype=dtype)
        self.n = 0

    def append(self, row):
        if self.n == self.a.shape[0]:
            new = np.zeros((2 * self.a.shape[0],) + self.a.shape[1:], dtype=self.a.dtype)
            new[: self.n] = self.a[: self.n]
            self.a = new
        self.a[self.n] = row
        self.n += 1

    def view(self, upto=None):
        return self.a[: self.n if upto is None else upto]


class Transcript:
    """Append-only record of an IPM run with implicit edge queries.

    Parameters
    ----------
    lp
        The LP stream (see :class:`~mcfstream.lifecycle.AuxStream`); only
        ``N``, ``ground``, ``n``, ``m`` and ``x0`` are used here.
    config : IPMConfig
    mu_init, mu_target : float
    """

    def __init__(self, lp, config: IPMConfig, mu_init, mu_target, meters=None):
        self.lp = lp
        self.config = config
        self.mu_init = float(mu_init)
        self.mu_target = float(mu_target)
        self.N = lp.N
        self.ground = lp.ground
        self.meters = meters if meters is not None else lp.meters
        lpar = config.lewis_params()
        self.k = lpar.k
        self.rows = lpar.rows
        self.p = lpar.p
        self.n_over_m = lpar.n_over_m
        self.records: list[IterationRecord] = []
        self._Y = _Grow((self.N,))
        self._Y.append(np.zeros(self.N))
        self._DY = _Grow((self.N,))
        self._DC = _Grow((self.N,))
        self._MU = _Grow(())
        self._P = _Grow((self.k, self.N, self.rows))
        self._tkeys = np.zeros(0, dtype=np.int64)
        self._tg = np.zeros(0)
        self._toff = [0]
        self.evaluations = 0
        self.stats = {"clamped": 0, "stale": 0, "out_of_domain": 0, "damped": 0, "guard": 0}
        self.probes: list[float] = []
        account(self.meters, self.N - 1 + 3, "transcript-header")

    # -- bookkeeping -------------------------------------------------------

    @property
    def T(self):
        return len(self.records)

    def mu_at(self, t):
        return self.mu_init if t == 0 else self.records[t - 1].mu

    def y_at(self, t):
        return self._Y.a[t]

    def append(self, rec: IterationRecord):
        self.records.append(rec)
        self._Y.append(rec.y)
        self._DY.append(rec.delta_y)
        self._DC.append(rec.delta_c)
        self._MU.append(rec.mu)
        self._P.append(rec.tau_stack.P)
        self._tkeys = np.concatenate([self._tkeys, rec.g_table.keys])
        self._tg = np.concatenate([self._tg, rec.g_table.g])
        self._toff.append(len(self._tkeys))
        words = 3 * (self.N - 1) + 4 + rec.tau_stack.words() + rec.g_table.words()
        account(self.meters, words, "record")

    def record_words(self, t):
        rec = self.records[t - 1]
        return 3 * (self.N - 1) + 4 + rec.tau_stack.words() + rec.g_table.words()

    # -- replay ------------------------------------------------------------

    def _replay(self, blk, T, detail=False):
        tails = np.ascontiguousarray(blk.tails, dtype=np.int64)
        heads = np.ascontiguousarray(blk.heads, dtype=np.int64)
        costs = np.ascontiguousarray(blk.costs, dtype=np.float64)
        caps = np.ascontiguousarray(blk.caps, dtype=np.float64)
        x0 = np.ascontiguousarray(self.lp.x0(blk), dtype=np.float64)
        L = len(tails)
        out_x = np.empty(L)
        out_tau = np.full(L, np.nan)
        out_v = np.full(L, np.nan)
        out_g = np.full(L, np.nan)
        stats = np.zeros(4, dtype=np.int64)
        if T == 0:
            out_x[:] = x0
        else:
            eps = self.config.eps_prime
            lo, hi = self._range()
            kernels.chain(T, tails, heads, costs, caps, x0, self._Y.view(T + 1),
                          self._DY.view(T), self._DC.view(T), self._MU.view(T),
                          self._P.view(T), self._tkeys, np.asarray(self._toff, dtype=np.int64),
                          self._tg, eps, math.log1p(eps), self.p, self.n_over_m, lo, hi,
                          self.config.step_cap, out_x, out_tau, out_v, out_g, stats)
        self.evaluations += L * T
        self.stats["clamped"] += int(stats[0])
        self.stats["stale"] += int(stats[1])
        self.stats["out_of_domain"] += int(stats[2])
        self.stats["damped"] += int(stats[3])
        if self.config.strict_checks and (stats[1] or stats[2]):
            raise CentralityViolation(
                f"replay to step {T}: {int(stats[1])} stale groups, "
                f"{int(stats[2])} flows outside (0, u)")
        if detail:
            return out_x, out_tau, out_v, out_g
        return out_x

    def _range(self):
        lo = self.n_over_m * math.exp(-self.config.eps_tau)
        hi = (1.0 + self.n_over_m) * math.exp(self.config.eps_tau)
        return lo, hi

    def x_block(self, blk, T=None):
        """Flows of a block of edges after ``T`` steps (default: all)."""
        return self._replay(blk, self.T if T is None else T)

    def detail_block(self, blk, t):
        """``(x^{t-1}, tau^t, v^t, g^t)`` of a block for ``1 <= t <= T``."""
        x, tau, v, g = self._replay(blk, t, detail=True)
        xp = self._replay(blk, t - 1)
        return xp, tau, v, g


# ----------------------------------------------------------------------------
# the iteration


def _level_words(stack):
    k, N, r = stack.P.shape
    return k * (r * (N - 1) + 1)


def _current(tr, blk, x, stack_P, y, mu):
    L = len(blk)
    tau, v, phi2 = np.empty(L), np.empty(L), np.empty(L)
    key = np.empty(L, dtype=np.int64)
    stats = np.zeros(1, dtype=np.int64)
    eps = tr.config.eps_prime
    lo, hi = tr._range()
    kernels.current_level(np.ascontiguousarray(blk.tails), np.ascontiguousarray(blk.heads),
                          np.ascontiguousarray(blk.costs, dtype=np.float64),
                          np.ascontiguousarray(blk.caps, dtype=np.float64), x, y, stack_P,
                          mu, eps, math.log1p(eps), tr.p, tr.n_over_m, lo, hi,
                          tau, v, key, phi2, stats)
    tr.stats["clamped"] += int(stats[0])
    return tau, v, key, phi2


def short_step(tr: Transcript, lp):
    """Append one iteration to ``tr`` using ``k + 2`` passes over ``lp``."""
    cfg = tr.config
    T = tr.T
    N, z = tr.N, tr.ground
    mu_prev = tr.mu_at(T)
    mu = (1.0 - cfg.r) * mu_prev
    y = np.ascontiguousarray(tr.y_at(T))
    meters = tr.meters

    # (1) weight sketches at x^T
    stack = build_tau(lp, lambda blk: tr.x_block(blk, T), cfg.lewis_params(),
                      seed=_lewis_seed(cfg.seed), ground=z, meters=meters, binding=T + 1)
    P = np.ascontiguousarray(stack.P)

    # (2) bucket table, sparsifier of the step Laplacian, A^T x
    acc = BucketAccumulator(cfg.potential_params())
    hseed = _iter_seed(cfg.seed, T, 2)
    sb = SparsifierBuilder(N, cfg.sparsifier_eps, seed=hseed, c=cfg.sparsifier_c)
    st = begin_pass(lp, {"groups": acc, "sparsifier": sb, "atx": np.zeros(N),
                         "probe": np.zeros(1)})
    atx, probe = st["atx"], st["probe"]
    for blk in lp.passes_blocks():
        x = tr.x_block(blk, T)
        tau, v, key, phi2 = _current(tr, blk, x, P, y, mu)
        acc.check(v, blk.ids)
        acc.add_keys(key)
        if T > 0:
            _, v_old, _, _ = _current(tr, blk, x, P, y, mu_prev)
            probe[0] = max(probe[0], float(np.abs(v_old).max(initial=0.0)))
        tr.stats["guard"] += int(np.sum(phi2 < 2.0 / (blk.caps * blk.caps)))
        sb.add(blk.tails, blk.heads, 1.0 / (tau * phi2), blk.ids)
        incidence_transpose_apply(blk.tails, blk.heads, x, N, out=atx)
    st = end_pass(lp, st)
    atx, probe = st["atx"], float(st["probe"][0])
    table = st["groups"].finish(binding=T + 1)
    account(meters, table.words(), "table-build")
    H = st["sparsifier"].finish()
    account(meters, H.words(), "step-sparsifier")

    # (3) A^T Phi2^{-1/2} g
    st = begin_pass(lp, {"rhs": np.zeros(N)})
    rhs = st["rhs"]
    for blk in lp.passes_blocks():
        x = tr.x_block(blk, T)
        tau, v, key, phi2 = _current(tr, blk, x, P, y, mu)
        g = table.g[table.lookup(key)]
        incidence_transpose_apply(blk.tails, blk.heads, g / np.sqrt(phi2), N, out=rhs)
    rhs = end_pass(lp, st)["rhs"]

    delta_y = laplacian_solve(H, rhs, ground=z)
    resid = atx - lp.b_int
    delta_c = laplacian_solve(H, resid, ground=z)
    feas = float(math.sqrt(max(resid[np.arange(N) != z] @ delta_c[np.arange(N) != z], 0.0)))
    account(meters, -H.words(), "step-sparsifier")
    account(meters, -table.words(), "table-build")
    # the dual moves by the scaled re-centering potential so that s = c - A y
    # stays in step with the primal update
    y_new = y - mu * delta_y
    rec = IterationRecord(mu=mu, y=y_new, delta_y=delta_y, delta_c=delta_c, tau_stack=stack,
                          g_table=table, sparsifier_fingerprint=(hseed, H.size),
                          probe_before=probe if T > 0 else float("nan"), feasibility=feas)
    # the per-level sketch words were charged while building; the record owns them now
    account(meters, -_level_words(stack), "tau-level")
    tr.append(rec)
    if T > 0:
        tr.probes.append(probe)
    return rec


def run_ipm(lp, config: IPMConfig, mu_init, mu_target, final_probe=True, callback=None):
    """Run ``iteration_count(mu_init, mu_target, r)`` steps and return the transcript."""
    tr = Transcript(lp, config, mu_init, mu_target)
    T = iteration_count(mu_init, mu_target, config.r)
    if T > config.max_iter:
        raise NonConvergence(f"{T} iterations exceed the cap {config.max_iter}")
    for _ in range(T):
        short_step(tr, lp)
        if callback is not None:
            callback(tr)
    if final_probe and T > 0:
        tr.probes.append(centrality_probe(tr, lp)[0])
    return tr


# ----------------------------------------------------------------------------
# queries


class _One:
    def __init__(self, ids, tails, heads, costs, caps):
        self.ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        self.tails = np.atleast_1d(np.asarray(tails, dtype=np.int64))
        self.heads = np.atleast_1d(np.asarray(heads, dtype=np.int64))
        self.costs = np.atleast_1d(np.asarray(costs, dtype=np.float64))
        self.caps = np.atleast_1d(np.asarray(caps, dtype=np.float64))

    def __len__(self):
        return len(self.ids)


def query_x(tr: Transcript, t, ids, tails, heads, costs, caps):
    """Flows ``x^t`` of the given edges (vectorized over edges)."""
    if not 0 <= t <= tr.T:
        raise IndexError(f"iteration {t} outside 0..{tr.T}")
    return tr.x_block(_One(ids, tails, heads, costs, caps), t)


def query_s(tr: Transcript, t, tails, heads, costs):
    """Slacks ``s^t = c - (y_head - y_tail)``."""
    if not 0 <= t <= tr.T:
        raise IndexError(f"iteration {t} outside 0..{tr.T}")
    y = tr.y_at(t)
    return np.asarray(costs, dtype=float) - (y[np.asarray(heads)] - y[np.asarray(tails)])


def query_tau(tr: Transcript, t, ids, tails, heads, costs, caps):
    """Weights used by step ``t`` (``1 <= t <= T``)."""
    if not 1 <= t <= tr.T:
        raise IndexError(f"iteration {t} outside 1..{tr.T}")
    return tr.detail_block(_One(ids, tails, heads, costs, caps), t)[1]


def query_g(tr: Transcript, t, ids, tails, heads, costs, caps):
    """Step entries of step ``t`` (``1 <= t <= T``)."""
    if not 1 <= t <= tr.T:
        raise IndexError(f"iteration {t} outside 1..{tr.T}")
    return tr.detail_block(_One(ids, tails, heads, costs, caps), t)[3]


def centrality_probe(tr: Transcript, lp, t=None, sample=None):
    """``(max |v_e|, feasibility residual)`` at iterate ``t`` (default: last).

    Fresh weights are built at ``x^t`` (``k`` passes) and one further pass
    evaluates every edge, or only the ids in ``sample``.  The residual is
    ``||A^T x - b||`` in the norm given by the inverse of the weighted
    Laplacian ``A^T (T Phi2)^{-1} A``.
    """
    cfg = tr.config
    t = tr.T if t is None else t
    mu = tr.mu_at(t)
    y = np.ascontiguousarray(tr.y_at(t))
    stack = build_tau(lp, lambda blk: tr.x_block(blk, t), cfg.lewis_params(),
                      seed=_lewis_seed(cfg.seed), ground=tr.ground, meters=tr.meters)
    P = np.ascontiguousarray(stack.P)
    sb = SparsifierBuilder(tr.N, cfg.sparsifier_eps, seed=_iter_seed(cfg.seed, t, 3),
                           c=cfg.sparsifier_c)
    st = begin_pass(lp, {"worst": np.zeros(1), "atx": np.zeros(tr.N), "sparsifier": sb})
    worst, atx, sb = st["worst"], st["atx"], st["sparsifier"]
    for blk in lp.passes_blocks():
        x = tr.x_block(blk, t)
        tau, v, _, phi2 = _current(tr, blk, x, P, y, mu)
        sel = np.ones(len(blk), dtype=bool) if sample is None else np.isin(blk.ids, sample)
        if sel.any():
            worst[0] = max(worst[0], float(np.abs(v[sel]).max()))
        sb.add(blk.tails, blk.heads, 1.0 / (tau * phi2), blk.ids)
        incidence_transpose_apply(blk.tails, blk.heads, x, tr.N, out=atx)
    st = end_pass(lp, st)
    worst, atx, sb = float(st["worst"][0]), st["atx"], st["sparsifier"]
    account(tr.meters, -_level_words(stack), "tau-level")
    resid = atx - lp.b_int
    sol = laplacian_solve(sb.finish(), resid, ground=tr.ground)
    mask = np.arange(tr.N) != tr.ground
    return worst, float(math.sqrt(max(resid[mask] @ sol[mask], 0.0)))


# ----------------------------------------------------------------------------
# serialization


def save_transcript(tr: Transcript, path, extra=None):
    """Write a versioned ``.npz`` container with every record and the config."""
    T = tr.T
    header = {"version": FORMAT_VERSION, "config": tr.config.to_dict(), "mu_init": tr.mu_init,
              "mu_target": tr.mu_target, "N": tr.N, "ground": tr.ground, "T": T,
              "k": tr.k, "rows": tr.rows, "p": tr.p, "n_over_m": tr.n_over_m,
              "gammas": [rec.g_table.gamma for rec in tr.records],
              "probes": tr.probes, "extra": extra or {}}
    arrays = dict(
        header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
        Y=tr._Y.view(T + 1), DY=tr._DY.view(T), DC=tr._DC.view(T), MU=tr._MU.view(T),
        P=tr._P.view(T), tkeys=tr._tkeys, tg=tr._tg, toff=np.asarray(tr._toff, dtype=np.int64),
        tcounts=np.concatenate([rec.g_table.counts for rec in tr.records]) if T else
        np.zeros(0, dtype=np.int64),
        tu=np.concatenate([rec.g_table.u_bar for rec in tr.records]) if T else np.zeros(0),
        seeds=np.array([list(rec.tau_stack.seeds) for rec in tr.records], dtype=np.int64)
        .reshape(T, tr.k),
    )
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_transcript(path, lp):
    """Reload a transcript saved by :func:`save_transcript` for queries."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported transcript version {header.get('version')}")
        arr = {k: data[k] for k in data.files if k != "header"}
    cfg = IPMConfig(**header["config"])
    tr = Transcript(lp, cfg, header["mu_init"], header["mu_target"])
    eps = cfg.eps_prime
    toff = arr["toff"]
    for t in range(header["T"]):
        lo, hi = int(toff[t]), int(toff[t + 1])
        stack = SketchStack(arr["P"][t], tuple(int(s) for s in arr["seeds"][t]), header["p"],
                            header["n_over_m"], cfg.eps_tau, binding=t + 1)
        keys = arr["tkeys"][lo:hi]
        i = keys // (1 << 32) - kernels.IOFF
        j = keys % (1 << 32) - kernels.JOFF
        table = BucketTable(keys=keys, counts=arr["tcounts"][lo:hi], v_rep=j * eps,
                            tau_rep=np.exp(i * math.log1p(eps)), u_bar=arr["tu"][lo:hi],
                            g=arr["tg"][lo:hi], gamma=header["gammas"][t], eps_prime=eps,
                            binding=t + 1)
        tr.append(IterationRecord(mu=float(arr["MU"][t]), y=arr["Y"][t + 1],
                                  delta_y=arr["DY"][t], delta_c=arr["DC"][t], tau_stack=stack,
                                  g_table=table, sparsifier_fingerprint=(0, 0)))
    tr.probes = list(header.get("probes", []))
    tr.extra = header.get("extra", {})
    return tr


# ----------------------------------------------------------------------------
# dense mirror


class DenseMirror:
    """Non-streaming reference run that stores the primal iterate explicitly.

    The flows live in one explicit vector updated in place, so no
    transcript replay is involved.  The dual slacks and the primal update
    use a dense incidence matrix.  Seeds, kernels and solvers are shared
    with the streaming code, and every accumulation over edges runs over
    the same block partition and in the same order as a pass, so the two
    histories agree to rounding.

    Attributes
    ----------
    xs, ss : list of ndarray
        ``x^t`` and ``s^t`` for ``t = 0..T``.
    taus, gs, vs : list of ndarray
        Weights, step entries and centrality errors used by step ``t``
        (index ``t - 1``).
    """

    def __init__(self, lp, config: IPMConfig, mu_init, mu_target, block=None):
        self.lp = lp
        self.cfg = config
        E = lp.dense()
        self.E = E
        self.ids, self.tails, self.heads = E.ids, E.tails, E.heads
        self.costs, self.caps = E.costs, E.caps
        self.N, self.z = lp.N, lp.ground
        self.A = incidence_dense(self.tails, self.heads, self.N)
        self.b = lp.b_int
        self.mu_init, self.mu_target = float(mu_init), float(mu_target)
        self.lpar = config.lewis_params()
        self.block = block if block is not None else lp.base.block
        self.x = lp.x0(E).astype(float)
        self.y = np.zeros(self.N)
        self.mu = self.mu_init
        self.xs, self.ss = [self.x.copy()], [self.costs - self.A @ self.y]
        self.taus, self.gs, self.vs, self.mus, self.gammas = [], [], [], [], []
        self.out_of_domain = 0
        self.damped = 0

    def _blocks(self):
        # the stream emits base edges in blocks and the star edges last
        m = self.lp.aux.m
        for lo in range(0, m, self.block):
            yield slice(lo, min(m, lo + self.block))
        yield slice(m, len(self.ids))

    def _transpose_apply(self, vals):
        out = np.zeros(self.N)
        for sl in self._blocks():
            incidence_transpose_apply(self.tails[sl], self.heads[sl], vals[sl], self.N, out=out)
        return out

    def _sparsifier(self, weights, seed, eps, c):
        sb = SparsifierBuilder(self.N, eps, seed=seed, c=c)
        for sl in self._blocks():
            sb.add(self.tails[sl], self.heads[sl], weights[sl], self.ids[sl])
        return sb.finish()

    def _weights(self, x, t):
        lp = self.lpar
        k, r = lp.k, lp.rows
        seeds = _level_seeds(_lewis_seed(self.cfg.seed), k)
        P = np.zeros((k, self.N, r))
        phi2 = barrier_curvature(x, self.caps)
        for j in range(k):
            if j:
                w = _stack_tau(SketchStack(P[:j], tuple(seeds[:j]), lp.p, lp.n_over_m,
                                          lp.eps_tau), self.tails, self.heads, x, self.caps)
            else:
                w = np.ones(len(x))
            d = w ** (1.0 - 2.0 / lp.p) / phi2
            M = self._sparsifier(d, seeds[j] ^ 0x5A5A, lp.sparsifier_eps, lp.sparsifier_c)
            jl = JLMatrix(r, seeds[j])
            rbt = np.zeros((self.N, r))
            for sl in self._blocks():
                cols = jl.columns(self.ids[sl]) * np.sqrt(d[sl])[:, None]
                np.add.at(rbt, self.heads[sl], cols)
                np.subtract.at(rbt, self.tails[sl], cols)
            P[j] = sketch_project(rbt.T, M, ground=self.z).T
        return P

    def step(self):
        cfg = self.cfg
        t = len(self.taus)
        mu = (1.0 - cfg.r) * self.mu
        P = self._weights(self.x, t)
        lo, hi = weight_range(SketchStack(P, (), self.lpar.p, self.lpar.n_over_m,
                                          self.lpar.eps_tau))
        L = len(self.x)
        tau, v, phi2 = np.empty(L), np.empty(L), np.empty(L)
        key = np.empty(L, dtype=np.int64)
        eps = cfg.eps_prime
        kernels.current_level(self.tails, self.heads, self.costs, self.caps, self.x, self.y,
                              np.ascontiguousarray(P), mu, eps, math.log1p(eps), self.lpar.p,
                              self.lpar.n_over_m, lo, hi, tau, v, key, phi2,
                              np.zeros(1, dtype=np.int64))
        uk, cnt = np.unique(key, return_counts=True)
        table = solve_table(uk, cnt, cfg.potential_params())
        g = table.g[np.searchsorted(table.keys, key)]
        H = self._sparsifier(1.0 / (tau * phi2), _iter_seed(cfg.seed, t, 2),
                             cfg.sparsifier_eps, cfg.sparsifier_c)
        dy = laplacian_solve(H, self._transpose_apply(g / np.sqrt(phi2)), ground=self.z)
        dc = laplacian_solve(H, self._transpose_apply(self.x) - self.b, ground=self.z)
        sq = np.sqrt(phi2)
        xn = self.x + g / sq - (self.A @ (dy + dc)) / (tau * phi2)
        self.out_of_domain += int(np.sum(~((xn > 0.0) & (xn < self.caps))))
        loc = sq * (xn - self.x)
        cap = self.cfg.step_cap
        over = ~(np.abs(loc) <= cap)
        xn[over] = self.x[over] + np.where(loc[over] < 0.0, -cap, cap) / sq[over]
        self.damped += int(over.sum())
        self.x = xn
        self.y = self.y - mu * dy
        self.mu = mu
        self.taus.append(tau)
        self.gs.append(g)
        self.vs.append(v)
        self.mus.append(mu)
        self.gammas.append(table.gamma)
        self.xs.append(self.x.copy())
        self.ss.append(self.costs - self.A @ self.y)

    def run(self, steps=None):
        T = iteration_count(self.mu_init, self.mu_target, self.cfg.r)
        for _ in range(T if steps is None else steps):
            self.step()
        return self
