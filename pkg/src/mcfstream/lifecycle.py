"""Everything around the IPM loop.

* :class:`AuxGraph` / :func:`build_initial_point`: the base graph plus a
  bidirectional star on an extra vertex ``z`` whose edges absorb the
  imbalance of the half-capacity flow, giving a strictly interior
  feasible starting point.
* :class:`AuxStream`: the stream view the IPM iterates over (base edges
  followed by the star edges, costs optionally perturbed).
* :class:`Perturbation` / :func:`apply_isolation`: random cost offsets
  that make the optimum unique with good probability.
* :func:`extract_flow`: final pass that reads every edge's flow and
  rounds it.
* :func:`solve` / :func:`solve_exact`: the whole pipeline, once or with
  isolation boosting over several perturbation seeds.
* :func:`exact_oracle`: successive shortest paths, used for verification.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .linalg import hash_uniform
from .stream import EdgeBlock, EdgeStream, account

__all__ = [
    "AuxGraph",
    "AuxStream",
    "Perturbation",
    "FlowReport",
    "InfeasibleError",
    "build_initial_point",
    "apply_isolation",
    "extract_flow",
    "exact_oracle",
    "random_instance",
    "supply_of",
    "SolveResult",
    "solve",
    "solve_exact",
]


class InfeasibleError(ValueError):
    """The demands cannot be routed; ``cut`` lists a violated vertex set."""

    def __init__(self, msg, cut=None):
        super().__init__(msg)
        self.cut = cut


def supply_of(n, tails, heads, flow):
    """Outflow minus inflow of ``flow`` at every vertex."""
    out = np.zeros(n)
    np.add.at(out, tails, flow)
    np.subtract.at(out, heads, flow)
    return out


# ----------------------------------------------------------------------------
# isolation perturbation


@dataclass
class Perturbation:
    """Cost offsets ``z_e / (4 m^2 W^2)`` with ``z_e`` uniform on ``1..2mW``.

    ``z_e`` depends only on ``(seed, e)``.  With ``seed=None`` every offset
    is zero (identity view).
    """

    seed: int | None
    m: int
    W: int

    @property
    def scale(self):
        return 4 * self.m * self.m * self.W * self.W

    def offsets(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if self.seed is None:
            return np.zeros(len(ids), dtype=np.int64)
        u = hash_uniform(self.seed, ids, 0x150)
        return 1 + np.floor(u * (2 * self.m * self.W)).astype(np.int64)

    def scaled_costs(self, ids, costs):
        """Exact perturbed costs as integers over the common scale."""
        return np.asarray(costs, dtype=np.int64) * self.scale + self.offsets(ids)

    def costs(self, ids, costs):
        """Perturbed costs as floats (what the IPM consumes)."""
        return np.asarray(costs, dtype=float) + self.offsets(ids) / self.scale

    def exact(self, e, cost):
        """Perturbed cost of one edge as an exact fraction."""
        return Fraction(int(cost)) + Fraction(int(self.offsets([e])[0]), self.scale)


def apply_isolation(stream: EdgeStream, seed):
    """A :class:`Perturbation` bound to ``stream`` (``seed=None`` gives zeros)."""
    return Perturbation(seed, stream.m, stream.header.W)


# ----------------------------------------------------------------------------
# auxiliary graph and initial point


@dataclass
class AuxGraph:
    """Star vertex, star flows and the derived constants of the start point."""

    n: int
    m: int
    W: int
    star_flows: np.ndarray           # (2n,): [x(v->z), x(z->v)] interleaved per vertex
    star_caps: np.ndarray
    star_cost: float
    demand: np.ndarray

    @property
    def star_vertex(self):
        return self.n

    @property
    def m_aux(self):
        return self.m + 2 * self.n

    def mu_init(self, eps):
        return 100.0 * self.m_aux ** 2 * float(self.W) ** 3 / eps

    def mu_target(self, accuracy):
        return accuracy / (self.W * self.n ** 2)

    def star_arrays(self):
        v = np.repeat(np.arange(self.n), 2)
        z = np.full(2 * self.n, self.n)
        out = np.arange(2 * self.n) % 2 == 0
        tails = np.where(out, v, z)
        heads = np.where(out, z, v)
        return tails, heads

    def words(self):
        return 4 * self.n + 2


def build_initial_point(stream: EdgeStream):
    """One pass computing each vertex's imbalance under ``x = u/2``.

    Returns an :class:`AuxGraph`.  The star flows are ``1 + excess`` on the
    side that must carry the imbalance and ``1`` on the other, so that the
    combined flow meets the demands exactly.
    """
    n = stream.n
    net = np.zeros(n)
    cmax, umax = 1, 1
    for blk in stream.passes_blocks():
        half = blk.caps / 2.0
        np.add.at(net, blk.tails, half)
        np.subtract.at(net, blk.heads, half)
        if len(blk):
            cmax = max(cmax, int(np.abs(blk.costs).max()))
            umax = max(umax, int(blk.caps.max()))
    b = stream.header.demand.astype(float)
    excess = b - net          # supply still to be sent out of each vertex
    flows = np.empty(2 * n)
    flows[0::2] = 1.0 + np.maximum(excess, 0.0)     # v -> z
    flows[1::2] = 1.0 + np.maximum(-excess, 0.0)    # z -> v
    aux = AuxGraph(n=n, m=stream.m, W=stream.header.W, star_flows=flows,
                   star_caps=2.0 * flows, star_cost=50.0 * stream.m * umax * cmax,
                   demand=stream.header.demand.copy())
    account(stream.meters, aux.words(), "aux-graph")
    return aux


class AuxStream:
    """The auxiliary LP as seen by the IPM.

    Each pass reads the base stream once (base edge ids ``0..m-1``) and
    then emits the ``2n`` star edges (ids ``m..m+2n-1``) from stored state.
    Costs are floats (perturbed when a :class:`Perturbation` is given),
    capacities are floats.  ``b_int`` is the right-hand side of
    ``A^T x = b_int`` (inflow minus outflow), i.e. minus the file supply.
    """

    def __init__(self, base: EdgeStream, aux: AuxGraph, perturbation: Perturbation | None = None):
        self.base = base
        self.aux = aux
        self.pert = perturbation
        self.n = base.n
        self.N = base.n + 1
        self.star = base.n
        # Potentials are pinned at a base vertex.  Near the optimum every
        # star edge is almost empty and carries a vanishing Laplacian
        # weight, so pinning the star vertex would leave all base
        # potentials at a huge common offset and their differences would
        # lose most of their digits.
        self.ground = 0
        self.m = aux.m_aux
        b = np.zeros(self.N)
        b[: self.n] = -base.header.demand.astype(float)
        self.b_int = b
        st, sh = aux.star_arrays()
        ids = np.arange(aux.m, aux.m_aux, dtype=np.int64)
        self._star = EdgeBlock(ids, st.astype(np.int64), sh.astype(np.int64),
                               np.full(2 * self.n, aux.star_cost), aux.star_caps.astype(float))
        self._star_x0 = aux.star_flows.astype(float)

    @property
    def meters(self):
        return self.base.meters

    @property
    def W(self):
        return self.base.header.W

    def _convert(self, blk):
        costs = self.pert.costs(blk.ids, blk.costs) if self.pert is not None \
            else blk.costs.astype(float)
        return EdgeBlock(blk.ids, blk.tails, blk.heads, costs, blk.caps.astype(float))

    def passes_blocks(self):
        it = self.base.passes_blocks()

        def gen():
            for blk in it:
                yield self._convert(blk)
            yield self._star
        return gen()

    def x0(self, blk):
        """Initial flows: half capacity on base edges, stored values on star edges."""
        out = blk.caps / 2.0
        star = blk.ids >= self.aux.m
        if np.any(star):
            out = out.copy()
            out[star] = self._star_x0[blk.ids[star] - self.aux.m]
        return out

    def dense(self):
        """Materialize all aux edges (one base pass); for reference code only."""
        blocks = list(self.passes_blocks())
        cat = [np.concatenate([getattr(b, f) for b in blocks]) for f in EdgeBlock._fields]
        return EdgeBlock(*cat)


# ----------------------------------------------------------------------------
# extraction


@dataclass
class FlowReport:
    """Result of reading out the final flow."""

    cost: float
    star_cost: float
    feasibility_residual: float
    rounded: bool
    flow: np.ndarray = field(repr=False)
    star_flow: np.ndarray = field(repr=False)
    feasible: bool = True
    integral_cost: int | None = None
    max_star_flow: float = 0.0
    notes: dict = field(default_factory=dict)

    def as_dict(self):
        d = {"cost": self.cost, "star_cost": self.star_cost,
             "feasibility_residual": self.feasibility_residual,
             "rounded": self.rounded, "feasible": self.feasible,
             "integral_cost": self.integral_cost, "max_star_flow": self.max_star_flow}
        d.update(self.notes)
        return d


def extract_flow(transcript, lp: AuxStream, mode="rounded"):
    """One pass reading ``x_e`` of every edge at the final iterate.

    In ``rounded`` mode base flows are rounded to the nearest integer and
    re-checked against capacities and demands; star edges must carry at
    most 1/3 before rounding.  Costs are always reported with the
    original (unperturbed) integer costs.
    """
    if mode not in ("fractional", "rounded"):
        raise ValueError(f"unknown mode {mode!r}")
    base = lp.base
    n, m = base.n, base.m
    T = transcript.T
    flow = np.zeros(m)
    star = np.zeros(2 * n)
    cost = 0.0
    for blk in lp.passes_blocks():
        x = transcript.x_block(blk, T)
        isb = blk.ids < m
        flow[blk.ids[isb]] = x[isb]
        star[blk.ids[~isb] - m] = x[~isb]
    tails, heads, costs, caps = base._tails, base._heads, base._costs, base._caps
    demand = base.header.demand.astype(float)
    frac_res = float(np.abs(supply_of(n, tails, heads, flow) - demand).max(initial=0.0))
    star_cost = float(lp.aux.star_cost * star.sum())
    rep = FlowReport(cost=float(costs @ flow), star_cost=star_cost,
                     feasibility_residual=frac_res, rounded=False, flow=flow,
                     star_flow=star, max_star_flow=float(star.max(initial=0.0)))
    if mode == "rounded":
        fr = np.rint(flow)
        res = float(np.abs(supply_of(n, tails, heads, fr) - demand).max(initial=0.0))
        ok = bool(res == 0.0 and np.all(fr >= 0) and np.all(fr <= caps)
                  and rep.max_star_flow <= 1.0 / 3.0)
        rep = FlowReport(cost=float(costs @ fr), star_cost=star_cost, feasibility_residual=res,
                         rounded=True, flow=fr, star_flow=star, feasible=ok,
                         integral_cost=int(np.rint(costs @ fr)),
                         max_star_flow=rep.max_star_flow,
                         notes={"fractional_cost": rep.cost,
                                "fractional_residual": frac_res})
    return rep


# ----------------------------------------------------------------------------
# pipeline


@dataclass
class SolveResult:
    """Everything one solve produces."""

    transcript: object
    lp: AuxStream
    aux: AuxGraph
    config: object
    report: FlowReport
    isolation_seed: int | None
    probes: list = field(default_factory=list)
    verified: list = field(default_factory=list)

    @property
    def cost_rounded(self):
        """Fractional base cost rounded to the nearest integer."""
        return int(np.rint(self.report.notes.get("fractional_cost", self.report.cost)))

    def summary(self):
        m = self.lp.meters
        d = {"iterations": self.transcript.T, "passes": m.passes, "peak_words": m.peak_words,
             "cost_rounded": self.cost_rounded,
             "max_centrality": max(self.probes) if self.probes else 0.0,
             "isolation_seed": self.isolation_seed}
        d.update(self.report.as_dict())
        return d


def solve(stream: EdgeStream, accuracy=1e-3, profile="relaxed", seed=0, isolation_seed=None,
          verify_every=0, **config_kw):
    """Initial point, IPM run and rounded extraction on one stream.

    Parameters
    ----------
    stream : EdgeStream
    accuracy : float
        Target accuracy; the path is followed down to ``accuracy / (W n^2)``.
    profile : {"relaxed", "strict"}
    seed : int
        Seed of the sketches inside the IPM.
    isolation_seed : int, optional
        Perturb costs with this seed (``None``: unperturbed).
    verify_every : int
        Additionally run a full :func:`~mcfstream.ipm.centrality_probe`
        every this many iterations (0 disables).

    Raises
    ------
    InfeasibleError
        When star edges keep at least one unit of flow at the end.
    """
    from .ipm import IPMConfig, centrality_probe, run_ipm

    aux = build_initial_point(stream)
    pert = apply_isolation(stream, isolation_seed) if isolation_seed is not None else None
    lp = AuxStream(stream, aux, pert)
    cfg = IPMConfig.profile_for(profile, lp.m, stream.n, seed=seed, **config_kw)
    verified = []

    def hook(tr):
        if verify_every and tr.T % verify_every == 0:
            verified.append((tr.T,) + centrality_probe(tr, lp))

    tr = run_ipm(lp, cfg, aux.mu_init(cfg.eps), aux.mu_target(accuracy), callback=hook)
    rep = extract_flow(tr, lp, "rounded")
    if rep.max_star_flow >= 1.0:
        loaded = sorted(set((np.flatnonzero(rep.star_flow >= 1.0) // 2).tolist()))
        raise InfeasibleError(
            f"star edges at vertices {loaded} keep at least one unit of flow", cut=loaded)
    return SolveResult(tr, lp, aux, cfg, rep, isolation_seed, list(tr.probes), verified)


def solve_exact(stream: EdgeStream, trials=None, accuracy=1e-3, profile="relaxed", seed=0,
                **config_kw):
    """Isolation boosting: run ``trials`` perturbed solves, keep the cheapest feasible rounding.

    ``trials`` defaults to ``ceil(log2 n) + 1``.  Returns ``(best, results)``
    where ``best`` is the chosen :class:`SolveResult` (``None`` if no
    rounding was feasible) and ``results`` lists every trial.
    """
    n = stream.n
    if trials is None:
        trials = int(np.ceil(np.log2(max(n, 2)))) + 1
    results, best = [], None
    for i in range(trials):
        iso = int(hash_uniform(seed, i, 0x7A1) * 2 ** 31)
        res = solve(stream, accuracy=accuracy, profile=profile, seed=seed + 101 * i,
                    isolation_seed=iso, **config_kw)
        results.append(res)
        if res.report.feasible and (best is None or
                                    res.report.integral_cost < best.report.integral_cost):
            best = res
    return best, results


# ----------------------------------------------------------------------------
# exact oracle


def exact_oracle(n, demand, tails, heads, costs, caps):
    """Exact min-cost flow by successive shortest augmenting paths.

    Negative-cost edges are saturated up front (and appear reversed in the
    residual graph), Bellman-Ford supplies the initial potentials and
    Dijkstra with reduced costs finds each augmenting path.  Ties are
    broken by vertex index and edge id, so the output is deterministic.

    Parameters
    ----------
    n : int
    demand : array_like
        Supply (outflow minus inflow) per vertex; must sum to zero.
    tails, heads, costs, caps : array_like
        0-indexed edge data; costs may be any integers (or exact
        rationals given as Python ``int``/``Fraction``).

    Returns
    -------
    (cost, flow)
        Optimal cost and one optimal integral flow.

    Raises
    ------
    InfeasibleError
        With ``cut`` the set of vertices reachable from the super source
        in the final residual graph.
    """
    if n > 512:
        raise ValueError("oracle limited to n <= 512")
    tails = [int(t) for t in tails]
    heads = [int(h) for h in heads]
    costs = list(costs)
    caps = [int(u) for u in caps]
    m = len(tails)
    supply = [int(b) for b in demand]
    if sum(supply) != 0:
        raise InfeasibleError("demands do not sum to zero")
    flow = [0] * m
    for e in range(m):
        if costs[e] < 0:
            flow[e] = caps[e]
            supply[tails[e]] -= caps[e]
            supply[heads[e]] += caps[e]
    S, T = n, n + 1
    V = n + 2
    # residual graph in arrays; arc 2i forward, 2i+1 backward
    to, cap, cst, adj = [], [], [], [[] for _ in range(V)]

    def add(a, b, c, w):
        adj[a].append(len(to)); to.append(b); cap.append(c); cst.append(w)
        adj[b].append(len(to)); to.append(a); cap.append(0); cst.append(-w)

    for e in range(m):
        if costs[e] < 0:
            add(heads[e], tails[e], caps[e], -costs[e])
        else:
            add(tails[e], heads[e], caps[e], costs[e])
    need = 0
    for v in range(n):
        if supply[v] > 0:
            add(S, v, supply[v], 0)
            need += supply[v]
        elif supply[v] < 0:
            add(v, T, -supply[v], 0)
    zero = costs[0] * 0 if m else 0
    # Bellman-Ford potentials from S
    INF = None
    pot = [INF] * V
    pot[S] = zero
    for _ in range(V):
        changed = False
        for a in range(V):
            if pot[a] is None:
                continue
            for arc in adj[a]:
                if cap[arc] > 0:
                    nd = pot[a] + cst[arc]
                    b = to[arc]
                    if pot[b] is None or nd < pot[b]:
                        pot[b] = nd
                        changed = True
        if not changed:
            break
    pot = [p if p is not None else zero for p in pot]
    sent = 0
    while sent < need:
        dist = [None] * V
        prev = [-1] * V
        dist[S] = zero
        heap = [(zero, S)]
        while heap:
            d, a = heapq.heappop(heap)
            if d != dist[a]:
                continue
            for arc in adj[a]:
                if cap[arc] <= 0:
                    continue
                b = to[arc]
                nd = d + cst[arc] + pot[a] - pot[b]
                if dist[b] is None or nd < dist[b]:
                    dist[b] = nd
                    prev[b] = arc
                    heapq.heappush(heap, (nd, b))
        if dist[T] is None:
            cut = sorted(v for v in range(n) if dist[v] is not None)
            raise InfeasibleError("demands cannot be routed", cut=cut)
        for v in range(V):
            if dist[v] is not None:
                pot[v] = pot[v] + dist[v]
        # bottleneck
        f = need - sent
        b = T
        while b != S:
            arc = prev[b]
            f = min(f, cap[arc])
            b = to[arc ^ 1]
        b = T
        while b != S:
            arc = prev[b]
            cap[arc] -= f
            cap[arc ^ 1] += f
            b = to[arc ^ 1]
        sent += f
    for e in range(m):
        used = cap[2 * e + 1]
        flow[e] = caps[e] - used if costs[e] < 0 else used
    total = sum(costs[e] * flow[e] for e in range(m))
    return total, np.array(flow, dtype=np.int64)


# ----------------------------------------------------------------------------
# instances


def random_instance(n, m, W=8, seed=0, cost_low=1, connected=True):
    """Random feasible instance ``(demand, tails, heads, costs, caps)``.

    Demands are the supply of a random integral flow within capacity, so
    the instance is always feasible.  With ``connected`` the first ``n``
    edges form a random cycle over all vertices (when ``m >= n``).
    """
    rng = np.random.default_rng(seed)
    tails, heads = [], []
    if connected and m >= n and n > 1:
        perm = rng.permutation(n)
        for i in range(n):
            tails.append(int(perm[i]))
            heads.append(int(perm[(i + 1) % n]))
    while len(tails) < m:
        a, b = rng.integers(0, n, 2)
        if a != b:
            tails.append(int(a))
            heads.append(int(b))
    tails = np.array(tails[:m], dtype=np.int64)
    heads = np.array(heads[:m], dtype=np.int64)
    caps = rng.integers(1, W + 1, m)
    costs = rng.integers(cost_low, W + 1, m)
    f = np.array([rng.integers(0, u + 1) for u in caps], dtype=np.int64)
    demand = supply_of(n, tails, heads, f).astype(np.int64)
    return demand, tails, heads, costs.astype(np.int64), caps.astype(np.int64)
