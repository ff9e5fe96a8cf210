"""Two-party simulation of the streaming IPM with exact bit metering.

Each :class:`Party` privately holds a subset of the edges (with global
edge ids), a share of the vertex demands and its own perturbation seed.
The parties run the very same IPM code as the single-stream solver, each
on a :class:`PartyStream` that yields only its own edges.  At the end of
every pass the partial fold state travels A -> B, party B folds its
edges (and the auxiliary star edges) on top, and the finished state
travels B -> A, so that both parties derive identical records.

Wire format
-----------
Every message is one frame::

    u32 round | u8 kind | u32 length | payload[length]

(all little-endian).  A state payload is ``u8 count`` followed by
``count`` entries ``u8 name_len | name | u8 tag | body``; tag 0 is an
array (``u8 dtype | u8 ndim | u32 dims... | raw bytes``), tags 1 and 2
are nested states of a sparsifier buffer and of group counts.  Bits are
counted on the encoded frames, header included.
"""

from __future__ import annotations

import hashlib
import math
import queue
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .gradient import BucketAccumulator
from .ipm import IPMConfig, run_ipm
from .lifecycle import AuxGraph, Perturbation, supply_of
from .linalg import SparsifierBuilder, mix64
from .stream import EdgeBlock, Meters, account

__all__ = [
    "Party",
    "PartyStream",
    "WireMeter",
    "ProtocolError",
    "ProtocolBudgetError",
    "JointResult",
    "encode_frame",
    "decode_frame",
    "encode_state",
    "decode_state",
    "shared_seed",
    "joint_pass",
    "run_joint_ipm",
    "exact_flow_protocol",
    "split_instance",
    "record_digest",
]

CODEC_VERSION = 1
_FRAME = struct.Struct("<IBI")

SETUP, DEMAND, STATE, HASH, FLOW, ABORT = 1, 2, 3, 4, 5, 6
KIND_NAMES = {SETUP: "setup", DEMAND: "demand", STATE: "state", HASH: "hash", FLOW: "flow",
              ABORT: "abort"}

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}


class ProtocolError(RuntimeError):
    """The parties disagree (hash mismatch) or the peer aborted."""

    def __init__(self, msg, round_id=None):
        super().__init__(msg)
        self.round_id = round_id


class ProtocolBudgetError(ProtocolError):
    """A pass state exceeded its declared size bound."""


# ----------------------------------------------------------------------------
# codec


def encode_frame(round_id, kind, payload: bytes) -> bytes:
    return _FRAME.pack(int(round_id), int(kind), len(payload)) + payload


def decode_frame(buf: bytes):
    """``(round_id, kind, payload)`` of one frame."""
    if len(buf) < _FRAME.size:
        raise ProtocolError("truncated frame header")
    rid, kind, length = _FRAME.unpack_from(buf)
    payload = buf[_FRAME.size:]
    if len(payload) != length:
        raise ProtocolError(f"frame length {length} but {len(payload)} payload bytes")
    return rid, kind, payload


def _enc_array(a):
    a = np.asarray(a)
    if a.dtype.kind in "iub":
        a = a.astype("<i8")
    else:
        a = a.astype("<f8")
    head = struct.pack("<BB", _CODES[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def _dec_array(buf, off):
    code, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dt = _DTYPES[code]
    cnt = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, dtype=dt, count=cnt, offset=off).reshape(shape).copy()
    return a, off + cnt * dt.itemsize


def encode_state(state: dict) -> bytes:
    """Serialize a pass state (arrays, sparsifier buffers, group counts)."""
    out = [struct.pack("<B", len(state))]
    for name in sorted(state):
        val = state[name]
        nb = name.encode()
        out.append(struct.pack("<B", len(nb)) + nb)
        if isinstance(val, SparsifierBuilder):
            out.append(b"\x01" + encode_state(val.export()))
        elif isinstance(val, BucketAccumulator):
            out.append(b"\x02" + encode_state(val.export()))
        else:
            out.append(b"\x00" + _enc_array(val))
    return b"".join(out)


def _decode(buf, off):
    (count,) = struct.unpack_from("<B", buf, off)
    off += 1
    res = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<B", buf, off)
        off += 1
        name = bytes(buf[off:off + ln]).decode()
        off += ln
        tag = buf[off]
        off += 1
        if tag == 0:
            res[name], off = _dec_array(buf, off)
        else:
            sub, off = _decode(buf, off)
            res[name] = (tag, sub)
    return res, off


def decode_state(buf: bytes, into: dict | None = None) -> dict:
    """Inverse of :func:`encode_state`.

    With ``into`` given, sparsifier and group entries are loaded into the
    matching local objects (which keep their identity) and arrays are
    replaced.
    """
    raw, off = _decode(buf, 0)
    if off != len(buf):
        raise ProtocolError("trailing bytes in state payload")
    out = dict(into) if into is not None else {}
    for name, val in raw.items():
        if isinstance(val, tuple):
            tag, sub = val
            if into is None or name not in into:
                out[name] = sub
            else:
                into[name].load(sub)
                out[name] = into[name]
        else:
            out[name] = val
    return out


# ----------------------------------------------------------------------------
# meter and channel


@dataclass
class WireMeter:
    """Bits on the wire, per round and by message kind."""

    bits_total: int = 0
    bits_per_round: dict = field(default_factory=dict)
    bits_by_kind: dict = field(default_factory=dict)
    frames: list = field(default_factory=list, repr=False)
    codec_version: int = CODEC_VERSION
    keep_frames: bool = True

    def record(self, frame: bytes):
        rid, kind, _ = decode_frame(frame)
        bits = 8 * len(frame)
        self.bits_total += bits
        self.bits_per_round[rid] = self.bits_per_round.get(rid, 0) + bits
        name = KIND_NAMES.get(kind, str(kind))
        self.bits_by_kind[name] = self.bits_by_kind.get(name, 0) + bits
        if self.keep_frames:
            self.frames.append(frame)

    def dump(self) -> bytes:
        """Concatenation of every frame sent so far."""
        return b"".join(self.frames)

    def round_series(self):
        """Bits of each round id in increasing order."""
        return [self.bits_per_round[k] for k in sorted(self.bits_per_round)]


class _Link:
    """Half-duplex in-process channel between the two parties."""

    def __init__(self, meter: WireMeter, timeout=600.0):
        self.meter = meter
        self.q = {"A": queue.Queue(), "B": queue.Queue()}
        self.timeout = timeout
        self.lock = threading.Lock()

    def send(self, sender, round_id, kind, payload: bytes):
        frame = encode_frame(round_id, kind, payload)
        with self.lock:
            self.meter.record(frame)
        self.q["B" if sender == "A" else "A"].put(frame)

    def recv(self, receiver, kind):
        try:
            frame = self.q[receiver].get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f"party {receiver} timed out waiting for {KIND_NAMES[kind]}")
        rid, k, payload = decode_frame(frame)
        if k == ABORT:
            raise ProtocolError(f"peer aborted: {payload.decode(errors='replace')}", rid)
        if k != kind:
            raise ProtocolError(f"expected {KIND_NAMES[kind]}, got {KIND_NAMES.get(k, k)}", rid)
        return rid, payload


# ----------------------------------------------------------------------------
# parties


@dataclass
class Party:
    """One side of the protocol.

    Attributes
    ----------
    name : str
        ``"A"`` or ``"B"``.
    n : int
        Number of vertices (public).
    ids, tails, heads, costs, caps : ndarray
        Private edges with global ids.
    demand : ndarray
        This party's share of the vertex supplies.
    seed : int
        Private randomness (seed proposal and perturbation seed).
    perturb : bool
        Apply the isolation perturbation to this party's costs.
    """

    name: str
    n: int
    ids: np.ndarray
    tails: np.ndarray
    heads: np.ndarray
    costs: np.ndarray
    caps: np.ndarray
    demand: np.ndarray
    seed: int = 0
    perturb: bool = False
    block: int = 4096
    meters: Meters = field(default_factory=Meters)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.tails = np.asarray(self.tails, dtype=np.int64)
        self.heads = np.asarray(self.heads, dtype=np.int64)
        self.costs = np.asarray(self.costs, dtype=np.int64)
        self.caps = np.asarray(self.caps, dtype=np.int64)
        self.demand = np.asarray(self.demand, dtype=np.int64)
        if self.name not in ("A", "B"):
            raise ValueError("party name must be 'A' or 'B'")

    def blocks(self):
        B = self.block
        for lo in range(0, len(self.ids), B):
            sl = slice(lo, lo + B)
            yield EdgeBlock(self.ids[sl], self.tails[sl], self.heads[sl], self.costs[sl],
                            self.caps[sl])


def split_instance(n, demand, tails, heads, costs, caps, frac_a=0.5, seed=0, demand_to="A"):
    """Random edge partition of an instance into parties A and B."""
    m = len(tails)
    rng = np.random.default_rng(seed)
    at_a = rng.random(m) < frac_a
    ids = np.arange(m)
    zero = np.zeros(n, dtype=np.int64)
    dem = np.asarray(demand, dtype=np.int64)

    def mk(name, sel, d):
        return Party(name, n, ids[sel], np.asarray(tails)[sel], np.asarray(heads)[sel],
                     np.asarray(costs)[sel], np.asarray(caps)[sel], d,
                     seed=int(mix64(np.uint64(seed * 2 + (name == "B")))) & 0xFFFFFFFF)
    return (mk("A", at_a, dem if demand_to == "A" else zero),
            mk("B", ~at_a, dem if demand_to == "B" else zero))


def shared_seed(seed_a, seed_b):
    """Seed both parties derive from their setup-round proposals."""
    z = mix64(np.uint64(int(seed_a) & 0xFFFFFFFFFFFFFFFF))
    z = mix64(np.uint64((int(z) ^ (int(seed_b) & 0xFFFFFFFFFFFFFFFF)) & 0xFFFFFFFFFFFFFFFF))
    return int(z) & 0x7FFFFFFF


class PartyStream:
    """A party's view of the auxiliary LP; implements the stream interface of the IPM.

    Party B also emits the star edges, so the union of both views is the
    auxiliary edge sequence in the order of the single-stream solver.
    """

    def __init__(self, party: Party, link: _Link, aux: AuxGraph, b, m, W, iso_seed,
                 state_limit=None):
        self.party = party
        self.link = link
        self.aux = aux
        self.n = party.n
        self.N = party.n + 1
        self.star = party.n
        self.ground = 0
        self.m = aux.m_aux
        self.base_m = m
        b_int = np.zeros(self.N)
        b_int[: self.n] = -np.asarray(b, dtype=float)
        self.b_int = b_int
        self.pert = Perturbation(iso_seed, m, W) if iso_seed is not None else None
        self.meters = party.meters
        self.round = 0
        self.state_limit = state_limit
        st, sh = aux.star_arrays()
        self._star = EdgeBlock(np.arange(m, aux.m_aux, dtype=np.int64), st.astype(np.int64),
                               sh.astype(np.int64), np.full(2 * self.n, aux.star_cost),
                               aux.star_caps.astype(float))
        self._star_x0 = aux.star_flows.astype(float)

    def passes_blocks(self):
        self.meters.passes += 1

        def gen():
            for blk in self.party.blocks():
                costs = self.pert.costs(blk.ids, blk.costs) if self.pert is not None \
                    else blk.costs.astype(float)
                yield EdgeBlock(blk.ids, blk.tails, blk.heads, costs, blk.caps.astype(float))
            if self.party.name == "B":
                yield self._star
        return gen()

    def x0(self, blk):
        out = blk.caps / 2.0
        star = blk.ids >= self.base_m
        if np.any(star):
            out = out.copy()
            out[star] = self._star_x0[blk.ids[star] - self.base_m]
        return out

    def _check(self, payload):
        if self.state_limit is not None and 8 * len(payload) > self.state_limit:
            raise ProtocolBudgetError(
                f"pass state of {8 * len(payload)} bits exceeds {self.state_limit}", self.round)

    def begin_pass(self, state):
        if self.party.name == "A":
            return state
        _, payload = self.link.recv("B", STATE)
        return decode_state(payload, into=state)

    def end_pass(self, state):
        payload = encode_state(state)
        self._check(payload)
        if self.party.name == "A":
            self.link.send("A", self.round, STATE, payload)
            _, payload = self.link.recv("A", STATE)
            return decode_state(payload, into=state)
        self.link.send("B", self.round, STATE, payload)
        return decode_state(payload, into=state)


# ----------------------------------------------------------------------------
# protocol pieces


def _run_pair(fa, fb):
    """Run the two party programs concurrently; re-raise the first failure."""
    out, err = {}, {}

    def wrap(name, fn, link):
        try:
            out[name] = fn()
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            err[name] = exc
            try:
                link.send(name, 0, ABORT, str(exc).encode()[:200])
            except Exception:
                pass
    ta = threading.Thread(target=wrap, args=("A", fa[0], fa[1]))
    tb = threading.Thread(target=wrap, args=("B", fb[0], fb[1]))
    ta.start()
    tb.start()
    ta.join()
    tb.join()
    for name in ("A", "B"):
        if name in err and not isinstance(err[name], ProtocolError):
            raise err[name]
    for name in ("A", "B"):
        if name in err:
            raise err[name]
    return out["A"], out["B"]


def joint_pass(parties, init, fold, meter: WireMeter | None = None, round_id=0):
    """Fold ``fold(state, block) -> state`` over the union of the parties' edges.

    Party A folds its edges starting from ``init()``, sends the state,
    party B continues and returns the result to A.

    Returns
    -------
    (state_A, state_B, meter)
        Both parties' copies of the final state (equal) and the meter.
    """
    A, B = parties
    meter = meter if meter is not None else WireMeter()
    link = _Link(meter)

    def prog(p):
        def run():
            st = init()
            if p.name == "B":
                _, payload = link.recv("B", STATE)
                st = decode_state(payload, into=st)
            p.meters.passes += 1
            for blk in p.blocks():
                st = fold(st, blk)
            payload = encode_state(st)
            if p.name == "A":
                link.send("A", round_id, STATE, payload)
                _, payload = link.recv("A", STATE)
                return decode_state(payload, into=st)
            link.send("B", round_id, STATE, payload)
            return decode_state(payload, into=st)
        return run
    sa, sb = _run_pair((prog(A), link), (prog(B), link))
    return sa, sb, meter


def record_digest(rec) -> bytes:
    """SHA-256 over every array and scalar of an iteration record."""
    h = hashlib.sha256()
    for arr in (np.array([rec.mu]), rec.y, rec.delta_y, rec.delta_c, rec.tau_stack.P,
                rec.g_table.keys, rec.g_table.g, np.array([rec.g_table.gamma])):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


@dataclass
class JointResult:
    """Outcome of :func:`run_joint_ipm`."""

    transcripts: tuple
    streams: tuple
    meter: WireMeter
    aux: AuxGraph
    seed: int
    config: IPMConfig
    extraction: dict | None = None


def _party_program(p: Party, link: _Link, cfg_kw, profile, eps, accuracy, isolate, extract,
                   state_limit):
    me, other = p.name, ("B" if p.name == "A" else "A")

    def swap(kind, payload, rid=0):
        # strictly alternating: A speaks first, B answers
        if me == "A":
            link.send(me, rid, kind, payload)
            return link.recv(me, kind)[1]
        got = link.recv(me, kind)[1]
        link.send(me, rid, kind, payload)
        return got

    # setup: seed proposals, edge counts and W
    mine = struct.pack("<QQQ", p.seed & 0xFFFFFFFFFFFFFFFF, len(p.ids),
                       int(max(p.costs.max(initial=1), p.caps.max(initial=1))))
    sa, ma, wa = struct.unpack("<QQQ", swap(SETUP, mine))
    seed_other, m_other, w_other = sa, ma, wa
    seeds = {me: p.seed, other: seed_other}
    seed = shared_seed(seeds["A"], seeds["B"])
    m = len(p.ids) + int(m_other)
    W = max(int(max(p.costs.max(initial=1), p.caps.max(initial=1))), int(w_other))
    # demand totals
    other_dem = np.frombuffer(swap(DEMAND, p.demand.astype("<i8").tobytes()), dtype="<i8")
    b = p.demand + other_dem
    if b.sum() != 0:
        raise ProtocolError(f"demands sum to {int(b.sum())}")
    account(p.meters, p.n, "demand")

    # initial point: one joint pass for the half-capacity imbalance
    st = {"net": np.zeros(p.n), "cmax": np.ones(1), "umax": np.ones(1)}
    if me == "B":
        st = decode_state(link.recv(me, STATE)[1], into=st)
    p.meters.passes += 1
    for blk in p.blocks():
        np.add.at(st["net"], blk.tails, blk.caps / 2.0)
        np.subtract.at(st["net"], blk.heads, blk.caps / 2.0)
        if len(blk):
            st["cmax"][0] = max(st["cmax"][0], float(np.abs(blk.costs).max()))
            st["umax"][0] = max(st["umax"][0], float(blk.caps.max()))
    payload = encode_state(st)
    link.send(me, 0, STATE, payload)
    if me == "A":
        payload = link.recv(me, STATE)[1]
    st = decode_state(payload)
    excess = b - st["net"]
    flows = np.empty(2 * p.n)
    flows[0::2] = 1.0 + np.maximum(excess, 0.0)
    flows[1::2] = 1.0 + np.maximum(-excess, 0.0)
    aux = AuxGraph(n=p.n, m=m, W=W, star_flows=flows, star_caps=2.0 * flows,
                   star_cost=50.0 * m * st["umax"][0] * st["cmax"][0], demand=b.copy())
    account(p.meters, aux.words(), "aux-graph")

    iso = (p.seed if isolate else None)
    lp = PartyStream(p, link, aux, b, m, W, iso, state_limit=state_limit)
    cfg = IPMConfig.profile_for(profile, aux.m_aux, p.n, seed=seed, **cfg_kw)
    mu_init, mu_target = aux.mu_init(cfg.eps), aux.mu_target(accuracy)

    def after_step(tr):
        lp.round = tr.T
        digest = record_digest(tr.records[-1])
        theirs = swap(HASH, digest, tr.T)
        if theirs != digest:
            raise ProtocolError(f"transcript divergence at round {tr.T}", tr.T)
        lp.round = tr.T + 1

    lp.round = 1
    tr = run_ipm(lp, cfg, mu_init, mu_target, callback=after_step)
    lp.round = tr.T + 1
    result = {"transcript": tr, "stream": lp, "aux": aux, "seed": seed, "config": cfg}
    if extract:
        result["extraction"] = _extract(p, lp, tr, link, b, swap)
    return result


def _extract(p: Party, lp: PartyStream, tr, link, b, swap):
    """Round own flows; verify the union by exchanging per-vertex nets."""
    T = tr.T
    flows = {}
    net = np.zeros(p.n)
    star = np.zeros(2 * p.n)
    cost = 0
    cap_ok = True
    for blk in lp.passes_blocks():
        x = tr.x_block(blk, T)
        base = blk.ids < lp.base_m
        if np.any(~base):
            star[blk.ids[~base] - lp.base_m] = x[~base]
        fr = np.rint(x[base])
        cap_ok &= bool(np.all(fr >= 0) and np.all(fr <= blk.caps[base]))
        own = np.isin(p.ids, blk.ids[base])
        orig_cost = p.costs[own]
        for e, f in zip(blk.ids[base].tolist(), fr.tolist()):
            flows[e] = int(f)
        cost += int(np.dot(orig_cost, fr.astype(np.int64)))
        net += supply_of(p.n, blk.tails[base], blk.heads[base], fr)
    mine = np.concatenate([net, [float(cost), float(cap_ok), float(star.max(initial=0.0))]])
    theirs = np.frombuffer(swap(FLOW, mine.astype("<f8").tobytes(), T + 1), dtype="<f8")
    total_net = net + theirs[: p.n]
    residual = float(np.abs(total_net - b).max(initial=0.0))
    max_star = max(float(star.max(initial=0.0)), float(theirs[p.n + 2]))
    feasible = bool(residual == 0.0 and cap_ok and theirs[p.n + 1] > 0.5 and max_star <= 1 / 3)
    return {"flows": flows, "cost": int(cost + theirs[p.n]), "feasible": feasible,
            "residual": residual, "max_star_flow": max_star}


def run_joint_ipm(parties, profile="relaxed", eps=None, accuracy=1e-3, isolate=False,
                  extract=True, state_limit=None, **cfg_kw):
    """Jointly run the IPM; returns a :class:`JointResult`.

    ``parties`` is the pair ``(A, B)``.  With ``isolate`` each party
    perturbs its own costs with its private seed.
    """
    A, B = parties
    meter = WireMeter()
    link = _Link(meter)
    ra, rb = _run_pair(
        (lambda: _party_program(A, link, cfg_kw, profile, eps, accuracy, isolate, extract,
                                state_limit), link),
        (lambda: _party_program(B, link, cfg_kw, profile, eps, accuracy, isolate, extract,
                                state_limit), link))
    res = JointResult(transcripts=(ra["transcript"], rb["transcript"]),
                      streams=(ra["stream"], rb["stream"]), meter=meter, aux=ra["aux"],
                      seed=ra["seed"], config=ra["config"])
    if extract:
        res.extraction = {"A": ra["extraction"], "B": rb["extraction"]}
    return res


def exact_flow_protocol(parties, trials=None, profile="relaxed", accuracy=1e-3, **cfg_kw):
    """Isolation-boosted joint solve.

    Runs up to ``trials`` (default ``ceil(log2 n) + 1``) perturbed joint
    IPMs, each party re-deriving its private perturbation seed per trial,
    and keeps the cheapest rounded flow that passes the joint feasibility
    check.

    Returns
    -------
    dict
        ``success``, ``cost``, ``flows_A``, ``flows_B`` (each party's own
        edges only), ``trial`` (index of the chosen run), ``trials_run``,
        ``feasible_trials``, ``bits_total`` and ``meters``.
    """
    A, B = parties
    n = A.n
    if trials is None:
        trials = int(math.ceil(math.log2(max(n, 2)))) + 1
    best, bits, feasible = None, 0, []
    last = None
    for i in range(trials):
        pa = Party(**{**A.__dict__, "seed": int(mix64(np.uint64(A.seed + 7919 * i))) >> 33,
                      "meters": Meters()})
        pb = Party(**{**B.__dict__, "seed": int(mix64(np.uint64(B.seed + 7919 * i + 1))) >> 33,
                      "meters": Meters()})
        res = run_joint_ipm((pa, pb), profile=profile, accuracy=accuracy, isolate=True,
                            **cfg_kw)
        bits += res.meter.bits_total
        ex = res.extraction
        last = res
        if ex["A"]["feasible"]:
            feasible.append(i)
            if best is None or ex["A"]["cost"] < best[1]["A"]["cost"]:
                best = (i, ex)
    if best is None:
        return {"success": False, "cost": None, "flows_A": None, "flows_B": None,
                "trial": None, "trials_run": trials, "feasible_trials": [],
                "bits_total": bits, "cut": _suspect_cut(last)}
    i, ex = best
    return {"success": True, "cost": ex["A"]["cost"], "flows_A": ex["A"]["flows"],
            "flows_B": ex["B"]["flows"], "trial": i, "trials_run": trials,
            "feasible_trials": feasible, "bits_total": bits}


def _suspect_cut(res):
    """Vertices whose star edges still carry flow at the end of a failed run."""
    if res is None:
        return []
    lp = res.streams[1]
    tr = res.transcripts[1]
    x = tr.x_block(lp._star, tr.T)
    loaded = np.flatnonzero(x >= 1.0 / 3.0) // 2
    return sorted(set(loaded.tolist()))
