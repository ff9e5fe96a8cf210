"""Replayable multi-pass edge streams with pass and word-space meters.

A graph file is plain text::

    n m
    b_1
    ...
    b_n
    tail head cost capacity      (m lines, vertices 1-indexed)

The demand ``b_v`` is the net supply of vertex ``v``: outflow minus inflow
of any feasible flow.  Files ending in ``.gz`` are decoded transparently.

Every traversal of a stream is a *pass* and is charged to the stream's
:class:`Meters` when it starts.  Persistent numeric state held by the
algorithms is registered through :func:`account` so that the high-water
mark of stored words can be compared against the space bound.
"""

from __future__ import annotations

import gzip
import io
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np

__all__ = [
    "EdgeRecord",
    "EdgeBlock",
    "GraphHeader",
    "Meters",
    "EdgeStream",
    "GraphFormatError",
    "DemandError",
    "AccountingError",
    "account",
    "open_stream",
    "read_graph",
    "write_graph",
]

DEFAULT_BLOCK = 4096


class GraphFormatError(ValueError):
    """Raised when a graph file cannot be parsed."""


class DemandError(ValueError):
    """Raised when vertex demands do not sum to zero."""


class AccountingError(RuntimeError):
    """Raised when the live word count would become negative."""


class EdgeRecord(NamedTuple):
    """One edge of the input, with 0-indexed endpoints."""

    id: int
    tail: int
    head: int
    cost: int
    capacity: int


class EdgeBlock(NamedTuple):
    """A contiguous run of edges handed to a visitor during a pass.

    Arrays are read-only views; the block is scratch memory and is not
    charged to the word meter.
    """

    ids: np.ndarray
    tails: np.ndarray
    heads: np.ndarray
    costs: np.ndarray
    caps: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class GraphHeader:
    """Vertex count, edge count, demands and the magnitude bound ``W``."""

    n: int
    m: int
    demand: np.ndarray
    W: int

    def __post_init__(self):
        self.demand = np.asarray(self.demand, dtype=np.int64)
        if self.demand.shape != (self.n,):
            raise GraphFormatError(f"expected {self.n} demands, got {self.demand.shape[0]}")
        if int(self.demand.sum()) != 0:
            raise DemandError(f"demands sum to {int(self.demand.sum())}, expected 0")


@dataclass
class Meters:
    """Pass counter and word-space high-water mark."""

    passes: int = 0
    peak_words: int = 0
    current_words: int = 0
    log: list = field(default_factory=list, repr=False)

    def snapshot(self):
        return {"passes": self.passes, "peak_words": self.peak_words,
                "current_words": self.current_words}


def account(meters: Meters, delta_words: int, tag: str | None = None) -> None:
    """Add ``delta_words`` persistent words to the live count.

    Parameters
    ----------
    meters : Meters
    delta_words : int
        Signed number of stored scalars being allocated (positive) or
        released (negative).
    tag : str, optional
        Label kept in ``meters.log`` for post-mortem inspection.

    Raises
    ------
    AccountingError
        If the balance would become negative.
    """
    delta_words = int(delta_words)
    if meters.current_words + delta_words < 0:
        raise AccountingError(
            f"word balance would become {meters.current_words + delta_words} ({tag})")
    meters.current_words += delta_words
    if meters.current_words > meters.peak_words:
        meters.peak_words = meters.current_words
    if tag is not None:
        meters.log.append((tag, delta_words))


def begin_pass(stream, state):
    """Hand freshly initialized pass state to a multi-party stream.

    A stream split between parties may replace ``state`` with the partial
    state folded by the parties that precede it.  Plain streams return
    ``state`` unchanged.
    """
    hook = getattr(stream, "begin_pass", None)
    return state if hook is None else hook(state)


def end_pass(stream, state):
    """Hand the folded pass state to a multi-party stream for combination.

    Returns the state of the whole pass (for a plain stream, ``state``).
    """
    hook = getattr(stream, "end_pass", None)
    return state if hook is None else hook(state)


class EdgeStream:
    """Read-only, replayable edge sequence with metering.

    The edge arrays play the role of the external input medium: they are
    only reachable through :meth:`passes_blocks` or :meth:`for_each_edge`,
    each of which costs one pass.  The demand vector is loaded into
    accountable memory on construction.

    Parameters
    ----------
    header : GraphHeader
    tails, heads, costs, caps : array_like
        Per-edge data with 0-indexed endpoints.
    meters : Meters, optional
        Shared meters; a fresh instance is created when omitted.
    block : int
        Number of edges per block handed to block visitors.
    """

    def __init__(self, header, tails, heads, costs, caps, meters=None, block=DEFAULT_BLOCK):
        self.header = header
        self._tails = np.ascontiguousarray(tails, dtype=np.int64)
        self._heads = np.ascontiguousarray(heads, dtype=np.int64)
        self._costs = np.ascontiguousarray(costs, dtype=np.int64)
        self._caps = np.ascontiguousarray(caps, dtype=np.int64)
        for arr in (self._tails, self._heads, self._costs, self._caps):
            arr.setflags(write=False)
        m = header.m
        if not (len(self._tails) == len(self._heads) == len(self._costs) == len(self._caps) == m):
            raise GraphFormatError("edge arrays disagree with header edge count")
        if m:
            if np.any(self._tails == self._heads):
                bad = int(np.flatnonzero(self._tails == self._heads)[0])
                raise GraphFormatError(f"edge {bad} is a self-loop")
            if np.any(self._caps < 1):
                bad = int(np.flatnonzero(self._caps < 1)[0])
                raise GraphFormatError(f"edge {bad} has capacity < 1")
            lo = min(self._tails.min(), self._heads.min())
            hi = max(self._tails.max(), self._heads.max())
            if lo < 0 or hi >= header.n:
                raise GraphFormatError("edge endpoint out of range")
        self.meters = meters if meters is not None else Meters()
        self.block = int(block)
        self._ids = np.arange(m, dtype=np.int64)
        self._ids.setflags(write=False)
        account(self.meters, header.n, "demand")

    @classmethod
    def from_arrays(cls, n, demand, tails, heads, costs, caps, W=None, **kw):
        """Build a stream from in-memory arrays (0-indexed endpoints)."""
        costs = np.asarray(costs, dtype=np.int64)
        caps = np.asarray(caps, dtype=np.int64)
        if W is None:
            W = int(max(np.abs(costs).max(initial=1), caps.max(initial=1)))
        header = GraphHeader(n=int(n), m=len(costs), demand=demand, W=int(W))
        return cls(header, tails, heads, costs, caps, **kw)

    @property
    def n(self):
        return self.header.n

    @property
    def m(self):
        return self.header.m

    def _charge(self):
        # charged on start so that aborted traversals still count
        self.meters.passes += 1

    def passes_blocks(self) -> Iterator[EdgeBlock]:
        """Yield the stream as consecutive :class:`EdgeBlock` chunks (one pass)."""
        self._charge()
        return self._blocks()

    def _blocks(self):
        m, B = self.header.m, self.block
        for lo in range(0, m, B):
            hi = min(m, lo + B)
            yield EdgeBlock(self._ids[lo:hi], self._tails[lo:hi], self._heads[lo:hi],
                            self._costs[lo:hi], self._caps[lo:hi])

    def for_each_edge(self, visitor: Callable[[EdgeRecord], None]) -> None:
        """Invoke ``visitor`` on every edge in stable order (one pass)."""
        self._charge()
        for blk in self._blocks():
            for i in range(len(blk)):
                visitor(EdgeRecord(int(blk.ids[i]), int(blk.tails[i]), int(blk.heads[i]),
                                   int(blk.costs[i]), int(blk.caps[i])))

    def fold(self, visitor, state):
        """Fold ``visitor(state, block) -> state`` over one pass."""
        for blk in self.passes_blocks():
            state = visitor(state, blk)
        return state

    def load_all(self):
        """Materialize the whole graph in memory (one pass).

        Intended for oracles and dense reference code only; the returned
        arrays are not charged to the word meter.
        """
        self._charge()
        return (self._tails.copy(), self._heads.copy(), self._costs.copy(), self._caps.copy())

    def restricted(self, ids):
        """A new stream over the listed edge ids with fresh meters."""
        ids = np.asarray(ids, dtype=np.int64)
        return EdgeStream.from_arrays(self.n, self.header.demand, self._tails[ids],
                                      self._heads[ids], self._costs[ids], self._caps[ids],
                                      W=self.header.W)


def _opener(path):
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="ascii")
    return open(path, "r", encoding="ascii")


def read_graph(path):
    """Parse a graph file into ``(header, tails, heads, costs, caps)``.

    Endpoints are converted to 0-indexed.  Errors name the offending line.
    """
    with _opener(path) as fh:
        lines = [(i + 1, ln.split()) for i, ln in enumerate(fh)]
    lines = [(no, tok) for no, tok in lines if tok and not tok[0].startswith("#")]
    if not lines:
        raise GraphFormatError("line 1: empty file")

    def ints(no, tok, k):
        if len(tok) != k:
            raise GraphFormatError(f"line {no}: expected {k} integers, got {len(tok)}")
        try:
            return [int(t) for t in tok]
        except ValueError as exc:
            raise GraphFormatError(f"line {no}: {exc}") from None

    no, tok = lines[0]
    n, m = ints(no, tok, 2)
    if n < 1 or m < 0:
        raise GraphFormatError(f"line {no}: bad sizes n={n} m={m}")
    if len(lines) != 1 + n + m:
        raise GraphFormatError(
            f"line {lines[-1][0]}: expected {1 + n + m} data lines, found {len(lines)}")
    demand = np.array([ints(no, tok, 1)[0] for no, tok in lines[1:1 + n]], dtype=np.int64)
    edges = np.array([ints(no, tok, 4) for no, tok in lines[1 + n:]], dtype=np.int64).reshape(m, 4)
    tails, heads, costs, caps = (edges[:, 0] - 1, edges[:, 1] - 1, edges[:, 2], edges[:, 3])
    for j, (no, _) in enumerate(lines[1 + n:]):
        if not (1 <= edges[j, 0] <= n and 1 <= edges[j, 1] <= n):
            raise GraphFormatError(f"line {no}: endpoint out of range 1..{n}")
        if edges[j, 0] == edges[j, 1]:
            raise GraphFormatError(f"line {no}: self-loop")
        if edges[j, 3] < 1:
            raise GraphFormatError(f"line {no}: capacity must be >= 1")
    W = int(max(np.abs(costs).max(initial=1), caps.max(initial=1)))
    header = GraphHeader(n=n, m=m, demand=demand, W=W)
    return header, tails, heads, costs, caps


def open_stream(path, meters=None, block=DEFAULT_BLOCK) -> EdgeStream:
    """Open a graph file as an :class:`EdgeStream`; no pass is consumed."""
    header, tails, heads, costs, caps = read_graph(path)
    return EdgeStream(header, tails, heads, costs, caps, meters=meters, block=block)


def write_graph(path, n, demand, tails, heads, costs, caps):
    """Write a graph file; endpoints are given 0-indexed."""
    lines = [f"{n} {len(tails)}"]
    lines += [str(int(b)) for b in demand]
    lines += [f"{int(t) + 1} {int(h) + 1} {int(c)} {int(u)}"
              for t, h, c, u in zip(tails, heads, costs, caps)]
    data = "\n".join(lines) + "\n"
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as fh:
            fh.write(data.encode("ascii"))
    else:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(data)
