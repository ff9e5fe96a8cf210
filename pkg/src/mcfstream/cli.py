"""Command-line interface: ``mcfstream {solve,query,bench,generate}``.

Exit codes
----------
0 success; 1 usage error; 2 infeasible instance; 3 no convergence
(iteration cap or centrality blow-up); 4 queried edge not in the graph.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .gradient import CentralityBlowup
from .ipm import CentralityViolation, DenseMirror, NonConvergence, load_transcript, save_transcript
from .lifecycle import (AuxStream, InfeasibleError, apply_isolation, build_initial_point,
                        exact_oracle, random_instance, solve, solve_exact)
from .stream import GraphFormatError, DemandError, EdgeStream, open_stream, write_graph

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NONCONVERGED, EXIT_UNKNOWN_EDGE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    """Echoed into every report so that runs can be reproduced."""

    graph: str
    epsilon: float
    profile: str
    seed: int
    mode: str
    trials: int
    verify: str
    out: str | None
    isolation: bool


def _report_text(pairs: dict, machine: dict) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in pairs.items()]
    lines.append("--- machine ---")
    lines.append(json.dumps(machine, sort_keys=True, default=_jsonable))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# ----------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    cfg = RunConfig(graph=args.graph, epsilon=args.epsilon, profile=args.profile,
                    seed=args.seed, mode=args.mode, trials=args.trials, verify=args.verify,
                    out=args.out, isolation=not args.no_isolation)
    stream = open_stream(args.graph)
    n = stream.n
    echo = asdict(cfg)
    if args.mode == "oracle":
        tails, heads, costs, caps = stream.load_all()
        cost, flow = exact_oracle(n, stream.header.demand, tails, heads, costs, caps)
        pairs = {"mode": "oracle", "cost": int(cost), "cost_rounded": int(cost)}
        _emit(args, pairs, {"config": echo, "flow": flow.tolist(), **pairs})
        return EXIT_OK
    if args.mode == "comm":
        return _solve_comm(args, stream, echo)
    if args.mode == "mirror":
        return _solve_mirror(args, stream, echo)

    verify_every = 10 if args.verify == "full" else 0
    if args.trials > 1:
        best, results = solve_exact(stream, trials=args.trials, accuracy=args.epsilon,
                                    profile=args.profile, seed=args.seed,
                                    verify_every=verify_every)
        res = best if best is not None else results[-1]
        extra = {"trials": args.trials, "feasible_trials":
                 [i for i, r in enumerate(results) if r.report.feasible]}
    else:
        iso = args.seed + 1 if cfg.isolation else None
        res = solve(stream, accuracy=args.epsilon, profile=args.profile, seed=args.seed,
                    isolation_seed=iso, verify_every=verify_every)
        extra = {}
    summ = res.summary()
    centered = summ["max_centrality"] <= res.config.eps and all(
        v[1] <= res.config.eps for v in res.verified)
    pairs = {"mode": "stream", "profile": args.profile, "iterations": summ["iterations"],
             "passes": summ["passes"], "peak_words": summ["peak_words"],
             "cost": summ["integral_cost"], "cost_rounded": summ["cost_rounded"],
             "fractional_cost": summ.get("fractional_cost"),
             "feasible": summ["feasible"], "residual": summ["feasibility_residual"],
             "fractional_residual": summ.get("fractional_residual"),
             "max_star_flow": summ["max_star_flow"],
             "max_centrality": summ["max_centrality"], "centrality_tolerance": res.config.eps,
             "centered": centered, "guard_violations": res.transcript.stats["guard"],
             "damped_moves": res.transcript.stats["damped"]}
    machine = {"config": echo, "ipm": res.config.to_dict(), **pairs, **extra,
               "verified": res.verified, "flow": res.report.flow.astype(int).tolist()}
    if args.out:
        save_transcript(res.transcript, args.out + ".npz",
                        extra={"isolation_seed": res.isolation_seed, "graph": args.graph})
        with open(args.out + ".flow", "w") as fh:
            t, h, _, _ = stream.load_all()
            for e in range(stream.m):
                fh.write(f"{t[e] + 1} {h[e] + 1} {int(res.report.flow[e])}\n")
    _emit(args, pairs, machine)
    return EXIT_OK


def _solve_comm(args, stream, echo):
    from .comm import exact_flow_protocol, run_joint_ipm, split_instance
    tails, heads, costs, caps = stream.load_all()
    A, B = split_instance(stream.n, stream.header.demand, tails, heads, costs, caps,
                          seed=args.seed)
    if args.trials > 1:
        r = exact_flow_protocol((A, B), trials=args.trials, profile=args.profile,
                                accuracy=args.epsilon)
        pairs = {"mode": "comm", "cost": r["cost"], "feasible": r["success"],
                 "bits_total": r["bits_total"], "trials": args.trials}
    else:
        res = run_joint_ipm((A, B), profile=args.profile, accuracy=args.epsilon,
                            isolate=not args.no_isolation)
        ex = res.extraction["A"]
        pairs = {"mode": "comm", "iterations": res.transcripts[0].T, "cost": ex["cost"],
                 "feasible": ex["feasible"], "bits_total": res.meter.bits_total,
                 "passes": A.meters.passes}
    _emit(args, pairs, {"config": echo, **pairs})
    return EXIT_OK if pairs["feasible"] else EXIT_INFEASIBLE


def _solve_mirror(args, stream, echo):
    from .ipm import IPMConfig
    aux = build_initial_point(stream)
    iso = args.seed + 1 if not args.no_isolation else None
    lp = AuxStream(stream, aux, apply_isolation(stream, iso) if iso is not None else None)
    cfg = IPMConfig.profile_for(args.profile, lp.m, stream.n, seed=args.seed)
    mir = DenseMirror(lp, cfg, aux.mu_init(cfg.eps), aux.mu_target(args.epsilon)).run()
    flow = np.rint(mir.x[: stream.m])
    _, _, costs, _ = stream.load_all()
    frac = float(costs @ mir.x[: stream.m])
    pairs = {"mode": "mirror", "iterations": len(mir.taus), "cost": int(costs @ flow),
             "cost_rounded": int(np.rint(frac)), "fractional_cost": frac}
    _emit(args, pairs, {"config": echo, **pairs, "flow": flow.astype(int).tolist()})
    return EXIT_OK


def _emit(args, pairs, machine):
    text = _report_text(pairs, machine)
    sys.stdout.write(text)
    if getattr(args, "out", None):
        with open(args.out + ".report", "w") as fh:
            fh.write(text)


# ----------------------------------------------------------------------------
# query


def cmd_query(args) -> int:
    try:
        tail, head, cost, cap = (int(v) for v in args.edge.split())
    except ValueError:
        raise UsageError("edge must be given as 'tail head cost capacity' (1-indexed)")
    stream = open_stream(args.graph)
    found = None
    for blk in stream.passes_blocks():
        hit = np.flatnonzero((blk.tails == tail - 1) & (blk.heads == head - 1)
                             & (blk.costs == cost) & (blk.caps == cap))
        if len(hit):
            found = int(blk.ids[hit[0]])
            break
    if found is None:
        sys.stderr.write(f"edge {args.edge!r} is not in {args.graph}\n")
        return EXIT_UNKNOWN_EDGE
    with np.load(args.transcript) as data:
        header = json.loads(bytes(data["header"]).decode())
    iso = header.get("extra", {}).get("isolation_seed")
    aux = build_initial_point(stream)
    lp = AuxStream(stream, aux, apply_isolation(stream, iso) if iso is not None else None)
    tr = load_transcript(args.transcript, lp)
    from .ipm import query_x
    c = lp.pert.costs([found], [cost])[0] if lp.pert is not None else float(cost)
    x = float(query_x(tr, tr.T, [found], [tail - 1], [head - 1], [c], [float(cap)])[0])
    sys.stdout.write(f"{x!r}\n")
    return EXIT_OK


# ----------------------------------------------------------------------------
# bench


def _fit(xs, ys):
    if len(xs) < 2:
        return None
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()] if args.sizes else []
    rows = []
    for n in sizes:
        m = int(round(args.density * n))
        d, t, h, c, u = random_instance(n, m, W=args.W, seed=args.seed + n)
        st = EdgeStream.from_arrays(n, d, t, h, c, u, W=args.W)
        t0 = time.perf_counter()
        row = {"n": n, "m": m}
        try:
            if args.mode == "comm":
                from .comm import run_joint_ipm, split_instance
                A, B = split_instance(n, d, t, h, c, u, seed=args.seed)
                res = run_joint_ipm((A, B), profile=args.profile, accuracy=args.epsilon,
                                    extract=False)
                row.update(passes=A.meters.passes, peak_words=A.meters.peak_words,
                           iterations=res.transcripts[0].T, bits_total=res.meter.bits_total)
            else:
                res = solve(st, accuracy=args.epsilon, profile=args.profile, seed=args.seed,
                            isolation_seed=args.seed + 1)
                row.update(passes=st.meters.passes, peak_words=st.meters.peak_words,
                           iterations=res.transcript.T)
            row["status"] = "ok"
        except Exception as exc:  # recorded, not fatal
            row.update(status=f"error: {type(exc).__name__}: {exc}")
        row["wall_time"] = round(time.perf_counter() - t0, 3)
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    ns = [r["n"] for r in ok]
    slopes = {"passes_vs_n": _fit(ns, [r["passes"] for r in ok]),
              "peak_words_vs_n": _fit(ns, [r["peak_words"] for r in ok])}
    if args.mode == "comm":
        slopes["bits_vs_n"] = _fit(ns, [r["bits_total"] for r in ok])
    cols = ["n", "m", "passes", "peak_words", "iterations", "wall_time"]
    if args.mode == "comm":
        cols.append("bits_total")
    cols.append("status")
    out = ["\t".join(cols)]
    for r in rows:
        out.append("\t".join(str(r.get(c, "")) for c in cols))
    out.append("--- machine ---")
    out.append(json.dumps({"rows": rows, "slopes": slopes}, sort_keys=True))
    sys.stdout.write("\n".join(out) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser():
    p = _Parser(prog="mcfstream", description="Streaming min-cost flow solver.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("solve", help="solve a graph file")
    s.add_argument("--graph", required=True)
    s.add_argument("--epsilon", type=float, default=1e-3)
    s.add_argument("--profile", choices=["relaxed", "strict"], default="relaxed")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=["stream", "comm", "oracle", "mirror"], default="stream")
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--verify", choices=["sample", "full"], default="sample")
    s.add_argument("--out")
    s.add_argument("--no-isolation", action="store_true")

    q = sub.add_parser("query", help="flow of one edge from a saved transcript")
    q.add_argument("--transcript", required=True)
    q.add_argument("--graph", required=True)
    q.add_argument("--edge", required=True, help="'tail head cost capacity', 1-indexed")

    b = sub.add_parser("bench", help="scaling sweep on random instances")
    b.add_argument("--sizes", default="16,32,64")
    b.add_argument("--density", type=float, default=3.0)
    b.add_argument("--W", type=int, default=8)
    b.add_argument("--epsilon", type=float, default=1e-3)
    b.add_argument("--profile", choices=["relaxed", "strict"], default="relaxed")
    b.add_argument("--mode", choices=["stream", "comm"], default="stream")
    b.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="write a random feasible instance")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--W", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    return p


def cmd_generate(args) -> int:
    d, t, h, c, u = random_instance(args.n, args.m, W=args.W, seed=args.seed)
    write_graph(args.out, args.n, d, t, h, c, u)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (solve, query, bench, generate)")
        handler = {"solve": cmd_solve, "query": cmd_query, "bench": cmd_bench,
                   "generate": cmd_generate}[args.command]
        return handler(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (GraphFormatError, DemandError, FileNotFoundError) as exc:
        sys.stderr.write(f"input error: {exc}\n")
        return EXIT_USAGE
    except InfeasibleError as exc:
        sys.stderr.write(f"infeasible: {exc}\n")
        return EXIT_INFEASIBLE
    except (NonConvergence, CentralityBlowup, CentralityViolation) as exc:
        sys.stderr.write(f"not converged: {exc}\n")
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
