import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mcfstream.ipm import IPMConfig, run_ipm  # noqa: E402
from mcfstream.lifecycle import (AuxStream, apply_isolation, build_initial_point,  # noqa: E402
                                 random_instance)
from mcfstream.stream import EdgeStream  # noqa: E402

# one line per acceptance criterion, printed at the end of the session
CRITERIA = {}


def record_criterion(number, ok, detail):
    CRITERIA[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_lp(n, seed, m=None, W=8, iso=None, cost_low=1):
    """Random instance wrapped as stream, auxiliary graph and LP view."""
    m = 3 * n if m is None else m
    d, t, h, c, u = random_instance(n, m, W, seed, cost_low=cost_low)
    st = EdgeStream.from_arrays(n, d, t, h, c, u, W=W)
    aux = build_initial_point(st)
    lp = AuxStream(st, aux, apply_isolation(st, iso) if iso is not None else None)
    return (d, t, h, c, u), st, aux, lp


def run_small(n, seed, iso=None, accuracy=1e-3, **kw):
    inst, st, aux, lp = make_lp(n, seed, iso=iso)
    cfg = IPMConfig.relaxed(lp.m, n, seed=seed, **kw)
    tr = run_ipm(lp, cfg, aux.mu_init(cfg.eps), aux.mu_target(accuracy))
    return inst, st, aux, lp, cfg, tr


@pytest.fixture(scope="session")
def small_run():
    """A finished relaxed run on a 6-vertex instance, shared by several tests."""
    return run_small(6, 5, iso=3)


def two_node(cost=1, cap=5, supply=3):
    return EdgeStream.from_arrays(2, [supply, -supply], [0], [1], [cost], [cap])


def rel_err(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) /
                        np.maximum(1.0, np.abs(np.asarray(b)))))


def fit_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


__all__ = ["make_lp", "run_small", "two_node", "rel_err", "fit_slope", "record_criterion",
           "math"]
