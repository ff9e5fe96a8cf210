"""Streaming min-cost flow by a robust interior-point method with implicit iterates."""

from .stream import EdgeStream, GraphHeader, Meters, open_stream, read_graph, write_graph
from .lifecycle import (AuxStream, InfeasibleError, apply_isolation, build_initial_point,
                        exact_oracle, extract_flow, random_instance)
from .ipm import IPMConfig, Transcript, run_ipm

__version__ = "0.1.0"

__all__ = [
    "EdgeStream", "GraphHeader", "Meters", "open_stream", "read_graph", "write_graph",
    "AuxStream", "InfeasibleError", "apply_isolation", "build_initial_point", "exact_oracle",
    "extract_flow", "random_instance", "IPMConfig", "Transcript", "run_ipm",
]
