"""Online federated learning laboratory.

Staleness-aware asynchronous aggregation, an SLO-driven workload profiler and
a deterministic simulator of heterogeneous device fleets.
"""

__version__ = "0.1.0"
