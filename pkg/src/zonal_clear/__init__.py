"""Multi-zone day-ahead market clearing with non-convex bids.

The clearing model, an adaptive tabu search solver, an exact reference
solver for small instances, an instance generator and a command line.
"""

from .model import (AuditReport, ClearingOutcome, Instance, Line, NonConvexBid, Segment,
                    Tolerances, audit, bid_surplus, evaluate_surplus)

__all__ = ["AuditReport", "ClearingOutcome", "Instance", "Line", "NonConvexBid", "Segment",
           "Tolerances", "audit", "bid_surplus", "evaluate_surplus"]
__version__ = "0.1.0"
