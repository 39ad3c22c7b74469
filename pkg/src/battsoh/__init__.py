"""Stage-wise battery state-of-health estimation.

Pipeline: ingest cycling telemetry -> delay-embed each cycle -> learn the
per-stage consistency/discrepancy subspace split -> train a switching
LSTM / temporal-capsule regressor on the discrepancy components -> gate
transfer to new batteries with a consistency control limit, compensating
the source model's error when the gate trips.
"""

__version__ = "0.1.0"
