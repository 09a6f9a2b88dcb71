"""Lease-coherent distributed page caching with a write-through baseline.

The stack simulates, in one process or across TCP, a cluster of client
nodes whose kernel-tier page caches stay strongly consistent through
manager-granted leases checked on the I/O fast path. A write-through
baseline with optimistic revocation, a per-page linearizability checker,
and a benchmark harness round out the artifact.
"""

from .core import (
    PAGE_SIZE,
    CacheMode,
    Gfi,
    Intent,
    LeaseType,
    lease_satisfies,
)

__all__ = [
    "PAGE_SIZE",
    "CacheMode",
    "Gfi",
    "Intent",
    "LeaseType",
    "lease_satisfies",
]

__version__ = "0.1.0"
