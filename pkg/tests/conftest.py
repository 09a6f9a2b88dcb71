import threading
import time

import pytest

from leasefs.client import NodeConfig
from leasefs.cluster import ClusterConfig, LocalCluster
from leasefs.core import PAGE_SIZE, CacheMode
from leasefs.daemon import DaemonConfig


def run_tight_write_contention(cluster, pages: int = 4, seconds: float = 2.0,
                               threads_per_node: int = 2,
                               path: str = "f") -> dict[str, int]:
    """Every node hammers one shared file full speed; returns summed metrics."""
    cluster.create_file(path, pages=pages)
    stop = threading.Event()

    def hammer(node, tid):
        h = node.open(path)
        i = 0
        while not stop.is_set():
            try:
                node.write(h, (i % pages) * PAGE_SIZE,
                           bytes([65 + (i + tid) % 26]) * PAGE_SIZE)
            except Exception:
                pass
            i += 1

    threads = [
        threading.Thread(target=hammer, args=(node, tid), daemon=True)
        for node in cluster.nodes
        for tid in range(threads_per_node)
    ]
    for t in threads:
        t.start()
    time.sleep(seconds)
    stop.set()
    for t in threads:
        t.join(10)
    totals: dict[str, int] = {}
    for node in cluster.nodes:
        for key, value in node.metrics.snapshot().items():
            totals[key] = totals.get(key, 0) + value
    return totals


def fast_node_config(bc_capacity: int = 4 << 20,
                     flush_interval_s: float = 60.0,
                     auto_flush: bool = False,
                     soft_timeout_s: float = 2.0,
                     probe_interval_s: float = 0.0,
                     occ_retry_cap: int = 64) -> NodeConfig:
    """Deterministic test defaults: no background flusher, short timeouts."""
    return NodeConfig(
        daemon=DaemonConfig(
            bc_capacity_bytes=bc_capacity,
            soft_timeout_s=soft_timeout_s,
            probe_interval_s=probe_interval_s,
            rpc_timeout_s=5.0,
            retry_backoff_s=0.01,
        ),
        flush_interval_s=flush_interval_s,
        auto_flush=auto_flush,
        occ_retry_cap=occ_retry_cap,
    )


@pytest.fixture
def make_cluster():
    clusters = []

    def factory(nodes: int = 2, mode: CacheMode = CacheMode.WRITE_BACK_LEASE,
                storage_nodes: int = 1, data_dir=None, node_config=None,
                tracker=None, registry=None, recorder=None,
                retry_limit: int = 3, retry_backoff_s: float = 0.02,
                revoke_timeout_s: float = 10.0) -> LocalCluster:
        config = ClusterConfig(
            nodes=nodes, storage_nodes=storage_nodes, mode=mode,
            data_dir=data_dir, node=node_config or fast_node_config(),
            retry_limit=retry_limit, retry_backoff_s=retry_backoff_s,
            revoke_timeout_s=revoke_timeout_s,
        )
        cluster = LocalCluster(config, tracker=tracker, registry=registry,
                               recorder=recorder)
        clusters.append(cluster)
        return cluster

    yield factory
    for cluster in clusters:
        cluster.close()
