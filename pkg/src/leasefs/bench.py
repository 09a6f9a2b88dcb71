"""fio-style workload generator and experiment driver.

Workloads are defined by a WorkloadSpec: random or sequential access, a
read percentage, per-node thread and file counts, and a contention level
(the percentage of each node's working set that is globally shared). Every
run echoes the full spec into its CSV row so results are reproducible from
the output file alone.

Operation streams are a pure function of (spec, node, thread): replaying a
spec with the same seed regenerates byte-identical op sequences even though
throughput varies run to run.
"""

from __future__ import annotations

import csv
import gc
import hashlib
import random
import statistics
import threading
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, TextIO

from .client import NodeConfig
from .cluster import ClusterConfig, LocalCluster
from .core import PAGE_SIZE, CacheMode, Gfi, LeaseUnavailable
from .daemon import DaemonConfig
from .storage import StorageRouter

PATTERN_RANDOM = "rand"
PATTERN_SEQUENTIAL = "seq"

# Desk-scale defaults: small enough for CI, shaped like the full-scale
# four-threads-per-node / 100 x 16 MiB configuration one flag away.
DESK_FILES = 10
DESK_FILE_SIZE = 1 << 20
DESK_IO_SIZE = PAGE_SIZE
DESK_THREADS = 4
DESK_DURATION_S = 10.0
DESK_BC_CAPACITY = 64 << 20


@dataclass(frozen=True)
class WorkloadSpec:
    pattern: str = PATTERN_RANDOM
    rw_ratio: int = 50  # read percentage
    threads_per_node: int = DESK_THREADS
    files_per_node: int = DESK_FILES
    file_size: int = DESK_FILE_SIZE
    io_size: int = DESK_IO_SIZE
    contention: int = 0
    nodes: int = 2
    duration_s: Optional[float] = DESK_DURATION_S
    ops_per_thread: Optional[int] = None
    mode: CacheMode = CacheMode.WRITE_BACK_LEASE
    seed: int = 1
    think_us: int = 0  # per-op pacing, fio thinktime style
    storage_nodes: int = 1
    transport: str = "loopback"

    def __post_init__(self) -> None:
        if not 0 <= self.rw_ratio <= 100:
            raise ValueError("rw_ratio is a read percentage in [0, 100]")
        if not 0 <= self.contention <= 100:
            raise ValueError("contention is a percentage in [0, 100]")
        if self.file_size % self.io_size or self.io_size % PAGE_SIZE:
            raise ValueError("file_size and io_size must be page aligned")
        if (self.duration_s is None) == (self.ops_per_thread is None):
            raise ValueError("set exactly one of duration_s or ops_per_thread")


def shared_file_count(spec: WorkloadSpec) -> int:
    return round(spec.contention * spec.files_per_node / 100)


def shared_file_names(spec: WorkloadSpec) -> list[str]:
    return [f"shared_{i}" for i in range(shared_file_count(spec))]


def private_file_names(spec: WorkloadSpec, node: int) -> list[str]:
    count = spec.files_per_node - shared_file_count(spec)
    return [f"node{node}_{i}" for i in range(count)]


def working_set(spec: WorkloadSpec, node: int) -> list[str]:
    return shared_file_names(spec) + private_file_names(spec, node)


def _worker_seed(seed: int, node: int, thread: int) -> int:
    digest = hashlib.blake2b(
        f"{seed}:{node}:{thread}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def op_stream(spec: WorkloadSpec, node: int, thread: int) -> Iterator[tuple[str, int, int]]:
    """Yield (op, file index, byte offset) forever, deterministically."""
    rng = random.Random(_worker_seed(spec.seed, node, thread))
    nfiles = spec.files_per_node
    slots = spec.file_size // spec.io_size
    cursors = [(thread * 31) % slots] * nfiles
    while True:
        fidx = rng.randrange(nfiles)
        op = "r" if rng.random() * 100 < spec.rw_ratio else "w"
        if spec.pattern == PATTERN_SEQUENTIAL:
            slot = cursors[fidx]
            cursors[fidx] = (slot + 1) % slots
        else:
            slot = rng.randrange(slots)
        yield op, fidx, slot * spec.io_size


@dataclass
class RunResult:
    spec: WorkloadSpec
    elapsed_s: float = 0.0
    ops_total: int = 0
    ops_failed: int = 0
    bytes_total: int = 0
    throughput_bytes_per_s: float = 0.0
    per_node_throughput: list[float] = field(default_factory=list)
    mean_latency_s: float = 0.0
    p50_latency_s: float = 0.0
    p99_latency_s: float = 0.0
    round_trips: int = 0
    lease_acquisitions: int = 0
    revocations: int = 0
    occ_aborts: int = 0
    valid: bool = True
    error: str = ""


def prepare(storage: StorageRouter, spec: WorkloadSpec) -> dict[str, Gfi]:
    """Create and pre-size every shared and private file before a run."""
    names = list(shared_file_names(spec))
    for node in range(spec.nodes):
        names.extend(private_file_names(spec, node))
    pages = spec.file_size // PAGE_SIZE
    zero = bytes(PAGE_SIZE)
    layout: dict[str, Gfi] = {}
    for name in names:
        gfi = storage.create(name)
        for start in range(0, pages, 256):
            batch = [(i, zero) for i in range(start, min(start + 256, pages))]
            storage.write_pages(gfi, batch)
        layout[name] = gfi
    return layout


def _percentile(sorted_vals: list[float], q: float) -> float:
    if not sorted_vals:
        return 0.0
    idx = min(len(sorted_vals) - 1, int(q * len(sorted_vals)))
    return sorted_vals[idx]


class _Worker(threading.Thread):
    def __init__(self, spec: WorkloadSpec, client, node: int, thread: int,
                 stop: threading.Event, fail: threading.Event) -> None:
        super().__init__(name=f"bench-n{node}t{thread}", daemon=True)
        self.spec = spec
        self.client = client
        self.node = node
        self.thread_idx = thread
        self.stop = stop
        self.fail = fail
        self.latencies: list[float] = []
        self.bytes_done = 0
        self.ops_failed = 0
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        spec = self.spec
        try:
            handles = [
                self.client.open(name) for name in working_set(spec, self.node)
            ]
            payload = bytes(
                (self.node * 37 + self.thread_idx * 11 + i) & 0xFF
                for i in range(spec.io_size)
            )
            stream = op_stream(spec, self.node, self.thread_idx)
            think_s = spec.think_us / 1e6
            budget = spec.ops_per_thread
            perf = time.perf_counter
            while budget is None or budget > 0:
                if self.stop.is_set():
                    break
                op, fidx, offset = next(stream)
                t0 = perf()
                try:
                    if op == "r":
                        self.client.read(handles[fidx], offset, spec.io_size)
                    else:
                        self.client.write(handles[fidx], offset, payload)
                except LeaseUnavailable:
                    # A refused or timed-out lease fails the operation, not
                    # the run: revocation livelock under contention is a
                    # measured pathology, not a harness fault.
                    self.ops_failed += 1
                else:
                    self.latencies.append(perf() - t0)
                    self.bytes_done += spec.io_size
                if budget is not None:
                    budget -= 1
                if think_s:
                    time.sleep(think_s)
        except BaseException as exc:  # noqa: BLE001 - recorded, run marked invalid
            self.error = exc
            self.fail.set()
            self.stop.set()


def run(spec: WorkloadSpec, data_dir: Optional[Path] = None,
        node_config: Optional[NodeConfig] = None) -> RunResult:
    """Execute one workload on a fresh loopback cluster."""
    if spec.transport != "loopback":
        raise ValueError("run() drives the loopback transport; use the CLI for tcp")
    if node_config is None:
        node_config = NodeConfig(daemon=DaemonConfig(bc_capacity_bytes=DESK_BC_CAPACITY))
    cluster_cfg = ClusterConfig(
        nodes=spec.nodes, storage_nodes=spec.storage_nodes, mode=spec.mode,
        data_dir=data_dir, node=node_config,
    )
    result = RunResult(spec)
    with LocalCluster(cluster_cfg) as cluster:
        prepare(cluster.storage, spec)
        before = [node.metrics.snapshot() for node in cluster.nodes]
        stop = threading.Event()
        fail = threading.Event()
        workers = [
            _Worker(spec, cluster.client(n), n, t, stop, fail)
            for n in range(spec.nodes)
            for t in range(spec.threads_per_node)
        ]
        # Collector pauses are measurement noise, not workload cost; quiesce
        # them for the timed window (freed garbage is reclaimed afterwards).
        gc.collect()
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            t_start = time.perf_counter()
            for w in workers:
                w.start()
            if spec.duration_s is not None:
                stop.wait(spec.duration_s)
                stop.set()
            for w in workers:
                w.join()
            elapsed = time.perf_counter() - t_start
        finally:
            if gc_was_enabled:
                gc.enable()
        after = [node.metrics.snapshot() for node in cluster.nodes]
    gc.collect()

    result.elapsed_s = elapsed
    latencies: list[float] = []
    per_node_bytes = [0] * spec.nodes
    for w in workers:
        latencies.extend(w.latencies)
        per_node_bytes[w.node] += w.bytes_done
    result.ops_total = len(latencies)
    result.ops_failed = sum(w.ops_failed for w in workers)
    result.bytes_total = sum(per_node_bytes)
    result.per_node_throughput = [b / elapsed for b in per_node_bytes]
    result.throughput_bytes_per_s = sum(result.per_node_throughput)
    if latencies:
        latencies.sort()
        result.mean_latency_s = statistics.fmean(latencies)
        result.p50_latency_s = _percentile(latencies, 0.50)
        result.p99_latency_s = _percentile(latencies, 0.99)
    for name in ("round_trips", "lease_acquisitions", "revocations", "occ_aborts"):
        setattr(result, name, sum(a[name] - b[name] for a, b in zip(after, before)))
    if fail.is_set():
        result.valid = False
        errors = [repr(w.error) for w in workers if w.error is not None]
        result.error = "; ".join(errors[:3])
    return result


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

_SPEC_FIELDS = [f.name for f in fields(WorkloadSpec)]
_RESULT_FIELDS = [
    "elapsed_s", "ops_total", "ops_failed", "bytes_total", "throughput_bytes_per_s",
    "mean_latency_s", "p50_latency_s", "p99_latency_s",
    "round_trips", "lease_acquisitions", "revocations", "occ_aborts",
    "valid", "error",
]


def csv_columns(axis: Optional[str] = None) -> list[str]:
    head = ["axis", "axis_value"] if axis is not None else []
    return head + _SPEC_FIELDS + _RESULT_FIELDS


def result_row(result: RunResult, axis: Optional[str] = None,
               axis_value=None) -> list:
    row: list = [axis, axis_value] if axis is not None else []
    for name in _SPEC_FIELDS:
        value = getattr(result.spec, name)
        row.append(value.value if isinstance(value, CacheMode) else value)
    for name in _RESULT_FIELDS:
        row.append(getattr(result, name))
    return row


def write_csv(out: TextIO, results: Iterable[RunResult],
              axis: Optional[str] = None, axis_values=None) -> None:
    writer = csv.writer(out)
    writer.writerow(csv_columns(axis))
    values = list(axis_values) if axis_values is not None else None
    for i, result in enumerate(results):
        value = values[i] if values is not None else None
        writer.writerow(result_row(result, axis, value))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = {
    "contention": "contention",
    "nodes": "nodes",
    "rw_ratio": "rw_ratio",
}


def _median_run(results: list[RunResult]) -> RunResult:
    ok = [r for r in results if r.valid]
    if not ok:
        return results[0]
    ok.sort(key=lambda r: r.throughput_bytes_per_s)
    return ok[len(ok) // 2]


def sweep(axis: str, values: list[int], base: WorkloadSpec,
          modes: tuple[CacheMode, ...] = (
              CacheMode.WRITE_BACK_LEASE, CacheMode.WRITE_THROUGH_OCC),
          runs_per_cell: int = 1,
          data_dir: Optional[Path] = None,
          node_config: Optional[NodeConfig] = None,
          ) -> list[tuple[int, RunResult]]:
    """Run every (axis value, mode) cell; failed cells are reported, the
    sweep continues. With several runs per cell the median-throughput run
    represents the cell.
    """
    field_name = SWEEP_AXES[axis]
    out: list[tuple[int, RunResult]] = []
    for value in values:
        for mode in modes:
            cell: list[RunResult] = []
            for _ in range(runs_per_cell):
                spec = base
                try:
                    spec = replace(base, **{field_name: value, "mode": mode})
                    cell.append(run(spec, data_dir=data_dir, node_config=node_config))
                except Exception as exc:  # noqa: BLE001 - cell marked failed
                    failed = RunResult(spec)
                    failed.valid = False
                    failed.error = repr(exc)
                    cell.append(failed)
            out.append((value, _median_run(cell)))
    return out
