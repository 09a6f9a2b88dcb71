"""POSIX-like per-node facade over the kernel cache and the daemon.

Handles byte-range reads/writes by splitting them into page operations,
dispatches per cache mode, and owns the write-through baseline's
daemon-side lease logic: the per-file OCC record, the optimistic
revocation dance, and the scripted deadlock demonstration contrasting the
naive reversed lock order with the offloaded-lease order.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    PAGE_SIZE,
    CacheMode,
    Gfi,
    Intent,
    LeaseType,
    ManagerUnreachable,
    NotFound,
    RevokeLivelock,
    lease_satisfies,
)
from .daemon import Daemon, DaemonConfig, LeaseEntry, NodeMetrics
from .kcache import FLUSH_INTERVAL_S, InodeState, KernelCache, NeedLease
from .locks import DeadlockRegistry, LockOrderTracker
from .storage import StorageRouter
from .transport import RpcClient

OCC_RETRY_CAP = 64
WATCHDOG_TIMEOUT_S = 2.0

DEMO_DEADLOCK = "DeadlockDetected"
DEMO_COMPLETED = "Completed"


@dataclass
class NodeConfig:
    daemon: DaemonConfig = field(default_factory=DaemonConfig)
    flush_interval_s: float = FLUSH_INTERVAL_S
    auto_flush: bool = True
    occ_retry_cap: int = OCC_RETRY_CAP


@dataclass
class _Handle:
    gfi: Gfi
    cursor: int = 0


class _DaemonUpcall:
    __slots__ = ("_daemon",)

    def __init__(self, daemon: Daemon) -> None:
        self._daemon = daemon

    def acquire(self, gfi: Gfi, intent: Intent,
                local_release: Callable[[], None]) -> int:
        return self._daemon.acquire(gfi, intent, local_release)


class ClientNode:
    """One DFS client: open table, kernel cache, daemon, and mode dispatch."""

    def __init__(self, node_id: int, mode: CacheMode,
                 manager: Optional[RpcClient], storage: StorageRouter,
                 config: Optional[NodeConfig] = None,
                 tracker: Optional[LockOrderTracker] = None,
                 registry: Optional[DeadlockRegistry] = None,
                 recorder=None) -> None:
        self.node_id = node_id
        self.mode = mode
        self.config = config or NodeConfig()
        self.metrics = NodeMetrics()
        self.recorder = recorder
        self._storage = storage
        self.daemon = Daemon(
            node_id, mode, manager, storage,
            config=self.config.daemon, metrics=self.metrics, registry=registry,
        )
        self.kcache = KernelCache(
            node_id, mode, tracker=tracker, registry=registry,
            flush_interval_s=self.config.flush_interval_s,
        )
        self.daemon.bind_kernel(self.kcache, self._occ_revoke)
        self._upcall = _DaemonUpcall(self.daemon)
        self._handles: dict[int, _Handle] = {}
        self._handles_lock = threading.Lock()
        self._next_handle = 1
        self._hooks: dict[str, Callable[[], None]] = {}
        self.naive_revoke_order = False
        self._stop = threading.Event()
        self._flusher: Optional[threading.Thread] = None
        if self.config.auto_flush:
            self._flusher = threading.Thread(
                target=self._flush_loop, name=f"node{node_id}-flusher", daemon=True
            )
            self._flusher.start()

    # -- lifecycle -----------------------------------------------------------

    def _flush_loop(self) -> None:
        interval = max(self.config.flush_interval_s / 4, 0.05)
        while not self._stop.wait(interval):
            try:
                self.kcache.background_flush(self.daemon.background_sink)
            except Exception:
                continue

    def close(self) -> None:
        self._stop.set()
        if self._flusher is not None:
            self._flusher.join(timeout=2.0)

    def _hook(self, name: str) -> None:
        fn = self._hooks.get(name)
        if fn is not None:
            fn()

    # -- open table ------------------------------------------------------------

    def open(self, path: str, create: bool = False) -> int:
        try:
            gfi, length = self._storage.resolve(path)
        except NotFound:
            if not create:
                raise
            gfi = self._storage.create(path)
            length = 0
        inode = self.kcache.get_inode(gfi)
        with inode.inode_guard:
            inode.length = max(inode.length, length)
        with self._handles_lock:
            handle = self._next_handle
            self._next_handle += 1
            self._handles[handle] = _Handle(gfi)
        return handle

    def close_handle(self, handle: int) -> None:
        with self._handles_lock:
            self._handles.pop(handle, None)

    def _handle(self, handle: int) -> _Handle:
        with self._handles_lock:
            h = self._handles.get(handle)
        if h is None:
            raise ValueError(f"bad handle {handle}")
        return h

    def gfi_of(self, handle: int) -> Gfi:
        return self._handle(handle).gfi

    # -- reads -------------------------------------------------------------------

    def read(self, handle: int, offset: int, length: int) -> bytes:
        h = self._handle(handle)
        gfi = h.gfi
        inode = self.kcache.get_inode(gfi)
        if self.daemon.fallback_active(gfi):
            if not self.daemon.try_restore(gfi, Intent.READ):
                return self._direct_read(gfi, offset, length)
        t0 = time.monotonic_ns() if self.recorder is not None else 0
        try:
            data = self._read_cached(inode, gfi, offset, length)
        except ManagerUnreachable:
            if self.daemon.maybe_enter_fallback(gfi):
                return self._direct_read(gfi, offset, length)
            raise
        if self.recorder is not None:
            self._record_pages("r", gfi, offset, data, t0, time.monotonic_ns())
        h.cursor = offset + len(data)
        return data

    def _read_cached(self, inode: InodeState, gfi: Gfi, offset: int, length: int) -> bytes:
        if length <= 0:
            return b""
        # Read the first page before clamping against the file length: a
        # cold lease means the local length view may predate a remote
        # extension, and the acquisition inside this read refreshes it.
        first = offset // PAGE_SIZE
        miss_fill = self._miss_fill_for_mode()
        slow = self._slow_acquire(gfi, Intent.READ)
        first_page = self.kcache.read(inode, first, self._upcall, miss_fill,
                                      slow_acquire=slow)
        end = min(offset + length, inode.length)
        if end <= offset:
            return b""
        lo = offset - first * PAGE_SIZE
        hi = min(end - first * PAGE_SIZE, PAGE_SIZE)
        chunks = [first_page[lo:hi]]
        for index in range(first + 1, (end - 1) // PAGE_SIZE + 1):
            page = self.kcache.read(inode, index, self._upcall, miss_fill,
                                    slow_acquire=slow)
            hi = min(end, (index + 1) * PAGE_SIZE) - index * PAGE_SIZE
            chunks.append(page[:hi])
        return b"".join(chunks)

    def _miss_fill_for_mode(self):
        if self.mode is CacheMode.WRITE_THROUGH_OCC:
            return self._wto_miss_fill
        return self.daemon.read_miss

    def _slow_acquire(self, gfi: Gfi, intent: Intent):
        if self.mode is not CacheMode.WRITE_THROUGH_OCC:
            return None
        return lambda: self._occ_acquire(gfi, intent)

    # -- writes --------------------------------------------------------------------

    def write(self, handle: int, offset: int, data: bytes) -> int:
        if not data:
            return 0
        h = self._handle(handle)
        gfi = h.gfi
        inode = self.kcache.get_inode(gfi)
        if self.daemon.fallback_active(gfi):
            if not self.daemon.try_restore(gfi, Intent.WRITE):
                return self._direct_write(gfi, offset, data)
        t0 = time.monotonic_ns() if self.recorder is not None else 0
        try:
            pos = 0
            while pos < len(data):
                index = (offset + pos) // PAGE_SIZE
                in_page = (offset + pos) % PAGE_SIZE
                chunk = data[pos:pos + PAGE_SIZE - in_page]
                self.kcache.write(
                    inode, index, in_page, chunk, self._upcall,
                    self._miss_fill_for_mode(),
                    write_through=self._wto_write_through
                    if self.mode is CacheMode.WRITE_THROUGH_OCC else None,
                    slow_acquire=self._slow_acquire(gfi, Intent.WRITE),
                )
                pos += len(chunk)
        except ManagerUnreachable:
            if self.daemon.maybe_enter_fallback(gfi):
                remaining = data[pos:]
                if remaining:
                    self._direct_write(gfi, offset + pos, remaining)
                return len(data)
            raise
        if self.recorder is not None:
            self._record_pages("w", gfi, offset, data, t0, time.monotonic_ns())
        h.cursor = offset + len(data)
        return len(data)

    def fsync(self, handle: int) -> None:
        h = self._handle(handle)
        inode = self.kcache.get_inode(h.gfi)
        self.kcache.fsync(inode, self.daemon.fsync_sink)

    # -- fallback (manager unreachable) ------------------------------------------

    def _direct_read(self, gfi: Gfi, offset: int, length: int) -> bytes:
        first = offset // PAGE_SIZE
        last = (offset + length - 1) // PAGE_SIZE if length else first
        blocks, flen = self.daemon.read_direct(gfi, list(range(first, last + 1)))
        end = min(offset + length, flen)
        if end <= offset:
            return b""
        raw = b"".join(blocks)
        lo = offset - first * PAGE_SIZE
        return raw[lo:lo + (end - offset)]

    def _direct_write(self, gfi: Gfi, offset: int, data: bytes) -> int:
        first = offset // PAGE_SIZE
        last = (offset + len(data) - 1) // PAGE_SIZE
        head_partial = offset % PAGE_SIZE != 0
        tail_partial = (offset + len(data)) % PAGE_SIZE != 0
        need: list[int] = []
        if head_partial:
            need.append(first)
        if tail_partial and last not in need:
            need.append(last)
        existing = {}
        if need:
            blocks, _ = self.daemon.read_direct(gfi, need)
            existing = dict(zip(need, blocks))
        pages = []
        for index in range(first, last + 1):
            base = bytearray(existing.get(index, bytes(PAGE_SIZE)))
            lo = max(offset, index * PAGE_SIZE)
            hi = min(offset + len(data), (index + 1) * PAGE_SIZE)
            base[lo - index * PAGE_SIZE:hi - index * PAGE_SIZE] = data[lo - offset:hi - offset]
            pages.append((index, bytes(base)))
        self.daemon.write_direct(gfi, pages)
        return len(data)

    # -- write-through/OCC lease logic ---------------------------------------------

    def _occ_acquire(self, gfi: Gfi, intent: Intent) -> None:
        def local_release() -> None:
            # Release semantics for our own caches before giving up
            # ownership; dirty data cannot exist under a read lease.
            self.kcache.drop_pages(gfi)

        self.daemon.acquire(gfi, intent, local_release)

    def _wto_miss_fill(self, gfi: Gfi, index: int) -> tuple[bytes, int]:
        """Kernel read miss in write-through mode.

        The occ guard is held shared across the fill so a revocation's
        final pass cannot null the lease mid-fetch; the filled page is
        therefore covered the moment it lands in the cache.
        """
        entry = self.daemon.table.entry(gfi)
        entry.occ_guard.acquire_shared()
        try:
            if not lease_satisfies(entry.type, Intent.READ):
                raise NeedLease()
            return self.daemon.read_miss(gfi, index)
        finally:
            entry.occ_guard.release_shared()

    def _wto_write_through(self, inode: InodeState, index: int) -> None:
        """Synchronous daemon hop for one write-through page update.

        Runs with the inode guard held (that ordering is load-bearing: it
        is what the naive revocation order deadlocks against). The occ
        guard is taken shared only for the daemon-side lease check plus the
        buffer-cache insert.
        """
        self.metrics.bump("round_trips")
        self._hook("wto_before_occ")
        gfi = inode.gfi
        entry = self.daemon.table.entry(gfi)
        entry.occ_guard.acquire_shared()
        try:
            if not lease_satisfies(entry.type, Intent.WRITE):
                raise NeedLease()
            page = inode.pages[index]
            self.daemon.bc.put(gfi, index, bytes(page.data), dirty=True)
        finally:
            entry.occ_guard.release_shared()

    def _occ_revoke(self, gfi: Gfi, entry: LeaseEntry) -> bool:
        """Revoke the write-through lease without holding it over the
        kernel invalidation.

        Optimistic: invalidate and flush assuming no concurrent cache
        activity, then compare the inode version; any concurrent writer or
        fill forces a retry (one abort). The guard is taken exclusively
        only for the final null, and never around the inode guard.
        """
        inode = self.kcache.get_inode(gfi)
        if self.naive_revoke_order:
            return self._occ_revoke_naive(gfi, entry, inode)
        aborts = 0
        while aborts <= self.config.occ_retry_cap:
            self._hook("occ_revoke_started")
            with inode.inode_guard:
                snapshot = inode.version
                inode.pages.clear()
                inode.dirty_since = None
            self.daemon.flush_gfi_to_storage(gfi)
            self.daemon.bc.drop_clean(gfi)
            if inode.version != snapshot:
                aborts += 1
                self.metrics.bump("occ_aborts")
                continue
            entry.occ_guard.acquire_exclusive()
            try:
                # Any writer past its cache update has already bumped the
                # version and done so before contending this guard, so a
                # bare read here is race-free for the decision we need.
                if inode.version == snapshot:
                    with self.daemon.table.lock:
                        entry.type = LeaseType.NULL
                    return True
            finally:
                entry.occ_guard.release_exclusive()
            aborts += 1
            self.metrics.bump("occ_aborts")
        raise RevokeLivelock(
            f"optimistic revocation of {gfi} aborted {aborts} times"
        )

    def _occ_revoke_naive(self, gfi: Gfi, entry: LeaseEntry, inode: InodeState) -> bool:
        # Reversed order on purpose: hold the lease guard across the kernel
        # invalidation. The write path holds the inode guard while taking
        # this guard, so two nodes contending one file can cycle.
        entry.occ_guard.acquire_exclusive()
        try:
            self._hook("occ_revoke_locked")
            with inode.inode_guard:
                inode.pages.clear()
                inode.version += 1
                inode.dirty_since = None
            self.daemon.flush_gfi_to_storage(gfi)
            self.daemon.bc.drop_clean(gfi)
            with self.daemon.table.lock:
                entry.type = LeaseType.NULL
            return True
        finally:
            entry.occ_guard.release_exclusive()

    # -- trace recording -------------------------------------------------------------

    def _record_pages(self, op: str, gfi: Gfi, offset: int, data: bytes,
                      t0: int, t1: int) -> None:
        # Only whole pages are recorded: per-page linearizability treats a
        # page as a register, which partial updates do not overwrite.
        if offset % PAGE_SIZE != 0:
            return
        for i in range(len(data) // PAGE_SIZE):
            page_bytes = data[i * PAGE_SIZE:(i + 1) * PAGE_SIZE]
            self.recorder.record(
                self.node_id, op, gfi, offset // PAGE_SIZE + i, page_bytes, t0, t1
            )


def deadlock_demo(naive_lock_order: bool, nodes: int = 2,
                  watchdog_s: float = WATCHDOG_TIMEOUT_S) -> str:
    """Reproduce the reversed-lock-order hazard of naive write-through
    revocation, or show the optimistic ordering completing the same
    interleaving.

    Two write-through nodes contend on one file. The holder's writer is
    paused mid write-through (inode guard held, about to take the lease
    guard) while a revocation triggered by the other node runs. With the
    naive order the revoker holds the lease guard while it wants the inode
    guard: a cycle, reported by the wait-for watchdog. With the optimistic
    order the same schedule completes. A single node completes trivially:
    the cycle needs a remote revoker.
    """
    from .cluster import ClusterConfig, LocalCluster

    registry = DeadlockRegistry()
    config = ClusterConfig(
        nodes=max(nodes, 1), mode=CacheMode.WRITE_THROUGH_OCC,
        node=NodeConfig(auto_flush=False),
        retry_limit=1,
    )
    with LocalCluster(config, registry=registry) as cluster:
        cluster.create_file("demo", pages=1)
        writer = cluster.client(0)
        writer.naive_revoke_order = naive_lock_order
        h0 = writer.open("demo")
        writer.write(h0, 0, b"x" * PAGE_SIZE)  # takes the write lease

        if nodes < 2:
            writer.write(h0, 0, b"y" * PAGE_SIZE)
            return DEMO_COMPLETED

        rendezvous = threading.Barrier(2)
        fired: set[str] = set()
        fired_lock = threading.Lock()

        def once(name: str) -> None:
            with fired_lock:
                if name in fired:
                    return
                fired.add(name)
            try:
                rendezvous.wait(timeout=watchdog_s)
            except threading.BrokenBarrierError:
                pass

        writer._hooks["wto_before_occ"] = lambda: once("writer")
        writer._hooks["occ_revoke_locked"] = lambda: once("revoker")
        writer._hooks["occ_revoke_started"] = lambda: once("revoker")

        outcome: dict[str, object] = {}

        def run_writer() -> None:
            try:
                writer.write(h0, 0, b"z" * PAGE_SIZE)
            except Exception as exc:  # noqa: BLE001 - demo reports, never raises
                outcome["writer_error"] = exc

        def run_contender() -> None:
            other = cluster.client(1)
            h1 = other.open("demo")
            try:
                other.write(h1, 0, b"w" * PAGE_SIZE)
            except Exception as exc:  # noqa: BLE001
                outcome["contender_error"] = exc

        t_writer = threading.Thread(target=run_writer, name="demo-writer", daemon=True)
        t_contender = threading.Thread(
            target=run_contender, name="demo-contender", daemon=True
        )
        t_writer.start()
        t_contender.start()
        deadline = time.monotonic() + watchdog_s
        while time.monotonic() < deadline:
            if registry.detected.is_set():
                break
            if not t_writer.is_alive() and not t_contender.is_alive():
                break
            time.sleep(0.005)
        detected = registry.detected.is_set()
        rendezvous.abort()
        t_writer.join(timeout=watchdog_s + 2.0)
        t_contender.join(timeout=watchdog_s + 2.0)
        return DEMO_DEADLOCK if detected else DEMO_COMPLETED
