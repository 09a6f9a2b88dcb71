"""Simulated kernel driver: per-node page cache plus the offloaded lease.

Locking contract, identical on every path that needs both guards:

    lease_guard  before  inode_guard      (never the reverse)

* Cached reads take only ``inode_guard`` and validate the lease under it;
  the lease itself changes only while both guards are held (install,
  escalation, revocation), so a read either completes against the old
  lease epoch before the transition or misses afterwards.
* Writes and cache misses go through the lease phase: check under the
  shared side of ``lease_guard``; on failure re-check under the exclusive
  side and ask the daemon for a lease (the upcall runs with ``lease_guard``
  held exclusively and ``inode_guard`` released). Once past the check the
  operation is covered by ``io_in_flight`` until it completes.
* Revocation acquires ``lease_guard`` exclusively (cutting off new I/O at
  the check), waits for in-flight operations to drain, flushes dirty pages
  under ``inode_guard``, discards the cache, and nulls the lease.

Because the same order holds everywhere, revocation cannot form a cycle
with application I/O.
"""

from __future__ import annotations

import threading
import time
from typing import Callable, Optional, Protocol

from .core import (
    PAGE_SIZE,
    CacheMode,
    FlushFailed,
    Gfi,
    Intent,
    LeaseType,
    LeaseUnavailable,
    Page,
    lease_satisfies,
)
from .locks import KIND_INODE, KIND_LEASE, DeadlockRegistry, LockOrderTracker, Mutex, RwGuard

FLUSH_INTERVAL_S = 1.0

# Fills a missing page: returns (PAGE_SIZE bytes, current file length).
MissFill = Callable[[Gfi, int], tuple[bytes, int]]
# Receives (gfi, [(page index, page bytes)...]) and must not return until
# the pages are safely in the next tier; raises to report failure.
FlushSink = Callable[[Gfi, list[tuple[int, bytes]]], None]


class NeedLease(Exception):
    """Signal from a write-through callback: the daemon-side lease is too
    weak. The kernel op restores its state, drops every guard, lets the
    caller-provided slow path acquire the lease, then retries.

    Acquiring with no kernel guard held is what keeps the optimistic
    revocation path deadlock-free: the revoker may need the inode guard,
    and the manager may be busy with the very grant that triggered the
    revocation.
    """


class LeaseUpcall(Protocol):
    """Daemon-side lease acquisition, invoked from the kernel lease phase."""

    def acquire(self, gfi: Gfi, intent: Intent,
                local_release: Callable[[], None]) -> int:
        """Obtain a lease strong enough for ``intent``.

        ``local_release`` runs after the daemon has marked the acquisition
        pending and before any manager traffic; the kernel uses it to apply
        local release semantics (discard cached pages, null the lease) when
        escalating. Returns the storage-reported file length on success and
        raises LeaseUnavailable (or ManagerUnreachable) on failure.
        """
        ...


class InodeState:
    """Per-open-file kernel state; shared by every handle on the node."""

    __slots__ = (
        "gfi", "lease_guard", "lease_type", "inode_guard", "pages",
        "length", "version", "dirty_since",
        "_io_lock", "_io_cond", "io_in_flight",
    )

    def __init__(self, gfi: Gfi,
                 tracker: Optional[LockOrderTracker] = None,
                 registry: Optional[DeadlockRegistry] = None) -> None:
        self.gfi = gfi
        self.lease_guard = RwGuard(KIND_LEASE, gfi, tracker, registry)
        self.lease_type = LeaseType.NULL
        self.inode_guard = Mutex(KIND_INODE, gfi, tracker, registry)
        self.pages: dict[int, Page] = {}
        self.length = 0
        # Bumped on every page mutation or fill; the optimistic revocation
        # path uses it to detect concurrent cache activity.
        self.version = 0
        self.dirty_since: Optional[float] = None
        self._io_lock = threading.Lock()
        self._io_cond = threading.Condition(self._io_lock)
        self.io_in_flight = 0

    def enter_io(self) -> None:
        with self._io_lock:
            self.io_in_flight += 1

    def exit_io(self) -> None:
        with self._io_lock:
            self.io_in_flight -= 1
            if self.io_in_flight == 0:
                self._io_cond.notify_all()

    def drain_io(self) -> None:
        with self._io_lock:
            while self.io_in_flight:
                self._io_cond.wait()


class KernelCache:
    """All inode state for one node, plus the operations against it."""

    def __init__(self, node_id: int, mode: CacheMode,
                 tracker: Optional[LockOrderTracker] = None,
                 registry: Optional[DeadlockRegistry] = None,
                 flush_interval_s: float = FLUSH_INTERVAL_S) -> None:
        self.node_id = node_id
        self.mode = mode
        self.flush_interval_s = flush_interval_s
        self._tracker = tracker
        self._registry = registry
        self._inodes: dict[Gfi, InodeState] = {}
        self._inodes_lock = threading.Lock()

    def get_inode(self, gfi: Gfi) -> InodeState:
        with self._inodes_lock:
            inode = self._inodes.get(gfi)
            if inode is None:
                inode = InodeState(gfi, self._tracker, self._registry)
                self._inodes[gfi] = inode
            return inode

    def inodes(self) -> list[InodeState]:
        with self._inodes_lock:
            return list(self._inodes.values())

    # -- page helpers (inode_guard held) ------------------------------------

    def _page_for_write(self, inode: InodeState, index: int, offset: int,
                        nbytes: int, miss_fill: Optional[MissFill]) -> Page:
        page = inode.pages.get(index)
        if page is not None:
            return page
        if offset == 0 and nbytes == PAGE_SIZE:
            data = bytearray(PAGE_SIZE)
        else:
            if miss_fill is None:
                data = bytearray(PAGE_SIZE)
            else:
                filled, length = miss_fill(inode.gfi, index)
                data = bytearray(filled)
                inode.length = max(inode.length, length)
        page = Page(inode.gfi, index, data)
        inode.pages[index] = page
        inode.version += 1
        return page

    def _apply_write(self, inode: InodeState, page: Page, offset: int,
                     data: bytes, mark_dirty: bool) -> None:
        page.data[offset:offset + len(data)] = data
        page.version += 1
        inode.version += 1
        if mark_dirty:
            if not page.dirty:
                page.dirty = True
            if inode.dirty_since is None:
                inode.dirty_since = time.monotonic()
        end = page.index * PAGE_SIZE + offset + len(data)
        if end > inode.length:
            inode.length = end

    def drop_pages(self, gfi: Gfi) -> None:
        """Discard every cached page for the file (caller owns no guards)."""
        inode = self.get_inode(gfi)
        with inode.inode_guard:
            if inode.pages:
                inode.pages.clear()
                inode.version += 1
            inode.dirty_since = None

    # -- lease phase ---------------------------------------------------------

    def _ensure_lease(self, inode: InodeState, intent: Intent,
                      upcall: LeaseUpcall) -> None:
        """Pass the lease check, acquiring from the daemon if needed.

        On return the operation is registered in ``io_in_flight`` and no
        guard is held. Raises LeaseUnavailable when the daemon fails.
        """
        inode.lease_guard.acquire_shared()
        if lease_satisfies(inode.lease_type, intent):
            inode.enter_io()
            inode.lease_guard.release_shared()
            return
        inode.lease_guard.release_shared()

        inode.lease_guard.acquire_exclusive()
        try:
            # Double-checked: a racing thread may have acquired it for us.
            if lease_satisfies(inode.lease_type, intent):
                inode.enter_io()
                return

            def local_release() -> None:
                # Escalation applies release semantics to our own cache
                # first: under a read lease nothing is dirty, so this only
                # discards clean pages before ownership is given up.
                with inode.inode_guard:
                    if inode.pages:
                        inode.pages.clear()
                        inode.version += 1
                    inode.dirty_since = None
                inode.lease_type = LeaseType.NULL

            length = upcall.acquire(inode.gfi, intent, local_release)
            inode.lease_type = LeaseType(int(intent))
            with inode.inode_guard:
                inode.length = max(inode.length, length)
            inode.enter_io()
        finally:
            inode.lease_guard.release_exclusive()

    # -- reads ---------------------------------------------------------------

    def read(self, inode: InodeState, index: int, upcall: Optional[LeaseUpcall],
             miss_fill: MissFill,
             slow_acquire: Optional[Callable[[], None]] = None) -> bytes:
        """Return one full page, caching it clean on a miss."""
        if self.mode is CacheMode.WRITE_BACK_LEASE:
            assert upcall is not None
            with inode.inode_guard:
                if lease_satisfies(inode.lease_type, Intent.READ):
                    page = inode.pages.get(index)
                    if page is not None:
                        return bytes(page.data)
            self._ensure_lease(inode, Intent.READ, upcall)
            try:
                with inode.inode_guard:
                    page = inode.pages.get(index)
                    if page is None:
                        data, length = miss_fill(inode.gfi, index)
                        page = Page(inode.gfi, index, bytearray(data))
                        inode.pages[index] = page
                        inode.version += 1
                        inode.length = max(inode.length, length)
                    return bytes(page.data)
            finally:
                inode.exit_io()
        # Write-through and unsafe modes do not consult the offloaded lease;
        # miss_fill carries whatever coordination applies and may demand a
        # lease acquisition, which must happen with no guard held.
        while True:
            with inode.inode_guard:
                page = inode.pages.get(index)
                if page is not None:
                    return bytes(page.data)
                try:
                    data, length = miss_fill(inode.gfi, index)
                except NeedLease:
                    pass
                else:
                    page = Page(inode.gfi, index, bytearray(data))
                    inode.pages[index] = page
                    inode.version += 1
                    inode.length = max(inode.length, length)
                    return bytes(page.data)
            assert slow_acquire is not None
            slow_acquire()

    # -- writes --------------------------------------------------------------

    def write(self, inode: InodeState, index: int, offset: int, data: bytes,
              upcall: Optional[LeaseUpcall], miss_fill: Optional[MissFill],
              write_through: Optional[Callable[[InodeState, int], None]] = None,
              slow_acquire: Optional[Callable[[], None]] = None) -> int:
        """Apply one intra-page write; returns the byte count written."""
        nbytes = len(data)
        if nbytes == 0:
            return 0
        if offset + nbytes > PAGE_SIZE:
            raise ValueError("write crosses page boundary")

        if self.mode is CacheMode.WRITE_BACK_LEASE:
            assert upcall is not None
            self._ensure_lease(inode, Intent.WRITE, upcall)
            try:
                with inode.inode_guard:
                    page = self._page_for_write(inode, index, offset, nbytes, miss_fill)
                    self._apply_write(inode, page, offset, data, mark_dirty=True)
            finally:
                inode.exit_io()
            return nbytes

        if self.mode is CacheMode.WRITE_BACK_UNSAFE:
            with inode.inode_guard:
                page = self._page_for_write(inode, index, offset, nbytes, miss_fill)
                self._apply_write(inode, page, offset, data, mark_dirty=True)
            return nbytes

        # Write-through: update the cache, then push through the daemon while
        # still holding the inode guard; the page is never left dirty because
        # the daemon tier owns the data once the call returns. A weak lease
        # surfaces as NeedLease: the page is rolled back, every guard dropped,
        # and the lease acquired before retrying, so a concurrent local reader
        # never observes an unacknowledged write.
        assert write_through is not None
        while True:
            with inode.inode_guard:
                try:
                    page = self._page_for_write(inode, index, offset, nbytes, miss_fill)
                except NeedLease:
                    page = None
                if page is not None:
                    saved = bytes(page.data)
                    self._apply_write(inode, page, offset, data, mark_dirty=False)
                    try:
                        write_through(inode, index)
                        return nbytes
                    except NeedLease:
                        self._rollback(inode, page, index, saved)
                    except BaseException:
                        self._rollback(inode, page, index, saved)
                        raise
            assert slow_acquire is not None
            slow_acquire()

    @staticmethod
    def _rollback(inode: InodeState, page: Page, index: int, saved: bytes) -> None:
        live = inode.pages.get(index)
        if live is page:
            page.data[:] = saved
            page.version += 1
            inode.version += 1

    # -- flushing ------------------------------------------------------------

    @staticmethod
    def _snapshot_dirty(inode: InodeState) -> list[tuple[int, bytes, int]]:
        return [
            (p.index, bytes(p.data), p.version)
            for p in inode.pages.values()
            if p.dirty
        ]

    @staticmethod
    def _mark_clean(inode: InodeState, flushed: list[tuple[int, bytes, int]]) -> None:
        for index, _, version in flushed:
            page = inode.pages.get(index)
            if page is not None and page.version == version:
                page.dirty = False
        if not any(p.dirty for p in inode.pages.values()):
            inode.dirty_since = None

    def background_flush(self, sink: FlushSink, now: Optional[float] = None) -> int:
        """Push aged dirty pages one tier down; pages stay cached clean.

        The lease is untouched. Per-inode failures leave the dirty bits in
        place, so the next interval retries.
        """
        if now is None:
            now = time.monotonic()
        flushed_total = 0
        for inode in self.inodes():
            since = inode.dirty_since
            if since is None or now - since < self.flush_interval_s:
                continue
            with inode.inode_guard:
                batch = self._snapshot_dirty(inode)
            if not batch:
                continue
            try:
                sink(inode.gfi, [(idx, data) for idx, data, _ in batch])
            except Exception:
                continue
            with inode.inode_guard:
                self._mark_clean(inode, batch)
            flushed_total += len(batch)
        return flushed_total

    def fsync(self, inode: InodeState, sink: FlushSink) -> None:
        """Drain this inode's dirty pages through the daemon to storage.

        Holds the lease guard shared for the duration so a concurrent
        revocation serializes rather than double-flushing a version.
        """
        inode.lease_guard.acquire_shared()
        try:
            with inode.inode_guard:
                batch = self._snapshot_dirty(inode)
            sink(inode.gfi, [(idx, data) for idx, data, _ in batch])
            with inode.inode_guard:
                self._mark_clean(inode, batch)
        finally:
            inode.lease_guard.release_shared()

    # -- revocation ----------------------------------------------------------

    def release_lease(self, inode: InodeState, flush: FlushSink,
                      guard_timeout: Optional[float] = None) -> bool:
        """Revoke the local lease: block, drain, flush, discard, null.

        Returns False when the exclusive guard was not obtained within
        ``guard_timeout`` (the caller re-checks daemon state and retries).
        Raises FlushFailed when dirty pages could not be flushed; the lease
        and the cache are left untouched so the manager can retry.
        """
        if guard_timeout is None:
            inode.lease_guard.acquire_exclusive()
        elif not inode.lease_guard.acquire_exclusive(timeout=guard_timeout):
            return False
        try:
            inode.drain_io()
            with inode.inode_guard:
                if inode.lease_type is LeaseType.NULL and not inode.pages:
                    return True
                batch = self._snapshot_dirty(inode)
                if batch:
                    try:
                        flush(inode.gfi, [(idx, data) for idx, data, _ in batch])
                    except Exception as exc:
                        raise FlushFailed(f"revocation flush failed: {exc}") from exc
                inode.pages.clear()
                inode.version += 1
                inode.dirty_since = None
                inode.lease_type = LeaseType.NULL
            return True
        finally:
            inode.lease_guard.release_exclusive()
