"""Userspace daemon for one client node.

Owns the fixed-capacity LRU buffer cache between the kernel tier and
storage, the manager-facing lease client (acquisition, escalation and the
revocation service), batch storage RPCs with readahead, and the
write-through fallback used when the manager is unreachable past the lease
soft timeout.

Coherence bookkeeping, all per file:

* ``pending`` counts in-flight lease acquisitions. A revocation arriving
  while an acquisition is outstanding is acknowledged immediately (there is
  nothing to flush: ownership was surrendered before asking) and leaves two
  marks behind: the revocation barrier sequence and a stale-cache flag.
* A grant whose log sequence does not exceed the recorded barrier was
  issued before the revocation and is discarded; the acquisition loop
  simply asks again.
* When a grant installs after a short-circuited revocation, both cache
  tiers for that file are purged first, because their contents predate
  whatever the intervening owner wrote.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional

from .core import (
    PAGE_SIZE,
    CacheMode,
    FlushFailed,
    Gfi,
    RevokeLivelock,
    GrantLease,
    GrantLeaseReply,
    Intent,
    LeaseType,
    LeaseUnavailable,
    ManagerUnreachable,
    NodeId,
    RemoveOwner,
    Revoke,
    RevokeReply,
    StorageError,
    TransportError,
    WireMessage,
    lease_satisfies,
)
from .kcache import KernelCache
from .locks import KIND_OCC, DeadlockRegistry, RwGuard
from .storage import StorageRouter
from .transport import RpcClient


@dataclass
class DaemonConfig:
    # Paper-scale default is 1 GiB per instance; tests shrink this hard.
    bc_capacity_bytes: int = 1 << 30
    soft_timeout_s: float = 30.0
    readahead_pages: int = 8
    probe_interval_s: float = 1.0
    rpc_timeout_s: float = 30.0
    retry_backoff_s: float = 0.02


class NodeMetrics:
    """Counters the benchmark and the acceptance suite assert against."""

    __slots__ = ("_lock", "round_trips", "lease_acquisitions", "revocations", "occ_aborts")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.round_trips = 0
        self.lease_acquisitions = 0
        self.revocations = 0
        self.occ_aborts = 0

    def bump(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {
                "round_trips": self.round_trips,
                "lease_acquisitions": self.lease_acquisitions,
                "revocations": self.revocations,
                "occ_aborts": self.occ_aborts,
            }


class _BcEntry:
    __slots__ = ("data", "dirty", "seq")

    def __init__(self, data: bytes, dirty: bool, seq: int) -> None:
        self.data = data
        self.dirty = dirty
        self.seq = seq


class BufferCache:
    """Fixed-budget LRU page cache; dirty entries are flushed before eviction.

    ``flush_one`` writes a single evicted page to storage and raises
    StorageError on failure, in which case the victim stays resident and
    the insertion that triggered the eviction is rejected.
    """

    def __init__(self, capacity_bytes: int,
                 flush_one: Callable[[Gfi, int, bytes], None]) -> None:
        if capacity_bytes < PAGE_SIZE:
            raise ValueError("buffer cache smaller than one page")
        self.capacity_bytes = capacity_bytes
        self._flush_one = flush_one
        self._lock = threading.Lock()
        self._entries: "OrderedDict[tuple[Gfi, int], _BcEntry]" = OrderedDict()
        self._seq = 0

    @property
    def resident_bytes(self) -> int:
        with self._lock:
            return len(self._entries) * PAGE_SIZE

    def get(self, gfi: Gfi, index: int) -> Optional[bytes]:
        key = (gfi, index)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            self._entries.move_to_end(key)
            return entry.data

    def put(self, gfi: Gfi, index: int, data: bytes, dirty: bool) -> list[tuple[Gfi, int]]:
        """Insert or overwrite; returns keys evicted to stay in budget."""
        if len(data) != PAGE_SIZE:
            raise ValueError("buffer cache stores whole pages only")
        key = (gfi, index)
        evicted: list[tuple[Gfi, int]] = []
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                entry.data = bytes(data)
                entry.dirty = entry.dirty or dirty
                self._seq += 1
                entry.seq = self._seq
                self._entries.move_to_end(key)
                return evicted
            self._seq += 1
            self._entries[key] = _BcEntry(bytes(data), dirty, self._seq)
            while len(self._entries) * PAGE_SIZE > self.capacity_bytes:
                victim_key = next(iter(self._entries))
                victim = self._entries[victim_key]
                if victim.dirty:
                    try:
                        self._flush_one(victim_key[0], victim_key[1], victim.data)
                    except StorageError:
                        del self._entries[key]
                        raise
                del self._entries[victim_key]
                evicted.append(victim_key)
        return evicted

    def dirty_for(self, gfi: Gfi) -> list[tuple[int, bytes, int]]:
        with self._lock:
            return [
                (key[1], entry.data, entry.seq)
                for key, entry in self._entries.items()
                if key[0] == gfi and entry.dirty
            ]

    def mark_clean(self, gfi: Gfi, flushed: list[tuple[int, bytes, int]]) -> None:
        with self._lock:
            for index, _, seq in flushed:
                entry = self._entries.get((gfi, index))
                if entry is not None and entry.seq == seq:
                    entry.dirty = False

    def drop_clean(self, gfi: Gfi) -> int:
        """Drop every clean entry for the file; dirty entries survive."""
        with self._lock:
            doomed = [
                key for key, entry in self._entries.items()
                if key[0] == gfi and not entry.dirty
            ]
            for key in doomed:
                del self._entries[key]
            return len(doomed)

    def has_dirty(self, gfi: Gfi) -> bool:
        with self._lock:
            return any(
                key[0] == gfi and entry.dirty for key, entry in self._entries.items()
            )


class LeaseEntry:
    __slots__ = (
        "type", "pending", "revoking", "last_revoke_seq", "cache_stale",
        "install_seq", "granted_at", "length_hint", "fallback", "last_probe",
        "acquire_mutex", "occ_guard",
    )

    def __init__(self, registry: Optional[DeadlockRegistry]) -> None:
        self.type = LeaseType.NULL
        self.pending = 0
        # Non-zero while a revocation is between releasing the kernel tier
        # and nulling this record; the record reads stronger than what the
        # node actually holds in that window, so acquisitions must not
        # trust it and go to the manager instead.
        self.revoking = 0
        self.last_revoke_seq = 0
        self.cache_stale = False
        self.install_seq = 0
        self.granted_at: Optional[float] = None
        self.length_hint = 0
        self.fallback = False
        self.last_probe = 0.0
        self.acquire_mutex = threading.Lock()
        self.occ_guard = RwGuard(KIND_OCC, None, None, registry)


class LeaseClientTable:
    """Daemon-side mirror of lease state, keyed by file."""

    def __init__(self, registry: Optional[DeadlockRegistry] = None) -> None:
        self.lock = threading.Lock()
        self._entries: dict[Gfi, LeaseEntry] = {}
        self._registry = registry

    def entry(self, gfi: Gfi) -> LeaseEntry:
        with self.lock:
            entry = self._entries.get(gfi)
            if entry is None:
                entry = self._entries[gfi] = LeaseEntry(self._registry)
            return entry


# Invoked when a write-through node must give up its lease; returns True
# once dirty data reached storage and the lease record is nulled.
OccRevoker = Callable[[Gfi, "LeaseEntry"], bool]


class Daemon:
    def __init__(self, node_id: NodeId, mode: CacheMode,
                 manager: Optional[RpcClient], storage: StorageRouter,
                 config: Optional[DaemonConfig] = None,
                 metrics: Optional[NodeMetrics] = None,
                 registry: Optional[DeadlockRegistry] = None) -> None:
        self.node_id = node_id
        self.mode = mode
        self.config = config or DaemonConfig()
        self.metrics = metrics or NodeMetrics()
        self._manager = manager
        self._storage = storage
        self.table = LeaseClientTable(registry)
        self.bc = BufferCache(self.config.bc_capacity_bytes, self._flush_single_page)
        self._kcache: Optional[KernelCache] = None
        self._occ_revoker: Optional[OccRevoker] = None
        self._last_miss: dict[Gfi, int] = {}
        self._miss_lock = threading.Lock()
        self._fallback: set[Gfi] = set()

    def bind_kernel(self, kcache: KernelCache,
                    occ_revoker: Optional[OccRevoker] = None) -> None:
        self._kcache = kcache
        self._occ_revoker = occ_revoker

    # -- storage plumbing ----------------------------------------------------

    def _flush_single_page(self, gfi: Gfi, index: int, data: bytes) -> None:
        self._storage.write_pages(gfi, [(index, data)])

    def probe_length(self, gfi: Gfi) -> int:
        _, length = self._storage.read_pages(gfi, [])
        return length

    def read_direct(self, gfi: Gfi, indices: list[int]) -> tuple[list[bytes], int]:
        return self._storage.read_pages(gfi, indices)

    def write_direct(self, gfi: Gfi, pages: list[tuple[int, bytes]]) -> int:
        return self._storage.write_pages(gfi, pages)

    # -- buffer cache paths ----------------------------------------------------

    def read_miss(self, gfi: Gfi, index: int, count: bool = True) -> tuple[bytes, int]:
        """Serve a kernel cache miss: buffer cache first, then batched RPC."""
        if count:
            self.metrics.bump("round_trips")
        cached = self.bc.get(gfi, index)
        if cached is not None:
            return cached, 0
        with self._miss_lock:
            sequential = self._last_miss.get(gfi) == index - 1
            self._last_miss[gfi] = index
        window = self.config.readahead_pages if sequential else 1
        indices = list(range(index, index + window))
        blocks, length = self._storage.read_pages(gfi, indices)
        # Insert trailing readahead first so the demanded page ends up MRU.
        for i in range(len(indices) - 1, -1, -1):
            try:
                self.bc.put(gfi, indices[i], blocks[i], dirty=False)
            except StorageError:
                break
        return blocks[0], length

    def stage_dirty(self, gfi: Gfi, pages: list[tuple[int, bytes]]) -> None:
        """Land kernel-tier pages in the buffer cache, marked dirty."""
        for index, data in pages:
            self.bc.put(gfi, index, data, dirty=True)

    def flush_gfi_to_storage(self, gfi: Gfi) -> int:
        """Batch every dirty buffer-cache page for the file into one RPC."""
        batch = self.bc.dirty_for(gfi)
        if not batch:
            return 0
        self._storage.write_pages(gfi, [(idx, data) for idx, data, _ in batch])
        self.bc.mark_clean(gfi, batch)
        return len(batch)

    # Flush sinks handed to the kernel tier.

    def background_sink(self, gfi: Gfi, pages: list[tuple[int, bytes]]) -> None:
        self.stage_dirty(gfi, pages)

    def fsync_sink(self, gfi: Gfi, pages: list[tuple[int, bytes]]) -> None:
        self.metrics.bump("round_trips")
        self.stage_dirty(gfi, pages)
        self.flush_gfi_to_storage(gfi)

    def _revoke_sink(self, gfi: Gfi, pages: list[tuple[int, bytes]]) -> None:
        self.stage_dirty(gfi, pages)

    def purge_caches(self, gfi: Gfi) -> None:
        """Drop both cache tiers for a file whose contents may predate the
        latest revocation. Dirty data is staged out first; there normally is
        none by the time this runs."""
        if self.bc.has_dirty(gfi):
            self.flush_gfi_to_storage(gfi)
        if self._kcache is not None:
            self._kcache.drop_pages(gfi)
        self.bc.drop_clean(gfi)

    # -- lease client ----------------------------------------------------------

    def acquire(self, gfi: Gfi, intent: Intent,
                local_release: Callable[[], None],
                count: bool = True,
                soft_timeout_s: Optional[float] = None) -> int:
        """Obtain a lease for ``intent``; returns the storage file length.

        Raises ManagerUnreachable when the manager stayed silent past the
        soft timeout and plain LeaseUnavailable when it refused the grant.
        """
        if count:
            self.metrics.bump("round_trips")
        if self._manager is None:
            raise ManagerUnreachable("node has no manager endpoint")
        entry = self.table.entry(gfi)
        with entry.acquire_mutex:
            with self.table.lock:
                if not entry.revoking and lease_satisfies(entry.type, intent):
                    return entry.length_hint
                # During a revocation the record is stale-strong: skip the
                # release bookkeeping (the revocation owns it) and request
                # a fresh grant, which queues behind the revoking grant.
                need_remove = (not entry.revoking
                               and entry.type is LeaseType.READ
                               and intent is Intent.WRITE)
                if need_remove:
                    entry.type = LeaseType.NULL
                entry.pending += 1
            try:
                local_release()
                deadline = time.monotonic() + (
                    self.config.soft_timeout_s if soft_timeout_s is None else soft_timeout_s
                )
                if need_remove:
                    self._rpc_until(
                        RemoveOwner(0, gfi, self.node_id), deadline,
                        "RemoveOwner",
                    )
                while True:
                    reply = self._rpc_until(
                        GrantLease(0, gfi, intent, self.node_id), deadline,
                        "GrantLease",
                    )
                    assert isinstance(reply, GrantLeaseReply)
                    if not reply.granted:
                        raise LeaseUnavailable(
                            f"manager refused {intent.name} lease for {gfi}"
                        )
                    with self.table.lock:
                        if reply.seq <= entry.last_revoke_seq:
                            continue
                        need_purge = entry.cache_stale
                        entry.cache_stale = False
                    if need_purge:
                        self.purge_caches(gfi)
                    length = self.probe_length(gfi)
                    with self.table.lock:
                        if reply.seq <= entry.last_revoke_seq:
                            continue
                        entry.type = LeaseType(int(intent))
                        entry.install_seq = reply.seq
                        entry.granted_at = time.monotonic()
                        entry.length_hint = length
                    self.metrics.bump("lease_acquisitions")
                    return length
            finally:
                with self.table.lock:
                    entry.pending -= 1

    def _rpc_until(self, msg: WireMessage, deadline: float, what: str) -> WireMessage:
        backoff = self.config.retry_backoff_s
        while True:
            budget = deadline - time.monotonic()
            if budget <= 0:
                raise ManagerUnreachable(f"{what} timed out")
            try:
                return self._manager.call(
                    msg, timeout=min(budget, self.config.rpc_timeout_s)
                )
            except TransportError:
                if time.monotonic() + backoff >= deadline:
                    raise ManagerUnreachable(f"{what}: manager unreachable") from None
                time.sleep(backoff)
                backoff = min(backoff * 2, 0.5)

    # -- revocation service ------------------------------------------------------

    def handle_revoke(self, gfi: Gfi, barrier: int) -> bool:
        self.metrics.bump("revocations")
        entry = self.table.entry(gfi)
        while True:
            with self.table.lock:
                if barrier > entry.last_revoke_seq:
                    entry.last_revoke_seq = barrier
                if entry.type is LeaseType.NULL:
                    if entry.pending:
                        # The acquirer holds nothing yet: its grant, if
                        # already issued, now compares stale against the
                        # barrier and will be re-requested, with both cache
                        # tiers purged before anything installs. Acking
                        # here is what keeps a revocation from waiting on
                        # the manager through the very grant that caused it.
                        entry.cache_stale = True
                        return True
                    if not entry.fallback:
                        return True
                # An installed lease always goes through the full release,
                # even mid-acquisition: the installer only has local work
                # left, so waiting for the kernel guard is bounded.
            if self.mode is CacheMode.WRITE_BACK_LEASE:
                assert self._kcache is not None
                inode = self._kcache.get_inode(gfi)
                with self.table.lock:
                    entry.revoking += 1
                    fence = entry.last_revoke_seq
                try:
                    done = self._kcache.release_lease(
                        inode, self._revoke_sink, guard_timeout=0.05
                    )
                    if not done:
                        # Could not take the lease guard yet; an acquisition
                        # may have started meanwhile, so re-read the table.
                        continue
                    self.flush_gfi_to_storage(gfi)
                    self.bc.drop_clean(gfi)
                    with self.table.lock:
                        # A grant sequenced after this revocation may have
                        # installed while the flush ran; it is fresher than
                        # what was just revoked and must survive.
                        if entry.install_seq <= fence:
                            entry.type = LeaseType.NULL
                        self._fallback.discard(gfi)
                        entry.fallback = False
                    return True
                except (FlushFailed, StorageError):
                    return False
                finally:
                    with self.table.lock:
                        entry.revoking -= 1
            if self.mode is CacheMode.WRITE_THROUGH_OCC:
                assert self._occ_revoker is not None
                try:
                    return self._occ_revoker(gfi, entry)
                except (RevokeLivelock, StorageError):
                    return False
            return True

    def handle_revoke_frame(self, msg: WireMessage) -> WireMessage:
        if not isinstance(msg, Revoke):
            raise TransportError(f"unexpected message {type(msg).__name__}")
        ok = self.handle_revoke(msg.gfi, msg.barrier)
        return RevokeReply(msg.req_id, ok)

    # -- write-through fallback ----------------------------------------------------

    def fallback_active(self, gfi: Gfi) -> bool:
        return gfi in self._fallback

    def maybe_enter_fallback(self, gfi: Gfi) -> bool:
        """Switch the file to direct write-through after a failed acquisition.

        Only applies once the lease (if any) has outlived its soft timeout;
        a fresher lease keeps the cached path. Local dirty state is pushed
        to storage first so bypass reads observe this node's own writes.
        """
        entry = self.table.entry(gfi)
        now = time.monotonic()
        with self.table.lock:
            fresh = (
                entry.granted_at is not None
                and now - entry.granted_at <= self.config.soft_timeout_s
            )
            if fresh:
                return False
            entry.fallback = True
            entry.type = LeaseType.NULL
            entry.last_probe = now
            self._fallback.add(gfi)
        try:
            if self._kcache is not None:
                inode = self._kcache.get_inode(gfi)
                with inode.inode_guard:
                    batch = [
                        (p.index, bytes(p.data)) for p in inode.pages.values() if p.dirty
                    ]
                if batch:
                    self.stage_dirty(gfi, batch)
            self.flush_gfi_to_storage(gfi)
            self.purge_caches(gfi)
        except StorageError:
            pass
        return True

    def try_restore(self, gfi: Gfi, intent: Intent) -> bool:
        """Probe the manager from fallback; back on the leased path if granted."""
        entry = self.table.entry(gfi)
        now = time.monotonic()
        with self.table.lock:
            if now - entry.last_probe < self.config.probe_interval_s:
                return False
            entry.last_probe = now
        try:
            self.acquire(gfi, intent, lambda: None, count=False,
                         soft_timeout_s=min(0.25, self.config.soft_timeout_s))
        except LeaseUnavailable:
            return False
        with self.table.lock:
            entry.fallback = False
            self._fallback.discard(gfi)
        return True
