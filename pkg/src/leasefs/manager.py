"""Lease manager: per-file grant state machine, revocation fan-out, grant log.

Grant handling for one file runs strictly FIFO: a request claims the file's
slot, revokes current owners if they conflict, mutates the lease record, and
only then passes the slot on. Requests for distinct files proceed fully in
parallel. Revocations triggered by one grant fan out concurrently and the
grant completes only after every owner acknowledged, which is what keeps
"at most one exclusive writer, or readers only" true at every instant.

The append-only grant log doubles as the safety record: the checker rebuilds
per-file ownership intervals from it and asserts the exclusivity invariant.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .core import (
    Gfi,
    GrantLease,
    GrantLeaseReply,
    Intent,
    LeaseType,
    NodeId,
    RemoveOwner,
    RemoveOwnerReply,
    Revoke,
    RevokeReply,
    TransportError,
    WireMessage,
)
from .locks import FifoLock
from .transport import RpcClient

RETRY_LIMIT = 3
RETRY_BACKOFF_S = 0.1

EVENT_GRANT = "Grant"
EVENT_REVOKE = "Revoke"
EVENT_REMOVE = "RemoveOwner"


@dataclass(frozen=True)
class GrantLogEntry:
    sequence: int
    event: str
    gfi: Gfi
    node: NodeId
    lease_type: LeaseType

    def line(self) -> str:
        return f"{self.sequence} {self.event} {self.gfi} {self.node} {self.lease_type.name}"


@dataclass
class ManagerLease:
    lease_type: LeaseType = LeaseType.NULL
    owners: set = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.owners is None:
            self.owners = set()


class _FileSlot:
    __slots__ = ("fifo", "latch", "lease")

    def __init__(self) -> None:
        self.fifo = FifoLock()
        self.latch = threading.Lock()
        self.lease = ManagerLease()


# Sends one revocation to a node's daemon; True means the node acknowledged
# that the lease is released and dirty data reached storage.
RevokeSender = Callable[[NodeId, Gfi, int], bool]


class LeaseManager:
    def __init__(self, send_revoke: Optional[RevokeSender] = None,
                 retry_limit: int = RETRY_LIMIT,
                 retry_backoff_s: float = RETRY_BACKOFF_S) -> None:
        self._send_revoke = send_revoke or (lambda node, gfi, barrier: True)
        self._retry_limit = retry_limit
        self._backoff = retry_backoff_s
        self._slots: dict[Gfi, _FileSlot] = {}
        self._slots_lock = threading.Lock()
        self._log: list[GrantLogEntry] = []
        self._log_lock = threading.Lock()
        self._seq = 0

    # -- log ----------------------------------------------------------------

    def _append(self, event: str, gfi: Gfi, node: NodeId, lease_type: LeaseType) -> int:
        with self._log_lock:
            self._seq += 1
            self._log.append(GrantLogEntry(self._seq, event, gfi, node, lease_type))
            return self._seq

    def _barrier(self) -> int:
        with self._log_lock:
            return self._seq

    def grant_log(self) -> list[GrantLogEntry]:
        with self._log_lock:
            return list(self._log)

    def dump_grant_log(self) -> str:
        return "".join(entry.line() + "\n" for entry in self.grant_log())

    # -- state --------------------------------------------------------------

    def _slot(self, gfi: Gfi) -> _FileSlot:
        with self._slots_lock:
            slot = self._slots.get(gfi)
            if slot is None:
                slot = self._slots[gfi] = _FileSlot()
            return slot

    def lease_view(self, gfi: Gfi) -> tuple[LeaseType, frozenset]:
        slot = self._slot(gfi)
        with slot.latch:
            return slot.lease.lease_type, frozenset(slot.lease.owners)

    # -- operations ----------------------------------------------------------

    def grant_lease(self, gfi: Gfi, intent: Intent, node: NodeId) -> tuple[bool, int]:
        """Serve one grant request; blocks until grantable or failed.

        Returns (granted, log sequence of the grant). On a failed revocation
        the lease record is left as it was and (False, 0) comes back.
        """
        slot = self._slot(gfi)
        with slot.fifo:
            with slot.latch:
                lease = slot.lease
                if not lease.owners:
                    revokees: list[NodeId] = []
                elif lease.lease_type is LeaseType.READ and intent is Intent.READ:
                    revokees = []
                else:
                    revokees = sorted(lease.owners)
            if revokees and not self._revoke_all(gfi, revokees):
                return False, 0
            with slot.latch:
                lease = slot.lease
                if revokees or not lease.owners:
                    lease.owners = {node}
                    lease.lease_type = LeaseType(int(intent))
                else:
                    lease.owners.add(node)
                    lease.lease_type = LeaseType.READ
            seq = self._append(EVENT_GRANT, gfi, node, LeaseType(int(intent)))
            return True, seq

    def _revoke_all(self, gfi: Gfi, nodes: list[NodeId]) -> bool:
        if len(nodes) == 1:
            return self.revoke_owner(gfi, nodes[0])
        results: dict[NodeId, bool] = {}
        threads = []
        for node in nodes:
            t = threading.Thread(
                target=lambda n=node: results.__setitem__(n, self.revoke_owner(gfi, n)),
                name=f"revoke-{gfi}-{node}",
                daemon=True,
            )
            threads.append(t)
            t.start()
        for t in threads:
            t.join()
        return all(results.get(n, False) for n in nodes)

    def revoke_owner(self, gfi: Gfi, node: NodeId) -> bool:
        """Revoke one owner's lease, retrying with backoff; logs on success."""
        slot = self._slot(gfi)
        for attempt in range(self._retry_limit):
            barrier = self._barrier()
            try:
                ok = self._send_revoke(node, gfi, barrier)
            except Exception:
                ok = False
            if ok:
                with slot.latch:
                    slot.lease.owners.discard(node)
                    if not slot.lease.owners:
                        slot.lease.lease_type = LeaseType.NULL
                self._append(EVENT_REVOKE, gfi, node, LeaseType.NULL)
                return True
            if attempt + 1 < self._retry_limit:
                time.sleep(self._backoff * (2 ** attempt))
        return False

    def remove_owner(self, gfi: Gfi, node: NodeId) -> int:
        """Drop a node from the owner set (idempotent).

        Deliberately not serialized through the grant slot: a client calls
        this while it is about to wait for its own escalated grant, and the
        slot may be busy revoking on behalf of another request.
        """
        slot = self._slot(gfi)
        with slot.latch:
            slot.lease.owners.discard(node)
            if not slot.lease.owners:
                slot.lease.lease_type = LeaseType.NULL
        return self._append(EVENT_REMOVE, gfi, node, LeaseType.NULL)

    # -- RPC surface ----------------------------------------------------------

    def handle(self, msg: WireMessage) -> WireMessage:
        if isinstance(msg, GrantLease):
            granted, seq = self.grant_lease(msg.gfi, msg.intent, msg.node)
            return GrantLeaseReply(msg.req_id, granted, seq)
        if isinstance(msg, RemoveOwner):
            seq = self.remove_owner(msg.gfi, msg.node)
            return RemoveOwnerReply(msg.req_id, seq)
        raise TransportError(f"unexpected message {type(msg).__name__}")


class RpcRevokeSender:
    """Revocation transport: one pooled client per registered node daemon."""

    def __init__(self, timeout: Optional[float] = 30.0) -> None:
        self._clients: dict[NodeId, RpcClient] = {}
        self._lock = threading.Lock()
        self._timeout = timeout

    def register(self, node: NodeId, client: RpcClient) -> None:
        with self._lock:
            self._clients[node] = client

    def __call__(self, node: NodeId, gfi: Gfi, barrier: int) -> bool:
        with self._lock:
            client = self._clients.get(node)
        if client is None:
            raise TransportError(f"no revoke route to node {node}")
        reply = client.call(Revoke(0, gfi, barrier), timeout=self._timeout)
        if not isinstance(reply, RevokeReply):
            raise TransportError("unexpected revoke reply type")
        return reply.ok

    def close(self) -> None:
        with self._lock:
            clients = list(self._clients.values())
            self._clients.clear()
        for client in clients:
            client.close()
