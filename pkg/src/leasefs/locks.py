"""Locking primitives with optional order tracking and deadlock detection.

The cache stack relies on a strict discipline: on any path that needs both,
the per-inode lease guard is acquired before the per-inode data guard and
never after. Guards here can be wired to a LockOrderTracker that records
every acquisition (for post-hoc trace checks) and aborts on an inversion,
and to a DeadlockRegistry that polls the wait-for graph while a thread is
blocked and raises DeadlockDetected when it closes a cycle. Both hooks are
optional; with neither installed the guards reduce to plain locking.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from typing import Optional

from .core import DeadlockDetected, LockOrderViolation

# Guard kinds used by the order tracker. The only enforced rule is that a
# LEASE guard may not be acquired while the same thread holds any INODE guard.
KIND_LEASE = "lease"
KIND_INODE = "inode"
KIND_OCC = "occ"

_POLL_S = 0.02


class LockOrderTracker:
    """Records guard acquisitions per thread and rejects lease-after-inode.

    The trace is a flat list of (thread_name, event, kind, key) tuples where
    event is "acquire" or "release"; tests read it to assert the ordering
    invariant over whole scheduled runs.
    """

    def __init__(self, record_trace: bool = True) -> None:
        self._local = threading.local()
        self._trace_lock = threading.Lock()
        self._record = record_trace
        self.trace: list[tuple[str, str, str, object]] = []

    def _held(self) -> list[tuple[str, object]]:
        held = getattr(self._local, "held", None)
        if held is None:
            held = []
            self._local.held = held
        return held

    def on_acquire(self, kind: str, key: object) -> None:
        held = self._held()
        if kind == KIND_LEASE:
            for hkind, _ in held:
                if hkind == KIND_INODE:
                    raise LockOrderViolation(
                        f"lease guard {key} requested while holding an inode guard"
                    )
        held.append((kind, key))
        if self._record:
            with self._trace_lock:
                self.trace.append((threading.current_thread().name, "acquire", kind, key))

    def on_release(self, kind: str, key: object) -> None:
        held = self._held()
        try:
            held.remove((kind, key))
        except ValueError:
            pass
        if self._record:
            with self._trace_lock:
                self.trace.append((threading.current_thread().name, "release", kind, key))


class DeadlockRegistry:
    """Wait-for graph over instrumented guards.

    While a thread blocks on a guard it registers a waits-for edge; holders
    are tracked per guard. A blocked thread periodically asks the registry
    whether following holder edges from the guard it waits on leads back to
    itself; if so the acquisition raises DeadlockDetected instead of waiting
    forever, and the unwinding thread releases whatever it holds.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._holders: dict[int, set[int]] = {}
        self._waiting: dict[int, int] = {}
        self.detected = threading.Event()

    def note_hold(self, guard_id: int, thread_id: int) -> None:
        with self._lock:
            self._holders.setdefault(guard_id, set()).add(thread_id)

    def note_unhold(self, guard_id: int, thread_id: int) -> None:
        with self._lock:
            holders = self._holders.get(guard_id)
            if holders:
                holders.discard(thread_id)
                if not holders:
                    del self._holders[guard_id]

    def note_wait(self, thread_id: int, guard_id: int) -> None:
        with self._lock:
            self._waiting[thread_id] = guard_id

    def note_unwait(self, thread_id: int) -> None:
        with self._lock:
            self._waiting.pop(thread_id, None)

    def cycle_from(self, thread_id: int) -> bool:
        with self._lock:
            seen: set[int] = set()
            frontier = [thread_id]
            while frontier:
                tid = frontier.pop()
                guard = self._waiting.get(tid)
                if guard is None:
                    continue
                for holder in self._holders.get(guard, ()):
                    if holder == thread_id:
                        return True
                    if holder not in seen:
                        seen.add(holder)
                        frontier.append(holder)
            return False


class _GuardBase:
    __slots__ = ("_kind", "_key", "_tracker", "_registry")

    def __init__(self, kind: str, key: object,
                 tracker: Optional[LockOrderTracker],
                 registry: Optional[DeadlockRegistry]) -> None:
        self._kind = kind
        self._key = key
        self._tracker = tracker
        self._registry = registry

    def _wait(self, cond: threading.Condition, deadline: Optional[float] = None) -> bool:
        """One blocking step; polls for deadlock when a registry is wired.

        Returns False once ``deadline`` (a monotonic timestamp) has passed.
        """
        registry = self._registry
        if registry is None and deadline is None:
            cond.wait()
            return True
        remaining = None
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return False
        step = _POLL_S if registry is not None else remaining
        if remaining is not None and (step is None or remaining < step):
            step = remaining
        if registry is None:
            cond.wait(step)
            return deadline is None or time.monotonic() < deadline
        me = threading.get_ident()
        registry.note_wait(me, id(self))
        try:
            cond.wait(step)
            if registry.cycle_from(me):
                registry.detected.set()
                raise DeadlockDetected(
                    f"wait-for cycle at {self._kind} guard {self._key}"
                )
        finally:
            registry.note_unwait(me)
        return deadline is None or time.monotonic() < deadline


class Mutex(_GuardBase):
    """Plain mutual exclusion with the optional tracker/registry hooks."""

    __slots__ = ("_cond", "_owner")

    def __init__(self, kind: str = KIND_INODE, key: object = None,
                 tracker: Optional[LockOrderTracker] = None,
                 registry: Optional[DeadlockRegistry] = None) -> None:
        super().__init__(kind, key, tracker, registry)
        self._cond = threading.Condition(threading.Lock())
        self._owner: Optional[int] = None

    def acquire(self) -> None:
        if self._tracker is not None:
            self._tracker.on_acquire(self._kind, self._key)
        try:
            with self._cond:
                while self._owner is not None:
                    self._wait(self._cond)
                self._owner = threading.get_ident()
            if self._registry is not None:
                self._registry.note_hold(id(self), self._owner)
        except BaseException:
            if self._tracker is not None:
                self._tracker.on_release(self._kind, self._key)
            raise

    def release(self) -> None:
        me = threading.get_ident()
        with self._cond:
            assert self._owner == me, "mutex released by non-owner"
            self._owner = None
            self._cond.notify()
        if self._registry is not None:
            self._registry.note_unhold(id(self), me)
        if self._tracker is not None:
            self._tracker.on_release(self._kind, self._key)

    def __enter__(self) -> "Mutex":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


class RwGuard(_GuardBase):
    """Reader-writer guard, writer-preferring.

    Once a writer is waiting, new shared acquisitions block; this is what
    lets a revocation cut off new I/O at the lease check instead of starving
    behind a stream of readers. No upgrade path exists: callers drop the
    shared hold and re-acquire exclusively, then re-check state.
    """

    __slots__ = ("_cond", "_readers", "_writer", "_writers_waiting")

    def __init__(self, kind: str = KIND_LEASE, key: object = None,
                 tracker: Optional[LockOrderTracker] = None,
                 registry: Optional[DeadlockRegistry] = None) -> None:
        super().__init__(kind, key, tracker, registry)
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer: Optional[int] = None
        self._writers_waiting = 0

    def acquire_shared(self) -> None:
        if self._tracker is not None:
            self._tracker.on_acquire(self._kind, self._key)
        try:
            with self._cond:
                while self._writer is not None or self._writers_waiting:
                    self._wait(self._cond)
                self._readers += 1
            if self._registry is not None:
                self._registry.note_hold(id(self), threading.get_ident())
        except BaseException:
            if self._tracker is not None:
                self._tracker.on_release(self._kind, self._key)
            raise

    def release_shared(self) -> None:
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()
        if self._registry is not None:
            self._registry.note_unhold(id(self), threading.get_ident())
        if self._tracker is not None:
            self._tracker.on_release(self._kind, self._key)

    def acquire_exclusive(self, timeout: Optional[float] = None) -> bool:
        if self._tracker is not None:
            self._tracker.on_acquire(self._kind, self._key)
        me = threading.get_ident()
        deadline = None if timeout is None else time.monotonic() + timeout
        try:
            with self._cond:
                self._writers_waiting += 1
                try:
                    while self._readers or self._writer is not None:
                        if not self._wait(self._cond, deadline):
                            if self._tracker is not None:
                                self._tracker.on_release(self._kind, self._key)
                            return False
                finally:
                    self._writers_waiting -= 1
                self._writer = me
            if self._registry is not None:
                self._registry.note_hold(id(self), me)
            return True
        except BaseException:
            if self._tracker is not None:
                self._tracker.on_release(self._kind, self._key)
            raise

    def release_exclusive(self) -> None:
        me = threading.get_ident()
        with self._cond:
            assert self._writer == me, "exclusive guard released by non-owner"
            self._writer = None
            self._cond.notify_all()
        if self._registry is not None:
            self._registry.note_unhold(id(self), me)
        if self._tracker is not None:
            self._tracker.on_release(self._kind, self._key)

    class _Shared:
        __slots__ = ("_g",)

        def __init__(self, g: "RwGuard") -> None:
            self._g = g

        def __enter__(self):
            self._g.acquire_shared()
            return self

        def __exit__(self, *exc) -> None:
            self._g.release_shared()

    class _Exclusive:
        __slots__ = ("_g",)

        def __init__(self, g: "RwGuard") -> None:
            self._g = g

        def __enter__(self):
            self._g.acquire_exclusive()
            return self

        def __exit__(self, *exc) -> None:
            self._g.release_exclusive()

    def shared(self) -> "RwGuard._Shared":
        return RwGuard._Shared(self)

    def exclusive(self) -> "RwGuard._Exclusive":
        return RwGuard._Exclusive(self)


class FifoLock:
    """Mutual exclusion handing the lock to waiters strictly in arrival order.

    threading.Lock makes no fairness promise; the per-file grant slot needs
    one, otherwise a steady stream of grants can starve an early requester.
    Ownership transfers directly to the head waiter on release.
    """

    def __init__(self) -> None:
        self._outer = threading.Lock()
        self._locked = False
        self._waiters: deque[threading.Event] = deque()

    def acquire(self) -> None:
        with self._outer:
            if not self._locked and not self._waiters:
                self._locked = True
                return
            gate = threading.Event()
            self._waiters.append(gate)
        gate.wait()

    def release(self) -> None:
        with self._outer:
            assert self._locked, "FifoLock released while unlocked"
            if self._waiters:
                # Baton pass: the lock stays held, ownership moves.
                self._waiters.popleft().set()
            else:
                self._locked = False

    def __enter__(self) -> "FifoLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()
