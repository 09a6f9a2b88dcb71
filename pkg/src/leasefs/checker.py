"""Strong-consistency oracle and deterministic concurrency test rig.

Per-page linearizability: each (file, page index) is treated as a register
initialised to the zero page. A recorded history passes if some total order
of its operations respects real time (an operation that finished before
another started must precede it) and every read returns the digest of the
latest preceding write. The search is exhaustive over the real-time-minimal
candidates at each step, with memoisation on (linearised set, register
value); small histories only, by design, because the point of this checker
is to be trustworthy rather than fast.

The scheduler runs scripted steps on named worker threads. Consecutive
steps sharing a barrier tag start simultaneously and are awaited together;
untagged steps run one at a time. That is enough to reproduce the classic
stale-read and revocation races deterministically and to randomise
interleavings for the safety suite.
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .core import (
    PAGE_SIZE,
    Gfi,
    HistoryTooLarge,
    LeaseType,
    MalformedLog,
    ScenarioStuck,
)

H_MAX = 20


def digest_page(data: bytes) -> int:
    """64-bit content digest used to compare page values across nodes."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


ZERO_PAGE_DIGEST = digest_page(bytes(PAGE_SIZE))


@dataclass(frozen=True)
class OpRecord:
    node: int
    op: str  # "r" or "w"
    gfi: Gfi
    page: int
    digest: int
    invoke_ns: int
    respond_ns: int


class TraceRecorder:
    """Collects OpRecords from client nodes; one per process-wide test clock."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: list[OpRecord] = []

    def record(self, node: int, op: str, gfi: Gfi, page: int,
               page_bytes: bytes, invoke_ns: int, respond_ns: int) -> None:
        rec = OpRecord(node, op, gfi, page, digest_page(page_bytes),
                       invoke_ns, respond_ns)
        with self._lock:
            self._records.append(rec)

    def snapshot(self) -> list[OpRecord]:
        with self._lock:
            return list(self._records)

    def clear(self) -> None:
        with self._lock:
            self._records.clear()


def split_by_page(records: Sequence[OpRecord]) -> dict[tuple[Gfi, int], list[OpRecord]]:
    out: dict[tuple[Gfi, int], list[OpRecord]] = {}
    for rec in records:
        out.setdefault((rec.gfi, rec.page), []).append(rec)
    return out


@dataclass(frozen=True)
class CheckResult:
    ok: bool
    witness: Optional[OpRecord] = None

    def __bool__(self) -> bool:
        return self.ok


def check_linearizable(history: Sequence[OpRecord],
                       initial: int = ZERO_PAGE_DIGEST,
                       h_max: int = H_MAX) -> CheckResult:
    """Decide per-page linearizability for one register's history.

    Returns a failing read as witness when no valid order exists. Raises
    HistoryTooLarge beyond ``h_max`` operations.
    """
    n = len(history)
    if n > h_max:
        raise HistoryTooLarge(f"{n} operations exceed the {h_max} cap")
    if n == 0:
        return CheckResult(True)
    ops = sorted(history, key=lambda r: (r.invoke_ns, r.respond_ns))
    invoke = [op.invoke_ns for op in ops]
    respond = [op.respond_ns for op in ops]
    full_mask = (1 << n) - 1
    seen: set[tuple[int, int]] = set()
    # Deepest frontier where a read failed to match; reported on failure.
    best: dict[str, Optional[OpRecord]] = {"witness": None, "depth": -1}

    def search(done_mask: int, register: int, depth: int) -> bool:
        if done_mask == full_mask:
            return True
        key = (done_mask, register)
        if key in seen:
            return False
        seen.add(key)
        # Earliest completion among pending ops bounds which may go next.
        min_respond = min(
            respond[i] for i in range(n) if not done_mask & (1 << i)
        )
        for i in range(n):
            bit = 1 << i
            if done_mask & bit or invoke[i] > min_respond:
                continue
            op = ops[i]
            if op.op == "w":
                if search(done_mask | bit, op.digest, depth + 1):
                    return True
            else:
                if op.digest != register:
                    if depth > best["depth"]:
                        best["depth"] = depth
                        best["witness"] = op
                    continue
                if search(done_mask | bit, register, depth + 1):
                    return True
        return False

    if search(0, initial, 0):
        return CheckResult(True)
    witness = best["witness"]
    if witness is None:
        witness = next((op for op in ops if op.op == "r"), ops[0])
    return CheckResult(False, witness)


# ---------------------------------------------------------------------------
# Lease ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerViolation:
    sequence: int
    message: str


@dataclass(frozen=True)
class LedgerResult:
    ok: bool
    violation: Optional[LedgerViolation] = None

    def __bool__(self) -> bool:
        return self.ok


def parse_grant_log(text: str):
    """Parse the manager's dump format: ``seq event gfi node lease_type``."""
    from .manager import GrantLogEntry

    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MalformedLog(f"line {lineno}: want 5 fields, got {len(parts)}")
        seq_s, event, gfi_s, node_s, lease_s = parts
        if event not in ("Grant", "Revoke", "RemoveOwner"):
            raise MalformedLog(f"line {lineno}: unknown event {event!r}")
        try:
            entries.append(GrantLogEntry(
                int(seq_s), event, Gfi.parse(gfi_s), int(node_s),
                LeaseType[lease_s.upper()],
            ))
        except (ValueError, KeyError) as exc:
            raise MalformedLog(f"line {lineno}: {exc}") from exc
    return entries


def check_lease_ledger(entries_or_text) -> LedgerResult:
    """Replay the grant log and assert single-writer exclusivity throughout.

    At every point in log order: a write holder rules out any other holder,
    and sequence numbers strictly increase. Re-granting to a node that
    already holds simply refreshes its interval (clients may legitimately
    re-request after a discarded grant).
    """
    if isinstance(entries_or_text, str):
        entries = parse_grant_log(entries_or_text)
    else:
        entries = list(entries_or_text)
    holders: dict[Gfi, dict[int, LeaseType]] = {}
    last_seq = 0
    for entry in entries:
        if entry.sequence <= last_seq:
            raise MalformedLog(
                f"sequence {entry.sequence} after {last_seq} is not increasing"
            )
        last_seq = entry.sequence
        per_file = holders.setdefault(entry.gfi, {})
        if entry.event == "Grant":
            per_file[entry.node] = entry.lease_type
            writers = [n for n, t in per_file.items() if t is LeaseType.WRITE]
            if writers and len(per_file) > 1:
                return LedgerResult(False, LedgerViolation(
                    entry.sequence,
                    f"{entry.gfi}: write lease coexists with {sorted(per_file)}",
                ))
            if len(writers) > 1:
                return LedgerResult(False, LedgerViolation(
                    entry.sequence, f"{entry.gfi}: two write leases"
                ))
        else:
            per_file.pop(entry.node, None)
    return LedgerResult(True)


# ---------------------------------------------------------------------------
# Scheduled interleavings
# ---------------------------------------------------------------------------

@dataclass
class Step:
    thread: str
    action: Callable[[], object]
    label: str = ""
    barrier: Optional[str] = None


@dataclass
class StepOutcome:
    step: Step
    error: Optional[BaseException] = None
    result: object = None


class _Worker:
    def __init__(self, name: str) -> None:
        self.name = name
        self._queue: list = []
        self._cv = threading.Condition()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._stopped = False
        self._thread.start()

    def submit(self, fn: Callable[[], None]) -> None:
        with self._cv:
            self._queue.append(fn)
            self._cv.notify()

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._queue and not self._stopped:
                    self._cv.wait()
                if self._stopped and not self._queue:
                    return
                fn = self._queue.pop(0)
            fn()

    def stop(self) -> None:
        with self._cv:
            self._stopped = True
            self._cv.notify()

    def join(self, timeout: float) -> None:
        self._thread.join(timeout)


def run_scenario(steps: Sequence[Step],
                 watchdog_s: float = 10.0) -> list[StepOutcome]:
    """Execute scripted steps, grouping consecutive same-barrier steps into
    simultaneous starts. Raises ScenarioStuck if a group fails to finish
    within the watchdog. Step exceptions are captured per step, not raised.
    """
    groups: list[list[Step]] = []
    for step in steps:
        if (groups and step.barrier is not None
                and groups[-1][0].barrier == step.barrier):
            groups[-1].append(step)
        else:
            groups.append([step])
    workers: dict[str, _Worker] = {}
    outcomes: list[StepOutcome] = []
    try:
        for group in groups:
            names = [s.thread for s in group]
            if len(set(names)) != len(names):
                raise ValueError("one thread cannot run two steps in a group")
            start_gate = threading.Barrier(len(group) + 1)
            done = threading.Semaphore(0)
            group_outcomes = [StepOutcome(step) for step in group]

            def make_runner(step: Step, out: StepOutcome):
                def runner() -> None:
                    try:
                        start_gate.wait(timeout=watchdog_s)
                        out.result = step.action()
                    except BaseException as exc:  # noqa: BLE001 - recorded per step
                        out.error = exc
                    finally:
                        done.release()
                return runner

            for step, out in zip(group, group_outcomes):
                worker = workers.get(step.thread)
                if worker is None:
                    worker = workers[step.thread] = _Worker(step.thread)
                worker.submit(make_runner(step, out))
            try:
                start_gate.wait(timeout=watchdog_s)
            except threading.BrokenBarrierError:
                raise ScenarioStuck(
                    f"group {[s.label or s.thread for s in group]} never started"
                ) from None
            deadline = time.monotonic() + watchdog_s
            for _ in group:
                if not done.acquire(timeout=max(0.0, deadline - time.monotonic())):
                    raise ScenarioStuck(
                        f"group {[s.label or s.thread for s in group]} did not finish "
                        f"within {watchdog_s}s"
                    )
            outcomes.extend(group_outcomes)
    finally:
        for worker in workers.values():
            worker.stop()
        for worker in workers.values():
            worker.join(timeout=1.0)
    return outcomes


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------
#
# Line format:  <thread> <step> [<barrier>]
# with '#' comments and blank lines ignored. Steps:
#
#     open:<path>                  open (creating) the file on that thread's node
#     write:<path>:<page>:<token>  write one full page derived from <token>
#     read:<path>:<page>           read one full page
#     fsync:<path>                 flush that file to storage
#
# A thread is named <node>.<k>; the node index selects the client. Steps
# sharing a barrier tag on consecutive lines start simultaneously.

def token_page(token: str) -> bytes:
    raw = token.encode("utf-8")
    reps = PAGE_SIZE // len(raw) + 1
    return (raw * reps)[:PAGE_SIZE]


def parse_scenario_text(text: str) -> list[tuple[str, str, Optional[str]]]:
    lines: list[tuple[str, str, Optional[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"line {lineno}: want 'thread step [barrier]'")
        thread, step = parts[0], parts[1]
        barrier = parts[2] if len(parts) == 3 else None
        lines.append((thread, step, barrier))
    return lines


def bind_scenario(lines: Sequence[tuple[str, str, Optional[str]]],
                  clients: Sequence) -> list[Step]:
    """Bind parsed scenario lines to client nodes.

    Threads are ``<node>.<k>``; each opens files on demand and caches the
    handle per (thread, path).
    """
    handles: dict[tuple[str, str], int] = {}
    lock = threading.Lock()

    def client_for(thread: str):
        node_part = thread.split(".", 1)[0]
        try:
            return clients[int(node_part)]
        except (ValueError, IndexError):
            raise ValueError(f"thread {thread!r} does not name a node") from None

    def ensure_handle(thread: str, path: str) -> int:
        key = (thread, path)
        with lock:
            h = handles.get(key)
        if h is None:
            h = client_for(thread).open(path, create=True)
            with lock:
                handles[key] = h
        return h

    steps: list[Step] = []
    for thread, spec, barrier in lines:
        kind, _, rest = spec.partition(":")

        if kind == "open":
            def action(thread=thread, path=rest):
                return ensure_handle(thread, path)
        elif kind == "write":
            path, page_s, token = rest.split(":", 2)

            def action(thread=thread, path=path, page=int(page_s), token=token):
                h = ensure_handle(thread, path)
                return client_for(thread).write(
                    h, page * PAGE_SIZE, token_page(token)
                )
        elif kind == "read":
            path, page_s = rest.split(":", 1)

            def action(thread=thread, path=path, page=int(page_s)):
                h = ensure_handle(thread, path)
                return client_for(thread).read(h, page * PAGE_SIZE, PAGE_SIZE)
        elif kind == "fsync":
            def action(thread=thread, path=rest):
                h = ensure_handle(thread, path)
                return client_for(thread).fsync(h)
        else:
            raise ValueError(f"unknown step kind {kind!r}")
        steps.append(Step(thread, action, label=spec, barrier=barrier))
    return steps


def check_lock_order_trace(trace: Sequence[tuple[str, str, str, object]]) -> Optional[str]:
    """Scan a guard acquisition trace for an inode-before-lease inversion.

    Returns a description of the first violation, or None. The tracker
    aborts live on violation; this re-checks recorded runs end to end.
    """
    held: dict[str, list[tuple[str, object]]] = {}
    for thread, event, kind, key in trace:
        stack = held.setdefault(thread, [])
        if event == "acquire":
            if kind == "lease" and any(k == "inode" for k, _ in stack):
                return f"{thread}: lease guard {key} acquired while holding an inode guard"
            stack.append((kind, key))
        else:
            if (kind, key) in stack:
                stack.remove((kind, key))
    return None
