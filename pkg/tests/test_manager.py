import random
import threading
import time

from leasefs.core import Gfi, Intent, LeaseType
from leasefs.manager import LeaseManager

GFI = Gfi(0, 1)


# ---------------------------------------------------------------------------
# Reference model: the grant/remove state transitions as pure functions.
# Written independently of the service; the service must agree with it.
# ---------------------------------------------------------------------------

def ref_grant(state, intent, node):
    lease_type, owners = state
    if not owners:
        return (LeaseType(int(intent)), frozenset([node]))
    if lease_type is LeaseType.READ and intent is Intent.READ:
        return (LeaseType.READ, owners | {node})
    if lease_type is LeaseType.READ and intent is Intent.WRITE:
        return (LeaseType.WRITE, frozenset([node]))
    # write held: revoke the single owner, grant whatever was asked
    return (LeaseType(int(intent)), frozenset([node]))


def ref_remove(state, node):
    lease_type, owners = state
    owners = owners - {node}
    if not owners:
        return (LeaseType.NULL, owners)
    return (lease_type, owners)


def apply_reference(requests):
    state = (LeaseType.NULL, frozenset())
    for kind, intent, node in requests:
        if kind == "grant":
            state = ref_grant(state, intent, node)
        else:
            state = ref_remove(state, node)
    return state


def drive_manager(manager, requests, gfi=GFI):
    for kind, intent, node in requests:
        if kind == "grant":
            granted, _ = manager.grant_lease(gfi, intent, node)
            assert granted
        else:
            manager.remove_owner(gfi, node)
    return manager.lease_view(gfi)


# ---------------------------------------------------------------------------
# Branch-by-branch behavior
# ---------------------------------------------------------------------------

def test_grant_to_empty_owner_set():
    m = LeaseManager()
    granted, seq = m.grant_lease(GFI, Intent.READ, 1)
    assert granted and seq == 1
    assert m.lease_view(GFI) == (LeaseType.READ, frozenset([1]))


def test_second_reader_joins_owner_set():
    m = LeaseManager()
    m.grant_lease(GFI, Intent.READ, 1)
    m.grant_lease(GFI, Intent.READ, 2)
    assert m.lease_view(GFI) == (LeaseType.READ, frozenset([1, 2]))


def test_writer_revokes_every_reader():
    revoked = []
    m = LeaseManager(lambda node, gfi, barrier: revoked.append(node) or True)
    m.grant_lease(GFI, Intent.READ, 1)
    m.grant_lease(GFI, Intent.READ, 2)
    granted, _ = m.grant_lease(GFI, Intent.WRITE, 3)
    assert granted
    assert sorted(revoked) == [1, 2]
    assert m.lease_view(GFI) == (LeaseType.WRITE, frozenset([3]))


def test_reader_revokes_the_writer():
    revoked = []
    m = LeaseManager(lambda node, gfi, barrier: revoked.append(node) or True)
    m.grant_lease(GFI, Intent.WRITE, 1)
    granted, _ = m.grant_lease(GFI, Intent.READ, 2)
    assert granted
    assert revoked == [1]
    assert m.lease_view(GFI) == (LeaseType.READ, frozenset([2]))


def test_remove_owner_keeps_other_readers():
    m = LeaseManager()
    m.grant_lease(GFI, Intent.READ, 1)
    m.grant_lease(GFI, Intent.READ, 2)
    m.remove_owner(GFI, 1)
    assert m.lease_view(GFI) == (LeaseType.READ, frozenset([2]))


def test_remove_last_owner_nulls_the_lease():
    m = LeaseManager()
    m.grant_lease(GFI, Intent.READ, 1)
    m.remove_owner(GFI, 1)
    assert m.lease_view(GFI) == (LeaseType.NULL, frozenset())


def test_remove_absent_owner_is_idempotent():
    m = LeaseManager()
    m.grant_lease(GFI, Intent.READ, 1)
    m.remove_owner(GFI, 99)
    assert m.lease_view(GFI) == (LeaseType.READ, frozenset([1]))


def test_failed_revocation_fails_the_grant_and_keeps_state():
    m = LeaseManager(lambda node, gfi, barrier: False,
                     retry_limit=2, retry_backoff_s=0.0)
    m.grant_lease(GFI, Intent.WRITE, 1)
    granted, seq = m.grant_lease(GFI, Intent.WRITE, 2)
    assert not granted and seq == 0
    assert m.lease_view(GFI) == (LeaseType.WRITE, frozenset([1]))


def test_revocation_retries_until_acked():
    attempts = []

    def flaky(node, gfi, barrier):
        attempts.append(node)
        return len(attempts) >= 2

    m = LeaseManager(flaky, retry_limit=3, retry_backoff_s=0.0)
    m.grant_lease(GFI, Intent.WRITE, 1)
    granted, _ = m.grant_lease(GFI, Intent.WRITE, 2)
    assert granted
    assert len(attempts) == 2


def test_unreachable_owner_exhausts_retries():
    calls = []

    def down(node, gfi, barrier):
        calls.append(node)
        raise ConnectionError("gone")

    m = LeaseManager(down, retry_limit=3, retry_backoff_s=0.0)
    m.grant_lease(GFI, Intent.WRITE, 1)
    granted, _ = m.grant_lease(GFI, Intent.READ, 2)
    assert not granted
    assert len(calls) == 3


# ---------------------------------------------------------------------------
# Log
# ---------------------------------------------------------------------------

def test_grant_log_records_events_in_order():
    m = LeaseManager()
    m.grant_lease(GFI, Intent.READ, 1)
    m.grant_lease(GFI, Intent.READ, 2)
    m.grant_lease(GFI, Intent.WRITE, 3)
    m.remove_owner(GFI, 3)
    log = m.grant_log()
    assert [e.sequence for e in log] == list(range(1, len(log) + 1))
    assert [e.event for e in log] == [
        "Grant", "Grant", "Revoke", "Revoke", "Grant", "RemoveOwner",
    ]
    dump = m.dump_grant_log()
    assert dump.splitlines()[0] == "1 Grant 0:1 1 READ"


def test_barrier_orders_revokes_before_later_grants():
    seen = {}

    def record(node, gfi, barrier):
        seen[node] = barrier
        return True

    m = LeaseManager(record)
    m.grant_lease(GFI, Intent.WRITE, 1)   # seq 1
    m.grant_lease(GFI, Intent.WRITE, 2)   # revoke(1) then seq 3
    log = m.grant_log()
    grant2 = next(e for e in log if e.event == "Grant" and e.node == 2)
    assert seen[1] < grant2.sequence


# ---------------------------------------------------------------------------
# Reference-model agreement and FIFO fairness
# ---------------------------------------------------------------------------

def test_random_sequences_match_reference_model():
    rng = random.Random(7)
    for _ in range(300):
        n = rng.randint(1, 6)
        requests = []
        for _ in range(n):
            node = rng.randint(0, 2)
            if rng.random() < 0.8:
                intent = Intent.WRITE if rng.random() < 0.5 else Intent.READ
                requests.append(("grant", intent, node))
            else:
                requests.append(("remove", None, node))
        manager = LeaseManager()
        got = drive_manager(manager, requests)
        want = apply_reference(requests)
        assert got == (want[0], frozenset(want[1])), requests


def test_fifo_waiters_complete_in_arrival_order():
    release_gate = threading.Event()
    completed = []

    def slow_revoke(node, gfi, barrier):
        release_gate.wait(5)
        return True

    m = LeaseManager(slow_revoke)
    m.grant_lease(GFI, Intent.WRITE, 0)

    def requester(node):
        m.grant_lease(GFI, Intent.WRITE, node)
        completed.append(node)

    threads = []
    for node in range(1, 5):
        t = threading.Thread(target=requester, args=(node,), daemon=True)
        t.start()
        threads.append(t)
        time.sleep(0.05)  # pin arrival order
    release_gate.set()
    for t in threads:
        t.join(10)
    assert completed == [1, 2, 3, 4]


def test_distinct_files_grant_in_parallel():
    blocked_file = Gfi(0, 1)
    free_file = Gfi(0, 2)
    gate = threading.Event()

    def gated_revoke(node, gfi, barrier):
        if gfi == blocked_file:
            gate.wait(5)
        return True

    m = LeaseManager(gated_revoke)
    m.grant_lease(blocked_file, Intent.WRITE, 0)
    slow = threading.Thread(
        target=m.grant_lease, args=(blocked_file, Intent.WRITE, 1), daemon=True
    )
    slow.start()
    time.sleep(0.05)
    t0 = time.monotonic()
    granted, _ = m.grant_lease(free_file, Intent.READ, 2)
    elapsed = time.monotonic() - t0
    assert granted and elapsed < 1.0
    gate.set()
    slow.join(5)
