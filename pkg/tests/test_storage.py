import os
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

import pytest

from leasefs.core import (
    PAGE_SIZE,
    AlreadyExists,
    BadBlockSize,
    Gfi,
    NotFound,
    UnknownGfi,
)
from leasefs.storage import StorageNode, StorageRouter, fnv1a_64
from leasefs.transport import LoopbackListener, RpcClient, RpcServer


def page(tag: int) -> bytes:
    return bytes([tag % 256]) * PAGE_SIZE


@pytest.fixture(params=["memory", "disk"])
def node(request, tmp_path):
    data_dir = None if request.param == "memory" else tmp_path / "s0"
    n = StorageNode(0, data_dir)
    yield n
    n.close()


def test_create_assigns_sequential_inodes(node):
    assert node.create("/a") == Gfi(0, 1)
    assert node.create("/b") == Gfi(0, 2)


def test_create_twice_fails(node):
    node.create("/a")
    with pytest.raises(AlreadyExists):
        node.create("/a")


def test_distinct_paths_get_distinct_gfis(node):
    gfis = {node.create(f"/f{i}") for i in range(10)}
    assert len(gfis) == 10


def test_resolve_after_create_and_stability(node):
    gfi = node.create("/a")
    assert node.resolve("/a") == (gfi, 0)
    assert node.resolve("/a") == (gfi, 0)


def test_resolve_unknown_path(node):
    with pytest.raises(NotFound):
        node.resolve("/nope")


def test_read_unwritten_pages_zero_filled(node):
    gfi = node.create("/a")
    node.write_pages(gfi, [(0, page(1)), (2, page(3))])
    blocks, length = node.read_pages(gfi, [0, 1, 2])
    assert blocks == [page(1), bytes(PAGE_SIZE), page(3)]
    assert length == 3 * PAGE_SIZE


def test_read_empty_index_list(node):
    gfi = node.create("/a")
    blocks, length = node.read_pages(gfi, [])
    assert blocks == [] and length == 0


def test_unknown_gfi(node):
    with pytest.raises(UnknownGfi):
        node.read_pages(Gfi(0, 999), [0])
    with pytest.raises(UnknownGfi):
        node.write_pages(Gfi(0, 999), [(0, page(0))])


def test_length_is_max_written_extent(node):
    gfi = node.create("/a")
    assert node.write_pages(gfi, [(0, page(1)), (3, page(2))]) == 4 * PAGE_SIZE
    blocks, length = node.read_pages(gfi, [0, 1, 2, 3])
    assert blocks[0] == page(1)
    assert blocks[1] == bytes(PAGE_SIZE)
    assert blocks[2] == bytes(PAGE_SIZE)
    assert blocks[3] == page(2)
    assert length == 4 * PAGE_SIZE


def test_empty_write_batch_is_a_no_op(node):
    gfi = node.create("/a")
    assert node.write_pages(gfi, []) == 0
    assert node.read_pages(gfi, [])[1] == 0


def test_bad_block_size_rejected(node):
    gfi = node.create("/a")
    with pytest.raises(BadBlockSize):
        node.write_pages(gfi, [(0, b"short")])


def test_writes_past_eof_create_holes(node):
    gfi = node.create("/a")
    node.write_pages(gfi, [(7, page(9))])
    blocks, length = node.read_pages(gfi, [5, 6, 7, 8])
    assert blocks == [bytes(PAGE_SIZE)] * 2 + [page(9), bytes(PAGE_SIZE)]
    assert length == 8 * PAGE_SIZE


def test_batch_write_atomic_vs_concurrent_reads(node):
    # Each batch writes the same tag to every page; a reader must never see
    # two different tags, which would be a torn batch.
    gfi = node.create("/a")
    indices = list(range(8))
    node.write_pages(gfi, [(i, page(0)) for i in indices])
    stop = threading.Event()
    torn = []

    def reader():
        while not stop.is_set():
            blocks, _ = node.read_pages(gfi, indices)
            tags = {b[0] for b in blocks}
            if len(tags) != 1:
                torn.append(tags)
                return

    threads = [threading.Thread(target=reader, daemon=True) for _ in range(2)]
    for t in threads:
        t.start()
    for tag in range(1, 40):
        node.write_pages(gfi, [(i, page(tag)) for i in indices])
    stop.set()
    for t in threads:
        t.join(5)
    assert not torn, f"torn batches observed: {torn}"


def test_recovery_from_directory(tmp_path):
    d = tmp_path / "s0"
    first = StorageNode(0, d)
    gfi = first.create("/a")
    first.write_pages(gfi, [(1, page(5))])
    first.close()

    second = StorageNode(0, d)
    resolved, length = second.resolve("/a")
    assert resolved == gfi
    assert length == 2 * PAGE_SIZE
    blocks, _ = second.read_pages(gfi, [0, 1])
    assert blocks == [bytes(PAGE_SIZE), page(5)]
    # inode counter resumes past recovered files
    assert second.create("/b") == Gfi(0, 2)
    second.close()


_CHILD_PROGRAM = """
import os, sys
sys.path.insert(0, {src!r})
from leasefs.storage import StorageNode
from leasefs.core import PAGE_SIZE
node = StorageNode(0, {dir!r})
gfi = node.create("/killme")
node.write_pages(gfi, [(0, b"K" * PAGE_SIZE), (2, b"L" * PAGE_SIZE)])
print("READY", flush=True)
import time
time.sleep(60)
"""


def test_durability_survives_killed_process(tmp_path):
    # Write from a child process, SIGKILL it, then read the directory back.
    d = tmp_path / "s0"
    src = str(Path(__file__).resolve().parents[1] / "src")
    child = subprocess.Popen(
        [sys.executable, "-c", _CHILD_PROGRAM.format(src=src, dir=str(d))],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        line = child.stdout.readline()
        assert line.strip() == "READY"
        os.kill(child.pid, signal.SIGKILL)
        child.wait(timeout=10)
    finally:
        if child.poll() is None:
            child.kill()

    node = StorageNode(0, d)
    gfi, length = node.resolve("/killme")
    assert length == 3 * PAGE_SIZE
    blocks, _ = node.read_pages(gfi, [0, 1, 2])
    assert blocks == [b"K" * PAGE_SIZE, bytes(PAGE_SIZE), b"L" * PAGE_SIZE]
    node.close()


# ---------------------------------------------------------------------------
# Router
# ---------------------------------------------------------------------------

@pytest.fixture
def routed():
    nodes = [StorageNode(i, None) for i in range(3)]
    listeners = [LoopbackListener(f"s{i}") for i in range(3)]
    servers = [RpcServer(l, n.handle, f"s{i}")
               for i, (l, n) in enumerate(zip(listeners, nodes))]
    router = StorageRouter([RpcClient(l.connect) for l in listeners])
    yield router, nodes
    router.close()
    for s in servers:
        s.close()
    for n in nodes:
        n.close()


def test_router_routes_pages_by_gfi_node(routed):
    router, nodes = routed
    name_to_gfi = {}
    for i in range(12):
        name = f"file{i}"
        name_to_gfi[name] = router.create(name)
    assert {g.storage_node_id for g in name_to_gfi.values()} == {0, 1, 2}
    for name, gfi in name_to_gfi.items():
        router.write_pages(gfi, [(0, page(gfi.storage_node_id))])
        blocks, _ = router.read_pages(gfi, [0])
        assert blocks[0][0] == gfi.storage_node_id
        # resolve goes back to the same node the create chose
        assert router.resolve(name)[0] == gfi


def test_router_path_hash_is_stable(routed):
    router, _ = routed
    assert fnv1a_64(b"abc") == fnv1a_64(b"abc")
    gfi = router.create("stable")
    assert router.resolve("stable")[0] == gfi
