"""Durable page store and namespace for one storage node, plus client router.

On-disk layout per node: a ``namespace.log`` journal with one
``path<TAB>storage_node_id<TAB>inode`` line per created file, and one
``ino_<N>.dat`` file per inode holding raw pages at ``index * PAGE_SIZE``.
Holes read back as zeros. Buffers are flushed to the OS after every batch,
so file contents survive a killed process. A node may also run fully in
memory for tests that do not care about durability.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Optional, Sequence

from .core import (
    PAGE_SIZE,
    AlreadyExists,
    BadBlockSize,
    Create,
    CreateReply,
    Gfi,
    NotFound,
    ReadPages,
    ReadPagesReply,
    Resolve,
    ResolveReply,
    StorageError,
    UnknownGfi,
    WireMessage,
    WritePages,
    WritePagesReply,
)
from .transport import RpcClient

NAMESPACE_LOG = "namespace.log"


class _FileState:
    __slots__ = ("lock", "length", "pages", "fh")

    def __init__(self) -> None:
        # One mutex per file keeps a write batch atomic with respect to
        # concurrent batch reads of the same file.
        self.lock = threading.Lock()
        self.length = 0
        self.pages: Optional[dict[int, bytes]] = None
        self.fh = None


class StorageNode:
    """One storage node: path namespace plus page-granular file bodies."""

    def __init__(self, node_id: int, data_dir: Optional[Path] = None) -> None:
        self.node_id = node_id
        self._dir = Path(data_dir) if data_dir is not None else None
        self._ns_lock = threading.Lock()
        self._namespace: dict[str, Gfi] = {}
        self._files: dict[Gfi, _FileState] = {}
        self._next_inode = 1
        self._ns_fh = None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._recover()
            self._ns_fh = open(self._dir / NAMESPACE_LOG, "a", encoding="utf-8")

    # -- recovery ----------------------------------------------------------

    def _recover(self) -> None:
        journal = self._dir / NAMESPACE_LOG
        if not journal.exists():
            return
        for line in journal.read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            path, node_id, inode = line.split("\t")
            gfi = Gfi(int(node_id), int(inode))
            self._namespace[path] = gfi
            state = _FileState()
            body = self._body_path(gfi)
            if body.exists():
                state.length = body.stat().st_size
            self._files[gfi] = state
            self._next_inode = max(self._next_inode, gfi.storage_inode + 1)

    def _body_path(self, gfi: Gfi) -> Path:
        return self._dir / f"ino_{gfi.storage_inode}.dat"

    def _open_body(self, state: _FileState, gfi: Gfi):
        if state.fh is None:
            body = self._body_path(gfi)
            if not body.exists():
                body.touch()
            state.fh = open(body, "r+b")
        return state.fh

    # -- namespace ---------------------------------------------------------

    def create(self, path: str) -> Gfi:
        with self._ns_lock:
            if path in self._namespace:
                raise AlreadyExists(path)
            gfi = Gfi(self.node_id, self._next_inode)
            self._next_inode += 1
            state = _FileState()
            if self._dir is None:
                state.pages = {}
            self._namespace[path] = gfi
            self._files[gfi] = state
            if self._ns_fh is not None:
                self._ns_fh.write(f"{path}\t{gfi.storage_node_id}\t{gfi.storage_inode}\n")
                self._ns_fh.flush()
        return gfi

    def resolve(self, path: str) -> tuple[Gfi, int]:
        with self._ns_lock:
            gfi = self._namespace.get(path)
            if gfi is None:
                raise NotFound(path)
            return gfi, self._files[gfi].length

    def _state(self, gfi: Gfi) -> _FileState:
        with self._ns_lock:
            state = self._files.get(gfi)
        if state is None:
            raise UnknownGfi(str(gfi))
        return state

    # -- pages -------------------------------------------------------------

    def read_pages(self, gfi: Gfi, indices: Sequence[int]) -> tuple[list[bytes], int]:
        state = self._state(gfi)
        with state.lock:
            if state.pages is not None:
                blocks = [state.pages.get(i, b"") for i in indices]
            else:
                blocks = []
                if indices:
                    fh = self._open_body(state, gfi)
                    for i in indices:
                        fh.seek(i * PAGE_SIZE)
                        blocks.append(fh.read(PAGE_SIZE))
            length = state.length
        out = []
        for block in blocks:
            if len(block) < PAGE_SIZE:
                block = block + bytes(PAGE_SIZE - len(block))
            out.append(bytes(block))
        return out, length

    def write_pages(self, gfi: Gfi, pages: Sequence[tuple[int, bytes]]) -> int:
        state = self._state(gfi)
        for _, block in pages:
            if len(block) != PAGE_SIZE:
                raise BadBlockSize(f"block of {len(block)} bytes, want {PAGE_SIZE}")
        with state.lock:
            if pages:
                if state.pages is not None:
                    for idx, block in pages:
                        state.pages[idx] = bytes(block)
                else:
                    fh = self._open_body(state, gfi)
                    try:
                        for idx, block in pages:
                            fh.seek(idx * PAGE_SIZE)
                            fh.write(block)
                        fh.flush()
                    except OSError as exc:
                        raise StorageError(f"write failed: {exc}") from exc
                top = max(idx for idx, _ in pages)
                state.length = max(state.length, (top + 1) * PAGE_SIZE)
            return state.length

    # -- RPC surface -------------------------------------------------------

    def handle(self, msg: WireMessage) -> WireMessage:
        if isinstance(msg, Resolve):
            gfi, length = self.resolve(msg.path)
            return ResolveReply(msg.req_id, gfi, length)
        if isinstance(msg, Create):
            return CreateReply(msg.req_id, self.create(msg.path))
        if isinstance(msg, ReadPages):
            blocks, length = self.read_pages(msg.gfi, msg.indices)
            return ReadPagesReply(msg.req_id, tuple(blocks), length)
        if isinstance(msg, WritePages):
            length = self.write_pages(msg.gfi, msg.pages)
            return WritePagesReply(msg.req_id, length)
        raise StorageError(f"unexpected message {type(msg).__name__}")

    def close(self) -> None:
        with self._ns_lock:
            if self._ns_fh is not None:
                self._ns_fh.close()
                self._ns_fh = None
            for state in self._files.values():
                with state.lock:
                    if state.fh is not None:
                        state.fh.close()
                        state.fh = None


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class StorageRouter:
    """Client side of the storage protocol across one or more nodes.

    Pages route by ``gfi.storage_node_id``; paths route by a stable hash so
    that create and resolve land on the same node without a global catalog.
    """

    def __init__(self, clients: Sequence[RpcClient], timeout: Optional[float] = 30.0) -> None:
        if not clients:
            raise ValueError("need at least one storage client")
        self._clients = list(clients)
        self._timeout = timeout

    def _by_path(self, path: str) -> RpcClient:
        return self._clients[fnv1a_64(path.encode("utf-8")) % len(self._clients)]

    def _by_gfi(self, gfi: Gfi) -> RpcClient:
        try:
            return self._clients[gfi.storage_node_id]
        except IndexError:
            raise UnknownGfi(str(gfi)) from None

    def create(self, path: str) -> Gfi:
        reply = self._by_path(path).call(Create(0, path), timeout=self._timeout)
        return reply.gfi

    def resolve(self, path: str) -> tuple[Gfi, int]:
        reply = self._by_path(path).call(Resolve(0, path), timeout=self._timeout)
        return reply.gfi, reply.length

    def read_pages(self, gfi: Gfi, indices: Sequence[int]) -> tuple[list[bytes], int]:
        reply = self._by_gfi(gfi).call(
            ReadPages(0, gfi, tuple(indices)), timeout=self._timeout
        )
        return list(reply.blocks), reply.length

    def write_pages(self, gfi: Gfi, pages: Sequence[tuple[int, bytes]]) -> int:
        reply = self._by_gfi(gfi).call(
            WritePages(0, gfi, tuple(pages)), timeout=self._timeout
        )
        return reply.length

    def close(self) -> None:
        for client in self._clients:
            client.close()
