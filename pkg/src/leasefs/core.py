"""Shared domain types, error vocabulary, and the binary wire codec.

Everything in this module is an immutable value; nothing here holds locks
or state, so values can be passed freely between threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Union

PAGE_SIZE = 4096
ZERO_PAGE = bytes(PAGE_SIZE)

# A DFS client node identity, unique per run.
NodeId = int


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class LeaseFsError(Exception):
    """Base class for every error raised by this package."""


class MalformedFrame(LeaseFsError):
    """A wire frame was truncated, over-long, or carried an unknown tag."""


class TransportError(LeaseFsError):
    """The peer connection failed or timed out."""


class NotFound(LeaseFsError):
    pass


class AlreadyExists(LeaseFsError):
    pass


class UnknownGfi(LeaseFsError):
    pass


class BadBlockSize(LeaseFsError):
    pass


class StorageError(LeaseFsError):
    pass


class LeaseUnavailable(LeaseFsError):
    """A required lease could not be obtained (manager down or grant refused)."""


class ManagerUnreachable(LeaseUnavailable):
    """The lease manager did not answer within the soft timeout."""


class FlushFailed(LeaseFsError):
    pass


class RevokeFailed(LeaseFsError):
    pass


class RevokeLivelock(LeaseFsError):
    """An optimistic revocation exceeded its retry cap."""


class DeadlockDetected(LeaseFsError):
    """The lock registry found a cycle in the wait-for graph."""


class LockOrderViolation(LeaseFsError):
    """A guard was acquired against the documented ordering discipline."""


class HistoryTooLarge(LeaseFsError):
    pass


class MalformedLog(LeaseFsError):
    pass


class ScenarioStuck(LeaseFsError):
    """A scripted interleaving failed to reach its next barrier in time."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Gfi:
    """Cluster-wide file identity: owning storage node plus its local inode.

    Ordered (storage_node_id, storage_inode); this total order doubles as
    the canonical multi-lock acquisition order for anything that must hold
    two inode-level locks at once.
    """

    storage_node_id: int
    storage_inode: int

    def __str__(self) -> str:
        return f"{self.storage_node_id}:{self.storage_inode}"

    @classmethod
    def parse(cls, text: str) -> "Gfi":
        node, _, ino = text.partition(":")
        try:
            return cls(int(node), int(ino))
        except ValueError as exc:
            raise ValueError(f"bad gfi {text!r}") from exc


class LeaseType(IntEnum):
    NULL = 0
    READ = 1
    WRITE = 2


class Intent(IntEnum):
    READ = 1
    WRITE = 2


def lease_satisfies(held: LeaseType, intent: Intent) -> bool:
    """True iff a held lease is strong enough for the intended operation.

    Strength order is NULL < READ < WRITE; a write lease satisfies any
    intent, a read lease satisfies only reads, null satisfies nothing.
    """
    return int(held) >= int(intent)


class CacheMode(Enum):
    """Caching/coherence discipline a node runs under, fixed at node start."""

    WRITE_BACK_LEASE = "writeback"
    WRITE_THROUGH_OCC = "writethrough-occ"
    WRITE_BACK_UNSAFE = "unsafe"


@dataclass(slots=True)
class Page:
    """One cached page. ``data`` is always exactly PAGE_SIZE bytes.

    ``version`` counts mutations of this page slot and lets flushers mark a
    page clean only if it was not re-dirtied while the flush was in flight.
    """

    gfi: Gfi
    index: int
    data: bytearray
    dirty: bool = False
    version: int = 0


# ---------------------------------------------------------------------------
# Wire messages
# ---------------------------------------------------------------------------

class MsgTag(IntEnum):
    RESOLVE = 1
    RESOLVE_REPLY = 2
    CREATE = 3
    CREATE_REPLY = 4
    READ_PAGES = 5
    READ_PAGES_REPLY = 6
    WRITE_PAGES = 7
    WRITE_PAGES_REPLY = 8
    GRANT_LEASE = 9
    GRANT_LEASE_REPLY = 10
    REMOVE_OWNER = 11
    REMOVE_OWNER_REPLY = 12
    REVOKE = 13
    REVOKE_REPLY = 14
    ERROR = 15


class ErrCode(IntEnum):
    NOT_FOUND = 1
    ALREADY_EXISTS = 2
    UNKNOWN_GFI = 3
    BAD_BLOCK_SIZE = 4
    REVOKE_FAILED = 5
    LEASE_UNAVAILABLE = 6
    STORAGE = 7
    INTERNAL = 8


_ERR_TO_EXC = {
    ErrCode.NOT_FOUND: NotFound,
    ErrCode.ALREADY_EXISTS: AlreadyExists,
    ErrCode.UNKNOWN_GFI: UnknownGfi,
    ErrCode.BAD_BLOCK_SIZE: BadBlockSize,
    ErrCode.REVOKE_FAILED: RevokeFailed,
    ErrCode.LEASE_UNAVAILABLE: LeaseUnavailable,
    ErrCode.STORAGE: StorageError,
    ErrCode.INTERNAL: LeaseFsError,
}

_EXC_TO_ERR = {
    NotFound: ErrCode.NOT_FOUND,
    AlreadyExists: ErrCode.ALREADY_EXISTS,
    UnknownGfi: ErrCode.UNKNOWN_GFI,
    BadBlockSize: ErrCode.BAD_BLOCK_SIZE,
    RevokeFailed: ErrCode.REVOKE_FAILED,
    LeaseUnavailable: ErrCode.LEASE_UNAVAILABLE,
    StorageError: ErrCode.STORAGE,
}


def exception_to_code(exc: Exception) -> ErrCode:
    return _EXC_TO_ERR.get(type(exc), ErrCode.INTERNAL)


def code_to_exception(code: int, message: str) -> LeaseFsError:
    try:
        cls = _ERR_TO_EXC[ErrCode(code)]
    except ValueError:
        cls = LeaseFsError
    return cls(message)


@dataclass(frozen=True)
class Resolve:
    req_id: int
    path: str


@dataclass(frozen=True)
class ResolveReply:
    req_id: int
    gfi: Gfi
    length: int


@dataclass(frozen=True)
class Create:
    req_id: int
    path: str


@dataclass(frozen=True)
class CreateReply:
    req_id: int
    gfi: Gfi


@dataclass(frozen=True)
class ReadPages:
    req_id: int
    gfi: Gfi
    indices: tuple[int, ...]


@dataclass(frozen=True)
class ReadPagesReply:
    req_id: int
    blocks: tuple[bytes, ...]
    length: int


@dataclass(frozen=True)
class WritePages:
    req_id: int
    gfi: Gfi
    pages: tuple[tuple[int, bytes], ...]


@dataclass(frozen=True)
class WritePagesReply:
    req_id: int
    length: int


@dataclass(frozen=True)
class GrantLease:
    req_id: int
    gfi: Gfi
    intent: Intent
    node: NodeId


@dataclass(frozen=True)
class GrantLeaseReply:
    req_id: int
    granted: bool
    seq: int


@dataclass(frozen=True)
class RemoveOwner:
    req_id: int
    gfi: Gfi
    node: NodeId


@dataclass(frozen=True)
class RemoveOwnerReply:
    req_id: int
    seq: int


@dataclass(frozen=True)
class Revoke:
    req_id: int
    gfi: Gfi
    # Log position at send time: a grant sequenced after this revoke always
    # carries a larger value, which lets a client spot stale in-flight grants.
    barrier: int


@dataclass(frozen=True)
class RevokeReply:
    req_id: int
    ok: bool


@dataclass(frozen=True)
class ErrorReply:
    req_id: int
    code: int
    message: str


WireMessage = Union[
    Resolve, ResolveReply, Create, CreateReply,
    ReadPages, ReadPagesReply, WritePages, WritePagesReply,
    GrantLease, GrantLeaseReply, RemoveOwner, RemoveOwnerReply,
    Revoke, RevokeReply, ErrorReply,
]


# ---------------------------------------------------------------------------
# Codec: 4-byte little-endian body length, 1 tag byte, then fixed-width
# little-endian fields. Byte arrays and strings carry a 4-byte length prefix.
# ---------------------------------------------------------------------------

MAX_FRAME_BODY = 64 * 1024 * 1024

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_GFI = struct.Struct("<HQ")


class _Writer:
    __slots__ = ("parts",)

    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self.parts.append(_U8.pack(v))

    def u16(self, v: int) -> None:
        self.parts.append(_U16.pack(v))

    def u32(self, v: int) -> None:
        self.parts.append(_U32.pack(v))

    def u64(self, v: int) -> None:
        self.parts.append(_U64.pack(v))

    def gfi(self, g: Gfi) -> None:
        self.parts.append(_GFI.pack(g.storage_node_id, g.storage_inode))

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.parts.append(bytes(b))

    def text(self, s: str) -> None:
        self.blob(s.encode("utf-8"))

    def body(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def _take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedFrame("truncated frame body")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def gfi(self) -> Gfi:
        node, ino = _GFI.unpack(self._take(10))
        return Gfi(node, ino)

    def blob(self) -> bytes:
        n = self.u32()
        if n > len(self.buf) - self.pos:
            raise MalformedFrame("blob length exceeds frame")
        return self._take(n)

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame("bad utf-8 in frame") from exc

    def count(self) -> int:
        n = self.u32()
        # Every list element occupies at least one byte.
        if n > len(self.buf) - self.pos:
            raise MalformedFrame("element count exceeds frame")
        return n

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedFrame("trailing bytes in frame")


def _lease_byte(r: _Reader) -> int:
    v = r.u8()
    if v > 2:
        raise MalformedFrame(f"bad lease byte {v}")
    return v


def encode_message(msg: WireMessage) -> bytes:
    """Encode a message as one complete frame, length prefix included."""
    w = _Writer()
    if isinstance(msg, Resolve):
        w.u8(MsgTag.RESOLVE)
        w.u64(msg.req_id)
        w.text(msg.path)
    elif isinstance(msg, ResolveReply):
        w.u8(MsgTag.RESOLVE_REPLY)
        w.u64(msg.req_id)
        w.gfi(msg.gfi)
        w.u64(msg.length)
    elif isinstance(msg, Create):
        w.u8(MsgTag.CREATE)
        w.u64(msg.req_id)
        w.text(msg.path)
    elif isinstance(msg, CreateReply):
        w.u8(MsgTag.CREATE_REPLY)
        w.u64(msg.req_id)
        w.gfi(msg.gfi)
    elif isinstance(msg, ReadPages):
        w.u8(MsgTag.READ_PAGES)
        w.u64(msg.req_id)
        w.gfi(msg.gfi)
        w.u32(len(msg.indices))
        for idx in msg.indices:
            w.u64(idx)
    elif isinstance(msg, ReadPagesReply):
        w.u8(MsgTag.READ_PAGES_REPLY)
        w.u64(msg.req_id)
        w.u32(len(msg.blocks))
        for block in msg.blocks:
            w.blob(block)
        w.u64(msg.length)
    elif isinstance(msg, WritePages):
        w.u8(MsgTag.WRITE_PAGES)
        w.u64(msg.req_id)
        w.gfi(msg.gfi)
        w.u32(len(msg.pages))
        for idx, block in msg.pages:
            w.u64(idx)
            w.blob(block)
    elif isinstance(msg, WritePagesReply):
        w.u8(MsgTag.WRITE_PAGES_REPLY)
        w.u64(msg.req_id)
        w.u64(msg.length)
    elif isinstance(msg, GrantLease):
        w.u8(MsgTag.GRANT_LEASE)
        w.u64(msg.req_id)
        w.gfi(msg.gfi)
        w.u8(int(msg.intent))
        w.u16(msg.node)
    elif isinstance(msg, GrantLeaseReply):
        w.u8(MsgTag.GRANT_LEASE_REPLY)
        w.u64(msg.req_id)
        w.u8(1 if msg.granted else 0)
        w.u64(msg.seq)
    elif isinstance(msg, RemoveOwner):
        w.u8(MsgTag.REMOVE_OWNER)
        w.u64(msg.req_id)
        w.gfi(msg.gfi)
        w.u16(msg.node)
    elif isinstance(msg, RemoveOwnerReply):
        w.u8(MsgTag.REMOVE_OWNER_REPLY)
        w.u64(msg.req_id)
        w.u64(msg.seq)
    elif isinstance(msg, Revoke):
        w.u8(MsgTag.REVOKE)
        w.u64(msg.req_id)
        w.gfi(msg.gfi)
        w.u64(msg.barrier)
    elif isinstance(msg, RevokeReply):
        w.u8(MsgTag.REVOKE_REPLY)
        w.u64(msg.req_id)
        w.u8(1 if msg.ok else 0)
    elif isinstance(msg, ErrorReply):
        w.u8(MsgTag.ERROR)
        w.u64(msg.req_id)
        w.u16(msg.code)
        w.text(msg.message)
    else:
        raise TypeError(f"not a wire message: {msg!r}")
    body = w.body()
    return _U32.pack(len(body)) + body


def decode_message(frame: bytes) -> WireMessage:
    """Decode one complete frame (length prefix included) back to a message."""
    if len(frame) < 4:
        raise MalformedFrame("frame shorter than length prefix")
    (body_len,) = _U32.unpack(frame[:4])
    if body_len > MAX_FRAME_BODY:
        raise MalformedFrame("frame body too large")
    if len(frame) - 4 != body_len:
        raise MalformedFrame("length prefix does not match body")
    return decode_body(frame[4:])


def decode_body(body: bytes) -> WireMessage:
    if not body:
        raise MalformedFrame("empty frame body")
    r = _Reader(body)
    tag = r.u8()
    try:
        tag = MsgTag(tag)
    except ValueError:
        raise MalformedFrame(f"unknown tag {tag}") from None
    req_id = r.u64()
    msg: WireMessage
    if tag is MsgTag.RESOLVE:
        msg = Resolve(req_id, r.text())
    elif tag is MsgTag.RESOLVE_REPLY:
        msg = ResolveReply(req_id, r.gfi(), r.u64())
    elif tag is MsgTag.CREATE:
        msg = Create(req_id, r.text())
    elif tag is MsgTag.CREATE_REPLY:
        msg = CreateReply(req_id, r.gfi())
    elif tag is MsgTag.READ_PAGES:
        gfi = r.gfi()
        indices = tuple(r.u64() for _ in range(r.count()))
        msg = ReadPages(req_id, gfi, indices)
    elif tag is MsgTag.READ_PAGES_REPLY:
        blocks = tuple(r.blob() for _ in range(r.count()))
        msg = ReadPagesReply(req_id, blocks, r.u64())
    elif tag is MsgTag.WRITE_PAGES:
        gfi = r.gfi()
        pages = tuple((r.u64(), r.blob()) for _ in range(r.count()))
        msg = WritePages(req_id, gfi, pages)
    elif tag is MsgTag.WRITE_PAGES_REPLY:
        msg = WritePagesReply(req_id, r.u64())
    elif tag is MsgTag.GRANT_LEASE:
        gfi = r.gfi()
        intent_byte = _lease_byte(r)
        if intent_byte == 0:
            raise MalformedFrame("intent cannot be null")
        msg = GrantLease(req_id, gfi, Intent(intent_byte), r.u16())
    elif tag is MsgTag.GRANT_LEASE_REPLY:
        msg = GrantLeaseReply(req_id, r.u8() != 0, r.u64())
    elif tag is MsgTag.REMOVE_OWNER:
        msg = RemoveOwner(req_id, r.gfi(), r.u16())
    elif tag is MsgTag.REMOVE_OWNER_REPLY:
        msg = RemoveOwnerReply(req_id, r.u64())
    elif tag is MsgTag.REVOKE:
        msg = Revoke(req_id, r.gfi(), r.u64())
    elif tag is MsgTag.REVOKE_REPLY:
        msg = RevokeReply(req_id, r.u8() != 0)
    else:
        msg = ErrorReply(req_id, r.u16(), r.text())
    r.done()
    return msg
