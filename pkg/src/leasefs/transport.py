"""Reliable ordered message transport over the core frame format.

Two interchangeable flavors: a TCP byte stream and an in-process loopback
built on queues. Both carry fully encoded frames, so the codec is exercised
bit for bit either way and tests on the loopback see identical semantics to
a networked deployment, minus latency.
"""

from __future__ import annotations

import itertools
import queue
import socket
import struct
import threading
from typing import Callable, Optional

from . import core
from .core import (
    ErrorReply,
    MalformedFrame,
    TransportError,
    WireMessage,
    decode_message,
    encode_message,
)

_LEN = struct.Struct("<I")
_CLOSED = object()


class Connection:
    def send(self, msg: WireMessage) -> None:
        raise NotImplementedError

    def recv(self, timeout: Optional[float] = None) -> WireMessage:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class LoopbackConnection(Connection):
    """One endpoint of an in-process duplex frame pipe."""

    def __init__(self, tx: "queue.SimpleQueue", rx: "queue.SimpleQueue") -> None:
        self._tx = tx
        self._rx = rx
        self._closed = False

    def send(self, msg: WireMessage) -> None:
        if self._closed:
            raise TransportError("connection closed")
        self._tx.put(encode_message(msg))

    def recv(self, timeout: Optional[float] = None) -> WireMessage:
        if self._closed:
            raise TransportError("connection closed")
        try:
            frame = self._rx.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("recv timed out") from None
        if frame is _CLOSED:
            self._closed = True
            raise TransportError("peer closed connection")
        return decode_message(frame)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._tx.put(_CLOSED)


class TcpConnection(Connection):
    def __init__(self, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()

    def send(self, msg: WireMessage) -> None:
        try:
            with self._send_lock:
                self._sock.sendall(encode_message(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(n)
            except socket.timeout:
                raise TransportError("recv timed out") from None
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed connection")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: Optional[float] = None) -> WireMessage:
        self._sock.settimeout(timeout)
        header = self._read_exact(4)
        (body_len,) = _LEN.unpack(header)
        if body_len > core.MAX_FRAME_BODY:
            raise MalformedFrame("frame body too large")
        body = self._read_exact(body_len)
        return core.decode_body(body)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class Listener:
    def accept(self) -> Connection:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class LoopbackListener(Listener):
    def __init__(self, name: str = "loopback") -> None:
        self.name = name
        self._pending: "queue.SimpleQueue" = queue.SimpleQueue()
        self._closed = False

    def connect(self) -> Connection:
        """Dial this listener; returns the client end of a fresh pipe."""
        if self._closed:
            raise TransportError(f"{self.name}: endpoint down")
        a_to_b: "queue.SimpleQueue" = queue.SimpleQueue()
        b_to_a: "queue.SimpleQueue" = queue.SimpleQueue()
        server_end = LoopbackConnection(b_to_a, a_to_b)
        client_end = LoopbackConnection(a_to_b, b_to_a)
        self._pending.put(server_end)
        return client_end

    def accept(self) -> Connection:
        conn = self._pending.get()
        if conn is _CLOSED:
            raise TransportError("listener closed")
        return conn

    def close(self) -> None:
        self._closed = True
        self._pending.put(_CLOSED)


class TcpListener(Listener):
    def __init__(self, host: str, port: int) -> None:
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()

    def accept(self) -> Connection:
        try:
            sock, _ = self._sock.accept()
        except OSError as exc:
            raise TransportError(f"accept failed: {exc}") from exc
        return TcpConnection(sock)

    def close(self) -> None:
        self._sock.close()


Dial = Callable[[], Connection]


def tcp_dial(host: str, port: int, connect_timeout: float = 5.0) -> Dial:
    def dial() -> Connection:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise TransportError(f"connect to {host}:{port} failed: {exc}") from exc
        sock.settimeout(None)
        return TcpConnection(sock)

    return dial


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad endpoint {text!r}, want HOST:PORT")
    return host, int(port)


class RpcClient:
    """Pooled synchronous request/reply client.

    Each in-flight call borrows one connection, so independent calls from
    different threads proceed in parallel while a single call keeps strict
    request/reply framing on its connection.
    """

    def __init__(self, dial: Dial, max_idle: int = 8) -> None:
        self._dial = dial
        self._max_idle = max_idle
        self._idle: list[Connection] = []
        self._lock = threading.Lock()
        self._req_ids = itertools.count(1)
        self._closed = False

    def call(self, msg: WireMessage, timeout: Optional[float] = None) -> WireMessage:
        req_id = next(self._req_ids)
        msg = _with_req_id(msg, req_id)
        conn = self._borrow()
        try:
            conn.send(msg)
            reply = conn.recv(timeout=timeout)
        except TransportError:
            conn.close()
            raise
        self._give_back(conn)
        if isinstance(reply, ErrorReply):
            raise core.code_to_exception(reply.code, reply.message)
        if reply.req_id != req_id:
            conn.close()
            raise TransportError(f"reply id {reply.req_id} != request id {req_id}")
        return reply

    def _borrow(self) -> Connection:
        with self._lock:
            if self._closed:
                raise TransportError("client closed")
            if self._idle:
                return self._idle.pop()
        return self._dial()

    def _give_back(self, conn: Connection) -> None:
        with self._lock:
            if not self._closed and len(self._idle) < self._max_idle:
                self._idle.append(conn)
                return
        conn.close()

    def close(self) -> None:
        with self._lock:
            self._closed = True
            idle, self._idle = self._idle, []
        for conn in idle:
            conn.close()


def _with_req_id(msg: WireMessage, req_id: int):
    # Wire dataclasses are frozen; stamp the id via replace-equivalent.
    from dataclasses import replace

    return replace(msg, req_id=req_id)


Handler = Callable[[WireMessage], WireMessage]


class RpcServer:
    """Thread-per-connection frame server.

    The handler maps a request to a reply; exceptions become ErrorReply
    frames with the matching code, so the peer re-raises the same error
    class. A handler may block (lease grants do), tying up only its own
    connection thread.
    """

    def __init__(self, listener: Listener, handler: Handler, name: str = "rpc") -> None:
        self._listener = listener
        self._handler = handler
        self._name = name
        self._threads: list[threading.Thread] = []
        self._conns: list[Connection] = []
        self._lock = threading.Lock()
        self._stopping = False
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"{name}-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn = self._listener.accept()
            except (TransportError, OSError):
                return
            with self._lock:
                if self._stopping:
                    conn.close()
                    return
                self._conns.append(conn)
                t = threading.Thread(
                    target=self._serve_conn, args=(conn,),
                    name=f"{self._name}-conn", daemon=True,
                )
                self._threads.append(t)
            t.start()

    def _serve_conn(self, conn: Connection) -> None:
        while True:
            try:
                msg = conn.recv()
            except (TransportError, MalformedFrame):
                conn.close()
                return
            try:
                reply = self._handler(msg)
            except Exception as exc:  # noqa: BLE001 - every failure maps to a code
                reply = ErrorReply(
                    getattr(msg, "req_id", 0), int(core.exception_to_code(exc)), str(exc)
                )
            try:
                conn.send(reply)
            except TransportError:
                conn.close()
                return

    def close(self) -> None:
        with self._lock:
            self._stopping = True
            conns = list(self._conns)
        self._listener.close()
        for conn in conns:
            conn.close()
