"""Loopback TCP transport.

Every ordered rank pair gets its own connection, so per-pair FIFO order is
inherited from the TCP stream. Frames are an 8-byte little-endian length
followed by the payload. Times are wall-clock microseconds.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time

from ..errors import ConfigurationError, TransportError
from .base import DEFAULT_TIMEOUT_S, CostModelParams, Transport, TransferHandle, _Message

log = logging.getLogger(__name__)

_LEN = struct.Struct("<Q")
_HELLO = struct.Struct("<I")


def bind_listener(host: str = "127.0.0.1") -> tuple[socket.socket, tuple[str, int]]:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, 0))
    sock.listen(64)
    return sock, sock.getsockname()[:2]


def _recv_exactly(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class TcpTransport(Transport):
    """Socket transport hosting some (by default all) ranks of the world.

    For one process per rank, each process binds a listener with
    :func:`bind_listener`, the endpoints are exchanged out of band, and each
    process builds ``TcpTransport(n, local_ranks=[r], endpoints=..., listeners={r: sock})``.
    """

    virtual = False
    name = "tcp"

    def __init__(self, world_size: int, *, local_ranks=None, endpoints=None, listeners=None,
                 cost: CostModelParams | None = None, timeout_s: float = DEFAULT_TIMEOUT_S):
        super().__init__(world_size, cost=cost, timeout_s=timeout_s)
        self.local_ranks = sorted(range(world_size) if local_ranks is None else local_ranks)
        listeners = dict(listeners or {})
        endpoints = dict(endpoints or {})
        for r in self.local_ranks:
            self._check_rank(r)
            if r not in listeners:
                listeners[r], endpoints[r] = bind_listener()
        missing = set(range(world_size)) - set(endpoints)
        if missing:
            raise ConfigurationError(f"no endpoint for ranks {sorted(missing)}")
        self._t0 = time.perf_counter()
        self._listeners = listeners
        self._threads: list[threading.Thread] = []
        self._sockets: list[socket.socket] = []
        self._outboxes: dict[tuple[int, int], queue.Queue] = {}

        for r, sock in listeners.items():
            self._spawn(self._accept_loop, r, sock)
        for r in self.local_ranks:
            for s in range(world_size):
                if s != r:
                    self._connect(r, s, endpoints[s])

    def _spawn(self, target, *args) -> None:
        t = threading.Thread(target=target, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def _connect(self, src: int, dst: int, address) -> None:
        deadline = time.monotonic() + self.timeout_s
        while True:
            try:
                sock = socket.create_connection(tuple(address), timeout=self.timeout_s)
                break
            except ConnectionRefusedError:
                if time.monotonic() > deadline:
                    raise TransportError(f"rank {src} could not reach rank {dst} at {address}")
                time.sleep(0.01)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(_HELLO.pack(src))
        self._sockets.append(sock)
        box: queue.Queue = queue.Queue()
        self._outboxes[(src, dst)] = box
        self._spawn(self._writer, sock, box)

    def _accept_loop(self, rank: int, listener: socket.socket) -> None:
        for _ in range(self.world_size - 1):
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sockets.append(conn)
            self._spawn(self._reader, rank, conn)

    def _reader(self, rank: int, conn: socket.socket) -> None:
        try:
            hello = _recv_exactly(conn, _HELLO.size)
            if hello is None:
                return
            (src,) = _HELLO.unpack(hello)
            while True:
                head = _recv_exactly(conn, _LEN.size)
                if head is None:
                    return
                (n,) = _LEN.unpack(head)
                payload = _recv_exactly(conn, n) if n else b""
                if payload is None:
                    return
                with self._cond:
                    self._matcher.offer_message(src, rank, _Message(payload, 0.0))
                    self._cond.notify_all()
        except OSError as exc:
            if not self._closed:
                log.warning("reader for rank %d stopped: %s", rank, exc)

    def _writer(self, sock: socket.socket, box: queue.Queue) -> None:
        while True:
            item = box.get()
            if item is None:
                return
            handle, frame = item
            try:
                sock.sendall(frame)
            except OSError as exc:
                with self._cond:
                    handle._error = TransportError(f"{handle.describe()} failed: {exc}")
                    self._cond.notify_all()
                return
            with self._cond:
                handle._matched = True
                self._cond.notify_all()

    def _deliver(self, handle: TransferHandle, data: bytes) -> None:
        box = self._outboxes.get((handle.owner, handle.peer))
        if box is None:
            raise ConfigurationError(f"rank {handle.owner} is not hosted by this transport")
        box.put((handle, _LEN.pack(len(data)) + data))

    def now(self, rank: int) -> float:
        return (time.perf_counter() - self._t0) * 1e6

    def _charge_wait(self, rank, handles, start_us, overlap_credit_us):
        return self.now(rank) - start_us, 0.0

    def close(self) -> None:
        super().close()
        for box in self._outboxes.values():
            box.put(None)
        for sock in list(self._listeners.values()) + self._sockets:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for t in self._threads:
            t.join(timeout=1.0)
