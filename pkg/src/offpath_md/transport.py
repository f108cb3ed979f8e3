"""Point-to-point message transport between workers.

Every worker owns an endpoint identified by its rank ``2 * node + role``.  Messages
between an ordered pair of ranks are delivered reliably and in FIFO order; a
receive names the peer and the tag it expects.  Two implementations share one
interface: ``InProcessHub`` (threads in one process) and ``SocketEndpoint``
(TCP between processes).

Wire frame (socket transport)::

    tag     u32 little-endian
    length  u32 little-endian   payload bytes
    stamp   f64 little-endian   sender clock reading
    payload
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

HOST, OFFLOAD = 0, 1
ROLE_NAMES = {HOST: "host", OFFLOAD: "offload"}

DEFAULT_TIMEOUT = 120.0

_FRAME = struct.Struct("<IId")
_HELLO = struct.Struct("<I")


class Tag(IntEnum):
    EXCHANGE = 1
    BORDER = 2
    COMMUNICATE = 3
    X_SNAPSHOT = 4
    PLAN = 5
    PERMUTATION = 6
    F_RESULT = 7
    NLIST = 8
    CONTROL = 9


class TransportError(RuntimeError):
    pass


class PeerClosed(TransportError):
    """The peer went away before sending the awaited message."""


class TransportTimeout(TransportError):
    pass


class ProtocolDesync(TransportError):
    """A peer sent something other than what the protocol step requires."""

    def __init__(self, message: str, *, expected: Tag | None = None, peer: int | None = None,
                 iteration: int | None = None) -> None:
        super().__init__(message)
        self.expected = expected
        self.peer = peer
        self.iteration = iteration


def rank_of(node: int, role: int) -> int:
    return 2 * node + role


def worker_of(rank: int) -> tuple[int, int]:
    return rank // 2, rank % 2


def worker_name(rank: int) -> str:
    node, role = worker_of(rank)
    return f"{ROLE_NAMES[role]}[{node}]"


@dataclass(frozen=True)
class Message:
    tag: Tag
    payload: bytes
    stamp: float = 0.0

    @property
    def length(self) -> int:
        return len(self.payload)


# ---------------------------------------------------------------------------
# payload codec: count, then per array dtype code, ndim, shape, raw LE data

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}


def pack_arrays(*arrays) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a)
        if a.dtype.kind == "f":
            a = a.astype("<f8", copy=False)
        elif a.dtype.kind in "iub":
            a = a.astype("<i8", copy=False)
        else:
            raise TypeError(f"cannot serialize dtype {a.dtype}")
        parts.append(struct.pack("<BB", _CODES[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def unpack_arrays(payload: bytes) -> list[np.ndarray]:
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    out = []
    for _ in range(count):
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = n * dtype.itemsize
        if pos + nbytes > len(view):
            raise TransportError("truncated array payload")
        out.append(np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(shape).copy())
        pos += nbytes
    if pos != len(view):
        raise TransportError(f"{len(view) - pos} trailing bytes in array payload")
    return out


# ---------------------------------------------------------------------------


class Mailbox:
    """Inbound messages of one endpoint, queued per source rank."""

    def __init__(self) -> None:
        self._queues: dict[int, deque[Message]] = {}
        self._closed: set[int] = set()
        self._shut = False
        self._cond = threading.Condition()
        # optional CpuGate released while blocked
        self.gate = None

    def deliver(self, src: int, msg: Message) -> None:
        with self._cond:
            self._queues.setdefault(src, deque()).append(msg)
            self._cond.notify_all()

    def peer_closed(self, src: int) -> None:
        with self._cond:
            self._closed.add(src)
            self._cond.notify_all()

    def shutdown(self) -> None:
        with self._cond:
            self._shut = True
            self._cond.notify_all()

    def _find(self, src: int, tag: Tag | None) -> int:
        q = self._queues.get(src)
        if not q:
            return -1
        if tag is None:
            return 0
        for k, m in enumerate(q):
            if m.tag == tag:
                return k
        return -1

    def probe(self, src: int, tag: Tag | None = None) -> bool:
        with self._cond:
            return self._find(src, tag) >= 0

    def take(self, src: int, tag: Tag | None, timeout: float | None, strict: bool = False) -> Message:
        """Oldest message from ``src`` with ``tag``.

        With ``strict`` the oldest message from ``src`` of any tag must carry
        ``tag``; anything else is a protocol desync.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        gate = self.gate
        while True:
            with self._cond:
                msg = self._poll(src, tag, strict, timeout, deadline)
                if msg is not None:
                    return msg
                if gate is None:
                    self._cond.wait(self._remaining(deadline))
                    continue
            gate.release()
            try:
                with self._cond:
                    while not self._ready(src, tag, strict, deadline):
                        self._cond.wait(self._remaining(deadline))
            finally:
                gate.acquire()

    @staticmethod
    def _remaining(deadline: float | None) -> float | None:
        return None if deadline is None else max(0.0, deadline - time.monotonic())

    def _ready(self, src: int, tag: Tag | None, strict: bool, deadline: float | None) -> bool:
        return (
            self._find(src, None if strict else tag) >= 0
            or src in self._closed
            or self._shut
            or (deadline is not None and time.monotonic() >= deadline)
        )

    def _poll(self, src: int, tag: Tag | None, strict: bool, timeout: float | None,
              deadline: float | None) -> Message | None:
        k = self._find(src, None if strict else tag)
        if k >= 0:
            q = self._queues[src]
            if strict and q[0].tag != tag:
                raise ProtocolDesync(
                    f"expected {tag.name} from {worker_name(src)}, got {Tag(q[0].tag).name}",
                    expected=tag, peer=src,
                )
            msg = q[k]
            del q[k]
            return msg
        if src in self._closed:
            raise PeerClosed(f"{worker_name(src)} closed while {_tag_name(tag)} was awaited")
        if self._shut:
            raise PeerClosed(f"endpoint shut down while awaiting {_tag_name(tag)}")
        if deadline is not None and time.monotonic() >= deadline:
            raise TransportTimeout(f"no {_tag_name(tag)} from {worker_name(src)} within {timeout:g}s")
        return None


def _tag_name(tag: Tag | None) -> str:
    return "any message" if tag is None else Tag(tag).name


class Endpoint:
    """Common send/receive surface.  ``clock`` is stamped onto outgoing messages
    and advanced on receipt (see ``offpath_md.clock``)."""

    rank: int
    n_ranks: int

    def __init__(self, rank: int, n_ranks: int, timeout: float = DEFAULT_TIMEOUT) -> None:
        self.rank = rank
        self.n_ranks = n_ranks
        self.timeout = timeout
        self.clock = None
        self.mailbox = Mailbox()
        self.bytes_sent = 0
        self.messages_sent = 0

    def _stamp(self) -> float:
        return self.clock.now() if self.clock is not None else 0.0

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.n_ranks:
            raise TransportError(f"no such peer rank {peer} (have {self.n_ranks})")

    def send(self, peer: int, tag: Tag, payload: bytes, stamp: float | None = None) -> None:
        self._check_peer(peer)
        msg = Message(Tag(tag), bytes(payload), self._stamp() if stamp is None else stamp)
        self._send(peer, msg)
        self.bytes_sent += msg.length
        self.messages_sent += 1

    def _send(self, peer: int, msg: Message) -> None:
        raise NotImplementedError

    def recv(self, peer: int, tag: Tag, timeout: float | None = None, strict: bool = False) -> Message:
        self._check_peer(peer)
        msg = self.mailbox.take(peer, Tag(tag), self.timeout if timeout is None else timeout, strict)
        if self.clock is not None:
            self.clock.observe(msg.stamp)
        return msg

    def recv_strict(self, peer: int, tag: Tag, timeout: float | None = None) -> Message:
        return self.recv(peer, tag, timeout, strict=True)

    def probe(self, peer: int, tag: Tag | None = None) -> bool:
        return self.mailbox.probe(peer, tag)

    def send_arrays(self, peer: int, tag: Tag, *arrays) -> None:
        self.send(peer, tag, pack_arrays(*arrays))

    def recv_arrays(self, peer: int, tag: Tag, strict: bool = False) -> list[np.ndarray]:
        return unpack_arrays(self.recv(peer, tag, strict=strict).payload)

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------


class InProcessHub:
    """Endpoints for ``n_ranks`` workers running as threads of one process."""

    def __init__(self, n_ranks: int, timeout: float = DEFAULT_TIMEOUT) -> None:
        self.endpoints = [InProcessEndpoint(self, r, n_ranks, timeout) for r in range(n_ranks)]

    def endpoint(self, rank: int) -> InProcessEndpoint:
        return self.endpoints[rank]

    def close(self) -> None:
        for ep in self.endpoints:
            ep.close()


class InProcessEndpoint(Endpoint):
    def __init__(self, hub: InProcessHub, rank: int, n_ranks: int, timeout: float) -> None:
        super().__init__(rank, n_ranks, timeout)
        self._hub = hub
        self.closed = False

    def _send(self, peer: int, msg: Message) -> None:
        if self.closed:
            raise TransportError(f"{worker_name(self.rank)} endpoint is closed")
        target = self._hub.endpoints[peer]
        if target.closed:
            raise PeerClosed(f"{worker_name(peer)} is unreachable (closed)")
        target.mailbox.deliver(self.rank, msg)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for ep in self._hub.endpoints:
            if ep is not self:
                ep.mailbox.peer_closed(self.rank)
        self.mailbox.shutdown()


# ---------------------------------------------------------------------------


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not host:
        raise ValueError(f"address {text!r} is not host:port")
    return host, int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            return None
        got += k
    return bytes(buf)


class SocketEndpoint(Endpoint):
    """TCP endpoint.  One outbound stream per peer is opened lazily on first send,
    so FIFO per ordered pair follows from TCP ordering."""

    def __init__(self, rank: int, addresses: list[tuple[str, int]], listener: socket.socket | None = None,
                 timeout: float = DEFAULT_TIMEOUT, connect_timeout: float = 30.0) -> None:
        super().__init__(rank, len(addresses), timeout)
        self.addresses = list(addresses)
        self.connect_timeout = connect_timeout
        if listener is None:
            listener = socket.create_server(self.addresses[rank], reuse_port=False)
        self._listener = listener
        self._out: dict[int, socket.socket] = {}
        self._out_locks = {p: threading.Lock() for p in range(self.n_ranks)}
        self._inbound: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self.closed = False
        accept = threading.Thread(target=self._accept_loop, name=f"accept-{rank}", daemon=True)
        accept.start()
        self._threads.append(accept)

    @staticmethod
    def listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
        return socket.create_server((host, port))

    def _accept_loop(self) -> None:
        while not self.closed:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._inbound.append(conn)
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                                 name=f"reader-{self.rank}")
            t.start()
            self._threads.append(t)

    def _read_loop(self, conn: socket.socket) -> None:
        src = None
        try:
            hello = _recv_exact(conn, _HELLO.size)
            if hello is None:
                return
            (src,) = _HELLO.unpack(hello)
            while True:
                head = _recv_exact(conn, _FRAME.size)
                if head is None:
                    break
                tag, length, stamp = _FRAME.unpack(head)
                payload = _recv_exact(conn, length) if length else b""
                if payload is None:
                    break
                self.mailbox.deliver(src, Message(Tag(tag), payload, stamp))
        except OSError:
            pass
        finally:
            if src is not None:
                self.mailbox.peer_closed(src)

    def _connect(self, peer: int) -> socket.socket:
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                sock = socket.create_connection(self.addresses[peer], timeout=self.connect_timeout)
                break
            except OSError as err:
                if time.monotonic() > deadline:
                    raise PeerClosed(f"{worker_name(peer)} unreachable at {self.addresses[peer]}: {err}")
                time.sleep(0.02)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(_HELLO.pack(self.rank))
        # the peer never writes on this stream; end-of-file means it closed
        t = threading.Thread(target=self._watch, args=(sock, peer), daemon=True, name=f"watch-{self.rank}")
        t.start()
        self._threads.append(t)
        return sock

    def _watch(self, sock: socket.socket, peer: int) -> None:
        try:
            sock.recv(1)
        except OSError:
            pass
        if not self.closed:
            self.mailbox.peer_closed(peer)

    def _send(self, peer: int, msg: Message) -> None:
        if self.closed:
            raise TransportError(f"{worker_name(self.rank)} endpoint is closed")
        with self._out_locks[peer]:
            sock = self._out.get(peer)
            if sock is None:
                sock = self._out[peer] = self._connect(peer)
            try:
                sock.sendall(_FRAME.pack(int(msg.tag), msg.length, msg.stamp) + msg.payload)
            except OSError as err:
                raise PeerClosed(f"{worker_name(peer)} unreachable: {err}") from err

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for peer, sock in list(self._out.items()):
            with self._out_locks[peer]:
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                sock.close()
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in self._inbound:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self.mailbox.shutdown()


def local_socket_endpoints(n_ranks: int, timeout: float = DEFAULT_TIMEOUT) -> list[SocketEndpoint]:
    """Socket endpoints on loopback ports chosen by the OS, all in this process."""
    listeners = [SocketEndpoint.listen() for _ in range(n_ranks)]
    addresses = [ls.getsockname()[:2] for ls in listeners]
    return [SocketEndpoint(r, addresses, listeners[r], timeout) for r in range(n_ranks)]


# ---------------------------------------------------------------------------


class Throttle:
    """Makes a worker look ``factor`` times slower on compute kernels.

    After each wrapped kernel call the worker's clock is delayed by
    ``(factor - 1)`` times the kernel's measured duration: a real sleep on a wall
    clock, an added offset on a virtual clock.  Numerical results are untouched.
    """

    def __init__(self, factor: float = 1.0, clock=None) -> None:
        if not factor >= 1.0:
            raise ValueError(f"throttle factor must be >= 1, got {factor}")
        self.factor = float(factor)
        self.clock = clock
        self.injected = 0.0

    def run(self, fn, *args, **kwargs):
        if self.factor == 1.0 or self.clock is None:
            return fn(*args, **kwargs)
        t0 = self.clock.now()
        out = fn(*args, **kwargs)
        extra = (self.factor - 1.0) * (self.clock.now() - t0)
        self.clock.delay(extra)
        self.injected += extra
        return out
