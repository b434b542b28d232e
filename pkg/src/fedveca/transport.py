"""Message framing and the two round-synchronous transports (in-process queues, TCP sockets).

Wire format (see FRAMING.md)::

    u32 length | u8 tag | payload          length = 1 + len(payload)

Integers are signed 32-bit big-endian, reals IEEE-754 binary64 big-endian,
vectors are ``i32 dim`` followed by ``dim`` reals.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Union

import numpy as np

from .fed_core import ClientReport, RoundPlan

TAG_ROUND_START = 0x01
TAG_PREV_GLOBAL_GRAD = 0x02
TAG_CLIENT_REPORT = 0x03
TAG_STOP = 0x04
TAG_HELLO = 0x05

MAX_FRAME = 2**31
SOCKET_TIMEOUT = 60.0


class FrameError(ValueError):
    pass


class UnknownTagError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class LengthMismatchError(FrameError):
    pass


class MalformedPayloadError(FrameError):
    pass


class FrameTooLargeError(FrameError):
    pass


class RoundAbortError(RuntimeError):
    def __init__(self, client_id: int, reason: str):
        super().__init__(f"round aborted: client {client_id}: {reason}")
        self.client_id = client_id


@dataclass(frozen=True, eq=False)
class RoundStart:
    k: int
    tau: int
    w: np.ndarray

    def __eq__(self, other):
        return isinstance(other, RoundStart) and (self.k, self.tau) == (other.k, other.tau) and np.array_equal(self.w, other.w)


@dataclass(frozen=True, eq=False)
class PrevGlobalGrad:
    k_prev: int
    grad: np.ndarray

    def __eq__(self, other):
        return isinstance(other, PrevGlobalGrad) and self.k_prev == other.k_prev and np.array_equal(self.grad, other.grad)


@dataclass(frozen=True)
class ClientReportMsg:
    report: ClientReport


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class Hello:
    """Socket handshake naming the connecting client; not used on the in-process bus."""

    client_id: int


Message = Union[RoundStart, PrevGlobalGrad, ClientReportMsg, Stop, Hello]


def _vec(v) -> bytes:
    v = np.asarray(v, dtype=np.float64)
    return struct.pack(">i", v.shape[0]) + v.astype(">f8").tobytes()


def _payload(m) -> tuple:
    if isinstance(m, RoundStart):
        return TAG_ROUND_START, struct.pack(">ii", m.k, m.tau) + _vec(m.w)
    if isinstance(m, PrevGlobalGrad):
        return TAG_PREV_GLOBAL_GRAD, struct.pack(">i", m.k_prev) + _vec(m.grad)
    if isinstance(m, ClientReportMsg):
        r = m.report
        has = r.beta is not None
        if has != (r.delta is not None):
            raise ValueError("beta and delta must be both present or both absent")
        body = struct.pack(">iidi", r.client_id, r.tau_used, r.loss_at_start, int(has))
        if has:
            body += struct.pack(">dd", r.beta, r.delta)
        return TAG_CLIENT_REPORT, body + _vec(r.G) + _vec(r.grad_sum) + _vec(r.grad_at_start)
    if isinstance(m, Stop):
        return TAG_STOP, b""
    if isinstance(m, Hello):
        return TAG_HELLO, struct.pack(">i", m.client_id)
    raise TypeError(f"not a message: {m!r}")


def encode_frame(m: Message) -> bytes:
    tag, body = _payload(m)
    length = 1 + len(body)
    if length > MAX_FRAME:
        raise FrameTooLargeError(f"payload of {length} bytes exceeds 2**31")
    return struct.pack(">IB", length, tag) + body


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise LengthMismatchError(f"payload ends {self.pos + n - len(self.buf)} bytes early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def i32(self) -> int:
        return struct.unpack(">i", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self.take(8))[0]

    def vec(self) -> np.ndarray:
        dim = self.i32()
        if dim < 0:
            raise MalformedPayloadError(f"negative vector dimension {dim}")
        raw = self.take(8 * dim)
        return np.frombuffer(raw, dtype=">f8").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise LengthMismatchError(f"{len(self.buf) - self.pos} unread payload bytes")


def _decode_payload(tag: int, body: bytes) -> Message:
    rd = _Reader(body)
    if tag == TAG_ROUND_START:
        k, tau = rd.i32(), rd.i32()
        msg = RoundStart(k, tau, rd.vec())
    elif tag == TAG_PREV_GLOBAL_GRAD:
        k_prev = rd.i32()
        msg = PrevGlobalGrad(k_prev, rd.vec())
    elif tag == TAG_CLIENT_REPORT:
        cid, tau = rd.i32(), rd.i32()
        loss = rd.f64()
        has = rd.i32()
        if has not in (0, 1):
            raise MalformedPayloadError(f"estimate flag must be 0 or 1, got {has}")
        beta = delta = None
        if has:
            beta, delta = rd.f64(), rd.f64()
        G, gsum, g0 = rd.vec(), rd.vec(), rd.vec()
        msg = ClientReportMsg(ClientReport(cid, tau, G, gsum, g0, loss, beta, delta))
    elif tag == TAG_STOP:
        msg = Stop()
    elif tag == TAG_HELLO:
        msg = Hello(rd.i32())
    else:
        raise UnknownTagError(f"unknown tag 0x{tag:02x}")
    rd.done()
    return msg


def decode_frame(buf: bytes) -> Message:
    """Decode exactly one complete frame."""
    buf = bytes(buf)
    if len(buf) < 5:
        raise TruncatedFrameError(f"need at least 5 bytes, have {len(buf)}")
    (length,) = struct.unpack(">I", buf[:4])
    if length < 1:
        raise LengthMismatchError("frame length must count the tag byte")
    if len(buf) < 4 + length:
        raise TruncatedFrameError(f"frame declares {length} bytes, only {len(buf) - 4} present")
    if len(buf) > 4 + length:
        raise LengthMismatchError(f"{len(buf) - 4 - length} trailing bytes after frame")
    return _decode_payload(buf[4], buf[5:])


class FrameDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= 4:
            (length,) = struct.unpack(">I", self._buf[:4])
            if len(self._buf) < 4 + length:
                break
            frame = bytes(self._buf[:4 + length])
            del self._buf[:4 + length]
            out.append(decode_frame(frame))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_stream(data: bytes) -> List[Message]:
    dec = FrameDecoder()
    out = dec.feed(data)
    if dec.pending:
        raise TruncatedFrameError(f"{dec.pending} bytes of an incomplete frame at end of stream")
    return out


# --- endpoints -------------------------------------------------------------

class InProcChannel:
    """Two one-way queues between the server and one client."""

    def __init__(self, client_id: int):
        self.client_id = client_id
        self.to_client: "queue.Queue" = queue.Queue()
        self.to_server: "queue.Queue" = queue.Queue()


class InProcEndpoint:
    """Server-side handle on an in-process client."""

    def __init__(self, channel: InProcChannel):
        self.channel = channel
        self.client_id = channel.client_id

    def send(self, msg: Message) -> None:
        self.channel.to_client.put(msg)

    def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            return self.channel.to_server.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no message within {timeout} s") from None

    def close(self) -> None:
        pass


class _InProcClientSide:
    def __init__(self, channel: InProcChannel):
        self.channel = channel

    def send(self, msg: Message) -> None:
        self.channel.to_server.put(msg)

    def recv(self) -> Message:
        return self.channel.to_client.get()


class SocketEndpoint:
    """Server-side handle on one TCP client connection."""

    def __init__(self, sock: socket.socket, client_id: int, decoder: FrameDecoder, backlog: List[Message]):
        self.sock = sock
        self.client_id = client_id
        self._decoder = decoder
        self._backlog = list(backlog)

    def send(self, msg: Message) -> None:
        self.sock.sendall(encode_frame(msg))

    def recv(self, timeout: Optional[float] = SOCKET_TIMEOUT) -> Message:
        return _sock_recv(self.sock, self._decoder, self._backlog, timeout)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def _sock_recv(sock, decoder: FrameDecoder, backlog: List[Message], timeout) -> Message:
    sock.settimeout(timeout)
    while not backlog:
        try:
            data = sock.recv(65536)
        except socket.timeout:
            raise TimeoutError(f"no message within {timeout} s") from None
        if not data:
            raise ConnectionError("connection closed by peer")
        backlog.extend(decoder.feed(data))
    return backlog.pop(0)


class _SocketClientSide:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._decoder = FrameDecoder()
        self._backlog: List[Message] = []

    def send(self, msg: Message) -> None:
        self.sock.sendall(encode_frame(msg))

    def recv(self) -> Message:
        return _sock_recv(self.sock, self._decoder, self._backlog, None)


def serve_client(link, handle_round: Callable[[RoundStart, Optional[PrevGlobalGrad]], ClientReport]) -> None:
    """Client message loop: answer each RoundStart (plus PrevGlobalGrad when k >= 1) until Stop."""
    while True:
        msg = link.recv()
        if isinstance(msg, Stop):
            return
        if not isinstance(msg, RoundStart):
            raise FrameError(f"client expected RoundStart, got {type(msg).__name__}")
        prev = None
        if msg.k >= 1:
            prev = link.recv()
            if not isinstance(prev, PrevGlobalGrad):
                raise FrameError(f"client expected PrevGlobalGrad, got {type(prev).__name__}")
        link.send(ClientReportMsg(handle_round(msg, prev)))


def broadcast_and_collect(plan: RoundPlan, endpoints, timeout: Optional[float] = None) -> List[ClientReport]:
    """Send round ``plan.k`` to every client and block until all reports arrive (sorted by client id)."""
    for ep in endpoints:
        try:
            ep.send(RoundStart(plan.k, int(plan.tau_per_client[ep.client_id]), plan.w))
            if plan.k >= 1:
                ep.send(PrevGlobalGrad(plan.k - 1, plan.prev_global_grad))
        except OSError as exc:
            raise RoundAbortError(ep.client_id, f"send failed: {exc}") from exc
    reports = []
    for ep in endpoints:
        try:
            msg = ep.recv(timeout) if timeout is not None else ep.recv()
        except TimeoutError as exc:
            raise RoundAbortError(ep.client_id, f"timed out: {exc}") from exc
        except (OSError, FrameError) as exc:
            raise RoundAbortError(ep.client_id, str(exc)) from exc
        if isinstance(msg, BaseException):
            raise RoundAbortError(ep.client_id, f"client failed: {msg}") from msg
        if not isinstance(msg, ClientReportMsg) or msg.report.client_id != ep.client_id:
            raise RoundAbortError(ep.client_id, f"unexpected reply {msg!r}")
        reports.append(msg.report)
    return sorted(reports, key=lambda r: r.client_id)


class _ClientThread(threading.Thread):
    def __init__(self, target, name):
        super().__init__(name=name, daemon=True)
        self._target_fn = target
        self.error: Optional[BaseException] = None

    def run(self):
        try:
            self._target_fn()
        except BaseException as exc:  # surfaced to the server via the channel or join
            self.error = exc


class Transport:
    """Owns the client endpoints and worker threads for one experiment."""

    def __init__(self, endpoints, threads, timeout, closers=()):
        self.endpoints = endpoints
        self.threads = threads
        self.timeout = timeout
        self._closers = list(closers)

    def round(self, plan: RoundPlan) -> List[ClientReport]:
        return broadcast_and_collect(plan, self.endpoints, self.timeout)

    def close(self) -> None:
        for ep in self.endpoints:
            try:
                ep.send(Stop())
            except OSError:
                pass
        for t in self.threads:
            t.join(timeout=5.0)
        for ep in self.endpoints:
            ep.close()
        for c in self._closers:
            c()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def inproc_transport(handlers, timeout: Optional[float] = None) -> Transport:
    """One thread per client, connected by queues. ``handlers[i]`` answers client ``i``'s rounds."""
    endpoints, threads = [], []
    for cid, handler in enumerate(handlers):
        ch = InProcChannel(cid)
        side = _InProcClientSide(ch)

        def loop(side=side, handler=handler):
            try:
                serve_client(side, handler)
            except BaseException as exc:
                side.send(exc)
                raise

        t = _ClientThread(loop, f"client-{cid}")
        t.start()
        endpoints.append(InProcEndpoint(ch))
        threads.append(t)
    return Transport(endpoints, threads, timeout)


def run_socket_client(host: str, port: int, client_id: int, handler) -> None:
    """Connect to a listening server, identify as ``client_id`` and serve rounds until Stop."""
    with socket.create_connection((host, port), timeout=SOCKET_TIMEOUT) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        link = _SocketClientSide(sock)
        link.send(Hello(client_id))
        serve_client(link, handler)


def accept_clients(listener: socket.socket, n_clients: int, timeout: float = SOCKET_TIMEOUT) -> List[SocketEndpoint]:
    """Accept ``n_clients`` connections and order them by the client id in their Hello frame."""
    found = {}
    listener.settimeout(timeout)
    while len(found) < n_clients:
        try:
            conn, _ = listener.accept()
        except socket.timeout:
            missing = [i for i in range(n_clients) if i not in found]
            raise RoundAbortError(missing[0], "never connected") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        dec = FrameDecoder()
        backlog: List[Message] = []
        hello = _sock_recv(conn, dec, backlog, timeout)
        if not isinstance(hello, Hello) or not 0 <= hello.client_id < n_clients or hello.client_id in found:
            conn.close()
            raise FrameError(f"bad handshake {hello!r}")
        found[hello.client_id] = SocketEndpoint(conn, hello.client_id, dec, backlog)
    return [found[i] for i in range(n_clients)]


def socket_transport(handlers, port: int = 0, host: str = "127.0.0.1", timeout: float = SOCKET_TIMEOUT) -> Transport:
    """Listen on ``host:port`` and run each client handler in a thread connected over TCP."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(len(handlers))
    bound_port = listener.getsockname()[1]
    threads = []
    for cid, handler in enumerate(handlers):
        t = _ClientThread(lambda cid=cid, h=handler: run_socket_client(host, bound_port, cid, h), f"sock-client-{cid}")
        t.start()
        threads.append(t)
    try:
        endpoints = accept_clients(listener, len(handlers), timeout)
    except BaseException:
        listener.close()
        raise
    return Transport(endpoints, threads, timeout, closers=[listener.close])


def open_transport(kind: str, handlers, timeout: Optional[float] = None) -> Transport:
    """``kind`` is ``"inproc"`` or ``"socket:<port>"`` (port 0 picks a free one)."""
    if kind == "inproc":
        return inproc_transport(handlers, timeout)
    if kind.startswith("socket:"):
        port = int(kind.split(":", 1)[1])
        return socket_transport(handlers, port, timeout=SOCKET_TIMEOUT if timeout is None else timeout)
    raise ValueError(f"unknown transport {kind!r}")
