"""Message channels: in-process queue pairs and framed TCP sockets.

Both encode every message to bytes, so the two transports exercise the same
codec and produce identical trajectories.
"""
from __future__ import annotations

import logging
import queue
import socket
import time
from typing import Callable, Optional

from .codec import (
    HEADER_SIZE,
    TAG_LOSS_REPORT,
    DecodeError,
    Message,
    decode,
    decode_uplink,
    encode,
    parse_header,
    report_payload_size,
)

log = logging.getLogger(__name__)


class TransportTimeout(TimeoutError):
    pass


class ChannelClosed(ConnectionError):
    pass


class Channel:
    """One end of a bidirectional message link.

    ``uplink=True`` marks the server's end: inbound frames are restricted to
    client message types.  Every inbound frame's ``(tag, payload length)`` is
    appended to ``received``.
    """

    def __init__(self, uplink: bool = False):
        self.uplink = uplink
        self.max_entries: Optional[int] = None
        self.received: list[tuple[int, int]] = []

    def send(self, msg: Message) -> None:
        self._send_frame(encode(msg))

    def recv(self, timeout: Optional[float] = None) -> Message:
        frame = self._recv_frame(timeout)
        length, tag = parse_header(frame)
        self.received.append((tag, length))
        if self.uplink:
            return decode_uplink(frame, self.max_entries)
        return decode(frame)

    def close(self) -> None:
        pass

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: Optional[float]) -> bytes:
        raise NotImplementedError


_CLOSED = object()


class QueueChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, uplink: bool = False):
        super().__init__(uplink)
        self._inbox = inbox
        self._outbox = outbox

    def _send_frame(self, frame: bytes) -> None:
        self._outbox.put(frame)

    def _recv_frame(self, timeout):
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no frame within {timeout} s") from None
        if frame is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ChannelClosed("peer closed the channel")
        return frame

    def close(self) -> None:
        self._outbox.put(_CLOSED)


def channel_pair() -> tuple[QueueChannel, QueueChannel]:
    """``(server_end, client_end)`` joined by two queues."""
    up, down = queue.Queue(), queue.Queue()
    return QueueChannel(up, down, uplink=True), QueueChannel(down, up)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket, uplink: bool = False):
        super().__init__(uplink)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_frame(self, frame: bytes) -> None:
        self.sock.settimeout(None)
        self.sock.sendall(frame)

    def _recv_exact(self, n: int, deadline: Optional[float]) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportTimeout("socket read timed out")
                self.sock.settimeout(left)
            else:
                self.sock.settimeout(None)
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                raise TransportTimeout("socket read timed out") from None
            if not chunk:
                raise ChannelClosed(f"connection closed after {len(buf)} of {n} bytes")
            buf += chunk
        return bytes(buf)

    def _recv_frame(self, timeout):
        deadline = None if timeout is None else time.monotonic() + timeout
        head = self._recv_exact(HEADER_SIZE, deadline)
        length, _ = parse_header(head)
        if self.uplink and self.max_entries is not None:
            # reject oversized uplink frames before reading their bodies
            if head[4] == TAG_LOSS_REPORT and length > report_payload_size(self.max_entries):
                raise DecodeError(f"uplink payload of {length} bytes exceeds report bound", 0)
        return head + self._recv_exact(length, deadline)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


class TcpListener:
    """Accepts client connections for the server."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.create_server((host, port), reuse_port=False)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: Optional[float] = None) -> SocketChannel:
        self.sock.settimeout(timeout)
        try:
            conn, peer = self.sock.accept()
        except socket.timeout:
            raise TransportTimeout("no client connected in time") from None
        log.info("client connected from %s:%d", *peer[:2])
        return SocketChannel(conn, uplink=True)

    def close(self) -> None:
        self.sock.close()


def tcp_connect(host: str, port: int, retry_for: float = 10.0,
                sleep: Callable[[float], None] = time.sleep) -> SocketChannel:
    deadline = time.monotonic() + retry_for
    while True:
        try:
            return SocketChannel(socket.create_connection((host, port)))
        except OSError:
            if time.monotonic() >= deadline:
                raise
            sleep(0.05)
