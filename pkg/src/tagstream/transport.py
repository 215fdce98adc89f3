"""Reliable frame streams: one TCP sender fanning out to many receivers.

A stream is the plain concatenation of encoded frames. On connect the
client sends ``TSRM-SUB v1 <kinds-bitmask>\\n`` and the server answers
``OK\\n``; the bitmask (bit 0 audio, bit 1 video, bit 2 metadata) declares
which kinds the application wants delivered. Filtering happens on the
receiving side: unwanted frames are still read off the wire and discarded.

A subscriber that stops reading is disconnected once its pending bytes
pass the high-water mark; senders never block on a slow consumer.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque

from . import frames
from .discovery import Announcer, SourceAdvertisement, local_advertise_host
from .frames import Frame, NeedMoreData, decode_frame, encode_frame

logger = logging.getLogger(__name__)

KIND_BIT_AUDIO = 1
KIND_BIT_VIDEO = 2
KIND_BIT_METADATA = 4
ALL_KINDS = KIND_BIT_AUDIO | KIND_BIT_VIDEO | KIND_BIT_METADATA

DEFAULT_HIGH_WATER_BYTES = 8 * 1024 * 1024
DEFAULT_CONNECT_TIMEOUT = 3.0
_HANDSHAKE_TIMEOUT = 5.0
_KIND_NAMES = {frames.KIND_AUDIO: "audio", frames.KIND_VIDEO: "video", frames.KIND_METADATA: "metadata"}


class ConnectError(Exception):
    """Could not reach the source or complete the subscription handshake."""


class _Sentinel:
    def __init__(self, name: str):
        self._name = name

    def __repr__(self) -> str:
        return self._name


#: recv_frame() outcomes that are not frames.
TIMEOUT = _Sentinel("TIMEOUT")
END_OF_STREAM = _Sentinel("END_OF_STREAM")


def kind_bit(kind: int) -> int:
    return 1 << kind


class _Subscriber:
    """One receiver connection; a writer thread drains a bounded byte queue."""

    def __init__(self, sock: socket.socket, peer, kinds_mask: int, high_water: int):
        self.sock = sock
        self.peer = peer
        self.kinds_mask = kinds_mask
        self.high_water = high_water
        self._queue: deque[bytes] = deque()
        self._pending_bytes = 0
        self._cond = threading.Condition()
        self._closing = False  # flush queue, then close
        self.dead = False
        self._thread = threading.Thread(target=self._drain, name=f"sub-writer-{peer}", daemon=True)
        self._thread.start()

    def enqueue(self, data: bytes) -> None:
        with self._cond:
            if self.dead or self._closing:
                return
            self._queue.append(data)
            self._pending_bytes += len(data)
            if self._pending_bytes > self.high_water:
                logger.warning(
                    "subscriber %s exceeded high-water mark (%d bytes pending); disconnecting",
                    self.peer, self._pending_bytes,
                )
                self._mark_dead_locked()
                return
            self._cond.notify()

    def _mark_dead_locked(self) -> None:
        self.dead = True
        self._queue.clear()
        self._pending_bytes = 0
        try:
            self.sock.shutdown(socket.SHUT_RDWR)  # wakes a blocked sendall
        except OSError:
            pass
        self._cond.notify()

    def _drain(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self.dead and not self._closing:
                    self._cond.wait()
                if self.dead:
                    break
                if not self._queue and self._closing:
                    break
                data = self._queue.popleft()
                self._pending_bytes -= len(data)
            try:
                self.sock.sendall(data)
            except OSError:
                with self._cond:
                    self._mark_dead_locked()
                break
        try:
            self.sock.close()
        except OSError:
            pass

    def close(self, *, flush: bool = True, timeout: float = 5.0) -> None:
        with self._cond:
            if flush:
                self._closing = True
            else:
                self._mark_dead_locked()
            self._cond.notify()
        self._thread.join(timeout=timeout)
        with self._cond:
            if not self.dead:
                self._mark_dead_locked()


class Sender:
    """Named frame source: TCP listener plus discovery announcer.

    send_frame is called from one producer thread; per-subscriber writer
    threads do the socket work, so a stalled receiver never delays the rest.
    """

    def __init__(
        self,
        name: str,
        group: str = "public",
        port: int = 0,
        *,
        announce: bool = True,
        announce_interval: float = 1.0,
        discovery_port: int | None = None,
        advertise_host: str | None = None,
        high_water: int = DEFAULT_HIGH_WATER_BYTES,
    ):
        self.name = name
        self.group = group
        self.high_water = high_water
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("", port))
        self._listener.listen(16)
        self._listener.settimeout(0.25)  # lets the accept loop notice close()
        self.port = self._listener.getsockname()[1]
        host = advertise_host if advertise_host is not None else local_advertise_host()
        self.advertisement = SourceAdvertisement(name=name, group=group, host=host, port=self.port)
        self._subscribers: list[_Subscriber] = []
        self._lock = threading.Lock()
        self.sent_frames = {"audio": 0, "video": 0, "metadata": 0}
        self._closed = False
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"sender-accept-{name}", daemon=True
        )
        self._accept_thread.start()
        self._announcer = (
            Announcer(self.advertisement, announce_interval, port=discovery_port)
            if announce
            else None
        )

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            threading.Thread(
                target=self._handshake, args=(conn, peer),
                name=f"sender-handshake-{peer}", daemon=True,
            ).start()

    def _handshake(self, conn: socket.socket, peer) -> None:
        try:
            conn.settimeout(_HANDSHAKE_TIMEOUT)
            line = b""
            while not line.endswith(b"\n"):
                if len(line) > 64:
                    raise ValueError("preamble too long")
                chunk = conn.recv(1)
                if not chunk:
                    raise ValueError("connection closed during preamble")
                line += chunk
            fields = line.decode("ascii").strip().split(" ")
            if len(fields) != 3 or fields[0] != "TSRM-SUB" or fields[1] != "v1":
                raise ValueError(f"bad preamble {line!r}")
            kinds_mask = int(fields[2])
            if not 0 <= kinds_mask <= ALL_KINDS:
                raise ValueError(f"bad kinds bitmask {kinds_mask}")
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except (OSError, ValueError, UnicodeDecodeError) as exc:
            logger.warning("rejected subscriber %s: %s", peer, exc)
            try:
                conn.close()
            except OSError:
                pass
            return
        # Register and reply under one lock: once the client sees OK, every
        # subsequent send_frame is guaranteed to reach it, in order.
        sub = _Subscriber(conn, peer, kinds_mask, self.high_water)
        with self._lock:
            if self._closed:
                sub.close(flush=False)
                return
            sub.enqueue(b"OK\n")
            self._subscribers.append(sub)
        logger.info("subscriber %s connected (kinds=%d)", peer, kinds_mask)

    @property
    def subscriber_count(self) -> int:
        with self._lock:
            self._subscribers = [s for s in self._subscribers if not s.dead]
            return len(self._subscribers)

    def send_frame(self, frame: Frame) -> None:
        """Encode once, hand to every live subscriber. Never raises per-subscriber."""
        data = encode_frame(frame)
        with self._lock:
            if self._closed:
                raise OSError("sender is closed")
            subs = list(self._subscribers)
        for sub in subs:
            sub.enqueue(data)
        with self._lock:
            self.sent_frames[_KIND_NAMES[frame.kind]] += 1
            self._subscribers = [s for s in self._subscribers if not s.dead]

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            subs = list(self._subscribers)
            self._subscribers = []
        if self._announcer is not None:
            self._announcer.stop()
        self._listener.close()
        for sub in subs:
            sub.close(flush=True)
        self._accept_thread.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def create_sender(name: str, group: str = "public", port: int = 0, **kwargs) -> Sender:
    return Sender(name, group, port, **kwargs)


class Receiver:
    """Single-consumer session yielding frames in wire order."""

    def __init__(self, sock: socket.socket, peer_address, kinds_mask: int):
        self._sock = sock
        self.peer_address = peer_address
        self.kinds_mask = kinds_mask
        self._buffer = bytearray()
        self._eof = False
        self._ended = False
        self.recv_frames = {"audio": 0, "video": 0, "metadata": 0}
        self.discarded_frames = 0

    @classmethod
    def connect(
        cls,
        source,
        *,
        kinds_mask: int = ALL_KINDS,
        timeout: float = DEFAULT_CONNECT_TIMEOUT,
    ) -> "Receiver":
        """Connect to a SourceAdvertisement or a (host, port) pair."""
        address = source.address if isinstance(source, SourceAdvertisement) else tuple(source)
        try:
            sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise ConnectError(f"cannot connect to {address}: {exc}") from exc
        try:
            sock.sendall(f"TSRM-SUB v1 {kinds_mask}\n".encode("ascii"))
            reply = b""
            while not reply.endswith(b"\n"):
                chunk = sock.recv(1)
                if not chunk or len(reply) > 16:
                    raise ConnectError(f"handshake with {address} failed: no OK")
                reply += chunk
            if reply != b"OK\n":
                raise ConnectError(f"handshake with {address} rejected: {reply!r}")
        except OSError as exc:
            sock.close()
            raise ConnectError(f"handshake with {address} failed: {exc}") from exc
        except ConnectError:
            sock.close()
            raise
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, address, kinds_mask)

    def _wants(self, frame: Frame) -> bool:
        return bool(self.kinds_mask & kind_bit(frame.kind))

    def _next_buffered(self) -> Frame | None:
        """Decode frames already buffered; apply the kind filter."""
        while True:
            try:
                frame, consumed = decode_frame(self._buffer)
            except NeedMoreData:
                return None
            del self._buffer[:consumed]
            self.recv_frames[_KIND_NAMES[frame.kind]] += 1
            if self._wants(frame):
                return frame
            self.discarded_frames += 1

    def recv_frame(self, timeout: float | None = None):
        """Next frame, or TIMEOUT / END_OF_STREAM.

        TIMEOUT is non-destructive; END_OF_STREAM is terminal and repeats.
        """
        if self._ended:
            return END_OF_STREAM
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            frame = self._next_buffered()
            if frame is not None:
                return frame
            if self._eof:
                # Trailing partial bytes are dropped: end after last complete frame.
                self._ended = True
                return END_OF_STREAM
            if deadline is None:
                self._sock.settimeout(None)
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return TIMEOUT
                self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(65536)
            except socket.timeout:
                return TIMEOUT
            except OSError:
                chunk = b""
            if not chunk:
                self._eof = True
            else:
                self._buffer.extend(chunk)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def connect(source, *, kinds_mask: int = ALL_KINDS, timeout: float = DEFAULT_CONNECT_TIMEOUT) -> Receiver:
    return Receiver.connect(source, kinds_mask=kinds_mask, timeout=timeout)
