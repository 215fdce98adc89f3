"""Source discovery over UDP: announce senders, find them, expire the dead.

Announcement datagram (normative): one UTF-8 line, at most 512 bytes:

    TSRM-ANN v1 <group> <name> <host> <port>

Announcers broadcast every ``interval`` seconds; a Finder keeps one entry
per (group, name), last writer wins, and drops entries not refreshed
within ``ttl`` seconds (default 5 x interval, so four lost datagrams are
tolerated). TSRM_DISCOVERY_PORT overrides the default port 5959.
"""

from __future__ import annotations

import logging
import os
import socket
import threading
import time
from dataclasses import dataclass

logger = logging.getLogger(__name__)

DEFAULT_DISCOVERY_PORT = 5959
DEFAULT_ANNOUNCE_INTERVAL = 1.0
DEFAULT_TTL = 5.0
ANNOUNCE_PREFIX = "TSRM-ANN v1"
MAX_ANNOUNCEMENT_BYTES = 512


def discovery_port(override: int | None = None) -> int:
    if override is not None:
        return override
    env = os.environ.get("TSRM_DISCOVERY_PORT")
    return int(env) if env else DEFAULT_DISCOVERY_PORT


@dataclass(frozen=True)
class SourceAdvertisement:
    name: str
    host: str
    port: int
    group: str = "public"
    announced_at: float = 0.0  # monotonic receive time, set by the finder

    def __post_init__(self):
        if not self.name:
            raise ValueError("source name must be non-empty")
        if self.port == 0:
            raise ValueError("source port must be non-zero")
        for label, value in (("name", self.name), ("group", self.group)):
            if len(value.encode("utf-8")) > 255:
                raise ValueError(f"source {label} exceeds 255 UTF-8 bytes")
            if any(ch.isspace() for ch in value):
                raise ValueError(f"source {label} must not contain whitespace")

    @property
    def key(self) -> tuple[str, str]:
        return (self.group, self.name)

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)


def encode_announcement(ad: SourceAdvertisement) -> bytes:
    line = f"{ANNOUNCE_PREFIX} {ad.group} {ad.name} {ad.host} {ad.port}"
    data = line.encode("utf-8")
    if len(data) > MAX_ANNOUNCEMENT_BYTES:
        raise ValueError(f"announcement of {len(data)} bytes exceeds {MAX_ANNOUNCEMENT_BYTES}")
    return data


def parse_announcement(data: bytes) -> SourceAdvertisement:
    try:
        text = data.decode("utf-8").strip()
    except UnicodeDecodeError as exc:
        raise ValueError(f"announcement is not UTF-8: {exc}") from exc
    fields = text.split(" ")
    if len(fields) != 6 or f"{fields[0]} {fields[1]}" != ANNOUNCE_PREFIX:
        raise ValueError(f"malformed announcement {text!r}")
    _, _, group, name, host, port_text = fields
    try:
        port = int(port_text)
    except ValueError as exc:
        raise ValueError(f"malformed announcement port {port_text!r}") from exc
    if not 1 <= port <= 65535:
        raise ValueError(f"announcement port {port} out of range")
    return SourceAdvertisement(
        name=name, group=group, host=host, port=port, announced_at=time.monotonic()
    )


class Announcer:
    """Periodically rebroadcasts one advertisement until stopped.

    By default datagrams go to both the limited-broadcast address and
    loopback, so same-host finders work even where broadcast routing
    does not.
    """

    def __init__(
        self,
        ad: SourceAdvertisement,
        interval: float = DEFAULT_ANNOUNCE_INTERVAL,
        *,
        port: int | None = None,
        destinations: list[tuple[str, int]] | None = None,
    ):
        self.ad = ad
        self.interval = interval
        target_port = discovery_port(port)
        if destinations is None:
            destinations = [("255.255.255.255", target_port), ("127.0.0.1", target_port)]
        self.destinations = destinations
        self._payload = encode_announcement(ad)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        except OSError:
            pass
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._run, name=f"announcer-{ad.group}/{ad.name}", daemon=True
        )
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            self._send_once()
            self._stop.wait(self.interval)

    def _send_once(self) -> None:
        for dest in self.destinations:
            try:
                self._sock.sendto(self._payload, dest)
            except OSError as exc:
                # Transient send failures are logged and retried next tick.
                logger.debug("announce to %s failed: %s", dest, exc)

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)
        self._sock.close()


def start_announcer(
    ad: SourceAdvertisement,
    interval: float = DEFAULT_ANNOUNCE_INTERVAL,
    **kwargs,
) -> Announcer:
    return Announcer(ad, interval, **kwargs)


class Finder:
    """Listens for announcements and answers "what sources exist right now".

    A background thread ingests datagrams; poll() may be called from one
    control thread concurrently. Malformed datagrams are counted, never
    fatal.
    """

    def __init__(
        self,
        *,
        port: int | None = None,
        ttl: float = DEFAULT_TTL,
        bind_host: str = "",
    ):
        self.ttl = ttl
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((bind_host, discovery_port(port)))
        self._sock.settimeout(0.2)
        self.port = self._sock.getsockname()[1]
        self._table: dict[tuple[str, str], SourceAdvertisement] = {}
        self._lock = threading.Lock()
        self.malformed_count = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._ingest, name="finder-ingest", daemon=True)
        self._thread.start()

    def _ingest(self) -> None:
        while not self._stop.is_set():
            try:
                data, _addr = self._sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                ad = parse_announcement(data)
            except ValueError as exc:
                with self._lock:
                    self.malformed_count += 1
                logger.debug("dropped malformed announcement: %s", exc)
                continue
            with self._lock:
                self._table[ad.key] = ad

    def poll(self) -> list[SourceAdvertisement]:
        """Current non-expired sources, sorted by (group, name)."""
        cutoff = time.monotonic() - self.ttl
        with self._lock:
            expired = [key for key, ad in self._table.items() if ad.announced_at < cutoff]
            for key in expired:
                del self._table[key]
            return sorted(self._table.values(), key=lambda ad: ad.key)

    def get(self, group: str, name: str) -> SourceAdvertisement | None:
        for ad in self.poll():
            if ad.key == (group, name):
                return ad
        return None

    def wait_for(self, group: str, name: str, timeout: float) -> SourceAdvertisement | None:
        deadline = time.monotonic() + timeout
        while True:
            ad = self.get(group, name)
            if ad is not None or time.monotonic() >= deadline:
                return ad
            time.sleep(0.05)

    def close(self) -> None:
        self._stop.set()
        self._sock.close()
        self._thread.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def poll_sources(finder: Finder) -> list[SourceAdvertisement]:
    return finder.poll()


def local_advertise_host() -> str:
    """Best-effort address other hosts can reach us at; loopback fallback."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.connect(("198.51.100.1", 9))  # no traffic sent; just picks a route
        return sock.getsockname()[0]
    except OSError:
        return "127.0.0.1"
    finally:
        sock.close()
