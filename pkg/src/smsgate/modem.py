"""Simulated GSM modem: framed short messages over TCP with fault injection.

Every line on the wire is newline-terminated ASCII.  A connecting endpoint
first announces its MSISDN, then both sides exchange ``SND`` frames::

    REG|<msisdn>
    SND|<from>|<to>|<payload>

The listening side (the gateway's modem) routes outgoing frames to the
connection registered under ``to``.  Faults are applied on the sending
side only: a :class:`FaultProfile` decides, per frame, whether it is
delivered, dropped, or refused because the link is down.
"""
from __future__ import annotations

import enum
import logging
import queue
import random
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

log = logging.getLogger(__name__)

MSISDN_RE = re.compile(r"[0-9]{1,15}")
SND = "SND"
REG = "REG"
_SEP = "|"

Address = Union[str, tuple]


class FrameError(ValueError):
    pass


class LinkClosed(Exception):
    pass


class SendOutcome(enum.Enum):
    DELIVERED = "delivered"
    DROPPED = "dropped"
    LINK_DOWN = "link_down"


def check_msisdn(addr: str) -> str:
    if not isinstance(addr, str) or not MSISDN_RE.fullmatch(addr):
        raise FrameError(f"address {addr!r} must be 1-15 digits")
    return addr


@dataclass(frozen=True)
class Frame:
    from_addr: str
    to_addr: str
    payload: str
    kind: str = SND

    def serialize(self) -> bytes:
        if self.kind != SND:
            raise FrameError(f"unsupported frame kind {self.kind!r}")
        check_msisdn(self.from_addr)
        check_msisdn(self.to_addr)
        if _SEP in self.payload or "\n" in self.payload or "\r" in self.payload:
            raise FrameError("payload contains '|' or a line break")
        try:
            return f"SND|{self.from_addr}|{self.to_addr}|{self.payload}\n".encode("ascii")
        except UnicodeEncodeError:
            raise FrameError("payload is not ASCII") from None


def parse_frame(line: Union[bytes, str]) -> Frame:
    if isinstance(line, bytes):
        try:
            line = line.decode("ascii")
        except UnicodeDecodeError:
            raise FrameError("frame is not ASCII") from None
    line = line.rstrip("\r\n")
    parts = line.split(_SEP)
    if len(parts) != 4 or parts[0] != SND:
        raise FrameError(f"malformed frame {line[:40]!r}")
    return Frame(check_msisdn(parts[1]), check_msisdn(parts[2]), parts[3])


# --- Fault injection --------------------------------------------------------


@dataclass
class FaultProfile:
    """Per-frame fault model for the sending side of a link.

    One RNG draw is consumed per :meth:`decide` call, whether or not the
    send falls inside an outage window, so with a fixed seed the outcome of
    the k-th send depends only on k and the send time.
    """

    drop_probability: float = 0.0
    outage_windows: Sequence[tuple[float, float]] = ()
    fixed_delay: float = 0.0
    rng_seed: int = 0
    _rng: random.Random = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")
        if self.fixed_delay < 0:
            raise ValueError("fixed_delay must be non-negative")
        windows = sorted(tuple(w) for w in self.outage_windows)
        for start, end in windows:
            if end < start:
                raise ValueError(f"outage window ({start}, {end}) ends before it starts")
        for (_, end), (start, _) in zip(windows, windows[1:]):
            if start < end:
                raise ValueError("outage windows overlap")
        self.outage_windows = windows
        self.reset()

    def reset(self) -> None:
        self._rng = random.Random(self.rng_seed)

    def in_outage(self, now: float) -> bool:
        return any(start <= now < end for start, end in self.outage_windows)

    def decide(self, now: Optional[float] = None) -> SendOutcome:
        draw = self._rng.random()
        if now is not None and self.in_outage(now):
            return SendOutcome.LINK_DOWN
        if draw >= self.drop_probability:
            return SendOutcome.DELIVERED
        return SendOutcome.DROPPED


NO_FAULTS = FaultProfile()


# --- Links ------------------------------------------------------------------


def parse_address(addr: Address) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"address {addr!r} must be host:port")
    return host or "127.0.0.1", int(port)


class _Conn:
    """A socket plus a write lock; reads happen on one reader thread."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.wlock = threading.Lock()

    def write(self, data: bytes) -> None:
        with self.wlock:
            self.sock.sendall(data)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Link:
    """One MSISDN-addressed endpoint of the simulated SMS network."""

    def __init__(self, msisdn: str):
        self.msisdn = check_msisdn(msisdn)
        self.malformed = 0
        self._frames: queue.Queue = queue.Queue()
        self._closed = threading.Event()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def send(self, frame: Frame, profile: Optional[FaultProfile] = None,
             now: Optional[float] = None) -> SendOutcome:
        """Offer *frame* to the network under *profile*.

        A delivered frame reaches the peer exactly once after the profile's
        fixed delay (this call blocks for that delay).
        """
        data = frame.serialize()
        outcome = (profile or NO_FAULTS).decide(now)
        if outcome is not SendOutcome.DELIVERED:
            return outcome
        profile_delay = profile.fixed_delay if profile else 0.0
        if profile_delay:
            time.sleep(profile_delay)
        if self.closed or not self._transmit(frame.to_addr, data):
            return SendOutcome.LINK_DOWN
        return SendOutcome.DELIVERED

    def receive(self, timeout: Optional[float] = None) -> Optional[Frame]:
        """Next received frame, or None.

        ``timeout=None`` polls without blocking.  Raises :class:`LinkClosed`
        once the link is closed and every received frame has been consumed.
        """
        try:
            if timeout is None:
                item = self._frames.get_nowait()
            else:
                item = self._frames.get(timeout=timeout)
        except queue.Empty:
            if self.closed:
                raise LinkClosed("link closed") from None
            return None
        if item is None:
            self._frames.put(None)
            raise LinkClosed("link closed")
        return item

    def pending(self) -> int:
        return self._frames.qsize()

    def _accept_line(self, line: bytes, expect_from: Optional[str] = None) -> None:
        try:
            frame = parse_frame(line)
            if expect_from is not None and frame.from_addr != expect_from:
                raise FrameError(f"sender {frame.from_addr} is not the registered {expect_from}")
            if frame.to_addr != self.msisdn:
                raise FrameError(f"frame addressed to {frame.to_addr}, not {self.msisdn}")
        except FrameError as exc:
            self.malformed += 1
            log.warning("event=malformed_frame link=%s reason=%s", self.msisdn, exc)
            return
        self._frames.put(frame)

    def _transmit(self, to_addr: str, data: bytes) -> bool:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ServerLink(Link):
    """Listening modem; routes outgoing frames by the peer's registered MSISDN."""

    def __init__(self, bind_addr: Address, msisdn: str):
        super().__init__(msisdn)
        host, port = parse_address(bind_addr)
        self._server = socket.create_server((host, port), reuse_port=False)
        self._server.settimeout(0.2)
        self.address = self._server.getsockname()[:2]
        self._routes: dict[str, _Conn] = {}
        self._conns: set[_Conn] = set()
        self._lock = threading.Lock()
        self._acceptor = threading.Thread(target=self._accept_loop, name="modem-accept", daemon=True)
        self._acceptor.start()

    @property
    def address_str(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def registered(self) -> list[str]:
        with self._lock:
            return sorted(self._routes)

    def wait_registered(self, msisdn: str, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if msisdn in self._routes:
                    return True
            time.sleep(0.005)
        return False

    def _accept_loop(self) -> None:
        while not self.closed:
            try:
                sock, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._read_loop, args=(conn,), name="modem-read", daemon=True).start()

    def _read_loop(self, conn: _Conn) -> None:
        msisdn = None
        try:
            first = conn.rfile.readline()
            parts = first.decode("ascii", "replace").rstrip("\r\n").split(_SEP)
            if len(parts) != 2 or parts[0] != REG or not MSISDN_RE.fullmatch(parts[1]):
                log.warning("event=bad_registration line=%r", first[:40])
                return
            msisdn = parts[1]
            with self._lock:
                self._routes[msisdn] = conn
            log.debug("event=registered msisdn=%s", msisdn)
            for line in conn.rfile:
                self._accept_line(line, expect_from=msisdn)
        except OSError:
            pass
        finally:
            with self._lock:
                if msisdn is not None and self._routes.get(msisdn) is conn:
                    del self._routes[msisdn]
                self._conns.discard(conn)
            conn.close()

    def _transmit(self, to_addr: str, data: bytes) -> bool:
        with self._lock:
            conn = self._routes.get(to_addr)
        if conn is None:
            return False
        try:
            conn.write(data)
        except OSError:
            return False
        return True

    def close(self) -> None:
        if self.closed:
            return
        self._closed.set()
        self._server.close()
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        self._acceptor.join(timeout=2)
        self._frames.put(None)


class ClientLink(Link):
    """A handset's connection to the gateway modem."""

    def __init__(self, remote_addr: Address, msisdn: str, timeout: float = 5.0):
        super().__init__(msisdn)
        host, port = parse_address(remote_addr)
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conn = _Conn(sock)
        self._conn.write(f"{REG}|{self.msisdn}\n".encode("ascii"))
        self._reader = threading.Thread(target=self._read_loop, name=f"link-{msisdn}", daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            for line in self._conn.rfile:
                self._accept_line(line)
        except (OSError, ValueError):
            pass
        finally:
            self._closed.set()
            self._frames.put(None)

    def _transmit(self, to_addr: str, data: bytes) -> bool:
        try:
            self._conn.write(data)
        except OSError:
            return False
        return True

    def close(self) -> None:
        if self.closed and not self._reader.is_alive():
            return
        self._closed.set()
        self._conn.close()
        self._reader.join(timeout=2)


class LoopbackLink(Link):
    """In-process endpoint for tests and demos.

    Frames handed to :meth:`inject` are received as if they came off the
    wire; transmitted frames are appended to :attr:`transmitted`.  When
    *reachable* is given, sends to any other address report LINK_DOWN.
    """

    def __init__(self, msisdn: str, reachable: Optional[set] = None):
        super().__init__(msisdn)
        self.reachable = reachable
        self.transmitted: list[Frame] = []
        self._tx_lock = threading.Lock()

    def inject(self, frame: Frame) -> None:
        self._accept_line(frame.serialize())

    def _transmit(self, to_addr: str, data: bytes) -> bool:
        if self.reachable is not None and to_addr not in self.reachable:
            return False
        with self._tx_lock:
            self.transmitted.append(parse_frame(data))
        return True

    def close(self) -> None:
        if not self.closed:
            self._closed.set()
            self._frames.put(None)


def listen(bind_addr: Address, msisdn: str) -> ServerLink:
    """Open the gateway side.  Use port 0 to pick a free port (see ``.address``)."""
    return ServerLink(bind_addr, msisdn)


def connect(remote_addr: Address, own_msisdn: str, timeout: float = 5.0) -> ClientLink:
    """Connect a handset; raises ``OSError`` if the modem is unreachable within *timeout*."""
    return ClientLink(remote_addr, own_msisdn, timeout=timeout)


def send(link: Link, frame: Frame, profile: Optional[FaultProfile] = None,
         now: Optional[float] = None) -> SendOutcome:
    return link.send(frame, profile, now)


def receive(link: Link, timeout: Optional[float] = None) -> Optional[Frame]:
    return link.receive(timeout)
