"""Terminal client: choose a query, log in, send it, show the answer.

Course and classroom names are kept in two small local record stores
(``CourseStore.txt`` and ``ClassroomStore.txt``, one ``code|name`` pair per
line) and substituted into score and exam-schedule results on display.
"""
from __future__ import annotations

import argparse
import re
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, TextIO

from .codec import (
    CodecError,
    InvalidFieldError,
    PASSWORD_LEN,
    USER_ID_LEN,
    QueryCode,
    QueryMessage,
    ResponseMessage,
    Status,
    check_field,
    decode_response,
    encode_query,
)
from .modem import Frame, Link, LinkClosed, SendOutcome, check_msisdn, connect

COURSE_STORE = "CourseStore"
CLASSROOM_STORE = "ClassroomStore"
STORE_NAMES = (COURSE_STORE, CLASSROOM_STORE)

CODE_RE = re.compile(r"[A-Z]+[0-9]+")
_NAME_FORBIDDEN = frozenset("|;=@\n\r")

MENU = list(QueryCode)


class ProtocolError(Exception):
    """A response frame could not be decoded."""


class StoreError(ValueError):
    pass


# --- Record stores ----------------------------------------------------------


@dataclass
class RecordStore:
    name: str
    entries: dict[str, str] = field(default_factory=dict)

    def put(self, code: str, name: str) -> None:
        store_put(self, code, name)

    def get(self, code: str) -> Optional[str]:
        return self.entries.get(code)


def store_put(store: RecordStore, code: str, name: str) -> None:
    """Add or replace a mapping.

    Codes must look like ``[A-Z]+[0-9]+``; names must not, so substituted
    text is never substituted again.
    """
    if not CODE_RE.fullmatch(code):
        raise StoreError(f"code {code!r} must match [A-Z]+[0-9]+")
    if not name or _NAME_FORBIDDEN & set(name) or CODE_RE.fullmatch(name):
        raise StoreError(f"name {name!r} is empty, looks like a code, or contains a separator")
    store.entries[code] = name


def store_get(store: RecordStore, code: str) -> Optional[str]:
    return store.entries.get(code)


def store_save(store: RecordStore, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(f"{c}|{n}\n" for c, n in store.entries.items()), encoding="utf-8")
    tmp.replace(path)


def store_load(path, name: Optional[str] = None) -> RecordStore:
    path = Path(path)
    store = RecordStore(name or path.stem)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        code, sep, value = line.partition("|")
        try:
            if not sep:
                raise StoreError("missing '|'")
            if code in store.entries:
                raise StoreError(f"duplicate code {code}")
            store_put(store, code, value)
        except StoreError as exc:
            raise StoreError(f"{path}:{lineno}: {exc}") from None
    return store


def load_stores(directory) -> dict[str, RecordStore]:
    """Both record stores from *directory*; missing files give empty stores."""
    directory = Path(directory)
    stores = {}
    for name in STORE_NAMES:
        path = directory / f"{name}.txt"
        stores[name] = store_load(path, name) if path.exists() else RecordStore(name)
    return stores


def save_stores(stores: Mapping[str, RecordStore], directory) -> None:
    for name, store in stores.items():
        store_save(store, Path(directory) / f"{name}.txt")


# --- Rendering --------------------------------------------------------------


def _lookup(stores: Mapping[str, RecordStore], name: str, code: str) -> str:
    store = stores.get(name)
    found = store.get(code) if store is not None else None
    return found if found is not None else code


def render_result(code, body: str, stores: Optional[Mapping[str, RecordStore]] = None) -> str:
    """Replace course and room codes in a result body with stored names.

    Only score (001) and exam (005) results carry codes; unknown codes and
    other results pass through unchanged.
    """
    stores = stores or {}
    code = QueryCode(code)
    if code is QueryCode.STUDENT_SCORE:
        items = []
        for item in body.split(";"):
            course, sep, score = item.rpartition("=")
            items.append(f"{_lookup(stores, COURSE_STORE, course)}={score}" if sep else item)
        return ";".join(items)
    if code is QueryCode.EXAM_SCHEDULE:
        items = []
        for item in body.split(";"):
            parts = item.split("@")
            if len(parts) == 3:
                parts[0] = _lookup(stores, COURSE_STORE, parts[0])
                parts[1] = _lookup(stores, CLASSROOM_STORE, parts[1])
            items.append("@".join(parts))
        return ";".join(items)
    return body


STATUS_TEXT = {
    Status.AUTH_FAILED: "Login failed: invalid user ID or password.",
    Status.INVALID_QUERY: "This query is not available for your account.",
    Status.NO_RECORDS: "No records found.",
    Status.INTERNAL_ERROR: "The gateway could not answer right now, please try again.",
}


def render_response(code, response: ResponseMessage, stores=None) -> str:
    if response.status == Status.OK:
        return render_result(code, response.body, stores)
    return STATUS_TEXT[Status(response.status)]


# --- Session ----------------------------------------------------------------


def await_response(link: Link, timeout: float) -> Optional[ResponseMessage]:
    """Block until a response frame arrives or *timeout* seconds pass.

    Returns None on timeout or if the link closes; raises
    :class:`ProtocolError` for an undecodable frame.
    """
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        try:
            frame = link.receive(remaining)
        except LinkClosed:
            return None
        if frame is None:
            return None
        if frame.to_addr != link.msisdn:
            continue
        try:
            return decode_response(frame.payload)
        except CodecError as exc:
            raise ProtocolError(str(exc)) from exc


class ClientSession:
    """One handset: credentials for the session and at most one request in flight."""

    def __init__(self, link: Link, gateway_msisdn: str, timeout: float = 10.0):
        self.link = link
        self.gateway_msisdn = check_msisdn(gateway_msisdn)
        self.timeout = timeout
        self.user_id: Optional[str] = None
        self.password: Optional[str] = None
        self.last_response: Optional[ResponseMessage] = None
        self._pending = threading.Lock()

    @property
    def pending(self) -> bool:
        return self._pending.locked()

    def login(self, user_id: str, password: str) -> None:
        check_field("user_id", user_id, USER_ID_LEN)
        check_field("password", password, PASSWORD_LEN)
        self.user_id, self.password = user_id, password

    def logout(self) -> None:
        self.user_id = self.password = None

    def drain_stale(self) -> list[tuple[str, ResponseMessage]]:
        """Responses that arrived with no request pending.

        Each is tagged ``"duplicate"`` if identical to the last answer
        shown (a re-send after gateway recovery) and ``"late"`` otherwise.
        """
        stale = []
        while True:
            try:
                frame = self.link.receive()
            except LinkClosed:
                break
            if frame is None:
                break
            try:
                resp = decode_response(frame.payload)
            except CodecError:
                continue
            stale.append(("duplicate" if resp == self.last_response else "late", resp))
        return stale

    def send_query(self, code) -> SendOutcome:
        if self.user_id is None:
            raise RuntimeError("not logged in")
        payload = encode_query(QueryMessage(QueryCode(code), self.user_id, self.password))
        return self.link.send(Frame(self.link.msisdn, self.gateway_msisdn, payload))

    def query(self, code) -> tuple[SendOutcome, Optional[ResponseMessage]]:
        """Send one query and wait for its answer."""
        if not self._pending.acquire(blocking=False):
            raise RuntimeError("a request is already pending on this session")
        try:
            outcome = self.send_query(code)
            if outcome is not SendOutcome.DELIVERED:
                return outcome, None
            response = await_response(self.link, self.timeout)
            if response is not None:
                self.last_response = response
            return outcome, response
        finally:
            self._pending.release()


# --- Interactive loop -------------------------------------------------------


@dataclass
class ClientConfig:
    gateway: str = "127.0.0.1:7070"
    msisdn: str = "20001"
    gateway_msisdn: str = "10000"
    timeout_s: float = 10.0
    stores_dir: Optional[Path] = None
    splash_s: float = 2.0
    connect_timeout_s: float = 5.0


def _prompt(stdin: TextIO, stdout: TextIO, text: str) -> Optional[str]:
    stdout.write(text)
    stdout.flush()
    line = stdin.readline()
    if not line:
        return None
    return line.strip()


def run_interactive(config: ClientConfig, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None,
                    link: Optional[Link] = None) -> int:
    """Menu -> login -> send -> show result, until ``q`` or end of input."""
    stdin = stdin or sys.stdin
    out = stdout or sys.stdout
    stores = load_stores(config.stores_dir) if config.stores_dir else {n: RecordStore(n) for n in STORE_NAMES}

    print("=== Mobile Query Service ===", file=out)
    out.flush()
    if config.splash_s > 0:
        time.sleep(config.splash_s)

    session: Optional[ClientSession] = None
    creds: Optional[tuple[str, str]] = None
    try:
        while True:
            print("", file=out)
            for i, code in enumerate(MENU, 1):
                print(f"  {i}. {code.label} ({code.value})", file=out)
            print("  q. Quit", file=out)
            choice = _prompt(stdin, out, "Choose a query: ")
            if choice is None or choice.lower() == "q":
                return 0
            if not (choice.isdigit() and 1 <= int(choice) <= len(MENU)):
                print(f"Please choose 1-{len(MENU)} or q.", file=out)
                continue
            code = MENU[int(choice) - 1]

            while creds is None:
                user_id = _prompt(stdin, out, "User ID: ")
                if user_id is None:
                    return 0
                password = _prompt(stdin, out, "Password: ")
                if password is None:
                    return 0
                try:
                    check_field("user ID", user_id, USER_ID_LEN)
                    check_field("password", password, PASSWORD_LEN)
                except InvalidFieldError as exc:
                    print(f"Invalid input: {exc}.", file=out)
                    continue
                creds = (user_id, password)

            if session is None or session.link.closed:
                try:
                    if link is None or link.closed:
                        link = connect(config.gateway, config.msisdn, timeout=config.connect_timeout_s)
                except OSError as exc:
                    print(f"Send failed: gateway unreachable ({exc}).", file=out)
                    continue
                session = ClientSession(link, config.gateway_msisdn, timeout=config.timeout_s)
            session.login(*creds)

            for tag, stale in session.drain_stale():
                print(f"({tag}) {stale.status.value}{stale.body}", file=out)

            try:
                outcome, response = session.query(code)
            except ProtocolError as exc:
                print(f"Unreadable response from gateway: {exc}.", file=out)
                continue
            if outcome is not SendOutcome.DELIVERED:
                print(f"Send failed: {outcome.value}.", file=out)
                continue
            if response is None:
                print(f"No response from gateway within {config.timeout_s:g} s.", file=out)
                continue
            if response.status == Status.AUTH_FAILED:
                creds = None
                session.logout()
            print(f"{code.label}: {render_response(code, response, stores)}", file=out)
            out.flush()
    finally:
        if link is not None:
            link.close()


def _mapping(text: str) -> tuple[str, str]:
    code, sep, name = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected CODE=NAME")
    return code, name


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="smsgate-client", description="Query the SMS gateway.")
    p.add_argument("--gateway", default="127.0.0.1:7070", help="host:port of the gateway modem")
    p.add_argument("--msisdn", default="20001", help="this handset's address (digits)")
    p.add_argument("--gateway-msisdn", default="10000")
    p.add_argument("--timeout-s", type=float, default=10.0)
    p.add_argument("--stores-dir", type=Path)
    p.add_argument("--no-splash", action="store_true")
    p.add_argument("--course", type=_mapping, action="append", default=[], metavar="CODE=NAME",
                   help="save a course name to CourseStore")
    p.add_argument("--room", type=_mapping, action="append", default=[], metavar="CODE=NAME",
                   help="save a room name to ClassroomStore")
    args = p.parse_args(argv)

    if (args.course or args.room) and not args.stores_dir:
        p.error("--course/--room need --stores-dir")
    if args.stores_dir:
        stores = load_stores(args.stores_dir)
        try:
            for code, name in args.course:
                stores[COURSE_STORE].put(code, name)
            for code, name in args.room:
                stores[CLASSROOM_STORE].put(code, name)
        except StoreError as exc:
            p.error(str(exc))
        save_stores(stores, args.stores_dir)

    config = ClientConfig(
        gateway=args.gateway, msisdn=check_msisdn(args.msisdn), gateway_msisdn=args.gateway_msisdn,
        timeout_s=args.timeout_s, stores_dir=args.stores_dir, splash_s=0.0 if args.no_splash else 2.0,
    )
    return run_interactive(config)


if __name__ == "__main__":
    sys.exit(main())
