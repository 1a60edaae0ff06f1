"""Durable InBox / OutBox / BackUp / FailureSend queues.

The store keeps the four queues in memory and mirrors every mutation to an
append-only log that is replayed on :meth:`QueueStore.open`.  Log records
are UTF-8 text, one per line, fields separated by ``|``::

    PUT|<msg_id>|<queue>|<attempts>|<enqueued_at>|<last_attempt_at>|<sender>|<recipient>|<timestamp>|<payload>
    DEL|<queue>|<msg_id>[,<msg_id>...]
    MOV|<from_queue>|<to_queue>|<msg_id>[,<msg_id>...]

``PUT`` inserts a record at the tail of ``queue``, first removing it from
whichever queue held it (this is how moves of a single record are logged).
``DEL`` removes records (takes, clears and purge tombstones).  ``MOV``
moves a batch unchanged, used by the failure sweep.  ``last_attempt_at`` is
empty when unset.  A final line lacking its newline is a torn write and is
discarded on replay; any other malformed line is fatal.

Each queue preserves insertion order.  Fresh puts get ascending msg_ids,
so for the inbox insertion order and msg_id order coincide.

Claims (:meth:`QueueStore.claim_oldest`) are in-memory only.  A claimed
record stays in its queue until it is moved or removed, so a crash while a
record is claimed leaves it in place to be handled again after restart.
"""
from __future__ import annotations

import dataclasses
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

INBOX = "inbox"
OUTBOX = "outbox"
BACKUP = "backup"
FAILURE_SEND = "failure_send"
QUEUES = (INBOX, OUTBOX, BACKUP, FAILURE_SEND)

LOG_NAME = "queue.log"
WEEK = 7 * 24 * 3600.0

_SEP = "|"


class CorruptLogError(Exception):
    """The store log has a malformed record before its final line."""


@dataclass(frozen=True)
class Envelope:
    sender_addr: str
    recipient_addr: str
    timestamp: float
    payload: str

    def __post_init__(self):
        for name in ("sender_addr", "recipient_addr"):
            addr = getattr(self, name)
            if not addr or _SEP in addr or "\n" in addr or "\r" in addr:
                raise ValueError(f"{name} must be non-empty and delimiter-free")
        if len(self.payload) > 160:
            raise ValueError("payload exceeds 160 characters")
        if _SEP in self.payload or "\n" in self.payload or "\r" in self.payload:
            raise ValueError("payload contains a delimiter")


@dataclass(frozen=True)
class QueueRecord:
    msg_id: int
    envelope: Envelope
    attempts: int = 0
    enqueued_at: float = 0.0
    last_attempt_at: Optional[float] = None


# --- Log encoding -----------------------------------------------------------


def _fmt_time(t: Optional[float]) -> str:
    return "" if t is None else repr(float(t))


def _put_line(queue: str, rec: QueueRecord) -> str:
    env = rec.envelope
    fields = [
        "PUT", str(rec.msg_id), queue, str(rec.attempts),
        _fmt_time(rec.enqueued_at), _fmt_time(rec.last_attempt_at),
        env.sender_addr, env.recipient_addr, _fmt_time(env.timestamp), env.payload,
    ]
    return _SEP.join(fields) + "\n"


def _ids(ids: Iterable[int]) -> str:
    return ",".join(str(i) for i in ids)


def _parse_ids(text: str) -> list[int]:
    return [int(x) for x in text.split(",")]


class QueueStore:
    """Four FCFS queues backed by an append-only operation log.

    All public methods are serialized by one lock, so the store can be
    shared by the gateway's intake, worker, sender and sweeper threads.
    """

    def __init__(self, path: Path, sync: bool = True):
        self.path = Path(path)
        self.sync = sync
        self._lock = threading.RLock()
        self._queues: dict[str, OrderedDict[int, QueueRecord]] = {q: OrderedDict() for q in QUEUES}
        self._where: dict[int, str] = {}
        self._claimed: set[int] = set()
        self._next_id = 1
        self._fh = None

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def open(cls, path, sync: bool = True) -> "QueueStore":
        """Open (or create) a store.

        *path* is either the log file itself or a directory, in which case
        the log is ``<path>/queue.log``.  Set ``sync=False`` to skip the
        per-operation fsync; records are still flushed to the OS.
        """
        path = Path(path)
        if path.is_dir():
            path = path / LOG_NAME
        store = cls(path, sync=sync)
        store._replay()
        store._fh = open(store.path, "a", encoding="utf-8", newline="\n")
        return store

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                if self.sync:
                    os.fsync(self._fh.fileno())
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _replay(self) -> None:
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()
            return
        data = self.path.read_bytes()
        good_end = data.rfind(b"\n") + 1
        if good_end < len(data):
            # torn final write: drop it so later appends start on a clean line
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
        lines = data[:good_end].decode("utf-8").split("\n")[:-1]
        for lineno, line in enumerate(lines, 1):
            try:
                self._apply(line.split(_SEP))
            except (ValueError, KeyError, IndexError) as exc:
                raise CorruptLogError(f"{self.path}:{lineno}: {exc}") from exc

    def _apply(self, f: list[str]) -> None:
        kind = f[0]
        if kind == "PUT":
            if len(f) != 10:
                raise ValueError(f"PUT record has {len(f)} fields")
            env = Envelope(f[6], f[7], float(f[8]), f[9])
            rec = QueueRecord(
                msg_id=int(f[1]), envelope=env, attempts=int(f[3]),
                enqueued_at=float(f[4]),
                last_attempt_at=float(f[5]) if f[5] else None,
            )
            self._insert(self._check_queue(f[2]), rec)
        elif kind == "DEL":
            if len(f) != 3:
                raise ValueError("DEL record needs 3 fields")
            queue = self._check_queue(f[1])
            for msg_id in _parse_ids(f[2]):
                self._remove(queue, msg_id)
        elif kind == "MOV":
            if len(f) != 4:
                raise ValueError("MOV record needs 4 fields")
            src, dst = self._check_queue(f[1]), self._check_queue(f[2])
            for msg_id in _parse_ids(f[3]):
                self._insert(dst, self._remove(src, msg_id))
        else:
            raise ValueError(f"unknown record kind {kind!r}")

    @staticmethod
    def _check_queue(name: str) -> str:
        if name not in QUEUES:
            raise ValueError(f"unknown queue {name!r}")
        return name

    # -- in-memory primitives ------------------------------------------------

    def _insert(self, queue: str, rec: QueueRecord) -> None:
        old = self._where.get(rec.msg_id)
        if old is not None:
            del self._queues[old][rec.msg_id]
        self._queues[queue][rec.msg_id] = rec
        self._where[rec.msg_id] = queue
        self._claimed.discard(rec.msg_id)
        self._next_id = max(self._next_id, rec.msg_id + 1)

    def _remove(self, queue: str, msg_id: int) -> QueueRecord:
        rec = self._queues[queue].pop(msg_id)
        del self._where[msg_id]
        self._claimed.discard(msg_id)
        return rec

    def _write(self, line: str) -> None:
        if self._fh is None:
            raise ValueError("store is closed")
        self._fh.write(line)
        self._fh.flush()
        if self.sync:
            os.fsync(self._fh.fileno())

    # -- puts ----------------------------------------------------------------

    def _put_new(self, queue: str, env: Envelope, now: Optional[float]) -> int:
        with self._lock:
            rec = QueueRecord(self._next_id, env, 0, env.timestamp if now is None else now)
            self._write(_put_line(queue, rec))
            self._insert(queue, rec)
            return rec.msg_id

    def _put_existing(self, queue: str, rec: QueueRecord) -> QueueRecord:
        with self._lock:
            if not 1 <= rec.msg_id < self._next_id:
                raise KeyError(f"msg_id {rec.msg_id} was never issued by this store")
            current = self.get(rec.msg_id)
            if current is not None and rec.attempts < current.attempts:
                raise ValueError("attempts may not decrease")
            self._write(_put_line(queue, rec))
            self._insert(queue, rec)
            return rec

    def inbox_put(self, env: Envelope, now: Optional[float] = None) -> int:
        """Append a received message to the inbox and return its new msg_id."""
        return self._put_new(INBOX, env, now)

    def outbox_put(self, env: Envelope, now: Optional[float] = None) -> int:
        return self._put_new(OUTBOX, env, now)

    def failure_put(self, rec: QueueRecord) -> QueueRecord:
        """Move *rec* (same msg_id, possibly bumped attempts) to failure_send."""
        return self._put_existing(FAILURE_SEND, rec)

    def backup_put(self, rec: QueueRecord, now: Optional[float] = None) -> QueueRecord:
        """Move *rec* to the backup queue.

        When *now* is given it becomes the record's ``enqueued_at`` so the
        retention purge measures time spent in backup.
        """
        if now is not None:
            rec = dataclasses.replace(rec, enqueued_at=now)
        return self._put_existing(BACKUP, rec)

    # -- takes ---------------------------------------------------------------

    def _take_oldest(self, queue: str) -> Optional[QueueRecord]:
        with self._lock:
            q = self._queues[queue]
            if not q:
                return None
            msg_id = next(iter(q))
            self._write(f"DEL|{queue}|{msg_id}\n")
            return self._remove(queue, msg_id)

    def inbox_take_oldest(self) -> Optional[QueueRecord]:
        return self._take_oldest(INBOX)

    def outbox_take_oldest(self) -> Optional[QueueRecord]:
        return self._take_oldest(OUTBOX)

    def claim_oldest(self, queue: str) -> Optional[QueueRecord]:
        """Return the oldest unclaimed record of *queue* and mark it claimed.

        The record is not removed.  The claim ends when the record is moved
        or removed, or by :meth:`release`; it does not survive a reopen.
        """
        with self._lock:
            for msg_id, rec in self._queues[queue].items():
                if msg_id not in self._claimed:
                    self._claimed.add(msg_id)
                    return rec
            return None

    def release(self, msg_id: int) -> None:
        with self._lock:
            self._claimed.discard(msg_id)

    def remove(self, queue: str, msg_id: int) -> QueueRecord:
        """Durably delete one record from *queue* (KeyError if absent)."""
        with self._lock:
            if msg_id not in self._queues[queue]:
                raise KeyError(f"msg_id {msg_id} not in {queue}")
            self._write(f"DEL|{queue}|{msg_id}\n")
            return self._remove(queue, msg_id)

    # -- maintenance ---------------------------------------------------------

    def backup_purge(self, now: float, retention: float = WEEK) -> int:
        """Remove backup records with ``enqueued_at < now - retention``."""
        if retention <= 0:
            raise ValueError("retention must be positive")
        cutoff = now - retention
        with self._lock:
            victims = [i for i, r in self._queues[BACKUP].items() if r.enqueued_at < cutoff]
            if victims:
                self._write(f"DEL|{BACKUP}|{_ids(victims)}\n")
                for msg_id in victims:
                    self._remove(BACKUP, msg_id)
            return len(victims)

    def failure_sweep(self, now: float, min_age: float) -> int:
        """Move failure records last attempted at least *min_age* ago to the outbox tail."""
        cutoff = now - min_age
        with self._lock:
            ready = []
            for msg_id, rec in self._queues[FAILURE_SEND].items():
                last = rec.enqueued_at if rec.last_attempt_at is None else rec.last_attempt_at
                if last <= cutoff:
                    ready.append(msg_id)
            ready.sort()
            if ready:
                self._write(f"MOV|{FAILURE_SEND}|{OUTBOX}|{_ids(ready)}\n")
                for msg_id in ready:
                    self._insert(OUTBOX, self._queues[FAILURE_SEND][msg_id])
            return len(ready)

    # -- inspection ----------------------------------------------------------

    def get(self, msg_id: int) -> Optional[QueueRecord]:
        with self._lock:
            queue = self._where.get(msg_id)
            return None if queue is None else self._queues[queue][msg_id]

    def queue_of(self, msg_id: int) -> Optional[str]:
        with self._lock:
            return self._where.get(msg_id)

    def records(self, queue: str) -> list[QueueRecord]:
        with self._lock:
            return list(self._queues[self._check_queue(queue)].values())

    @property
    def inbox(self) -> list[QueueRecord]:
        return self.records(INBOX)

    @property
    def outbox(self) -> list[QueueRecord]:
        return self.records(OUTBOX)

    @property
    def backup(self) -> list[QueueRecord]:
        return self.records(BACKUP)

    @property
    def failure_send(self) -> list[QueueRecord]:
        return self.records(FAILURE_SEND)

    def sizes(self) -> dict[str, int]:
        with self._lock:
            return {q: len(self._queues[q]) for q in QUEUES}

    @property
    def next_msg_id(self) -> int:
        return self._next_id

    def snapshot(self) -> dict[str, list[QueueRecord]]:
        with self._lock:
            return {q: list(self._queues[q].values()) for q in QUEUES}


def open_store(path, sync: bool = True) -> QueueStore:
    return QueueStore.open(path, sync=sync)


def iter_log(path) -> Iterator[list[str]]:
    """Yield the split fields of every complete record in a store log."""
    path = Path(path)
    if path.is_dir():
        path = path / LOG_NAME
    data = path.read_bytes()
    for line in data[: data.rfind(b"\n") + 1].decode("utf-8").splitlines():
        yield line.split(_SEP)
