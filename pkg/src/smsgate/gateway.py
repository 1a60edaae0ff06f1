"""Gateway service: intake, query processing, sending and retry sweeps.

Four activities share one :class:`~smsgate.queue_store.QueueStore`:

* intake     -- frames from the modem become inbox records
* dispatcher -- claims inbox records oldest-first and hands each to a
                worker thread (at most ``worker_limit`` in flight)
* sender     -- drains the outbox through the modem; failed sends go to
                failure_send
* sweeper    -- periodically returns aged failure records to the outbox
                and purges expired backup records

Records are claimed, not removed, while they are being worked on, so a
crash at any point leaves them in their queue.  Within one run each inbox
record is processed exactly once; across a crash a record may be processed
or sent again, which can give the client a duplicate response.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import signal
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import datastore as datastore_mod
from .codec import CodecError, ResponseMessage, Status, decode_query, encode_response
from .datastore import Datastore, NoRecords, RoleMismatch, authenticate, dispatch
from .modem import FaultProfile, Frame, Link, SendOutcome, check_msisdn, listen
from .queue_store import INBOX, OUTBOX, WEEK, CorruptLogError, Envelope, QueueRecord, QueueStore

log = logging.getLogger(__name__)

DAY = 24 * 3600.0


@dataclass
class GatewayConfig:
    listen_addr: str = "127.0.0.1:7070"
    gateway_msisdn: str = "10000"
    data_dir: Path = Path("data")
    sweep_interval: float = 30.0
    failure_min_age: float = 60.0
    backup_retention: float = WEEK
    worker_limit: int = 32
    loss: float = 0.0
    seed: int = 0
    delay_ms: float = 0.0
    outage_windows: tuple = ()
    sync: bool = True

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        check_msisdn(self.gateway_msisdn)
        for name in ("sweep_interval", "failure_min_age", "backup_retention"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.worker_limit < 1:
            raise ValueError("worker_limit must be at least 1")
        self.fault_profile()  # validates loss/delay/windows

    def fault_profile(self) -> FaultProfile:
        return FaultProfile(
            drop_probability=self.loss,
            outage_windows=self.outage_windows,
            fixed_delay=self.delay_ms / 1000.0,
            rng_seed=self.seed,
        )


@dataclass
class SendReport:
    sent: int = 0
    failed: int = 0
    # (msg_id, outcome, attempts after this send)
    outcomes: list = field(default_factory=list)


# --- Steps ------------------------------------------------------------------


def intake_step(store: QueueStore, link: Link, clock: Callable[[], float] = time.time,
                timeout: Optional[float] = None) -> int:
    """Admit every frame waiting on *link* into the inbox.

    With a *timeout*, waits that long for the first frame.
    """
    admitted = 0
    wait = timeout
    while True:
        frame = link.receive(wait)
        if frame is None:
            return admitted
        wait = None
        now = clock()
        try:
            env = Envelope(frame.from_addr, frame.to_addr, now, frame.payload)
        except ValueError as exc:
            log.warning("event=rejected sender=%s reason=%s", frame.from_addr, exc)
            continue
        msg_id = store.inbox_put(env, now)
        log.info("msg_id=%d event=admitted sender=%s", msg_id, env.sender_addr)
        admitted += 1


def handle_message(rec: QueueRecord, ds: Datastore) -> ResponseMessage:
    """Decode, authenticate and answer one query.  Never raises."""
    try:
        query = decode_query(rec.envelope.payload)
    except CodecError as exc:
        log.info("msg_id=%d event=invalid_query reason=%s", rec.msg_id, exc)
        return ResponseMessage(Status.INVALID_QUERY)
    if authenticate(ds, query.user_id, query.password) is None:
        return ResponseMessage(Status.AUTH_FAILED)
    try:
        body = dispatch(ds, query.code, query.user_id)
    except RoleMismatch:
        return ResponseMessage(Status.INVALID_QUERY)
    except NoRecords:
        return ResponseMessage(Status.NO_RECORDS)
    except Exception:
        log.exception("msg_id=%d event=dispatch_failed", rec.msg_id)
        return ResponseMessage(Status.INTERNAL_ERROR)
    return ResponseMessage(Status.OK, body)


def process_message(store: QueueStore, rec: QueueRecord, ds: Datastore,
                    own_msisdn: str, now: float) -> ResponseMessage:
    """Answer *rec*, queue the response to its sender, then move *rec* to backup."""
    response = handle_message(rec, ds)
    try:
        payload = encode_response(response)
    except CodecError:
        log.exception("msg_id=%d event=encode_failed", rec.msg_id)
        response = ResponseMessage(Status.INTERNAL_ERROR)
        payload = encode_response(response)
    env = Envelope(own_msisdn, rec.envelope.sender_addr, now, payload)
    out_id = store.outbox_put(env, now)
    store.backup_put(rec, now)
    log.info("msg_id=%d event=processed status=%s response_id=%d", rec.msg_id, response.status, out_id)
    return response


def sender_step(store: QueueStore, link: Link, profile: Optional[FaultProfile], now: float) -> SendReport:
    """Try to send every outbox record, oldest first.

    Delivered records are cleared from the outbox; dropped or refused ones
    move to failure_send with ``attempts + 1`` and ``last_attempt_at = now``.
    """
    report = SendReport()
    while True:
        rec = store.claim_oldest(OUTBOX)
        if rec is None:
            return report
        env = rec.envelope
        frame = Frame(env.sender_addr, env.recipient_addr, env.payload)
        try:
            outcome = link.send(frame, profile, now)
        except Exception:
            log.exception("msg_id=%d event=send_error", rec.msg_id)
            outcome = SendOutcome.LINK_DOWN
        if outcome is SendOutcome.DELIVERED:
            store.remove(OUTBOX, rec.msg_id)
            report.sent += 1
            report.outcomes.append((rec.msg_id, outcome, rec.attempts))
            log.info("msg_id=%d event=delivered to=%s attempts=%d", rec.msg_id, env.recipient_addr, rec.attempts)
        else:
            failed = dataclasses.replace(rec, attempts=rec.attempts + 1, last_attempt_at=now)
            store.failure_put(failed)
            report.failed += 1
            report.outcomes.append((rec.msg_id, outcome, failed.attempts))
            log.info("msg_id=%d event=send_failed outcome=%s attempts=%d",
                     rec.msg_id, outcome.value, failed.attempts)


def sweeper_step(store: QueueStore, now: float, config: GatewayConfig) -> tuple[int, int]:
    moved = store.failure_sweep(now, config.failure_min_age)
    purged = store.backup_purge(now, config.backup_retention)
    sizes = store.sizes()
    log.info("event=sweep moved=%d purged=%d inbox=%d outbox=%d backup=%d failure_send=%d",
             moved, purged, sizes["inbox"], sizes["outbox"], sizes["backup"], sizes["failure_send"])
    return moved, purged


# --- Service ----------------------------------------------------------------


class Gateway:
    """The running service.  ``start()`` spawns the loops, ``stop()`` drains them."""

    def __init__(self, config: GatewayConfig, *, store: Optional[QueueStore] = None,
                 datastore: Optional[Datastore] = None, link: Optional[Link] = None,
                 clock: Callable[[], float] = time.time, poll: float = 0.05):
        self.config = config
        self.clock = clock
        self.poll = poll
        self.datastore = datastore if datastore is not None else datastore_mod.load(config.data_dir)
        self.store = store if store is not None else QueueStore.open(config.data_dir, sync=config.sync)
        try:
            self.link = link if link is not None else listen(config.listen_addr, config.gateway_msisdn)
        except OSError:
            self.store.close()
            raise
        self.profile = config.fault_profile()

        self.dispatch_log: list[int] = []
        self.processed: list[int] = []
        self.send_log: list[tuple] = []

        self._slots = threading.Semaphore(config.worker_limit)
        self._work_ready = threading.Event()
        self._send_ready = threading.Event()
        self._stop_intake = threading.Event()
        self._stop_sender = threading.Event()
        self._executor: Optional[ThreadPoolExecutor] = None
        self._threads: dict[str, threading.Thread] = {}

    def start(self) -> "Gateway":
        self._executor = ThreadPoolExecutor(self.config.worker_limit, thread_name_prefix="worker")
        for name, target in (("intake", self._intake_loop), ("dispatcher", self._dispatch_loop),
                             ("sender", self._sender_loop), ("sweeper", self._sweeper_loop)):
            t = threading.Thread(target=target, name=name, daemon=True)
            self._threads[name] = t
            t.start()
        log.info("event=started listen=%s msisdn=%s", getattr(self.link, "address", "?"), self.config.gateway_msisdn)
        return self

    def stop(self, timeout: float = 10.0) -> None:
        """Stop intake, drain workers, flush the outbox once more, close everything."""
        self._stop_intake.set()
        for name in ("intake", "dispatcher"):
            if name in self._threads:
                self._threads[name].join(timeout)
        if self._executor is not None:
            self._executor.shutdown(wait=True)
        self._stop_sender.set()
        self._send_ready.set()
        for name in ("sender", "sweeper"):
            if name in self._threads:
                self._threads[name].join(timeout)
        self.link.close()
        self.store.close()
        log.info("event=stopped")

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _intake_loop(self) -> None:
        while not self._stop_intake.is_set():
            try:
                if intake_step(self.store, self.link, self.clock, timeout=self.poll):
                    self._work_ready.set()
            except Exception:
                if self.link.closed:
                    return
                log.exception("event=intake_error")

    def _dispatch_loop(self) -> None:
        while not self._stop_intake.is_set():
            if not self._slots.acquire(timeout=self.poll):
                continue
            rec = self.store.claim_oldest(INBOX)
            if rec is None:
                self._slots.release()
                self._work_ready.wait(self.poll)
                self._work_ready.clear()
                continue
            self.dispatch_log.append(rec.msg_id)
            self._executor.submit(self._work, rec)

    def _work(self, rec: QueueRecord) -> None:
        try:
            process_message(self.store, rec, self.datastore, self.config.gateway_msisdn, self.clock())
            self.processed.append(rec.msg_id)
            self._send_ready.set()
        except Exception:
            log.exception("msg_id=%d event=process_failed", rec.msg_id)
            self.store.release(rec.msg_id)
        finally:
            self._slots.release()

    def _sender_loop(self) -> None:
        while True:
            stopping = self._stop_sender.is_set()
            try:
                report = sender_step(self.store, self.link, self.profile, self.clock())
                self.send_log.extend(report.outcomes)
            except Exception:
                log.exception("event=sender_error")
            if stopping:
                return
            self._send_ready.wait(self.poll)
            self._send_ready.clear()

    def _sweeper_loop(self) -> None:
        while not self._stop_sender.wait(self.config.sweep_interval):
            try:
                sweeper_step(self.store, self.clock(), self.config)
            except Exception:
                log.exception("event=sweep_error")
            self._send_ready.set()


def run(config: GatewayConfig) -> None:
    """Serve until SIGINT or SIGTERM, then shut down cleanly."""
    done = threading.Event()
    gateway = Gateway(config).start()
    previous = {sig: signal.signal(sig, lambda *_: done.set()) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        done.wait()
    finally:
        gateway.stop()
        for sig, handler in previous.items():
            signal.signal(sig, handler)


# --- Command line -----------------------------------------------------------

# config-file key -> (GatewayConfig field, converter)
_KEYS = {
    "listen": ("listen_addr", str),
    "listen_addr": ("listen_addr", str),
    "gateway_msisdn": ("gateway_msisdn", str),
    "data_dir": ("data_dir", Path),
    "sweep_interval": ("sweep_interval", float),
    "sweep_interval_s": ("sweep_interval", float),
    "failure_min_age": ("failure_min_age", float),
    "failure_min_age_s": ("failure_min_age", float),
    "backup_retention": ("backup_retention", float),
    "retention_d": ("backup_retention", lambda v: float(v) * DAY),
    "worker_limit": ("worker_limit", int),
    "loss": ("loss", float),
    "seed": ("seed", int),
    "delay_ms": ("delay_ms", float),
    "sync": ("sync", lambda v: v.strip().lower() in ("1", "true", "yes", "on")),
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into GatewayConfig keyword arguments."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _KEYS:
            raise ValueError(f"{path}:{lineno}: unknown or malformed setting {raw!r}")
        name, convert = _KEYS[key]
        values[name] = convert(value.strip())
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smsgate-gateway", description="Run the SMS query gateway.")
    p.add_argument("--config", help="file of key = value settings")
    p.add_argument("--data-dir")
    p.add_argument("--listen", help="host:port to accept modem connections on")
    p.add_argument("--msisdn", dest="gateway_msisdn", help="the gateway's own address")
    p.add_argument("--loss", type=float, help="drop probability for outgoing frames")
    p.add_argument("--seed", type=int)
    p.add_argument("--delay-ms", type=float)
    p.add_argument("--sweep-interval-s", type=float)
    p.add_argument("--failure-min-age-s", type=float)
    p.add_argument("--retention-d", type=float)
    p.add_argument("--worker-limit", type=int)
    p.add_argument("--no-sync", action="store_true", help="skip fsync after each store write")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> GatewayConfig:
    values = read_config_file(args.config) if args.config else {}
    flags = {
        "data_dir": args.data_dir and Path(args.data_dir),
        "listen_addr": args.listen,
        "gateway_msisdn": args.gateway_msisdn,
        "loss": args.loss,
        "seed": args.seed,
        "delay_ms": args.delay_ms,
        "sweep_interval": args.sweep_interval_s,
        "failure_min_age": args.failure_min_age_s,
        "backup_retention": None if args.retention_d is None else args.retention_d * DAY,
        "worker_limit": args.worker_limit,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.no_sync:
        values["sync"] = False
    return GatewayConfig(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        config = config_from_args(args)
        run(config)
    except (ValueError, OSError, datastore_mod.DatastoreError, CorruptLogError) as exc:
        log.error("event=startup_failed reason=%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
