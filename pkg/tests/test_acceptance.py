"""End-to-end acceptance criteria.

Each test prints one ``[criterion N] PASS|FAIL`` line with its runtime and
fails if the check or the time budget is not met.
"""
import contextlib
import io
import os
import random
import shutil
import signal
import socket
import subprocess
import sys
import threading
import time
from collections import Counter
from pathlib import Path

import pytest

from smsgate.client import (
    CLASSROOM_STORE,
    COURSE_STORE,
    ClientConfig,
    ClientSession,
    RecordStore,
    run_interactive,
    save_stores,
    store_put,
)
from smsgate.codec import (
    AlphabetError,
    CodecError,
    LengthError,
    QueryCode,
    QueryMessage,
    UnknownCodeError,
    decode_query,
    encode_query,
    pdu_length_estimate,
)
from smsgate.gateway import Gateway, GatewayConfig, intake_step, process_message, sender_step, sweeper_step
from smsgate.modem import FaultProfile, Frame, LinkClosed, LoopbackLink, SendOutcome, connect
from smsgate.queue_store import WEEK, Envelope, QueueStore, iter_log, open_store

import conftest
from oracle import STUDENT_CODES, TEACHER_CODES, QueueModel, expected_answer, expected_attempts, scan_users
from queue_ops import apply_random_op, check_invariants, new_state

pytestmark = pytest.mark.acceptance

GW = "10000"
ALNUM = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
HOUR = 3600.0
DAY = 24 * HOUR


@contextlib.contextmanager
def criterion(number, name, budget_s):
    start = time.perf_counter()
    status, detail = "FAIL", ""
    try:
        yield
        elapsed = time.perf_counter() - start
        if elapsed >= budget_s:
            detail = f" over budget {budget_s:g}s"
            raise AssertionError(f"criterion {number} took {elapsed:.2f}s, budget {budget_s}s")
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        line = f"[criterion {number}] {status} {name} ({elapsed:.2f}s / {budget_s:g}s){detail}"
        conftest.ACCEPTANCE_RESULTS.append(line)
        print("\n" + line, file=sys.__stdout__, flush=True)


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _wait(pred, timeout=20.0, step=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return False


# --- 1 ----------------------------------------------------------------------


def _classify(s):
    """Independent restatement of the query shape rules."""
    if len(s) != 27:
        return LengthError
    if s[:3] not in {"001", "002", "003", "004", "005"}:
        return UnknownCodeError
    if any(c not in ALNUM for c in s[3:15] + s[17:27]):
        return AlphabetError
    return None


def _random_probe(rng):
    kind = rng.random()
    if kind < 0.4:
        n = rng.randint(0, 200)
        return "".join(chr(rng.randint(0x20, 0x7E)) for _ in range(n))
    if kind < 0.6:
        return "".join(rng.choice(ALNUM + "-_ |é\n") for _ in range(rng.randint(0, 200)))
    # 27 characters with a plausible prefix so every error class is exercised
    prefix = rng.choice(["001", "002", "003", "004", "005", "000", "999", "0a1"])
    pool = ALNUM if rng.random() < 0.5 else ALNUM + "!#-"
    return prefix + "".join(rng.choice(pool) for _ in range(24))


def test_criterion_1_codec_round_trip_fuzz():
    rng = random.Random(2024)
    with criterion(1, "codec round-trip fuzz", 5.0):
        codes = list(QueryCode)
        for _ in range(10_000):
            m = QueryMessage(rng.choice(codes),
                             "".join(rng.choice(ALNUM) for _ in range(12)),
                             "".join(rng.choice(ALNUM) for _ in range(10)))
            s = encode_query(m)
            assert len(s) == 27
            assert decode_query(s) == m
        seen = Counter()
        for _ in range(10_000):
            s = _random_probe(rng)
            want = _classify(s)
            try:
                got = decode_query(s)
            except CodecError as exc:
                assert type(exc) is want, (s, exc)
                seen[want.__name__] += 1
            else:
                assert want is None, s
                assert (got.code.value, got.user_id, got.password) == (s[:3], s[3:15], s[17:27])
                seen["ok"] += 1
        assert set(seen) == {"ok", "LengthError", "UnknownCodeError", "AlphabetError"}


# --- 2 ----------------------------------------------------------------------


def test_criterion_2_pdu_comparison():
    rng = random.Random(7)
    with criterion(2, "PDU length comparison", 1.0):
        msg = encode_query(QueryMessage("002", "STU201500042", "pass123456"))
        assert len(msg) == 27
        assert pdu_length_estimate(msg) == 24
        for _ in range(1000):
            s = "".join(chr(rng.randint(0, 0x7F)) for _ in range(rng.randint(1, 400)))
            assert pdu_length_estimate(s) <= len(s)


# --- 3 ----------------------------------------------------------------------


def test_criterion_3_queue_store_model_equivalence(tmp_path):
    rng = random.Random(31337)
    spot = set(rng.sample(range(10_000), 100))
    with criterion(3, "queue-store model equivalence", 30.0):
        path = tmp_path / "queue.log"
        for seq in range(10_000):
            if path.exists():
                path.unlink()
            seq_rng = random.Random(seq)
            length = seq_rng.randint(1, 20)
            reopen_at = seq_rng.randrange(length) if seq in spot else None
            model, state = QueueModel(), new_state()
            store = open_store(path, sync=False)
            try:
                for step in range(length):
                    apply_random_op(store, model, seq_rng, state)
                    check_invariants(store, model)
                    if step == reopen_at:
                        store.close()
                        store = open_store(path, sync=False)
                        check_invariants(store, model)
            finally:
                store.close()


# --- 4 ----------------------------------------------------------------------


def _write_complete_fixture(root: Path) -> Path:
    """6 students and 3 teachers, each with data behind every permitted code."""
    root.mkdir(parents=True, exist_ok=True)
    rng = random.Random(4)
    creds, scores, credits, exams, info, sched = [], [], [], [], [], []
    for i in range(6):
        sid, pw = f"STU20160{i:04d}", f"sPw{i:07d}"
        creds.append(f"{sid}|{pw}|student")
        n_courses = 30 if i == 5 else rng.randint(1, 5)  # the last one overflows one message
        for c in range(n_courses):
            scores.append(f"{sid}|CS{100 + c}|{rng.randint(0, 100)}")
        credits.append(f"{sid}|{rng.randint(0, 200)}")
        for c in range(rng.randint(1, 4)):
            exams.append(f"{sid}|CS{100 + c}|R{rng.randint(1, 40)}|MON{900 + c * 100:04d}")
    for i in range(3):
        tid, pw = f"EMP00000{i:04d}", f"tPw{i:07d}"
        creds.append(f"{tid}|{pw}|teacher")
        info.append(f"{tid}|{rng.randint(0, 9)}|{rng.randint(0, 50) / 10}")
        sched.append(f"{tid}|CS10{i}|R{i}|TUE1000")
    for name, rows in [("credentials", creds), ("scores", scores), ("credits", credits),
                       ("exams", exams), ("teacher_info", info), ("teacher_schedule", sched)]:
        (root / f"{name}.txt").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return root


def test_criterion_4_end_to_end_oracle_equivalence(tmp_path):
    data = _write_complete_fixture(tmp_path / "data")
    users = scan_users(data)
    with criterion(4, "end-to-end oracle equivalence", 20.0):
        assert sum(r == "student" for _, r in users.values()) >= 5
        assert sum(r == "teacher" for _, r in users.values()) >= 3
        gw = Gateway(GatewayConfig(data_dir=data, listen_addr="127.0.0.1:0", sync=False)).start()
        link = connect(gw.link.address, "20001")
        try:
            session = ClientSession(link, GW, timeout=5)
            checked = 0
            for user_id, (password, role) in users.items():
                session.login(user_id, password)
                permitted = STUDENT_CODES if role == "student" else TEACHER_CODES
                forbidden = TEACHER_CODES if role == "student" else STUDENT_CODES
                for code in permitted:
                    _, resp = session.query(code)
                    want = expected_answer(data, code, user_id)
                    assert want[0] == "0"
                    assert (resp.status.value, resp.body) == want, (user_id, code)
                    checked += 1
                _, resp = session.query(forbidden[0])
                assert (resp.status.value, resp.body) == ("2", "")
                session.login(user_id, "WRONGpass0")
                _, resp = session.query(permitted[0])
                assert (resp.status.value, resp.body) == ("1", "")
            assert checked == 6 * 3 + 3 * 2
        finally:
            link.close()
            gw.stop()


# --- 5 ----------------------------------------------------------------------


def test_criterion_5_exactly_once_under_concurrency(data_dir):
    users = [conftest.STUDENT, ("STU201500043", "abcDEF7890"), conftest.TEACHER]
    with criterion(5, "exactly-once under concurrency", 60.0):
        gw = Gateway(GatewayConfig(data_dir=data_dir, listen_addr="127.0.0.1:0",
                                   worker_limit=32, loss=0.0)).start()
        received = Counter()
        errors = []

        def client(k):
            try:
                link = connect(gw.link.address, f"3{k:04d}")
                try:
                    session = ClientSession(link, GW, timeout=30)
                    user = users[k % 3]
                    session.login(*user)
                    for _ in range(5):
                        _, resp = session.query("003" if user is conftest.TEACHER else "002")
                        assert resp is not None and resp.status.value == "0"
                        received[k] += 1
                finally:
                    link.close()
            except Exception as exc:
                errors.append(exc)

        try:
            threads = [threading.Thread(target=client, args=(k,)) for k in range(100)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        finally:
            gw.stop()
        assert not errors, errors[:3]
        assert sum(received.values()) == 500
        with open_store(data_dir) as s:
            backup_ids = [r.msg_id for r in s.backup]
            assert s.sizes()["inbox"] == s.sizes()["outbox"] == s.sizes()["failure_send"] == 0
        assert len(backup_ids) == len(set(backup_ids)) == 500
        assert sorted(gw.processed) == sorted(backup_ids)
        assert gw.dispatch_log == sorted(backup_ids)
        delivered = [m for m, o, _ in gw.send_log if o is SendOutcome.DELIVERED]
        assert len(delivered) == len(set(delivered)) == 500


# --- 6 ----------------------------------------------------------------------


def test_criterion_6_retry_convergence(tmp_path, ds):
    seed, p, n, max_rounds = 606, 0.3, 200, 20
    with criterion(6, "retry convergence", 30.0):
        cfg = GatewayConfig(data_dir=tmp_path, failure_min_age=60.0, sweep_interval=30.0)
        store = open_store(tmp_path / "queue.log", sync=False)
        link = LoopbackLink(GW)
        for i in range(n):
            link.inject(Frame(f"2{i:04d}", GW, encode_query(QueryMessage("002", *conftest.STUDENT))))
        now = 1_000.0
        assert intake_step(store, link, clock=lambda: now) == n
        while (rec := store.claim_oldest("inbox")) is not None:
            process_message(store, rec, ds, GW, now)
        response_ids = [r.msg_id for r in store.outbox]
        assert len(response_ids) == n

        profile = FaultProfile(drop_probability=p, rng_seed=seed)
        delivered_attempts = {}
        rounds = 0
        while rounds < max_rounds:
            rounds += 1
            report = sender_step(store, link, profile, now)
            for msg_id, outcome, attempts in report.outcomes:
                if outcome is SendOutcome.DELIVERED:
                    delivered_attempts[msg_id] = attempts
            if not store.failure_send:
                break
            now += cfg.sweep_interval * 2  # past failure_min_age
            moved, _ = sweeper_step(store, now, cfg)
            assert moved == len(store.outbox)
        store.close()

        assert len(delivered_attempts) == n
        assert len(link.transmitted) == n
        want, never = expected_attempts(seed, p, n, max_rounds)
        assert not never
        assert {response_ids[i]: a for i, a in want.items()} == delivered_attempts
        assert max(delivered_attempts.values()) > 0


# --- 7 ----------------------------------------------------------------------


def test_criterion_7_retention_purge(tmp_path):
    with criterion(7, "retention purge", 1.0):
        now = 400 * DAY
        with open_store(tmp_path, sync=False) as s:
            ages = {"1h": HOUR, "6d": 6 * DAY, "8d": 8 * DAY, "30d": 30 * DAY}
            for label, age in ages.items():
                s.inbox_put(Envelope("20001", GW, now - age, label))
                s.backup_put(s.inbox_take_oldest(), now - age)
            assert s.backup_purge(now, WEEK) == 2
            assert sorted(r.envelope.payload for r in s.backup) == ["1h", "6d"]


# --- 8 ----------------------------------------------------------------------


def _spawn_gateway(data_dir, port):
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[1] / "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    proc = subprocess.Popen(
        [sys.executable, "-m", "smsgate.gateway", "--data-dir", str(data_dir),
         "--listen", f"127.0.0.1:{port}", "--sweep-interval-s", "0.1",
         "--failure-min-age-s", "0.1", "--worker-limit", "8"],
        env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
    )

    def up():
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return True
        except OSError:
            return False

    assert _wait(up, timeout=15, step=0.02), "gateway did not start"
    return proc


class _Handset:
    """Load generator: fires queries without waiting, counts every response."""

    def __init__(self, msisdn, port, payload, received):
        self.msisdn, self.port, self.payload, self.received = msisdn, port, payload, received

    def run_phase(self, stop: threading.Event, send: bool):
        try:
            link = connect(("127.0.0.1", self.port), self.msisdn, timeout=2)
        except OSError:
            return
        reader = threading.Thread(target=self._drain, args=(link,), daemon=True)
        reader.start()
        try:
            while not stop.is_set():
                if send and link.send(Frame(self.msisdn, GW, self.payload)) is not SendOutcome.DELIVERED:
                    break
                time.sleep(0.004)
        finally:
            link.close()
            reader.join(timeout=5)

    def _drain(self, link):
        while True:
            try:
                f = link.receive(timeout=0.5)
            except LinkClosed:
                return
            if f is not None:
                self.received[self.msisdn] += 1


def test_criterion_8_crash_consistency(data_dir):
    rng = random.Random(88)
    port = _free_port()
    payload = encode_query(QueryMessage("002", *conftest.STUDENT))
    received = Counter()
    handsets = [_Handset(f"4{k:04d}", port, payload, received) for k in range(4)]
    with criterion(8, "crash consistency", 60.0):
        for _kill in range(10):
            proc = _spawn_gateway(data_dir, port)
            stop = threading.Event()
            threads = [threading.Thread(target=h.run_phase, args=(stop, True)) for h in handsets]
            for t in threads:
                t.start()
            time.sleep(rng.uniform(0.05, 0.5))
            proc.send_signal(signal.SIGKILL)
            proc.wait()
            stop.set()
            for t in threads:
                t.join()

        # recovery run: no new load, every handset reconnects to collect re-sends
        proc = _spawn_gateway(data_dir, port)
        stop = threading.Event()
        threads = [threading.Thread(target=h.run_phase, args=(stop, False)) for h in handsets]
        for t in threads:
            t.start()

        last = -1
        while True:
            time.sleep(1.0)
            total = sum(received.values())
            if total == last:
                break
            last = total
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=15) == 0
        stop.set()
        for t in threads:
            t.join()

        admitted = Counter()
        inbox_ids, outbox_ids, cleared = set(), set(), set()
        for f in iter_log(data_dir):
            if f[0] == "PUT" and f[2] == "inbox":
                inbox_ids.add(int(f[1]))
                admitted[f[6]] += 1
            elif f[0] == "PUT" and f[2] == "outbox":
                outbox_ids.add(int(f[1]))
            elif f[0] == "DEL" and f[1] == "outbox":
                cleared.update(int(x) for x in f[2].split(","))
        with open_store(data_dir) as s:
            sizes = s.sizes()
            backup_ids = {r.msg_id for r in s.backup}
        assert sum(admitted.values()) > 0
        assert sizes["inbox"] == sizes["outbox"] == sizes["failure_send"] == 0, sizes
        assert backup_ids == inbox_ids, "an admitted message vanished"
        assert outbox_ids <= cleared, "a response vanished before delivery"
        assert len(outbox_ids) >= len(inbox_ids)
        for h in handsets:
            assert received[h.msisdn] >= admitted[h.msisdn], (h.msisdn, received[h.msisdn], admitted[h.msisdn])
        resent = sum(received.values()) - sum(admitted.values())
        reprocessed = len(outbox_ids) - len(inbox_ids)
        print(f"\n  admitted={sum(admitted.values())} received={sum(received.values())} "
              f"re-sent={resent} re-processed={reprocessed}", file=sys.__stdout__)


# --- 9 ----------------------------------------------------------------------


def test_criterion_9_client_flow(running_gateway, tmp_path):
    with criterion(9, "client flow", 10.0):
        gw = running_gateway()
        address = "%s:%d" % gw.link.address
        stores_dir = tmp_path / "stores"
        course = RecordStore(COURSE_STORE)
        store_put(course, "CS101", "Data Structures")
        save_stores({COURSE_STORE: course, CLASSROOM_STORE: RecordStore(CLASSROOM_STORE)}, stores_dir)

        env = dict(os.environ)
        env["PYTHONPATH"] = str(Path(__file__).resolve().parents[1] / "src") + os.pathsep + env.get("PYTHONPATH", "")
        script = "2\nSTU201500042\npass123456\nq\n"
        proc = subprocess.run(
            [sys.executable, "-m", "smsgate.client", "--gateway", address, "--msisdn", "20001",
             "--no-splash", "--timeout-s", "5", "--stores-dir", str(stores_dir)],
            input=script, capture_output=True, text=True, timeout=20, env=env,
        )
        assert proc.returncode == 0, proc.stderr
        assert "Student's credit: CREDITS:142" in proc.stdout

        cfg = ClientConfig(gateway=address, msisdn="20002", splash_s=0, timeout_s=5, stores_dir=stores_dir)
        out = io.StringIO()
        run_interactive(cfg, io.StringIO("2\nSTU201500042\nwrongpass0\nq\n"), out)
        assert "Login failed: invalid user ID or password." in out.getvalue()

        out = io.StringIO()
        run_interactive(cfg, io.StringIO("1\nSTU201500042\npass123456\nq\n"), out)
        assert "Student's score: Data Structures=87;" in out.getvalue()
