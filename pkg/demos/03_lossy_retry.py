"""Retrying responses over a lossy link with FailureSend and sweeps.

30% of sends are dropped (seeded, so every run is the same).  Failed
responses wait in failure_send until the sweeper returns them to the outbox.
Time is simulated, so a "minute" of retry delay costs nothing.

Run:  python demos/03_lossy_retry.py
"""
import tempfile
from collections import Counter
from pathlib import Path

from smsgate import datastore
from smsgate.codec import QueryMessage, encode_query
from smsgate.gateway import GatewayConfig, intake_step, process_message, sender_step, sweeper_step
from smsgate.modem import FaultProfile, Frame, LoopbackLink, SendOutcome
from smsgate.queue_store import open_store

DATA = Path(__file__).parent / "data"
GATEWAY = "10000"

workdir = tempfile.mkdtemp()
config = GatewayConfig(data_dir=workdir, failure_min_age=60.0)
ds = datastore.load(DATA)
store = open_store(workdir, sync=False)
link = LoopbackLink(GATEWAY)

query = encode_query(QueryMessage("002", "STU201500042", "pass123456"))
for i in range(100):
    link.inject(Frame(f"2{i:04d}", GATEWAY, query))

now = 0.0
intake_step(store, link, clock=lambda: now)
while (rec := store.claim_oldest("inbox")) is not None:
    process_message(store, rec, ds, GATEWAY, now)

profile = FaultProfile(drop_probability=0.3, rng_seed=42)
attempts = Counter()
for round_no in range(1, 21):
    report = sender_step(store, link, profile, now)
    for _, outcome, n in report.outcomes:
        if outcome is SendOutcome.DELIVERED:
            attempts[n] += 1
    print(f"round {round_no:2}: sent {report.sent:3}  failed {report.failed:3}  "
          f"waiting {len(store.failure_send):3}")
    if not store.failure_send:
        break
    now += 61.0
    sweeper_step(store, now, config)

print("\nfailed attempts before delivery -> number of responses")
for n in sorted(attempts):
    print(f"  {n}: {attempts[n]}")
print("delivered:", len(link.transmitted))
store.close()
