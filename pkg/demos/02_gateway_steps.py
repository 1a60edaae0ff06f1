"""Driving the gateway one step at a time over an in-process link.

Shows a query travelling inbox -> backup, and its answer outbox -> handset.

Run:  python demos/02_gateway_steps.py
"""
import tempfile
from pathlib import Path

from smsgate import datastore
from smsgate.codec import QueryMessage, encode_query
from smsgate.gateway import intake_step, process_message, sender_step
from smsgate.modem import Frame, LoopbackLink
from smsgate.queue_store import open_store

DATA = Path(__file__).parent / "data"
GATEWAY = "10000"

ds = datastore.load(DATA)
store = open_store(tempfile.mkdtemp())
link = LoopbackLink(GATEWAY)


def show(title):
    print(f"{title:28}", store.sizes())


# Three handsets send queries: a valid one, a wrong password, a teacher query
link.inject(Frame("20001", GATEWAY, encode_query(QueryMessage("002", "STU201500042", "pass123456"))))
link.inject(Frame("20002", GATEWAY, encode_query(QueryMessage("002", "STU201500042", "wrongpass0"))))
link.inject(Frame("20003", GATEWAY, encode_query(QueryMessage("004", "EMP000000101", "teachPW001"))))

intake_step(store, link, clock=lambda: 1000.0)
show("after intake")

# FCFS: the oldest inbox record is handled first
while (rec := store.claim_oldest("inbox")) is not None:
    response = process_message(store, rec, ds, GATEWAY, now=1001.0)
    print(f"  msg {rec.msg_id} from {rec.envelope.sender_addr}: status {response.status.value} {response.body!r}")
show("after processing")

report = sender_step(store, link, profile=None, now=1002.0)
show("after sending")
for frame in link.transmitted:
    print(f"  -> {frame.to_addr}: {frame.payload}")
store.close()
