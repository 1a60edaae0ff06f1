"""A real gateway on a TCP port with two handsets connected to it.

Run:  python demos/04_socket_session.py
"""
import shutil
import tempfile
from pathlib import Path

from smsgate.client import COURSE_STORE, CLASSROOM_STORE, ClientSession, RecordStore, render_response
from smsgate.codec import QueryCode
from smsgate.gateway import Gateway, GatewayConfig
from smsgate.modem import connect

data_dir = Path(tempfile.mkdtemp()) / "data"
shutil.copytree(Path(__file__).parent / "data", data_dir)

gateway = Gateway(GatewayConfig(data_dir=data_dir, listen_addr="127.0.0.1:0")).start()
print("gateway listening on %s:%d" % gateway.link.address)

stores = {COURSE_STORE: RecordStore(COURSE_STORE), CLASSROOM_STORE: RecordStore(CLASSROOM_STORE)}
stores[COURSE_STORE].put("CS101", "Data Structures")
stores[COURSE_STORE].put("MA201", "Linear Algebra")
stores[CLASSROOM_STORE].put("R12", "Main Block 12")

student = ClientSession(connect(gateway.link.address, "20001"), "10000")
student.login("STU201500042", "pass123456")
teacher = ClientSession(connect(gateway.link.address, "20002"), "10000")
teacher.login("EMP000000101", "teachPW001")

for session, codes in [(student, ["001", "002", "005", "003"]), (teacher, ["003", "004"])]:
    for code in codes:
        _, response = session.query(code)
        label = QueryCode(code).label
        print(f"{session.user_id} {label:24} {render_response(code, response, stores)}")

student.link.close()
teacher.link.close()
gateway.stop()
print("queues after shutdown:", gateway.store.sizes())
