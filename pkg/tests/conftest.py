import shutil
from pathlib import Path

import pytest

from smsgate import datastore

FIXTURES = Path(__file__).parent / "fixtures" / "edu"

STUDENT = ("STU201500042", "pass123456")
TEACHER = ("EMP000000101", "teachPW001")


@pytest.fixture
def edu_dir():
    return FIXTURES


@pytest.fixture
def ds():
    return datastore.load(FIXTURES)


@pytest.fixture
def data_dir(tmp_path):
    """A writable copy of the fixture data directory."""
    target = tmp_path / "data"
    shutil.copytree(FIXTURES, target)
    return target


@pytest.fixture
def running_gateway(data_dir):
    from smsgate.gateway import Gateway, GatewayConfig

    gateways = []

    def start(**kw):
        kw.setdefault("sync", False)
        cfg = GatewayConfig(data_dir=data_dir, listen_addr="127.0.0.1:0", **kw)
        gw = Gateway(cfg).start()
        gateways.append(gw)
        return gw

    yield start
    for gw in gateways:
        gw.stop()


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
