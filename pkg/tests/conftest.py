import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridstor import desk
from gridstor.powerflow import Injection
from gridstor.profiles import TimeGrid

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def bus_load(net, loads: dict, q: dict | None = None, batch: tuple = ()) -> Injection:
    """Injection with ``loads[bus] = (pa, pb, pc)`` in kW."""
    inj = Injection.zeros(net, batch)
    p, qq = inj.p.copy(), inj.q.copy()
    idx = net.topology.index
    for bid, v in loads.items():
        p[..., idx[bid], :] = v
    for bid, v in (q or {}).items():
        qq[..., idx[bid], :] = v
    return Injection(p, qq)


@pytest.fixture(scope="session")
def reference():
    """Reference feeder, four seasonal days, seed-7 profiles."""
    net = desk.reference_feeder()
    grid = TimeGrid()
    return net, grid, desk.reference_profiles(net, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance ledger: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: list = []


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
