import random

import pytest
from hypothesis import settings

from ssdc.devices import default_node, initial_state
from ssdc.workload import default_catalog

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def desktop():
    return default_node("desktop", "desk01")


@pytest.fixture
def phone():
    return default_node("smartphone", "phone01")


@pytest.fixture
def catalog():
    return default_catalog()


@pytest.fixture
def phone_states():
    """Factory: n phones with their states at a given state of charge (Wh)."""

    def make(n, soc=None):
        out = []
        for i in range(n):
            spec = default_node("smartphone", f"p{i:02d}")
            st = initial_state(spec)
            if soc is not None:
                st.battery_soc = soc
            out.append((spec, st))
        return out

    return make


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion."""
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::" in rep.nodeid and rep.when in ("call", "setup"):
                if rep.when == "call" or key != "passed":
                    outcomes[rep.nodeid.split("::")[-1]] = "PASS" if key == "passed" else "FAIL"
    if outcomes:
        terminalreporter.section("acceptance criteria")
        for name in sorted(outcomes):
            terminalreporter.write_line(f"{outcomes[name]}  {name}")
