import numpy as np
import pytest

from gfm_fdi.faults import FaultKind
from gfm_fdi.lmi import synthesize
from gfm_fdi.microgrid import four_inverter_scenario, settle
from gfm_fdi.model import build_inverter_model, gfm12_parameters, gfm34_parameters
from gfm_fdi.sector import published_constants

ALPHA = BETA = 1e5


@pytest.fixture(scope="session")
def params12():
    return gfm12_parameters()


@pytest.fixture(scope="session")
def model12(params12):
    return build_inverter_model(params12)


@pytest.fixture(scope="session")
def steady():
    return settle(four_inverter_scenario())


class DesignCache:
    """OL-QB designs per fault kind, one solve per distinct parameter set."""

    def __init__(self):
        self._by_params = {}

    def single(self, params, kind):
        key = (params, FaultKind(kind))
        if key not in self._by_params:
            self._by_params[key] = synthesize(build_inverter_model(params), FaultKind(kind), "olqb",
                                              published_constants(), ALPHA, BETA)
        return self._by_params[key]

    def grid(self, kind, scn=None):
        scn = scn or four_inverter_scenario()
        return {g: self.single(p, kind) for g, p in enumerate(scn.gfms)}


@pytest.fixture(scope="session")
def designs():
    return DesignCache()


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
