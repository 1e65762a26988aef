import numpy as np
import pytest

from stgshap.data.synth import SynthParams, synth_breakdown
from stgshap.graph import build_lattice_graph, spectral_operators

# acceptance verdicts, filled by test_acceptance.py and echoed after the run
CRITERIA: dict[int, tuple[str, str]] = {}

FIXTURE_SHAPE = (4, 30, 360)
FIXTURE_TRIGGER = (1, 20, 120)


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = ("PASS" if passed else "FAIL", detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        verdict, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")


@pytest.fixture(scope="session")
def breakdown():
    """The seeded 4 x 30 x 360 breakdown fixture and its trigger record."""
    return synth_breakdown(*FIXTURE_SHAPE, seed=0, trigger=FIXTURE_TRIGGER)


@pytest.fixture(scope="session")
def breakdown_ops(breakdown):
    tensor, _ = breakdown
    graph = build_lattice_graph(tensor.num_lanes, tensor.num_cells)
    return graph, spectral_operators(graph)


@pytest.fixture(scope="session")
def quiet_breakdown():
    return synth_breakdown(2, 12, 60, seed=0, trigger=(0, 8, 20), params=SynthParams(noise_speed=0, noise_relative=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
