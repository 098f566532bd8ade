import numpy as np
import pytest

from lidarflow.bench.synthetic import generate_synthetic_scene, two_plane_spec

# acceptance verdicts, echoed in the terminal summary
CRITERIA: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture(scope="session")
def scene():
    return generate_synthetic_scene(two_plane_spec(256, 192))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
