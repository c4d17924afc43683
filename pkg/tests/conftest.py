import numpy as np
import pytest

from rapm.diffusion import eight_gaussians
from rapm.models import MlpDenoiser
from rapm.trajectories import CoarseGrid, generate_store


@pytest.fixture(scope="session")
def mixture():
    return eight_gaussians(2.0, 0.1, 2)


@pytest.fixture(scope="session")
def small_teacher():
    """Untrained narrow teacher; enough for graph-level checks."""
    return MlpDenoiser(2, 2, hidden=32, depth=3, seed=11).freeze()


@pytest.fixture(scope="session")
def small_store(small_teacher):
    return generate_store(small_teacher, CoarseGrid.uniform(4, 5), 16, seed=3, n_labels=2)


def snapshot(params):
    return [p.data.copy() for p in params]


def same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record(number: int, title: str, ok: bool, detail: str):
    ACCEPTANCE[number] = (title, ok, detail)
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
