import numpy as np
import pytest

from polyshield.embeddings import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticSpec(n_subjects=20, dim=32, intra_class_noise=0.2, seed=3))


ACCEPTANCE_LINES = []


def record_acceptance(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
