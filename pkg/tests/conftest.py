import numpy as np
import pytest
import torch

from clad.data import generate_synthetic_stream
from clad.models import ArchConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_arch():
    return ArchConfig(
        working_size=32,
        base_channels=8,
        latent_channels=8,
        latent_dim=8,
        gen_channels=8,
        disc_channels=8,
        batch_size=4,
    )


@pytest.fixture
def tiny_stream():
    return generate_synthetic_stream(3, 6, 32, seed=0, test_per_task=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(name: str, passed: bool, detail: str = "") -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
