import numpy as np
import pytest

from egpde.model import EgPDENet, ModelConfig

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(window=5, n_exog=3, latent_dim=4, rnn_dim=8, d_model=4, num_heads=2,
                       offsets=(1.0, 2.0), seed=0)


@pytest.fixture
def tiny_model(tiny_cfg):
    return EgPDENet(tiny_cfg)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
