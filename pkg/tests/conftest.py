import pytest
import torch

from mwtraj.core_types import Hyperparameters
from mwtraj.datasets import SyntheticSpec, generate_synthetic
from mwtraj.training import set_deterministic

set_deterministic()

TINY_SPEC = SyntheticSpec(num_patterns=3, n_samples=120, LC=3, LX=8, LY=4, seed=11)
TINY_HP = Hyperparameters(K=3, k=2, alpha=2, iterations=6, batch_size=16, LC=3, LX=8, LY=4,
                          max_step=2.0, eval_every=3, early_stopping=False, d_model=16,
                          n_heads=2, manager_layers=1, worker_layers=1, seed=5)


@pytest.fixture(scope="session")
def tiny_spec():
    return TINY_SPEC


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_hp():
    return TINY_HP


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
