import numpy as np
import pytest
import torch

from distilmos.data import generate_synthetic_corpus
from distilmos.ssl_backend import BackendSpec, synthetic_backend

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus60():
    return generate_synthetic_corpus(60, 0)


@pytest.fixture
def small_spec():
    return BackendSpec(n_layers=4, dim=32)


@pytest.fixture
def small_backend(small_spec):
    return synthetic_backend(small_spec, seed=1)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
