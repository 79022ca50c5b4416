import numpy as np
import pytest

from ucformer.config import NetworkConfig


@pytest.fixture
def tiny_config():
    """Four APs with two antennas; small enough for exhaustive checks."""
    return NetworkConfig(L=4, N=2, K=3, n_mc=200)


def random_psd(rng, N, rank=None):
    rank = N if rank is None else rank
    A = rng.normal(size=(N, rank)) + 1j * rng.normal(size=(N, rank))
    return A @ A.conj().T


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """Store the pass/fail line of an acceptance criterion for the run summary."""

    def _record(n: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE[n])
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
