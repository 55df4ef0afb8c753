import numpy as np
import pytest
import torch

from partgen.dataset import build_dataset


@pytest.fixture(scope="session")
def small_manifest():
    """A few records of every category with fitted stats and codebooks."""
    return build_dataset({"train": 12, "val": 3, "test": 3}, seed=5, n_clusters=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on its own."""
    def report(n: int, ok: bool, detail: str):
        _ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
