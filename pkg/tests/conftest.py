import numpy as np
import pytest

from deskqlora.model import ArchConfig, build_model
from deskqlora.quant import QuantConfig

SMALL = ArchConfig(n_layers=2, d_model=16, d_kv=8, n_heads=4, vocab_size=32, max_seq=12)
FOUR_LAYER = ArchConfig(n_layers=4, d_model=16, d_kv=8, n_heads=4, vocab_size=32, max_seq=12)


@pytest.fixture
def small_model():
    return build_model(SMALL, QuantConfig(4, 64, "nf4"), r=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: (number, passed, detail), printed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((number, passed, detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
