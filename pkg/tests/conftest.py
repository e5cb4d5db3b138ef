import numpy as np
import pytest

from alloyforge.checkpoint import ModelConfig
from alloyforge.transformer import ToyModel

TINY = ModelConfig(n_layers=2, d_model=16, d_ffn=56, n_heads=4, n_kv_heads=2, vocab_size=32, max_seq_len=64)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return ToyModel.init(TINY, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.failed:
        name = report.nodeid.split("::")[-1]
        prev = _ACCEPTANCE.get(name, "PASS")
        _ACCEPTANCE[name] = "FAIL" if report.failed or prev == "FAIL" else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]}  {name}")
