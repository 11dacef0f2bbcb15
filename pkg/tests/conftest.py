import numpy as np
import pytest

from envspoof.model import ModelConfig, init_params
from envspoof.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_params():
    """D=8, H=8, A=4 float64 model with non-trivial biases and fusion logits."""
    cfg = ModelConfig(dim=8, hidden=8, attn=4, dropout=0.0)
    r = make_rng(7)
    p = init_params(cfg, r, np.float64)
    for name, arr in p.tensors.items():
        arr += r.normal(0.0, 0.1, arr.shape)
    return p


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
