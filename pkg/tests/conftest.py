import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cranekit.calibration import CalibrationExample
from cranekit.micro import MicroConfig, init_params


def random_examples(rng, n, length, vocab, tag, mask=None):
    out = []
    for _ in range(n):
        toks = rng.integers(0, vocab, size=length).tolist()
        m = mask if mask is not None else [0] + [1] * (length - 1)
        out.append(CalibrationExample(toks, m, tag))
    return out


@pytest.fixture
def moe_config():
    return MicroConfig(vocab=16, d_model=8, n_layers=2, n_heads=2, moe_experts=2, seed=3)


@pytest.fixture
def moe_params(moe_config):
    return init_params(moe_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
