import sys

import numpy as np
import pytest

from mct.mce import MceConfig
from mct.model import MCT, ModelConfig
from mct.tensor import get_default_dtype, set_default_dtype
from mct.transformer import EncoderConfig


@pytest.fixture(autouse=True)
def float64():
    """Tests run in 64-bit verification mode unless they opt out."""
    prev = get_default_dtype()
    set_default_dtype(np.float64)
    yield
    set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config(n_classes=3, iie=True, depth=2, dropout=0.0) -> ModelConfig:
    """w=9, B=12, G=2, d_model=16: 25 tokens."""
    mce = MceConfig(bands=12, patch=9, groups=2, ks=3, ss=1, c1=4, c2=4, d_model=16, iie_enabled=iie)
    enc = EncoderConfig(d_model=16, depth=depth, heads=2, dropout=dropout)
    return ModelConfig(mce, enc, n_classes)


@pytest.fixture
def toy_model():
    return MCT(toy_config(), seed=0)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, one line per criterion."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
