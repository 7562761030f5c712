import numpy as np
import pytest

from trinitydna.model import ModelConfig, init_params
from trinitydna.numerics import RandomSource


def tiny_config(**kw) -> ModelConfig:
    base = dict(layers=1, hidden=8, ffn_hidden=12, heads=2, window_sizes=[2, 4],
                kernel_sizes=(3, 5, 7), grc_enabled=False)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return RandomSource(1234)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, init_params(cfg, RandomSource(7))


def random_ids(rng: RandomSource, shape) -> np.ndarray:
    return rng.integers(0, 4, size=shape)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
