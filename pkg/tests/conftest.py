import numpy as np
import pytest
import torch

from classaware_seg.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """A model small enough to run dozens of forward passes per test."""
    return RunConfig().replace({
        "encoder.channels": (8, 8, 16, 16),
        "decoder.width": 16,
        "lca.heads": 4,
        "lca.patches": (2, 2),
        "data.num_classes": 3,
        "data.image_size": 64,
        "data.n_train": 8,
        "data.n_eval": 2,
        "data.photometric": False,
        "data.scale_range": (1.0, 1.0),
        "train.iterations": 3,
        "train.batch_size": 2,
        "train.log_every": 0,
    })


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(number, name, passed, detail)``."""
    def record(number, name, passed, detail=""):
        _VERDICTS[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {name}  ({detail})"
        print(_VERDICTS[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])


def to64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)
