import numpy as np
import pytest
import torch

from tsbackdoor.data import Dataset, SyntheticSpec, make_synthetic

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    """40 samples, 2 classes, L=32."""
    return make_synthetic(SyntheticSpec(classes=2, per_class=20, length=32, seed=3))


def random_dataset(rng, n_classes, sizes, L=8, D=1):
    y = np.concatenate([np.full(s, c) for c, s in enumerate(sizes)])
    X = rng.normal(size=(len(y), L, D))
    return Dataset("random", X, y, n_classes)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
