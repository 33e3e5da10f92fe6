import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_addoption(parser):
    parser.addoption(
        "--acceptance-cache",
        default=".cache/acceptance",
        help="directory holding the expensive acceptance artifacts",
    )
