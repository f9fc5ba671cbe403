import numpy as np
import pytest

from dataset import in_memory_data
from model import ArchSpec, init_model
from numerics import RngState

TINY_CLASSES = ["a", "b", "c"]


@pytest.fixture
def tiny_arch():
    return ArchSpec(in_channels=3, widths=(4, 4), strides=(2, 2), kernel_size=3, num_classes=3, input_size=(8, 8))


@pytest.fixture
def tiny_model(tiny_arch):
    return init_model(tiny_arch, None, RngState(7))


def make_tiny_data(seed=0, n=6, eval_n=4, sources=1):
    gen = np.random.default_rng(seed)

    def images(count):
        return gen.uniform(0.0, 1.0, size=(count, 8, 8, 3))

    def labels(count):
        return gen.integers(0, 3, size=(count, 8, 8))

    return in_memory_data(
        sources=[(images(n), labels(n)) for _ in range(sources)],
        targets=[images(n)],
        class_names=TINY_CLASSES,
        eval_sets={"target0": (images(eval_n), labels(eval_n))},
    )


@pytest.fixture
def tiny_data():
    return make_tiny_data()


@pytest.fixture(autouse=True)
def _quiet_progress(monkeypatch):
    monkeypatch.setenv("DDB_PROGRESS", "0")
