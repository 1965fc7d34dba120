"""
Shared fixtures for the test suite.
Long acceptance runs are marked `slow` and only run with FLI_RUN_SLOW=1.
"""

import os
import struct

import numpy as np
import pytest

from src.datagen import IrfConfig, TimeGrid, build_dataset, build_mono_dataset, split_dataset
from src.gru_model import ModelConfig, ModelKind, init_model
from src.training import TrainConfig, train_teacher


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test (set FLI_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("FLI_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set FLI_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_idx_bytes(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    return struct.pack(">IIII", 0x00000803, count, rows, cols) + images.tobytes()


@pytest.fixture
def idx_bytes():
    return make_idx_bytes


@pytest.fixture
def small_grid():
    return TimeGrid.from_window(32, 10.0)


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(7)
    images = np.zeros((2, 6, 6), dtype=np.uint8)
    images[:, 1:5, 1:5] = rng.integers(1, 256, size=(2, 4, 4))
    return images


@pytest.fixture
def small_dataset(small_grid, tiny_images):
    return build_dataset(tiny_images, small_grid, IrfConfig(), peak_counts=500.0, seed=3)


@pytest.fixture
def mono_dataset(small_grid):
    return build_mono_dataset(80, small_grid, tau_ns=1.0, peak_counts=1000.0, seed=5)


@pytest.fixture
def lite_model():
    return init_model(ModelConfig(kind=ModelKind.LITE, enc_hidden=[8], seq_len=32), seed=1)


@pytest.fixture
def teacher_model():
    return init_model(ModelConfig(kind=ModelKind.TEACHER, enc_hidden=[8, 4], seq_len=32), seed=2)


def blob_images(count: int, seed: int) -> np.ndarray:
    """Digit-sized 28x28 images made of three soft blobs, a stand-in for MNIST."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:28, 0:28]
    images = np.zeros((count, 28, 28), dtype=np.uint8)
    for i in range(count):
        field = np.zeros((28, 28))
        for cy, cx in rng.uniform(6, 22, size=(3, 2)):
            field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 18.0)
        field /= field.max()
        images[i] = np.where(field > 0.2, np.rint(255 * field), 0).astype(np.uint8)
    return images


@pytest.fixture(scope="session")
def desk_split():
    """20,000 records on 128 gates at 500 peak counts, split into (train, test)."""
    grid = TimeGrid.from_window(128, 10.0)
    dataset = build_dataset(blob_images(240, 42), grid, peak_counts=500.0, seed=42)
    assert len(dataset) >= 20000
    return split_dataset(dataset.subset(range(20000)), 0.1, seed=7)


@pytest.fixture(scope="session")
def desk_teacher(desk_split):
    train, _ = desk_split
    config = ModelConfig(kind=ModelKind.TEACHER, enc_hidden=[64, 16], seq_len=128)
    model, _ = train_teacher(train, config, TrainConfig(epochs=20, batch_size=64, lr=0.002, seed=42))
    return model
