import os
from pathlib import Path

import numpy as np
import pytest

from _synth import standardized_pair, synthetic_arrays, write_cifar10_dir

# Real CIFAR binaries, when available, live under $THRIFTYNET_DATA or ./data.
DATA_ENV = "THRIFTYNET_DATA"


def real_cifar10_dir() -> Path | None:
    base = Path(os.environ.get(DATA_ENV, "data"))
    for candidate in (base, base / "cifar-10-batches-bin"):
        if (candidate / "data_batch_1.bin").is_file():
            return base
    return None


@pytest.fixture(scope="session")
def cifar10_real():
    path = real_cifar10_dir()
    if path is None:
        pytest.skip(
            f"real CIFAR-10 binaries not found; place cifar-10-batches-bin under "
            f"./data or point ${DATA_ENV} at it"
        )
    return path


@pytest.fixture(scope="session")
def cifar10_synth_dir(tmp_path_factory):
    """Full-size (50000/10000 records) CIFAR-10 layout with synthetic pixels."""
    rng = np.random.default_rng(1234)
    train_images = rng.integers(0, 256, size=(50000, 3, 32, 32), dtype=np.uint8)
    train_labels = rng.integers(0, 10, size=50000).astype(np.uint8)
    test_images = rng.integers(0, 256, size=(10000, 3, 32, 32), dtype=np.uint8)
    test_labels = rng.integers(0, 10, size=10000).astype(np.uint8)
    return write_cifar10_dir(tmp_path_factory.mktemp("cifar10_synth"),
                             train_images, train_labels, test_images, test_labels)


@pytest.fixture(scope="session")
def raw_dataset_files(tmp_path_factory):
    """Learnable synthetic data saved as raw tensor containers."""
    from thriftynet.data import save_raw

    from _synth import standardized_pair

    train_ds, test_ds = standardized_pair(640, 160, seed=31)
    folder = tmp_path_factory.mktemp("raw_data")
    save_raw(folder / "train.rawt", train_ds.images, train_ds.labels)
    save_raw(folder / "test.rawt", test_ds.images, test_ds.labels)
    return folder / "train.rawt", folder / "test.rawt"


@pytest.fixture(scope="session")
def synth_pair():
    """Standardized in-memory train/test datasets (1500/400 samples)."""
    return standardized_pair(1500, 400, seed=11)


@pytest.fixture(scope="session")
def tiny_pair():
    """Very small standardized pair for fast loop tests (160/80 samples)."""
    return standardized_pair(160, 80, seed=21)
