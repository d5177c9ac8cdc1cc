import os
from pathlib import Path

import numpy as np
import pytest
from sklearn.datasets import load_digits

from butdlearn.data import save_idx_images, save_idx_labels


def upsampled_digits():
    """Real handwritten digits (the bundled 8x8 set) upsampled to 28x28.

    A stand-in source corpus for pipeline tests; heavier accuracy targets
    need the original MNIST IDX files (see mnist_dir).
    """
    X, y = load_digits(return_X_y=True)
    imgs = X.reshape(-1, 8, 8) / 16.0
    up = np.repeat(np.repeat(imgs, 4, axis=1), 4, axis=2)  # 32x32
    up = up[:, 2:30, 2:30]  # center crop to 28x28
    return np.rint(up * 255).astype(np.uint8), y.astype(np.int64)


@pytest.fixture(scope="session")
def digits_idx_dir(tmp_path_factory) -> Path:
    """Directory with MNIST-named IDX pairs built from the bundled digits."""
    imgs, labels = upsampled_digits()
    split = 1500
    d = tmp_path_factory.mktemp("digits_idx")
    save_idx_images(d / "train-images-idx3-ubyte", imgs[:split])
    save_idx_labels(d / "train-labels-idx1-ubyte", labels[:split])
    save_idx_images(d / "t10k-images-idx3-ubyte", imgs[split:])
    save_idx_labels(d / "t10k-labels-idx1-ubyte", labels[split:])
    return d


def find_mnist_dir():
    """Locate real MNIST IDX files via $MNIST_DIR or ./data/mnist, if present."""
    candidates = []
    if os.environ.get("MNIST_DIR"):
        candidates.append(Path(os.environ["MNIST_DIR"]))
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for d in candidates:
        if (d / "train-images-idx3-ubyte").exists() \
                and (d / "t10k-images-idx3-ubyte").exists():
            return d
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    d = find_mnist_dir()
    if d is None:
        pytest.skip("real MNIST IDX files not available (set MNIST_DIR to a "
                    "directory holding train-images-idx3-ubyte and friends)")
    return d
