"""MNIST IDX ingestion and deterministic two-digit composite synthesis.

The composite benchmark overlays two source digits on a canvas eight pixels
taller and wider than they are (36x36 for MNIST): digit A in the top-left
corner, digit B offset (8, 8) into the bottom-right, overlap resolved by
per-pixel maximum.  Task 0 classifies the left (A) digit, task 1 the right.
Generation is pure given (sources, seed); pixel values live in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MM36_MAGIC = b"MM36"
MM36_VERSION = 1
OFFSET = 8
TRAIN_POOL = 50_000  # composite training pairs draw from the first 50k sources

IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    """Malformed data file or inconsistent dataset request."""


@dataclass
class MnistSet:
    """Images (N, H, W) scaled to [0, 1] plus integer class labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.images.shape[0]


@dataclass
class MultiMnistSet:
    """Composite samples: images (N, 1, H+8, W+8) with a label per task."""

    images: np.ndarray
    left_labels: np.ndarray
    right_labels: np.ndarray

    def __len__(self):
        return self.images.shape[0]

    def labels_for_task(self, task: int) -> np.ndarray:
        if task == 0:
            return self.left_labels
        if task == 1:
            return self.right_labels
        raise IndexError(f"task {task} out of range (two tasks)")


# -- IDX files -----------------------------------------------------------------


def load_idx_images(path) -> np.ndarray:
    """Parse a big-endian IDX image file into a (N, H, W) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        raise DataError(f"{path}: truncated header at byte {len(data)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IMAGES_MAGIC:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte 0, "
                        f"expected 0x{IMAGES_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise DataError(f"{path}: payload ends at byte {len(data)}, "
                        f"expected {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    """Parse a big-endian IDX label file into a (N,) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise DataError(f"{path}: truncated header at byte {len(data)}")
    magic, count = struct.unpack_from(">II", data, 0)
    if magic != LABELS_MAGIC:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte 0, "
                        f"expected 0x{LABELS_MAGIC:08x}")
    if len(data) != 8 + count:
        raise DataError(f"{path}: payload ends at byte {len(data)}, "
                        f"expected {8 + count}")
    return np.frombuffer(data, dtype=np.uint8, offset=8)


def save_idx_images(path, images: np.ndarray):
    """Write images to IDX bytes; inverse of load_idx_images.

    Accepts uint8 pixels or floats in [0, 1] (rescaled by 255 and rounded).
    """
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(images * 255.0).astype(np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images).tobytes())


def save_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_idx(image_path, label_path) -> MnistSet:
    """Load a paired image/label IDX set; counts must agree."""
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {images.shape[0]} images in {image_path} "
                        f"vs {labels.shape[0]} labels in {label_path}")
    return MnistSet(images=images.astype(np.float64) / 255.0,
                    labels=labels.astype(np.int64))


def load_mnist_dir(dirpath, split: str) -> MnistSet:
    """Load the standard-named IDX pair for 'train' or 'test' from a directory."""
    from pathlib import Path
    d = Path(dirpath)
    img_name, lab_name = IDX_NAMES[split]
    candidates = [(d / img_name, d / lab_name),
                  (d / (img_name + ".idx"), d / (lab_name + ".idx"))]
    for img, lab in candidates:
        if img.exists() and lab.exists():
            return load_idx(img, lab)
    raise DataError(f"no {split} IDX pair under {d} (looked for {img_name})")


# -- composite synthesis ---------------------------------------------------------


def _compose(sources: MnistSet, pool: int, n: int, rng) -> MultiMnistSet:
    h, w = sources.images.shape[1:]
    idx_a = rng.integers(0, pool, size=n)
    idx_b = rng.integers(0, pool, size=n)
    same = idx_a == idx_b
    while same.any():  # resample identical-index pairs
        idx_b[same] = rng.integers(0, pool, size=int(same.sum()))
        same = idx_a == idx_b
    canvas = np.zeros((n, 1, h + OFFSET, w + OFFSET), dtype=sources.images.dtype)
    canvas[:, 0, :h, :w] = sources.images[idx_a]
    np.maximum(canvas[:, 0, OFFSET:, OFFSET:], sources.images[idx_b],
               out=canvas[:, 0, OFFSET:, OFFSET:])
    return MultiMnistSet(images=canvas,
                         left_labels=sources.labels[idx_a].copy(),
                         right_labels=sources.labels[idx_b].copy())


def make_multi_mnist(train: MnistSet, test: MnistSet, seed: int,
                     n_train: int, n_test: int) -> tuple[MultiMnistSet, MultiMnistSet]:
    """Synthesize composite train/test sets from source digit sets.

    Training pairs sample (with replacement, never the same index twice in
    one pair) from the first 50k train sources; test pairs use only the test
    split.  Fixed seed gives a bit-identical dataset.
    """
    train_pool = min(len(train), TRAIN_POOL)
    if train_pool < 2 or len(test) < 2:
        raise DataError("need at least two source digits per split")
    if n_train < 0 or n_test < 0:
        raise DataError("sample counts must be non-negative")
    rng = np.random.default_rng(seed)
    train_set = _compose(train, train_pool, n_train, rng)
    test_set = _compose(test, len(test), n_test, rng)
    return train_set, test_set


def batches(dataset: MultiMnistSet, batch_size: int, seed: int, epoch: int):
    """Yield (images, left_labels, right_labels) in a fresh per-epoch order.

    The permutation is drawn from (seed, epoch); the final partial batch is
    included.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        take = order[start:start + batch_size]
        yield (dataset.images[take], dataset.left_labels[take],
               dataset.right_labels[take])


# -- cache file ------------------------------------------------------------------


def save_mm36(path, dataset: MultiMnistSet):
    """Write a composite set to the binary cache format (magic "MM36")."""
    n, _, ch, cw = dataset.images.shape
    with open(path, "wb") as f:
        f.write(MM36_MAGIC)
        f.write(struct.pack("<IIII", MM36_VERSION, n, ch, cw))
        f.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
        f.write(dataset.left_labels.astype(np.uint8).tobytes())
        f.write(dataset.right_labels.astype(np.uint8).tobytes())


def load_mm36(path) -> MultiMnistSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MM36_MAGIC:
        raise DataError(f"{path}: bad magic {data[:4]!r} at byte 0")
    version, n, ch, cw = struct.unpack_from("<IIII", data, 4)
    if version != MM36_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    need = 20 + n * ch * cw * 8 + 2 * n
    if len(data) != need:
        raise DataError(f"{path}: payload ends at byte {len(data)}, expected {need}")
    images = np.frombuffer(data, dtype="<f8", count=n * ch * cw, offset=20)
    images = images.reshape(n, 1, ch, cw).copy()
    off = 20 + n * ch * cw * 8
    left = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).astype(np.int64)
    right = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + n).astype(np.int64)
    return MultiMnistSet(images=images, left_labels=left, right_labels=right)
