"""Dataset ingestion: IDX parsing, splits, and a synthetic generator.

MNIST-family files use the big-endian IDX format: images carry magic
0x00000803 with dims (count, rows, cols); labels carry magic 0x00000801.
``load_idx`` accepts plain files or ``.gz`` compressed copies transparently.
Pixels are scaled into [0, 1]; no mean/std standardization is applied (the
``normalize`` flag of :func:`load_mnist_dataset` can disable scaling for raw
byte access).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "BMRS_DATA_DIR"


class IdxParseError(ValueError):
    """Malformed IDX file; the message names the failing byte offset."""


@dataclass(frozen=True)
class Dataset:
    """Images shaped [n, c, h, w] in [0, 1], integer labels, and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"Dataset images must be 4-d, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("Dataset labels must align with images")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split)


def _open_maybe_gzip(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, offset: int, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxParseError(f"{path}: truncated at byte {offset + len(data)}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a [0, 1]-scaled Dataset."""
    with _open_maybe_gzip(images_path) as f:
        header = _read_exact(f, 16, 0, images_path)
        magic, n, rows, cols = struct.unpack(">iiii", header)
        if magic != IMAGE_MAGIC:
            raise IdxParseError(
                f"{images_path}: bad image magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{IMAGE_MAGIC:08x})"
            )
        if n < 0 or rows <= 0 or cols <= 0 or n * rows * cols > 2**33:
            raise IdxParseError(f"{images_path}: implausible dims ({n}, {rows}, {cols})")
        raw = _read_exact(f, n * rows * cols, 16, images_path)
        if f.read(1):
            raise IdxParseError(f"{images_path}: trailing bytes after byte {16 + n*rows*cols}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as f:
        header = _read_exact(f, 8, 0, labels_path)
        magic, n_lab = struct.unpack(">ii", header)
        if magic != LABEL_MAGIC:
            raise IdxParseError(
                f"{labels_path}: bad label magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{LABEL_MAGIC:08x})"
            )
        raw = _read_exact(f, n_lab, 8, labels_path)
        if f.read(1):
            raise IdxParseError(f"{labels_path}: trailing bytes after byte {8 + n_lab}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_lab:
        raise IdxParseError(f"image count {n} != label count {n_lab}")
    return Dataset(images.astype(float) / 255.0, labels)


def save_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Serialize uint8 images [n, h, w] (or [n, 1, h, w]) and labels to IDX."""
    if images_u8.ndim == 4:
        images_u8 = images_u8[:, 0]
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", LABEL_MAGIC, n))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def dataset_to_u8(ds: Dataset) -> np.ndarray:
    """Re-quantize [0, 1] images back to uint8 (inverse of the load scaling)."""
    return np.rint(ds.images * 255.0).astype(np.uint8)


def split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0):
    """Disjoint, exhaustive (train, val) split via a seeded shuffle."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.Generator(np.random.Philox(seed))
    perm = rng.permutation(ds.n)
    n_train = int(round(ds.n * train_fraction))
    return (
        ds.subset(perm[:n_train], split="train"),
        ds.subset(perm[n_train:], split="val"),
    )


def synth_blobs(n: int, n_classes: int, dim: int, separation: float, seed: int) -> Dataset:
    """Gaussian class clusters (unit within-class scale).

    Class means are placed at ``separation`` times random orthonormal
    directions, so the task is linearly separable for separation >= 4.
    Images come out shaped [n, 1, 1, dim] so the network builders can treat
    them like any other input.
    """
    if n_classes < 2 or dim < 1 or n < n_classes:
        raise ValueError("synth_blobs: need n >= n_classes >= 2 and dim >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0] if dim >= n_classes else None
    means = np.zeros((n_classes, dim))
    for k in range(n_classes):
        if basis is not None:
            means[k] = separation * basis[:, k % dim]
        else:
            direction = rng.standard_normal(dim)
            means[k] = separation * direction / max(np.linalg.norm(direction), 1e-12)
    labels = rng.integers(0, n_classes, size=n)
    images = means[labels] + rng.standard_normal((n, dim))
    return Dataset(images.reshape(n, 1, 1, dim), labels, split="synth")


# ---------------------------------------------------------------------------
# Named dataset resolution
# ---------------------------------------------------------------------------

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def resolve_data_dir(data_dir=None) -> Path:
    """Dataset root: explicit argument, else $BMRS_DATA_DIR, else ./data."""
    if data_dir is not None:
        return Path(data_dir)
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _find_idx_pair(root: Path, names: tuple[str, str]):
    paths = []
    for name in names:
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(
                f"missing {name}[.gz] under {root} "
                f"(set {DATA_DIR_ENV} or pass --data-dir)"
            )
    return paths


def load_mnist_dataset(name: str = "mnist", data_dir=None, seed: int = 0,
                       normalize: bool = True):
    """(train, val, test) for 'mnist' or 'fashion_mnist' from IDX files.

    Looks for the standard four IDX files under ``<data_dir>/<name>/``.  The
    original train set is split 80/20 into train/validation; the original
    test set is returned untouched.  ``normalize=False`` keeps raw byte
    values (as floats) instead of the [0, 1] scaling.
    """
    root = resolve_data_dir(data_dir) / name
    train_paths = _find_idx_pair(root, _MNIST_FILES["train"])
    test_paths = _find_idx_pair(root, _MNIST_FILES["test"])
    full_train = load_idx(*train_paths)
    test = load_idx(*test_paths)
    if not normalize:
        full_train = Dataset(full_train.images * 255.0, full_train.labels)
        test = Dataset(test.images * 255.0, test.labels)
    train, val = split(full_train, train_fraction=0.8, seed=seed)
    return train, val, Dataset(test.images, test.labels, split="test")
