"""MNIST IDX ingestion."""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
MNIST_ENV = "MCASIM_MNIST_DIR"


class DataError(ValueError):
    pass


@dataclass
class DatasetBundle:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for x, y, name in ((self.train_x, self.train_y, "train"), (self.test_x, self.test_y, "test")):
            if x.shape[0] != y.shape[0]:
                raise DataError(f"{name}: {x.shape[0]} images but {y.shape[0]} labels")
            if x.size and (x.min() < 0 or x.max() > 1):
                raise DataError(f"{name}: pixel values outside [0, 1]")
            if y.size and (y.min() < 0 or y.max() > 9):
                raise DataError(f"{name}: label values outside [0, 9]")

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "DatasetBundle":
        return DatasetBundle(self.train_x[:n_train], self.train_y[:n_train],
                             self.test_x[:n_test], self.test_y[:n_test],
                             {**self.meta, "n_train": n_train, "n_test": n_test})


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from e


def _parse(buf: bytes, magic: int, path) -> np.ndarray:
    if len(buf) < 8:
        raise DataError(f"{path}: truncated header (offset 0, {len(buf)} bytes)")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise DataError(f"{path}: truncated dimension header (offset 4)")
    dims = struct.unpack(f">{ndim}I", buf[4:hdr])
    need = int(np.prod(dims))
    if len(buf) - hdr < need:
        raise DataError(f"{path}: truncated payload at offset {len(buf)}, expected {hdr + need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=hdr).reshape(dims)


def load_idx_pair(image_path, label_path) -> tuple[np.ndarray, np.ndarray, dict]:
    ib, lb = _read(image_path), _read(label_path)
    images = _parse(ib, IMAGE_MAGIC, image_path)
    labels = _parse(lb, LABEL_MAGIC, label_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {images.shape[0]} images in {image_path}, "
                        f"{labels.shape[0]} labels in {label_path}")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    meta = {str(image_path): hashlib.sha256(ib).hexdigest(), str(label_path): hashlib.sha256(lb).hexdigest()}
    return x, labels.astype(np.int64), meta


def load_mnist_idx(image_path, label_path, test_image_path=None, test_label_path=None) -> DatasetBundle:
    """Parse IDX files into a bundle with pixels scaled to [0, 1].

    Without test paths the test split is empty.
    """
    x, y, meta = load_idx_pair(image_path, label_path)
    if test_image_path is None:
        tx, ty = np.zeros((0, x.shape[1])), np.zeros(0, dtype=np.int64)
    else:
        tx, ty, tmeta = load_idx_pair(test_image_path, test_label_path)
        meta.update(tmeta)
    return DatasetBundle(x, y, tx, ty, {"digests": meta})


def default_mnist_dir() -> Path:
    return Path(os.environ.get(MNIST_ENV, "/root/data/mnist"))


def load_mnist_dir(directory=None) -> DatasetBundle:
    d = Path(directory) if directory is not None else default_mnist_dir()
    return load_mnist_idx(d / TRAIN_FILES[0], d / TRAIN_FILES[1], d / TEST_FILES[0], d / TEST_FILES[1])


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (images when 3-D, labels when 1-D)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = {1: LABEL_MAGIC, 3: IMAGE_MAGIC}.get(a.ndim)
    if magic is None:
        raise DataError("IDX writer supports 1-D labels and 3-D images")
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())
