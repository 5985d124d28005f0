"""Dataset loading: IDX image/label files and deterministic synthetic blobs.

IDX files are parsed bit-exactly: u32 big-endian magic (0x00000803 for images,
0x00000801 for labels), big-endian dims, then raw bytes. Pixels scale by 1/255
into float32. Synthetic blobs are Gaussian clusters around orthonormal centers
(the first c basis vectors), used as the fast offline stand-in dataset.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .nn import Tensor

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; message carries the byte offset."""


@dataclass
class Dataset:
    x: Tensor
    y: np.ndarray
    split: str
    num_classes: int
    image_shape: tuple | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.size:
            raise ValueError(
                f"{self.x.shape[0]} samples but {self.y.size} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def in_dim(self) -> int:
        return self.x.shape[1]


@dataclass
class BlobSpec:
    classes: int = 4
    dim: int = 16
    samples_per_class: int = 500
    sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.dim < self.classes:
            raise ValueError("dim must be >= classes (centers are basis vectors)")
        if self.samples_per_class < 5:
            raise ValueError("need at least 5 samples per class")


def _read_header(blob: bytes, path, expect_magic: int, ndims: int):
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated magic at offset 0")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expect_magic:
        raise IdxFormatError(
            f"{path}: wrong magic 0x{magic:08x} at offset 0 "
            f"(expected 0x{expect_magic:08x})")
    need = 4 + 4 * ndims
    if len(blob) < need:
        raise IdxFormatError(f"{path}: truncated dims at offset 4")
    dims = struct.unpack_from(f">{ndims}I", blob, 4)
    return dims, need


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image/label pair into a Dataset scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        img_blob = f.read()
    with open(labels_path, "rb") as f:
        lbl_blob = f.read()

    (count, rows, cols), off = _read_header(img_blob, images_path,
                                            IMAGES_MAGIC, 3)
    total = count * rows * cols
    if len(img_blob) != off + total:
        raise IdxFormatError(
            f"{images_path}: expected {total} pixel bytes at offset {off}, "
            f"file has {len(img_blob) - off}")
    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=off)

    (lcount,), loff = _read_header(lbl_blob, labels_path, LABELS_MAGIC, 1)
    if len(lbl_blob) != loff + lcount:
        raise IdxFormatError(
            f"{labels_path}: expected {lcount} label bytes at offset {loff}, "
            f"file has {len(lbl_blob) - loff}")
    labels = np.frombuffer(lbl_blob, dtype=np.uint8, offset=loff)

    if count != lcount:
        raise IdxFormatError(
            f"image count {count} != label count {lcount} "
            f"({images_path} vs {labels_path})")

    x = (pixels.astype(np.float32) / np.float32(255.0)).reshape(count,
                                                                rows * cols)
    return Dataset(Tensor.from_array(x), labels.astype(np.int64), split,
                   num_classes=10, image_shape=(rows, cols))


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a Dataset back to IDX files (inverse of load_idx)."""
    if ds.image_shape is None:
        raise ValueError("dataset carries no image shape; cannot write IDX")
    rows, cols = ds.image_shape
    pixels = np.rint(ds.x.view() * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, ds.n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, ds.n))
        f.write(ds.y.astype(np.uint8).tobytes())


def make_blobs(spec: BlobSpec):
    """Deterministic Gaussian blobs with a stratified 80/20 train/test split.

    Class k centers on the k-th unit basis vector; samples add N(0, sigma^2)
    noise per dimension. Each class has exactly samples_per_class instances
    before splitting.
    """
    rng = np.random.default_rng(spec.seed)
    centers = np.eye(spec.classes, spec.dim, dtype=np.float64)
    xs_train, ys_train, xs_test, ys_test = [], [], [], []
    n_test = max(spec.samples_per_class // 5, 1)
    n_train = spec.samples_per_class - n_test
    for k in range(spec.classes):
        pts = centers[k] + spec.sigma * rng.standard_normal(
            (spec.samples_per_class, spec.dim))
        xs_train.append(pts[:n_train])
        ys_train.append(np.full(n_train, k))
        xs_test.append(pts[n_train:])
        ys_test.append(np.full(n_test, k))
    train = Dataset(Tensor.from_array(np.concatenate(xs_train)),
                    np.concatenate(ys_train), "train", spec.classes)
    test = Dataset(Tensor.from_array(np.concatenate(xs_test)),
                   np.concatenate(ys_test), "test", spec.classes)
    return train, test


def find_mnist(data_dir=None):
    """Locate MNIST IDX files under data_dir or $TCN_DATA_DIR; None if absent."""
    root = data_dir or os.environ.get("TCN_DATA_DIR")
    if not root:
        return None
    candidates = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
         "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte",
         "t10k-images.idx3-ubyte", "t10k-labels.idx1-ubyte"),
    ]
    for names in candidates:
        paths = [os.path.join(root, n) for n in names]
        if all(os.path.exists(p) for p in paths):
            return paths
    return None
