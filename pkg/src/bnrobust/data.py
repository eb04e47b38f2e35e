"""Dataset readers (CIFAR-10 binary, MNIST IDX, synthetic), augmentation and batching.

CIFAR-10 binary: each record is 3073 bytes, one label byte followed by
3072 pixel bytes holding the 32x32 red, green and blue planes in that order,
each plane row-major. MNIST IDX: a big-endian header (magic 0x00000803 for
images, 0x00000801 for labels, then one uint32 per dimension) followed by
unsigned bytes.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledBatch:
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray | None  # int64 [N]
    indices: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray | None
    tag: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.labels is None:  # unlabeled split (analysis only)
            return
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, n: int) -> "DatasetSplit":
        """The first ``n`` examples in canonical order."""
        if n > len(self):
            raise ValueError(f"requested {n} examples from a split of size {len(self)}")
        labels = None if self.labels is None else self.labels[:n]
        return DatasetSplit(self.images[:n], labels, self.tag, self.num_classes)

    def batch(self, idx) -> LabeledBatch:
        idx = np.asarray(idx)
        return LabeledBatch(self.images[idx], None if self.labels is None else self.labels[idx], idx)


# -- CIFAR-10 ----------------------------------------------------------------


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataFormatError(
            f"{source}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record starts at byte offset {whole * CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{source}: label {labels[bad]} at byte offset {bad * CIFAR_RECORD} outside [0, 9]")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _read_cifar_files(root: Path, names: list[str], tag: str) -> DatasetSplit:
    imgs, labs = [], []
    for name in names:
        path = root / name
        if not path.is_file():
            raise FileNotFoundError(f"missing CIFAR-10 file: {path}")
        x, y = parse_cifar10_bytes(path.read_bytes(), str(path))
        imgs.append(x)
        labs.append(y)
    return DatasetSplit(np.concatenate(imgs), np.concatenate(labs), tag, 10)


def load_cifar10(directory) -> tuple[DatasetSplit, DatasetSplit]:
    """Read the canonical ``data_batch_{1..5}.bin`` / ``test_batch.bin`` files."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    return _read_cifar_files(root, CIFAR_TRAIN_FILES, "train"), _read_cifar_files(root, CIFAR_TEST_FILES, "test")


def write_cifar10_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar10_bytes` for [0,1] float images (rounded to bytes)."""
    px = np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], px], axis=1)
    return rec.tobytes()


# -- MNIST IDX -----------------------------------------------------------------


def _open_maybe_gz(path: Path) -> bytes:
    if path.is_file():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.is_file():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"missing IDX file: {path} (or {gz.name})")


def parse_idx(raw: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{source}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{source}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataFormatError(f"{source}: header promises {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def _load_idx_pair(root: Path, images_name: str, labels_name: str, tag: str) -> DatasetSplit:
    images = parse_idx(_open_maybe_gz(root / images_name), IDX_IMAGES_MAGIC, images_name)
    labels = parse_idx(_open_maybe_gz(root / labels_name), IDX_LABELS_MAGIC, labels_name)
    if len(images) != len(labels):
        raise DataFormatError(f"{images_name} has {len(images)} images but {labels_name} has {len(labels)} labels")
    x = images.astype(np.float32)[:, None] / 255.0
    return DatasetSplit(x, labels.astype(np.int64), tag, 10)


def load_mnist_idx(directory) -> tuple[DatasetSplit, DatasetSplit]:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    return tuple(_load_idx_pair(root, *MNIST_FILES[tag], tag) for tag in ("train", "test"))


# -- synthetic -------------------------------------------------------------------


def make_blobs(
    n: int,
    seed: int = 0,
    num_classes: int = 2,
    image_size: int = 8,
    channels: int = 1,
    margin: float = 0.5,
    noise: float = 0.05,
    tag: str = "train",
) -> DatasetSplit:
    """Gaussian blobs in image space.

    Class ``k`` is a random binary prototype image; every two prototypes are
    at least ``margin`` apart in L-infinity distance on a shared pixel block,
    so an L-infinity robust classifier exists for budgets below ``margin / 2``.
    Prototype pixels are 0.25 or 0.75 and per-pixel noise is clipped to [0, 1].
    """
    proto_rng = np.random.default_rng(1234)
    shape = (channels, image_size, image_size)
    levels = np.array([0.5 - margin / 2, 0.5 + margin / 2])
    protos = levels[proto_rng.integers(0, 2, size=(num_classes,) + shape)]
    # guarantee separation: class k fixes a distinct code in the first pixels
    code_pixels = max(1, int(np.ceil(np.log2(num_classes))))
    flat = protos.reshape(num_classes, -1)
    for k in range(num_classes):
        for bit in range(code_pixels):
            flat[k, bit] = levels[(k >> bit) & 1]
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    imgs = protos[labels] + noise * rng.standard_normal((n,) + shape)
    return DatasetSplit(np.clip(imgs, 0, 1).astype(np.float32), labels, tag, num_classes)


# -- augmentation and batching ------------------------------------------------------


def augment(batch: LabeledBatch, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> LabeledBatch:
    """Zero-pad by ``pad``, random crop back to native size, random horizontal flip."""
    x = batch.images
    n, c, h, w = x.shape
    if pad:
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oy = rng.integers(0, 2 * pad + 1, size=n)
        ox = rng.integers(0, 2 * pad + 1, size=n)
        out = np.empty_like(x)
        for i in range(n):
            out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    else:
        out = x.copy()
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask][..., ::-1]
    return LabeledBatch(out, batch.labels.copy(), batch.indices)


def hflip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[..., ::-1])


def batch_iter(split: DatasetSplit, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True) -> Iterator[LabeledBatch]:
    """One epoch of batches under a permutation seeded by ``(seed, epoch)``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(split)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield split.batch(order[start : start + batch_size])


def load_dataset(name: str, directory=None, seed: int = 0, **kw) -> tuple[DatasetSplit, DatasetSplit]:
    """Dispatch on dataset name: ``cifar10``, ``mnist`` or ``blobs``."""
    if name == "cifar10":
        return load_cifar10(directory)
    if name == "mnist":
        return load_mnist_idx(directory)
    if name == "blobs":
        n_train = int(kw.pop("n_train", 512))
        n_test = int(kw.pop("n_test", 256))
        return (
            make_blobs(n_train, seed=seed, tag="train", **kw),
            make_blobs(n_test, seed=seed + 10_000, tag="test", **kw),
        )
    raise ValueError(f"unknown dataset {name!r}")
