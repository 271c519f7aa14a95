"""MNIST IDX loading, binarization, one-hot labels, and dataset splits.

The cache file layout (little-endian) is a 16-byte header followed by the
raw payload:

    offset  size  field
    0       4     magic  b"ABDS"
    4       2     version (currently 1)
    6       2     reserved, zero
    8       4     item count
    12      4     pixels per image
    16      -     raw pixel bytes (count * pixels), then label bytes (count)
"""

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

CACHE_MAGIC = b"ABDS"
CACHE_VERSION = 1
BINARIZE_THRESHOLD = 0.5


class DatasetError(Exception):
    pass


class MagicMismatch(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


def binarize(pixels):
    """Threshold pixels in [0, 1] to {0, 1}; strictly greater than 0.5
    maps to 1."""
    return (np.asarray(pixels) > BINARIZE_THRESHOLD).astype(np.float64)


@dataclass
class LabeledBinaryDataset:
    """Binarized images with class labels. ``raw`` keeps the original uint8
    pixels so grayscale values and cache round-trips stay exact."""

    raw: np.ndarray     # (N, 784) uint8
    labels: np.ndarray  # (N,) uint8, values 0..9

    def __post_init__(self):
        if len(self.raw) != len(self.labels):
            raise CountMismatch(
                f"{len(self.raw)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.raw)

    @property
    def grayscale(self) -> np.ndarray:
        """Pixels scaled to [0, 1]."""
        return self.raw.astype(np.float64) / 255.0

    @property
    def images(self) -> np.ndarray:
        """Binarized pixels, values in {0.0, 1.0}."""
        return binarize(self.grayscale)

    @property
    def one_hot(self) -> np.ndarray:
        """(N, 10) one-hot label vectors."""
        out = np.zeros((len(self.labels), 10))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    def subset(self, indices) -> "LabeledBinaryDataset":
        return LabeledBinaryDataset(self.raw[indices], self.labels[indices])


def _read_exact(f, nbytes, path, what):
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise TruncatedFile(
            f"{path}: expected {nbytes} bytes for {what} at offset "
            f"{f.tell() - len(data)}, got {len(data)}"
        )
    return data


def load_idx(images_path, labels_path) -> LabeledBinaryDataset:
    """Load an MNIST-style IDX image/label file pair."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">4i", _read_exact(f, 16, images_path, "image header")
        )
        if magic != IMAGE_MAGIC:
            raise MagicMismatch(
                f"{images_path}: magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IMAGE_MAGIC:08x}"
            )
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, images_path, "pixel data"),
            dtype=np.uint8,
        ).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(
            ">2i", _read_exact(f, 8, labels_path, "label header")
        )
        if magic != LABEL_MAGIC:
            raise MagicMismatch(
                f"{labels_path}: magic 0x{magic:08x} at offset 0, "
                f"expected 0x{LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(
            _read_exact(f, label_count, labels_path, "label data"),
            dtype=np.uint8,
        )

    if count != label_count:
        raise CountMismatch(
            f"{images_path} has {count} images but {labels_path} has "
            f"{label_count} labels"
        )
    return LabeledBinaryDataset(pixels.copy(), labels.copy())


def split(dataset, validation_fraction, seed):
    """Deterministic disjoint (train, validation) partition."""
    if not 0 <= validation_fraction < 1:
        raise ValueError("validation_fraction must be in [0, 1)")
    n = len(dataset)
    n_val = int(n * validation_fraction)
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[n_val:]), dataset.subset(perm[:n_val])


def save_cache(dataset, path):
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<HHII", CACHE_VERSION, 0, len(dataset), dataset.raw.shape[1]))
        f.write(dataset.raw.tobytes())
        f.write(dataset.labels.tobytes())


def load_cache(path) -> LabeledBinaryDataset:
    with open(path, "rb") as f:
        header = _read_exact(f, 16, path, "cache header")
        if header[:4] != CACHE_MAGIC:
            raise MagicMismatch(f"{path}: bad cache magic at offset 0")
        version, _, count, pixels = struct.unpack("<HHII", header[4:])
        if version != CACHE_VERSION:
            raise DatasetError(f"{path}: unsupported cache version {version}")
        raw = np.frombuffer(
            _read_exact(f, count * pixels, path, "pixel data"), dtype=np.uint8
        ).reshape(count, pixels)
        labels = np.frombuffer(
            _read_exact(f, count, path, "label data"), dtype=np.uint8
        )
    return LabeledBinaryDataset(raw.copy(), labels.copy())
