"""MNIST IDX ingestion and train/test subset selection."""
from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ROOT_ENV = "RBFMAP_DATA"


def data_root() -> Path:
    """Directory holding IDX files: ``$RBFMAP_DATA`` or the repository's ``data/``."""
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


def resolve(path) -> Path:
    path = Path(path)
    if not path.is_absolute() and not path.exists():
        candidate = data_root() / path
        if candidate.exists():
            return candidate
    return path


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX3 image file into a uint8 array of shape (N, rows, cols)."""
    path = resolve(path)
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: header truncated at offset {len(raw)}, need 16 bytes")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IMAGE_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(raw) < expected:
        raise FormatError(f"{path}: pixel data truncated at offset {len(raw)}, expected {expected} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    path = resolve(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: header truncated at offset {len(raw)}, need 8 bytes")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{LABEL_MAGIC:08x}")
    if len(raw) < 8 + n:
        raise FormatError(f"{path}: label data truncated at offset {len(raw)}, expected {8 + n} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as float64 ``(N, 28, 28, 1)`` scaled to [0, 1], plus integer labels."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return (images.astype(np.float64) / 255.0)[..., None], labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, rows, cols) and labels as (optionally gzipped) IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    blobs = {
        Path(images_path): struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes(),
        Path(labels_path): struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes(),
    }
    for path, blob in blobs.items():
        if path.suffix == ".gz":
            blob = gzip.compress(blob, mtime=0)
        path.write_bytes(blob)


def split_indices(n: int, n_train: int, n_test: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, seeded train/test index sets drawn from one pool of size ``n``."""
    if n_train + n_test > n:
        raise DataError(f"requested {n_train} + {n_test} samples from a pool of {n}")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_test])


def subset(n: int, k: int, seed: int) -> np.ndarray:
    if k > n:
        raise DataError(f"requested {k} samples from {n}")
    return np.sort(np.random.default_rng(seed).permutation(n)[:k])
