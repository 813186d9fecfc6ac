"""Dataset ingestion: IDX containers (MNIST family) and a plain CSV fallback."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
_MAX_ITEMS = 1 << 31


class DatasetError(ValueError):
    pass


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path, expect: int | None = None) -> np.ndarray:
    """Read an unsigned-byte IDX file into a uint8 array.

    ``expect`` pins the magic number (``IDX_IMAGES`` or ``IDX_LABELS``).
    """
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise DatasetError(f"{path}: truncated header at byte offset {len(data)}")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IDX_LABELS, IDX_IMAGES) or (expect is not None and magic != expect):
        want = f"0x{expect:08x}" if expect is not None else "0x00000801/0x00000803"
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected {want}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise DatasetError(f"{path}: truncated header at byte offset {len(data)}")
    dims = struct.unpack(">" + "I" * ndim, data[4:head])
    count = 1
    for d in dims:
        count *= d
        if count >= _MAX_ITEMS:
            raise DatasetError(f"{path}: dimensions {dims} overflow")
    if len(data) - head < count:
        raise DatasetError(f"{path}: truncated payload at byte offset {len(data)}, "
                           f"need {head + count} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as an IDX file (used for fixtures and exports)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        f.write(a.tobytes())


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    x = load_idx(images_path, IDX_IMAGES)
    y = load_idx(labels_path, IDX_LABELS)
    if len(x) != len(y):
        raise DatasetError(f"{len(x)} images but {len(y)} labels")
    return x.reshape(len(x), -1), y.astype(np.int64)


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """``label,p0,p1,...`` rows with pixels in 0..255; lines starting with # are skipped."""
    rows = np.loadtxt(_open(path), delimiter=",", dtype=np.int64, comments="#", ndmin=2)
    if rows.shape[1] < 2:
        raise DatasetError(f"{path}: need a label column and at least one pixel")
    x, y = rows[:, 1:], rows[:, 0]
    if x.min(initial=0) < 0 or x.max(initial=0) > 255:
        raise DatasetError(f"{path}: pixel values must be in 0..255")
    return x.astype(np.uint8), y


def load_dataset(images: str, labels: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """IDX pair when ``labels`` is given, otherwise a single CSV file."""
    if labels:
        return load_idx_pair(images, labels)
    return load_csv(images)


def quantize_input(x_raw, T: int) -> np.ndarray:
    """Map bytes 0..255 onto T bins: floor(x * T / 256)."""
    if T < 1:
        raise ValueError("T must be at least 1")
    return (np.asarray(x_raw, dtype=np.int64) * T) // 256
