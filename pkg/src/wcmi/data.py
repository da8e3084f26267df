"""Dataset construction: synthetic Gaussian mixtures, IDX image files, CSV."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .batch import SampleBatch
from .gmm import GaussianMixtureSpec, sample_gmm

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
SOURCES = ("synthetic_gmm", "idx_files", "csv")
NORMALIZATIONS = ("none", "to_unit_box")


class DataFormatError(ValueError):
    """Malformed input file; ``offset`` is the byte (or line) where parsing failed."""

    def __init__(self, message: str, path, offset: int):
        super().__init__(f"{path}: {message} at byte offset {offset}")
        self.path = str(path)
        self.offset = offset


@dataclass
class DatasetSpec:
    source: str = "synthetic_gmm"
    # synthetic_gmm
    theta_star: Optional[list] = None
    sigma_star: Optional[list] = None
    n: int = 1000
    # idx_files
    images: Optional[str] = None
    labels: Optional[str] = None
    downsample: int = 1
    # csv: numeric rows, optional label column
    path: Optional[str] = None
    label_column: Optional[int] = None
    # idx_files / csv
    take: Optional[int] = None
    normalization: str = "none"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"dataset source must be one of {SOURCES}, got {self.source!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if self.downsample < 1:
            raise ValueError("downsample factor must be >= 1")
        if self.take is not None and self.take < 1:
            raise ValueError("take must be >= 1")
        if self.source == "idx_files" and not self.images:
            raise ValueError("idx_files source needs an images path")
        if self.source == "csv" and not self.path:
            raise ValueError("csv source needs a path")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_header(path, raw: bytes, magic: int, n_dims: int):
    need = 4 + 4 * n_dims
    if len(raw) < need:
        raise DataFormatError(f"file too short for an IDX header ({len(raw)} bytes)", path, len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", path, 0)
    dims = struct.unpack(">" + "I" * n_dims, raw[4:need])
    expected = need + int(np.prod(dims))
    if len(raw) < expected:
        raise DataFormatError(f"truncated payload: expected {expected} bytes, found {len(raw)}", path, len(raw))
    return dims, need


def read_idx_images(path) -> np.ndarray:
    """uint8 array of shape (n, rows, cols)."""
    raw = Path(path).read_bytes()
    (n, rows, cols), start = _read_header(path, raw, IDX_IMAGE_MAGIC, 3)
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=start).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,), start = _read_header(path, raw, IDX_LABEL_MAGIC, 1)
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=start).astype(np.int64)


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, labels.size) + labels.tobytes())


def mean_pool(images: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks; trailing rows/cols that do not fill a block are dropped."""
    if factor == 1:
        return images.astype(np.float64)
    n, rows, cols = images.shape
    r, c = rows // factor, cols // factor
    if r == 0 or c == 0:
        raise ValueError(f"downsample factor {factor} exceeds image size {rows}x{cols}")
    blocks = images[:, : r * factor, : c * factor].astype(np.float64).reshape(n, r, factor, c, factor)
    return blocks.mean(axis=(2, 4))


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _take(batch: SampleBatch, take: Optional[int], rng: np.random.Generator) -> SampleBatch:
    if take is None or take >= len(batch):
        return batch
    return batch.take(np.sort(rng.permutation(len(batch))[:take]))


def _to_unit_box(rows: np.ndarray) -> np.ndarray:
    lo, hi = float(rows.min()), float(rows.max())
    if hi == lo:
        return np.zeros_like(rows)
    return (rows - lo) / (hi - lo)


def load_dataset(spec: DatasetSpec, rng: np.random.Generator) -> SampleBatch:
    if spec.source == "synthetic_gmm":
        if spec.theta_star is None:
            raise ValueError("synthetic_gmm needs theta_star")
        theta = np.asarray(spec.theta_star, dtype=np.float64)
        sigma = np.eye(theta.size) if spec.sigma_star is None else spec.sigma_star
        batch = sample_gmm(GaussianMixtureSpec(theta, sigma), spec.n, rng)
    elif spec.source == "idx_files":
        images = read_idx_images(spec.images)
        labels = None
        if spec.labels:
            labels = read_idx_labels(spec.labels)
            if labels.size != images.shape[0]:
                raise DataFormatError(
                    f"label count {labels.size} does not match image count {images.shape[0]}", spec.labels, 4
                )
        pooled = mean_pool(images, spec.downsample) / 255.0
        batch = _take(SampleBatch(pooled.reshape(pooled.shape[0], -1), labels), spec.take, rng)
    else:
        batch = _take(read_csv(spec.path, spec.label_column), spec.take, rng)
    if spec.normalization == "to_unit_box":
        batch = SampleBatch(_to_unit_box(batch.rows), batch.labels, batch.features)
    return batch


def read_csv(path, label_column: Optional[int] = None) -> SampleBatch:
    try:
        table = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataFormatError(f"unparseable CSV ({exc})", path, 0) from exc
    if label_column is None:
        return SampleBatch(table)
    labels = table[:, label_column]
    rows = np.delete(table, label_column % table.shape[1], axis=1)
    return SampleBatch(rows, labels)
