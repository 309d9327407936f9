"""Dataset ingestion and spike encoding.

Loaders return plain arrays; :func:`encode` turns feature rows into spike
trains on the normalized input interval [0, tau_in].  Image features encode
inverted (bright pixels fire first); direct-coded features (iris) map
proportionally and gain an always-at-zero bias spike.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "IdxFormatError",
    "DataFormatError",
    "EncodedDataset",
    "load_idx",
    "load_iris_csv",
    "encode",
    "synth_spikes",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX payload (bad magic, truncation, or count mismatch)."""


class DataFormatError(ValueError):
    """Malformed tabular dataset file."""


@dataclass(frozen=True)
class EncodedDataset:
    """Spike-encoded samples: times (n, d) in [0, tau_in], integer labels."""

    times: np.ndarray
    labels: np.ndarray
    split: str = "train"
    tau_in: float = 1.0

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def n_features(self) -> int:
        return self.times.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _open_maybe_gz(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_u32(fh, path, what):
    raw = fh.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair (optionally gzip-compressed).

    Images: big-endian magic 0x00000803, u32 count/rows/cols, then row-major
    u8 pixels; labels: magic 0x00000801, u32 count, u8 labels.  Pixels are
    returned normalized to [0, 1] as (count, rows, cols) float64.
    """
    with _open_maybe_gz(images_path) as fh:
        magic = _read_u32(fh, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        count = _read_u32(fh, images_path, "count")
        rows = _read_u32(fh, images_path, "rows")
        cols = _read_u32(fh, images_path, "cols")
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise IdxFormatError(
                f"{images_path}: truncated payload ({len(payload)} of {count * rows * cols} bytes)"
            )
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    with _open_maybe_gz(labels_path) as fh:
        magic = _read_u32(fh, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        n = _read_u32(fh, labels_path, "count")
        payload = fh.read(n)
        if len(payload) != n:
            raise IdxFormatError(f"{labels_path}: truncated payload")
        labels = np.frombuffer(payload, dtype=np.uint8)
    if count != n:
        raise IdxFormatError(f"image count {count} != label count {n}")
    return images.astype(float) / 255.0, labels.astype(int)


def load_iris_csv(path, label_map: dict | None = None):
    """Load a 4-feature/1-label CSV; features are min-max normalized to [0, 1].

    The label column accepts integers or species names (mapped in order of
    first appearance unless ``label_map`` is given).  A non-numeric first row
    is treated as a header.  Malformed rows raise with their line number.
    """
    rows = []
    labels = []
    mapping = dict(label_map) if label_map else {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 5:
                if lineno == 1:
                    continue  # tolerate count-style headers
                raise DataFormatError(f"{path}:{lineno}: expected 5 columns, got {len(parts)}")
            try:
                feats = [float(p) for p in parts[:4]]
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise DataFormatError(f"{path}:{lineno}: non-numeric feature") from None
            tok = parts[4]
            try:
                lab = int(float(tok))
            except ValueError:
                if tok not in mapping:
                    if label_map is not None:
                        raise DataFormatError(f"{path}:{lineno}: unknown label {tok!r}")
                    mapping[tok] = len(mapping)
                lab = mapping[tok]
            rows.append(feats)
            labels.append(lab)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=float)
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span, np.asarray(labels, dtype=int)


def encode(
    features: np.ndarray,
    labels: np.ndarray,
    scheme: str = "image",
    tau_in: float = 1.0,
    split: str = "train",
) -> EncodedDataset:
    """Convert [0, 1] features into spike times.

    ``image``: t = tau_in * (1 - x), bright-first.  ``iris``: t = tau_in * x
    plus an appended bias spike fixed at t = 0.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.min() < -1e-12 or x.max() > 1.0 + 1e-12:
        raise ValueError("features must be normalized to [0, 1] before encoding")
    x = np.clip(x, 0.0, 1.0)
    if scheme == "image":
        times = tau_in * (1.0 - x)
    elif scheme == "iris":
        times = tau_in * x
        times = np.concatenate([times, np.zeros((x.shape[0], 1))], axis=1)
    else:
        raise ValueError(f"unknown encoding scheme {scheme!r}")
    return EncodedDataset(times=times, labels=np.asarray(labels, dtype=int), split=split, tau_in=tau_in)


def synth_spikes(n_samples: int, n_spikes: int, rng: np.random.Generator) -> np.ndarray:
    """(n_samples, n_spikes) i.i.d. uniform spike times on [0, 1]."""
    if n_samples <= 0 or n_spikes <= 0:
        raise ValueError("counts must be positive")
    return rng.uniform(0.0, 1.0, size=(n_samples, n_spikes))
