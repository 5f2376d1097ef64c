"""Raster data model, file formats, and validation shared by the whole toolkit.

Two on-disk formats are supported:

* ``BFR1`` rasters: a 16-byte header (magic ``BFR1``, then little-endian
  uint32 width, height, channels) followed by the samples as little-endian
  float32, one channel plane after another, each plane row-major.
* Label maps: 16-bit single-channel grayscale PNG, value 0 = background.

Non-finite samples are invalid everywhere and rejected at the I/O boundary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

RASTER_MAGIC = b"BFR1"
_HEADER = struct.Struct("<4sIII")
MAX_PNG_LABEL = 65535

# PIL modes that decode to a single integer channel per pixel.
_GRAY_MODES = {"I;16", "I;16B", "I;16L", "I", "L"}


class FormatError(ValueError):
    """Malformed raster or label-map file."""


def _first_nonfinite_index(data: np.ndarray) -> int | None:
    bad = ~np.isfinite(data.ravel())
    if bad.any():
        return int(np.flatnonzero(bad)[0])
    return None


@dataclass(frozen=True)
class Raster:
    """2-D float32 image, stored channel-planar with shape (channels, height, width).

    A 2-D array is accepted and promoted to a single channel.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3:
            raise ValueError(f"raster data must be 2-D or 3-D, got {arr.ndim}-D")
        if min(arr.shape) < 1:
            raise ValueError(f"raster dimensions must be positive, got shape {arr.shape}")
        idx = _first_nonfinite_index(arr)
        if idx is not None:
            raise ValueError(f"non-finite sample at index {idx}")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        """One channel as a 2-D float32 array."""
        return self.data[channel]


def validate_probability(data: np.ndarray, softmax: bool = False) -> None:
    """Check probability-map validity: samples in [0, 1], and for softmax
    stacks per-pixel channel sums within 1 +/- 1e-4."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty probability map")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"probability samples outside [0, 1]: range [{lo}, {hi}]")
    if softmax:
        if arr.ndim != 3:
            raise ValueError("softmax validation needs a (channels, height, width) stack")
        sums = arr.sum(axis=0)
        err = float(np.abs(sums - 1.0).max())
        if err > 1e-4:
            raise ValueError(f"per-pixel channel sums deviate from 1 by {err:.2e}")


def read_raster(path: str | Path) -> Raster:
    """Read a BFR1 raster file.

    Raises FileNotFoundError for a missing file and FormatError (with the
    byte offset where the data ran out) for bad magic, bad header fields,
    truncation, or trailing bytes.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such raster file: {path}")
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != RASTER_MAGIC:
        got = blob[:4]
        raise FormatError(f"bad magic {got!r} at offset 0, expected {RASTER_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated at offset {len(blob)}: header needs {_HEADER.size} bytes")
    _, width, height, channels = _HEADER.unpack_from(blob)
    if min(width, height, channels) < 1:
        raise FormatError(f"header dimensions must be positive, got {width}x{height}x{channels}")
    expected = _HEADER.size + 4 * width * height * channels
    if len(blob) < expected:
        raise FormatError(f"truncated at offset {len(blob)}: expected {expected} bytes")
    if len(blob) > expected:
        raise FormatError(f"trailing data at offset {expected}: file holds {len(blob)} bytes")
    samples = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    idx = _first_nonfinite_index(samples)
    if idx is not None:
        raise FormatError(f"non-finite sample at index {idx}")
    return Raster(samples.reshape(channels, height, width).copy())


def write_raster(raster: Raster, path: str | Path) -> None:
    """Write a BFR1 raster; read_raster reproduces it bit-exactly."""
    data = np.ascontiguousarray(raster.data, dtype="<f4")
    idx = _first_nonfinite_index(data)
    if idx is not None:
        raise ValueError(f"non-finite sample at index {idx}")
    header = _HEADER.pack(RASTER_MAGIC, raster.width, raster.height, raster.channels)
    Path(path).write_bytes(header + data.tobytes())


def canonicalize_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel positive labels to a gap-free 1..K, ordered by the raster-scan
    position of each label's first pixel. Idempotent; the pixel partition is
    unchanged."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    flat = labels.ravel()
    values, first = np.unique(flat, return_index=True)
    positive = values > 0
    values, first = values[positive], first[positive]
    order = np.argsort(first, kind="stable")
    out = np.zeros(labels.shape, dtype=np.uint32)
    lut = np.zeros(int(values.max()) + 1 if values.size else 1, dtype=np.uint32)
    lut[values[order]] = np.arange(1, values.size + 1, dtype=np.uint32)
    np.take(lut, flat.astype(np.int64), out=out.ravel())
    return out


def read_labelmap(path: str | Path) -> np.ndarray:
    """Read a label map from 16-bit grayscale PNG and canonicalize it."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such label map: {path}")
    with Image.open(path) as img:
        if img.format != "PNG":
            raise FormatError(f"label map must be PNG, got {img.format}: {path}")
        if img.mode not in _GRAY_MODES:
            raise FormatError(f"non-grayscale PNG (mode {img.mode}): {path}")
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise FormatError(f"label map PNG must be single-channel: {path}")
    return canonicalize_labels(arr.astype(np.uint32))


def write_labelmap(labels: np.ndarray, path: str | Path) -> None:
    """Write a canonical label map as 16-bit grayscale PNG (labels <= 65535)."""
    canon = canonicalize_labels(labels)
    top = int(canon.max()) if canon.size else 0
    if top > MAX_PNG_LABEL:
        raise ValueError(f"{top} labels exceed the 16-bit PNG limit of {MAX_PNG_LABEL}")
    Image.fromarray(canon.astype(np.uint16)).save(Path(path), format="PNG")


_CONFIG_RANGES = {
    "threshold": "probability in (0, 1)",
    "coverage_fraction": "fraction in (0, 1)",
    "match_iou": "fraction in (0, 1)",
}


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the segmentation and evaluation pipelines.

    Defaults are exposed choices, not measured values; override per run.
    """

    threshold: float = 0.5
    erosion_radius: float = 3.0
    min_instance_area: int = 20
    connectivity: int = 8
    coverage_fraction: float = 0.2
    match_iou: float = 0.5

    def __post_init__(self) -> None:
        for name in ("threshold", "coverage_fraction", "match_iou"):
            value = getattr(self, name)
            if not (0.0 < float(value) < 1.0):
                raise ValueError(f"{name} must be a {_CONFIG_RANGES[name]}, got {value}")
        if self.erosion_radius < 0:
            raise ValueError(f"erosion_radius must be >= 0, got {self.erosion_radius}")
        if self.min_instance_area < 0:
            raise ValueError(f"min_instance_area must be >= 0, got {self.min_instance_area}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
