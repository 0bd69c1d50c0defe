"""Image ingestion, pair normalisation and dense patch scanning."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .models import DatasetManifest
from .tensor import ShapeError

_EIGHT_BIT_MODES = {"L"}
_SIXTEEN_BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}
_FLOAT_MODES = {"F"}


class ImageFormatError(OSError):
    """Raised for unreadable, non-grayscale or inconsistent image files."""


# =================================================================================================
# IMAGE FILES
# =================================================================================================


def _read_channel(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            raw = np.asarray(img)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    if mode in _EIGHT_BIT_MODES:
        return raw.astype(np.float64) / 255.0
    if mode in _SIXTEEN_BIT_MODES:
        return raw.astype(np.float64) / 65535.0
    if mode in _FLOAT_MODES:
        return raw.astype(np.float64)
    raise ImageFormatError(f"{path}: expected an 8- or 16-bit or float32 grayscale image, got mode {mode!r}")


def load_image(paths: str | Path | Sequence[str | Path]) -> np.ndarray:
    """Read one grayscale file per channel into an ``(H, W, C)`` array in ``[0, 1]``.

    Args:
        paths: A single PNG/PGM/TIFF path or a list of them, one per channel.

    Returns:
        float64 intensities, 8-bit files scaled by 1/255 and 16-bit by
        1/65535. Float32 TIFFs are read as they are.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    channels = [_read_channel(Path(p)) for p in paths]
    if not channels:
        raise ImageFormatError("no channel files given")
    first = channels[0].shape
    for p, ch in zip(paths, channels):
        if ch.shape != first:
            raise ImageFormatError(f"{p}: extents {ch.shape} differ from {first} of the first channel")
    return np.stack(channels, axis=-1)


def save_image(path: str | Path, values: np.ndarray, bit_depth: int = 8) -> Path:
    """Write an ``(H, W)`` or ``(H, W, 1)`` array in ``[0, 1]`` as grayscale PNG/PGM (clipped)."""
    path = Path(path)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[-1] != 1:
            raise ShapeError(f"save_image writes one channel per file, got {arr.shape[-1]}")
        arr = arr[..., 0]
    arr = np.clip(arr, 0.0, 1.0)
    if bit_depth == 8:
        img = Image.fromarray(np.rint(arr * 255.0).astype(np.uint8))
    elif bit_depth == 16:
        img = Image.fromarray(np.rint(arr * 65535.0).astype(np.uint16))
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    try:
        img.save(path)
    except OSError as exc:
        raise ImageFormatError(f"cannot write image {path}: {exc}") from exc
    return path


# =================================================================================================
# IMAGE PAIRS AND NORMALISATION
# =================================================================================================


@dataclass
class ImagePair:
    """Raw endpoint images ``X_t0`` and ``X_t1`` of shape ``(H, W, C)``."""

    x0: np.ndarray
    x1: np.ndarray
    pixel_scale: float | None = None

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim == 2:
            self.x0 = self.x0[..., None]
        if self.x1.ndim == 2:
            self.x1 = self.x1[..., None]
        if self.x0.shape != self.x1.shape or self.x0.ndim != 3:
            raise ShapeError(f"image pair needs equal (H, W, C) shapes, got {self.x0.shape} and {self.x1.shape}")
        if not (np.all(np.isfinite(self.x0)) and np.all(np.isfinite(self.x1))):
            raise ValueError("image pair contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.x0.shape

    @property
    def channels(self) -> int:
        return self.x0.shape[-1]


def load_pair(manifest: DatasetManifest) -> ImagePair:
    """Assemble both endpoints from a manifest whose paths are already resolved."""
    pair = ImagePair(load_image(manifest.x0), load_image(manifest.x1), manifest.pixel_scale)
    logging.info("Loaded image pair %r: %dx%d, %d channel(s)", manifest.name, *pair.shape)
    return pair


@dataclass(frozen=True)
class NormalizationRecord:
    """Range mapped to ``[-1, 1]``; a degenerate (constant) range maps to zeros."""

    lo: float
    hi: float

    @property
    def degenerate(self) -> bool:
        return not self.hi > self.lo


def _record_for(*arrays: np.ndarray) -> NormalizationRecord:
    lo = min(float(np.min(a)) for a in arrays)
    hi = max(float(np.max(a)) for a in arrays)
    return NormalizationRecord(lo, hi)


def apply_normalization(values: np.ndarray, record: NormalizationRecord) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if record.degenerate:
        return np.zeros_like(values)
    return 2.0 * (values - record.lo) / (record.hi - record.lo) - 1.0


def normalize(patch: np.ndarray) -> tuple[np.ndarray, NormalizationRecord]:
    """Affine min-max map of a single patch to ``[-1, 1]``."""
    record = _record_for(patch)
    return apply_normalization(patch, record), record


def normalize_pair(x0: np.ndarray, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray, NormalizationRecord]:
    """Normalise both patches of a pair with their shared min and max."""
    record = _record_for(x0, x1)
    return apply_normalization(x0, record), apply_normalization(x1, record), record


def denormalize(values: np.ndarray, record: NormalizationRecord) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if record.degenerate:
        return np.full_like(values, record.lo)
    return (values + 1.0) * 0.5 * (record.hi - record.lo) + record.lo


# =================================================================================================
# PATCH SCANNING
# =================================================================================================


@dataclass(frozen=True)
class PatchPair:
    """Normalised windows of both endpoints cut at the same ``origin`` (row, col)."""

    x0: np.ndarray
    x1: np.ndarray
    origin: tuple[int, int]
    record: NormalizationRecord


def window_count(length: int, patch: int, stride: int) -> int:
    """Windows per axis: ``max(1, (length - patch) // stride)``."""
    if patch > length:
        raise ShapeError(f"patch extent {patch} exceeds image extent {length}")
    if stride < 1 or patch < 1:
        raise ValueError(f"patch and stride must be >= 1, got {patch} and {stride}")
    return max(1, (length - patch) // stride)


class PatchDataset(Sequence):
    """Lazily cut, normalised patch pairs over a dense scan of an image pair.

    Windows start at row offsets ``0, S_H, 2 S_H, ...`` and column offsets
    ``0, S_W, ...``; pairs are ordered row-major by origin.
    """

    def __init__(self, pair: ImagePair, patch_height: int, patch_width: int, stride_h: int, stride_w: int) -> None:
        h, w, _ = pair.shape
        self.pair = pair
        self.patch_height = patch_height
        self.patch_width = patch_width
        self.stride_h = stride_h
        self.stride_w = stride_w
        self.n_rows = window_count(h, patch_height, stride_h)
        self.n_cols = window_count(w, patch_width, stride_w)

    def __len__(self) -> int:
        return self.n_rows * self.n_cols

    def origin(self, index: int) -> tuple[int, int]:
        return (index // self.n_cols) * self.stride_h, (index % self.n_cols) * self.stride_w

    def __getitem__(self, index: int) -> PatchPair:
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(f"patch index {index} out of range for {len(self)} pairs")
        r, c = self.origin(index)
        window = (slice(r, r + self.patch_height), slice(c, c + self.patch_width))
        x0, x1, record = normalize_pair(self.pair.x0[window], self.pair.x1[window])
        return PatchPair(x0, x1, (r, c), record)


def scan_patches(pair: ImagePair, patch_height: int, patch_width: int, stride_h: int, stride_w: int) -> PatchDataset:
    dataset = PatchDataset(pair, patch_height, patch_width, stride_h, stride_w)
    logging.info(
        "Scanned %d patch pairs (%d x %d windows of %dx%d, stride %dx%d)",
        len(dataset),
        dataset.n_rows,
        dataset.n_cols,
        patch_height,
        patch_width,
        stride_h,
        stride_w,
    )
    return dataset
