"""Write inference and baseline results to disk.

Layout of an artifact directory:

* ``frame_###.png``: de-normalised frames clipped to ``[0, 1]`` as 16-bit
  grayscale (``frame_###_c#.png`` per channel for multi-channel images).
  Reloading one is exact to half a quantisation step, ``0.5 / 65535``.
* ``frame_###.tif``: the same frames unclipped as float32 TIFF; reloading one
  is exact to float32 rounding.
* ``latent_###.png``: latent states, min-max scaled over the whole sequence.
* ``field_###.bin``: one advection field per step. Header ``<4sIIII``
  (magic ``LADV``, version, N, H, W) followed by little-endian float32 values,
  step-major, row-major, with the two components interleaved.
* ``field_###.csv``: quiver subsample with rows ``row,col,wx,wy``.
* ``streamlines.csv``: polylines with rows ``id,step,x,y`` in image domain units.
* ``metrics.json``: endpoint errors and run metadata.

All files are written concurrently; a failing write raises :class:`ExportError`
naming the path.
"""

from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Sequence

import aiofiles
import numpy as np
from PIL import Image

from .advection import FieldSequence, streamlines
from .data import ImagePair
from .inference import ImageInference

FIELD_MAGIC = b"LADV"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sIIII")


class ExportError(OSError):
    """Raised when an artifact cannot be written or read back."""


# =================================================================================================
# ENCODERS
# =================================================================================================


def encode_png(values: np.ndarray, bit_depth: int = 16) -> bytes:
    """Grayscale PNG of an ``(H, W)`` array, clipped to ``[0, 1]``, at 8 or 16 bits."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 8:
        img = Image.fromarray(np.rint(arr * 255.0).astype(np.uint8))
    elif bit_depth == 16:
        img = Image.fromarray(np.rint(arr * 65535.0).astype(np.uint16))
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def encode_tiff(values: np.ndarray) -> bytes:
    """Single-precision TIFF of an ``(H, W)`` array, values kept as they are."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(values, dtype=np.float32)).save(buf, format="TIFF")
    return buf.getvalue()


def encode_field(field: np.ndarray) -> bytes:
    """Binary field file for ``(H, W, 2)`` or ``(N, H, W, 2)`` values."""
    arr = np.asarray(field)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 2:
        raise ValueError(f"fields must be (N, H, W, 2), got {arr.shape}")
    n, h, w, _ = arr.shape
    return _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, n, h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_field(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Inverse of :func:`encode_field`; returns float32 values of shape ``(N, H, W, 2)``."""
    if len(raw) < _FIELD_HEADER.size:
        raise ExportError(f"{source}: truncated field header")
    magic, version, n, h, w = _FIELD_HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise ExportError(f"{source}: bad field magic {magic!r}")
    if version != FIELD_VERSION:
        raise ExportError(f"{source}: field version {version}, this build reads {FIELD_VERSION}")
    payload = np.frombuffer(raw, dtype="<f4", offset=_FIELD_HEADER.size)
    if payload.size != n * h * w * 2:
        raise ExportError(f"{source}: payload holds {payload.size} values, header says {n * h * w * 2}")
    return payload.reshape(n, h, w, 2).astype(np.float32)


def read_field_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    return decode_field(raw, str(path))


def quiver_rows(field: np.ndarray, every: int = 4) -> list[tuple[int, int, float, float]]:
    """Subsample an ``(H, W, 2)`` field at every ``every``-th grid point."""
    h, w, _ = field.shape
    return [
        (r, c, float(field[r, c, 0]), float(field[r, c, 1]))
        for r in range(0, h, every)
        for c in range(0, w, every)
    ]


def encode_csv(header: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode("utf-8")


def default_seeds(per_axis: int = 8) -> np.ndarray:
    """Evenly spaced interior seed points in ``[0, 1]^2``."""
    ticks = (np.arange(per_axis) + 0.5) / per_axis
    gx, gy = np.meshgrid(ticks, ticks)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def endpoint_metrics(result: ImageInference, reference: ImagePair) -> Dict[str, float]:
    """RMSE of frame 0 against x0, and RMSE, relative L2 and PSNR of the last frame against x1."""
    first, last = result.frames[0], result.frames[-1]
    mse_last = float(np.mean((last - reference.x1) ** 2))
    norm = float(np.linalg.norm(reference.x1))
    return {
        "frame0_rmse": float(np.sqrt(np.mean((first - reference.x0) ** 2))),
        "terminal_rmse": float(np.sqrt(mse_last)),
        "terminal_relative_l2": float(np.linalg.norm(last - reference.x1) / norm) if norm else float("nan"),
        "terminal_psnr_db": float(10.0 * np.log10(1.0 / mse_last)) if mse_last else float("inf"),
    }


# =================================================================================================
# EXPORT
# =================================================================================================


async def _write(path: Path, data: bytes) -> Path:
    try:
        async with aiofiles.open(path, "wb") as fh:
            await fh.write(data)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def _image_files(prefix: str, sequence: np.ndarray, out: Path, exact: bool = False) -> Dict[Path, bytes]:
    files: Dict[Path, bytes] = {}
    channels = sequence.shape[-1]
    for j, frame in enumerate(sequence):
        for ch in range(channels):
            stem = f"{prefix}_{j:03d}" if channels == 1 else f"{prefix}_{j:03d}_c{ch}"
            files[out / f"{stem}.png"] = encode_png(frame[..., ch])
            if exact:
                files[out / f"{stem}.tif"] = encode_tiff(frame[..., ch])
    return files


def build_artifacts(
    result: ImageInference,
    out_dir: Path,
    reference: Optional[ImagePair] = None,
    seeds: Optional[np.ndarray] = None,
    quiver_every: int = 4,
    extra_metrics: Optional[Dict[str, object]] = None,
) -> Dict[Path, bytes]:
    """Encode every artifact of ``result`` in memory, keyed by destination path."""
    files = _image_files("frame", result.frames, out_dir, exact=True)

    if result.latents is not None:
        lo, hi = float(result.latents.min()), float(result.latents.max())
        scaled = (result.latents - lo) / (hi - lo) if hi > lo else np.zeros_like(result.latents)
        files.update(_image_files("latent", scaled, out_dir))

    if result.fields is not None:
        for s, field in enumerate(result.fields):
            files[out_dir / f"field_{s:03d}.bin"] = encode_field(field)
            files[out_dir / f"field_{s:03d}.csv"] = encode_csv(["row", "col", "wx", "wy"], quiver_rows(field, quiver_every))
        image_fields = FieldSequence.from_array(result.image_fields(), result.dt)
        lines = streamlines(image_fields, default_seeds() if seeds is None else seeds)
        rows = [(i, k, float(p[0]), float(p[1])) for i, line in enumerate(lines) for k, p in enumerate(line)]
        files[out_dir / "streamlines.csv"] = encode_csv(["id", "step", "x", "y"], rows)

    metrics: Dict[str, object] = {
        "method": result.method,
        "n_steps": result.n_steps,
        "dt": result.dt,
        "total_time": result.total_time,
        "tiles": len(result.tile_origins),
    }
    if result.method == "ot":
        metrics["interpolation"] = "barycentric"
    if reference is not None:
        metrics.update(endpoint_metrics(result, reference))
    if extra_metrics:
        metrics.update(extra_metrics)
    files[out_dir / "metrics.json"] = (json.dumps(metrics, indent=2, sort_keys=True) + "\n").encode("utf-8")
    return files


async def export_artifacts_async(
    result: ImageInference,
    out_dir: str | Path,
    reference: Optional[ImagePair] = None,
    seeds: Optional[np.ndarray] = None,
    quiver_every: int = 4,
    extra_metrics: Optional[Dict[str, object]] = None,
) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create {out}: {exc}") from exc
    files = build_artifacts(result, out, reference, seeds, quiver_every, extra_metrics)
    written = await asyncio.gather(*(_write(path, data) for path, data in files.items()))
    logging.info("Exported %d artifact(s) to %s", len(written), out)
    return sorted(written)


def export_artifacts(
    result: ImageInference,
    out_dir: str | Path,
    reference: Optional[ImagePair] = None,
    seeds: Optional[np.ndarray] = None,
    quiver_every: int = 4,
    extra_metrics: Optional[Dict[str, object]] = None,
) -> list[Path]:
    """Synchronous entry point for :func:`export_artifacts_async`."""
    return asyncio.run(export_artifacts_async(result, out_dir, reference, seeds, quiver_every, extra_metrics))


async def write_files_async(files: Dict[Path, bytes]) -> list[Path]:
    return list(await asyncio.gather(*(_write(path, data) for path, data in files.items())))
