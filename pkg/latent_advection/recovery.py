"""Score recovered advection fields and loss plateaus against a synthetic scene's ground truth.

``synth`` writes the true fields next to a ``scene.yaml`` record; ``infer
--truth`` and ``compare`` read them back through this module.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Dict, Sequence, Union

import numpy as np
import yaml

from .config_loader import ConfigError
from .export import read_field_file
from .inference import ImageInference
from .models import MetricsRow
from .synthetic import SyntheticScene
from .tensor import ShapeError, domain_grid

SCENE_FILE = "scene.yaml"
# Disk of the rotation used for the curl average, in domain units.
DEFAULT_DISK_RADIUS = 0.3


# =================================================================================================
# SCENE TRUTH ON DISK
# =================================================================================================


def scene_record(scene: SyntheticScene) -> Dict[str, object]:
    """Plain-data description of a scene for ``scene.yaml``."""
    return {
        "kind": scene.kind,
        "n_steps": len(scene.true_fields),
        "dt": float(scene.true_fields.dt),
        "parameters": scene.parameters,
    }


def encode_scene_record(scene: SyntheticScene) -> bytes:
    return yaml.safe_dump(scene_record(scene), sort_keys=True).encode("utf-8")


def load_scene_truth(folder: Union[str, Path]) -> tuple[Dict[str, object], np.ndarray]:
    """Read ``scene.yaml`` and the ``field_###.bin`` files written by ``synth``.

    Args:
        folder: Directory produced by ``latent_advection synth``.

    Returns:
        The scene record and the true fields stacked as ``(N, H, W, 2)``.
    """
    folder = Path(folder)
    try:
        record = yaml.safe_load((folder / SCENE_FILE).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{folder / SCENE_FILE}: {exc}") from exc
    if not isinstance(record, dict) or "kind" not in record:
        raise ConfigError(f"{folder / SCENE_FILE}: expected a mapping with a 'kind' key")
    paths = sorted(folder.glob("field_*.bin"))
    if not paths:
        raise ConfigError(f"{folder}: no field_###.bin files next to {SCENE_FILE}")
    fields = np.concatenate([read_field_file(p) for p in paths]).astype(np.float64)
    return record, fields


# =================================================================================================
# FIELD METRICS
# =================================================================================================


def _time_mean(fields: np.ndarray) -> np.ndarray:
    arr = np.asarray(fields, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 2:
        raise ShapeError(f"fields must be (N, H, W, 2) or (H, W, 2), got {arr.shape}")
    return arr.mean(axis=0)


def direction_error_deg(recovered: np.ndarray, true: np.ndarray, strength: float = 0.5) -> float:
    """Angle between the mean recovered and mean true vectors where the true field is strong.

    Both sequences are averaged over time first, so their step counts may
    differ. Pixels count as strong when the true speed exceeds ``strength``
    times its maximum. A vanishing mean recovered vector scores 180 degrees
    and a zero true field gives NaN. The score is meant for translations; a
    rotation averages to nearly zero and is judged by its curl instead.
    """
    rec = _time_mean(recovered)
    ref = _time_mean(true)
    if rec.shape != ref.shape:
        raise ShapeError(f"recovered fields {rec.shape[:2]} and true fields {ref.shape[:2]} differ in extent")
    speed = np.hypot(ref[..., 0], ref[..., 1])
    peak = float(speed.max())
    if peak == 0.0:
        logging.warning("True field is zero everywhere; direction error is undefined")
        return math.nan
    mask = speed > strength * peak
    mean_rec = rec[mask].mean(axis=0)
    mean_ref = ref[mask].mean(axis=0)
    norm = float(np.linalg.norm(mean_rec) * np.linalg.norm(mean_ref))
    if norm == 0.0:
        return 180.0
    cosine = float(np.clip(mean_rec @ mean_ref / norm, -1.0, 1.0))
    return math.degrees(math.acos(cosine))


def curl(field: np.ndarray) -> np.ndarray:
    """``d(wy)/dx - d(wx)/dy`` of an ``(H, W, 2)`` field in domain units."""
    h, w, _ = field.shape
    if h < 2 or w < 2:
        raise ShapeError(f"curl needs at least 2x2 samples, got {h}x{w}")
    dwy_dx = np.gradient(field[..., 1], 1.0 / (w - 1), axis=1)
    dwx_dy = np.gradient(field[..., 0], 1.0 / (h - 1), axis=0)
    return dwy_dx - dwx_dy


def mean_curl(fields: np.ndarray, center: Sequence[float], radius: float = DEFAULT_DISK_RADIUS) -> float:
    """Time-averaged curl averaged over the disk of ``radius`` around ``center`` (x, y)."""
    avg = _time_mean(fields)
    h, w, _ = avg.shape
    grid = domain_grid(h, w, dtype=np.float64)
    inside = np.hypot(grid[..., 0] - center[0], grid[..., 1] - center[1]) <= radius
    if not inside.any():
        raise ConfigError(f"disk of radius {radius} around {tuple(center)} holds no grid point")
    return float(curl(avg)[inside].mean())


def recovery_metrics(
    result: ImageInference,
    true_fields: np.ndarray,
    record: Dict[str, object],
    disk_radius: float = DEFAULT_DISK_RADIUS,
) -> Dict[str, object]:
    """Field-recovery scores of an inference result against a synthetic scene.

    Recovered fields are rescaled to whole-image units before comparison. The
    curl entries are only present for rotation scenes.
    """
    recovered = result.image_fields()
    metrics: Dict[str, object] = {"field_direction_error_deg": direction_error_deg(recovered, true_fields)}
    if record.get("kind") == "rotation":
        center = record["parameters"]["center"]
        got = mean_curl(recovered, center, disk_radius)
        want = mean_curl(true_fields, center, disk_radius)
        metrics.update(
            {
                "recovered_curl": got,
                "true_curl": want,
                "curl_sign_matches": bool(np.sign(got) == np.sign(want) != 0),
            }
        )
    logging.info("Field direction error %.1f deg", metrics["field_direction_error_deg"])
    return metrics


# =================================================================================================
# LOSS PLATEAUS
# =================================================================================================


def loss_plateau(rows: Sequence[MetricsRow], tail: float = 0.1) -> float:
    """Mean dynamics loss over the last ``tail`` fraction of the logged rows (at least one)."""
    if not rows:
        raise ValueError("metrics log is empty")
    if not 0.0 < tail <= 1.0:
        raise ValueError(f"tail must be in (0, 1], got {tail}")
    count = max(1, math.ceil(tail * len(rows)))
    return float(np.mean([r.loss_dyn for r in rows[-count:]]))


def plateau_ratio(ablated: Sequence[MetricsRow], full: Sequence[MetricsRow], tail: float = 0.1) -> float:
    """Plateau of a zero-field run divided by the plateau of the full model."""
    top = loss_plateau(ablated, tail)
    bottom = loss_plateau(full, tail)
    if bottom == 0.0:
        return math.inf if top > 0.0 else 1.0
    return top / bottom
