"""Apply a trained bundle to single patches and to whole images by tiling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .advection import FieldSequence, LatentState, advect_rollout
from .data import ImagePair, NormalizationRecord, denormalize, normalize_pair
from .networks import ModelBundle
from .tensor import ShapeError, Tensor, no_tape


@dataclass
class PatchInference:
    """Frames ``psi(Z_t)`` for t = t0, t0 + dt, ..., t1 with the fields and latents behind them."""

    frames: np.ndarray
    fields: FieldSequence
    latents: list[LatentState]

    @property
    def n_steps(self) -> int:
        return len(self.fields)


def infer_patch(x0: np.ndarray, bundle: ModelBundle) -> PatchInference:
    """Roll a normalised ``(Hp, Wp, C)`` patch forward through the bundle.

    ``frames[0]`` is the reconstruction ``psi(phi(x0))``; ``frames[j]`` decodes
    the latent after ``j`` advection steps. Nothing is recorded on a tape.
    """
    x = np.asarray(x0)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ShapeError(f"infer_patch expects an (H, W, C) patch, got {x.shape}")
    if x.shape[-1] != bundle.spec.in_channels:
        raise ShapeError(f"bundle expects {bundle.spec.in_channels} channels, got {x.shape[-1]}")
    bundle.check_shapes(x.shape[0], x.shape[1])

    with no_tape():
        xt = Tensor(x[None].astype(bundle.dtype))
        fields = bundle.extract_fields(xt)
        latents = advect_rollout(bundle.encode(xt), fields)
        frames = np.stack([bundle.decode(z).numpy()[0] for z in latents])
    return PatchInference(frames, fields, latents)


# =================================================================================================
# WHOLE IMAGES
# =================================================================================================


@dataclass
class ImageInference:
    """Stitched frame sequence over an image, with fields and latents when the method has them.

    Fields are in the domain units of the tile they were extracted on;
    :meth:`image_fields` rescales them to the domain of the whole image.
    """

    frames: np.ndarray  # (N+1, H, W, C), de-normalised
    dt: float
    fields: np.ndarray | None = None  # (N, H, W, 2)
    latents: np.ndarray | None = None  # (N+1, H, W, Cz)
    patch_shape: tuple[int, int] | None = None
    tile_origins: list[tuple[int, int]] = field(default_factory=list)
    records: list[NormalizationRecord] = field(default_factory=list)
    method: str = "latent"

    @property
    def n_steps(self) -> int:
        return self.frames.shape[0] - 1

    @property
    def total_time(self) -> float:
        return self.n_steps * self.dt

    def field_sequence(self) -> FieldSequence:
        if self.fields is None:
            raise ValueError(f"method {self.method!r} produced no fields")
        return FieldSequence.from_array(self.fields, self.dt)

    def image_fields(self) -> np.ndarray:
        """Fields in whole-image domain units per unit time."""
        if self.fields is None:
            raise ValueError(f"method {self.method!r} produced no fields")
        h, w = self.frames.shape[1:3]
        hp, wp = self.patch_shape or (h, w)
        scale = np.array([(wp - 1) / max(w - 1, 1), (hp - 1) / max(h - 1, 1)])
        return self.fields * scale


def tile_origins(height: int, width: int, patch_height: int, patch_width: int) -> list[tuple[int, int]]:
    """Row-major origins of non-overlapping tiles covering a padded ``height x width`` image."""
    if height % patch_height or width % patch_width:
        raise ShapeError(f"{height}x{width} is not a multiple of the {patch_height}x{patch_width} tile")
    return [(r, c) for r in range(0, height, patch_height) for c in range(0, width, patch_width)]


def _pad_reflect(image: np.ndarray, patch_height: int, patch_width: int) -> np.ndarray:
    h, w, _ = image.shape
    ph = -h % patch_height
    pw = -w % patch_width
    if not ph and not pw:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")


def infer_image(pair: ImagePair, bundle: ModelBundle) -> ImageInference:
    """Tile ``pair`` with non-overlapping patches, infer each one and stitch without blending.

    Images that are not a multiple of the patch size are reflect-padded and the
    stitched results cropped back. Each tile is normalised with the shared range
    of its two endpoint windows and its frames de-normalised with that range.
    """
    hp, wp = bundle.spec.patch_height, bundle.spec.patch_width
    h, w, c = pair.shape
    x0 = _pad_reflect(pair.x0, hp, wp)
    x1 = _pad_reflect(pair.x1, hp, wp)
    ph, pw = x0.shape[:2]
    origins = tile_origins(ph, pw, hp, wp)
    n = bundle.spec.n_evolution

    frames = np.zeros((n + 1, ph, pw, c))
    fields = np.zeros((n, ph, pw, 2))
    latents: np.ndarray | None = None
    records: list[NormalizationRecord] = []

    logging.info("Inferring %d tile(s) of %dx%d over a %dx%d image", len(origins), hp, wp, h, w)
    for r, col in origins:
        window = (slice(r, r + hp), slice(col, col + wp))
        n0, _, record = normalize_pair(x0[window], x1[window])
        result = infer_patch(n0, bundle)
        if latents is None:
            latents = np.zeros((n + 1, ph, pw, result.latents[0].shape[-1]))
        frames[(slice(None),) + window] = denormalize(result.frames, record)
        fields[(slice(None),) + window] = result.fields.as_array()[:, 0]
        latents[(slice(None),) + window] = np.stack([z.numpy()[0] for z in result.latents])
        records.append(record)

    return ImageInference(
        frames=frames[:, :h, :w],
        dt=bundle.spec.dt,
        fields=fields[:, :h, :w],
        latents=latents[:, :h, :w],
        patch_shape=(hp, wp),
        tile_origins=origins,
        records=records,
    )
