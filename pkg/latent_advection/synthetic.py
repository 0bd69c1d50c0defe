"""Synthetic ground-truth scenes: a random texture advected by a known field."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .advection import FieldSequence, LatentState, advect_rollout
from .data import ImagePair
from .models import SynthRequest
from .tensor import Tensor, domain_grid

N_BUMPS = 20
N_POTENTIAL_BUMPS = 4


@dataclass
class SyntheticScene:
    """Texture ``x0``, terminal image ``x1 = rollout(x0, true_fields)`` and the fields."""

    kind: str
    texture: np.ndarray
    x1: np.ndarray
    true_fields: FieldSequence
    parameters: dict = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return self.texture

    def pair(self) -> ImagePair:
        return ImagePair(self.texture, self.x1)

    def field_array(self) -> np.ndarray:
        """True fields as ``(N, H, W, 2)``."""
        return self.true_fields.as_array()[:, 0]


def _gaussian_sum(grid: np.ndarray, centers: np.ndarray, sigmas: np.ndarray, amps: np.ndarray) -> np.ndarray:
    d2 = ((grid[None] - centers[:, None, None, :]) ** 2).sum(axis=-1)
    return np.einsum("k,khw->hw", amps, np.exp(-d2 / (2.0 * sigmas[:, None, None] ** 2)))


def random_texture(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited texture: a sum of random Gaussians rescaled to ``[0, 1]``."""
    grid = domain_grid(height, width, dtype=np.float64)
    centers = rng.uniform(0.0, 1.0, size=(N_BUMPS, 2))
    sigmas = rng.uniform(0.04, 0.12, size=N_BUMPS)
    amps = rng.uniform(-1.0, 1.0, size=N_BUMPS)
    tex = _gaussian_sum(grid, centers, sigmas, amps)
    lo, hi = tex.min(), tex.max()
    if hi > lo:
        tex = (tex - lo) / (hi - lo)
    else:
        tex = np.zeros_like(tex)
    return tex[..., None]


def _translation(grid: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    w = np.empty_like(grid)
    w[..., 0] = np.cos(angle)
    w[..., 1] = np.sin(angle)
    return w, {"angle": float(angle)}


def _rotation(grid: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    center = rng.uniform(0.35, 0.65, size=2)
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    rel = grid - center
    w = np.stack([-rel[..., 1], rel[..., 0]], axis=-1) * sign
    # curl of w is 2 * sign
    return w, {"center": center.tolist(), "sign": sign}


def _source_sink(grid: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    centers = rng.uniform(0.2, 0.8, size=(N_POTENTIAL_BUMPS, 2))
    sigmas = rng.uniform(0.1, 0.25, size=N_POTENTIAL_BUMPS)
    amps = rng.choice([-1.0, 1.0], size=N_POTENTIAL_BUMPS)
    rel = grid[None] - centers[:, None, None, :]
    g = np.exp(-(rel**2).sum(axis=-1) / (2.0 * sigmas[:, None, None] ** 2))
    # Gradient of the Gaussian-bump potential.
    w = -np.einsum("k,khw,khwc->hwc", amps / sigmas**2, g, rel)
    return w, {"centers": centers.tolist(), "amplitudes": amps.tolist()}


_FIELD_BUILDERS = {
    "translation": _translation,
    "rotation": _rotation,
    "source-sink": _source_sink,
}


def _scale_to_shift(w: np.ndarray, height: int, width: int, dt: float, max_shift: float) -> np.ndarray:
    """Rescale so the largest per-step displacement is ``max_shift`` grid cells."""
    cells = np.hypot(w[..., 0] * dt * (width - 1), w[..., 1] * dt * (height - 1))
    peak = float(cells.max())
    if peak == 0.0 or max_shift == 0.0:
        return np.zeros_like(w)
    return w * (max_shift / peak)


def make_synthetic(
    kind: str,
    height: int,
    width: int,
    n_steps: int,
    dt: float = 0.1,
    seed: int = 0,
    max_shift: float = 2.0,
) -> SyntheticScene:
    """Build a reproducible scene whose terminal image comes from the advection operator.

    Args:
        kind: ``translation``, ``rotation`` or ``source-sink``.
        height: Image rows.
        width: Image columns.
        n_steps: Number of advection steps N (>= 1).
        dt: Step length.
        seed: Seed of the single generator used for texture and field.
        max_shift: Largest per-step displacement in grid cells (at most 2).

    Returns:
        The scene; fields are constant in time.
    """
    request = SynthRequest(
        kind=kind, height=height, width=width, n_steps=n_steps, dt=dt, seed=seed, max_shift=max_shift
    )
    rng = np.random.default_rng(request.seed)
    texture = random_texture(request.height, request.width, rng)
    grid = domain_grid(request.height, request.width, dtype=np.float64)
    w, params = _FIELD_BUILDERS[request.kind](grid, rng)
    w = _scale_to_shift(w, request.height, request.width, request.dt, request.max_shift)

    stacked = np.broadcast_to(w[None, None], (request.n_steps, 1, request.height, request.width, 2)).copy()
    fields = FieldSequence.from_array(stacked, request.dt)
    states = advect_rollout(LatentState(Tensor(texture[None])), fields)
    x1 = states[-1].numpy()[0].copy()

    params.update({"max_shift": request.max_shift, "seed": request.seed})
    logging.debug("Synthesised %s scene %dx%d, N=%d", request.kind, request.height, request.width, request.n_steps)
    return SyntheticScene(request.kind, texture, x1, fields, params)


def from_request(request: SynthRequest) -> SyntheticScene:
    return make_synthetic(**request.model_dump())
