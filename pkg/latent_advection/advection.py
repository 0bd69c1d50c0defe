"""Semi-Lagrangian advection of a latent state on the unit square.

One step evaluates the previous state at back-traced positions,
``z(x, t + dt) = z(x - w(x, t) dt, t)``, by bilinear interpolation on the
uniform grid of ``[0, 1]^2``. Back-traced points that leave the domain take
the boundary value, so features near an inflow edge are extended inward.
Fields point in the direction of feature motion and are measured in domain
units per unit time; each field is held constant over its step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, domain_grid, grid_sample

# =================================================================================================
# STATE CONTAINERS
# =================================================================================================


@dataclass(frozen=True)
class LatentState:
    """Latent field ``Z_t`` of shape ``(B, H, W, C)`` (``C = 1`` for learned codecs)."""

    values: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4:
            raise ShapeError(f"latent state must be (B, H, W, C), got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data


@dataclass(frozen=True)
class FieldSequence:
    """Per-step advection fields ``W_s``, each of shape ``(B, H, W, 2)``."""

    fields: tuple[Tensor, ...]
    dt: float

    def __post_init__(self) -> None:
        if not self.fields:
            raise ShapeError("a field sequence needs at least one field")
        first = self.fields[0].shape
        for f in self.fields:
            if f.ndim != 4 or f.shape[-1] != 2 or f.shape != first:
                raise ShapeError(f"fields must share one (B, H, W, 2) shape, got {f.shape} and {first}")

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __getitem__(self, step: int) -> Tensor:
        return self.fields[step]

    @property
    def total_time(self) -> float:
        return len(self.fields) * self.dt

    def as_array(self) -> np.ndarray:
        """Stacked values of shape ``(N, B, H, W, 2)``."""
        return np.stack([f.data for f in self.fields])

    @classmethod
    def from_array(cls, array: np.ndarray, dt: float) -> FieldSequence:
        array = np.asarray(array)
        if array.ndim == 4:
            array = array[:, None]
        return cls(tuple(Tensor(a) for a in array), dt)

    @classmethod
    def zeros(cls, n_steps: int, batch: int, height: int, width: int, dt: float, dtype=None) -> FieldSequence:
        return cls.from_array(np.zeros((n_steps, batch, height, width, 2), dtype=dtype or np.float64), dt)


# =================================================================================================
# ADVECTION OPERATOR
# =================================================================================================


def advect_step(z: LatentState, w: Tensor, dt: float) -> LatentState:
    """Advance ``z`` by one semi-Lagrangian step of length ``dt`` under field ``w``."""
    b, h, wd, _ = z.shape
    if w.shape != (b, h, wd, 2):
        raise ShapeError(f"field shape {w.shape} does not match latent state {z.shape}")
    grid = Tensor(np.broadcast_to(domain_grid(h, wd, dtype=w.dtype), (b, h, wd, 2)))
    departure = grid - w * dt
    return LatentState(grid_sample(z.values, departure))


def advect_rollout(z0: LatentState, ws: FieldSequence) -> list[LatentState]:
    """Compose one step per field in ascending order; returns ``[Z_0, ..., Z_N]``."""
    states = [z0]
    for w in ws:
        states.append(advect_step(states[-1], w, ws.dt))
    return states


# =================================================================================================
# STREAMLINES
# =================================================================================================


def sample_field(field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an ``(H, W, 2)`` field at ``(K, 2)`` domain points, clamped."""
    h, w, _ = field.shape
    fx = np.clip(points[:, 0], 0.0, 1.0) * (w - 1)
    fy = np.clip(points[:, 1], 0.0, 1.0) * (h - 1)
    x0 = np.floor(fx).astype(np.intp)
    y0 = np.floor(fy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (fx - x0)[:, None]
    ty = (fy - y0)[:, None]
    top = field[y0, x0] + tx * (field[y0, x1] - field[y0, x0])
    bot = field[y1, x0] + tx * (field[y1, x1] - field[y1, x0])
    return top + ty * (bot - top)


def _velocity(fields: np.ndarray, dt: float, point: np.ndarray, t: float) -> np.ndarray:
    s = t / dt
    lo = min(int(np.floor(s)), len(fields) - 1)
    hi = min(lo + 1, len(fields) - 1)
    frac = min(max(s - lo, 0.0), 1.0)
    v_lo = sample_field(fields[lo], point[None])[0]
    if hi == lo:
        return v_lo
    return v_lo + frac * (sample_field(fields[hi], point[None])[0] - v_lo)


def _inside(p: np.ndarray) -> bool:
    return bool(np.all(p >= 0.0) and np.all(p <= 1.0))


def _exit_point(start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Point where the segment start->end crosses the boundary of the unit square."""
    delta = end - start
    frac = 1.0
    for axis in range(2):
        if end[axis] > 1.0 and delta[axis] > 0:
            frac = min(frac, (1.0 - start[axis]) / delta[axis])
        elif end[axis] < 0.0 and delta[axis] < 0:
            frac = min(frac, (0.0 - start[axis]) / delta[axis])
    return np.clip(start + frac * delta, 0.0, 1.0)


def streamlines(ws: FieldSequence, seeds: Sequence[Sequence[float]], batch_index: int = 0) -> list[np.ndarray]:
    """Integrate ``dx/dt = w(x, t)`` from each seed over the sequence's time span.

    Explicit midpoint steps of ``dt / 4`` with bilinear field lookup; the field
    is interpolated linearly in time between successive steps. A trajectory
    stops where it leaves the unit square (the crossing point is kept) or
    where the velocity vanishes.

    Returns:
        One ``(K, 2)`` polyline per seed; seeds outside the domain yield an
        empty ``(0, 2)`` array.
    """
    fields = ws.as_array()[:, batch_index].astype(np.float64)
    h = ws.dt / 4.0
    n_sub = 4 * len(ws)
    lines: list[np.ndarray] = []
    for seed in seeds:
        p = np.asarray(seed, dtype=np.float64)
        if not _inside(p):
            lines.append(np.zeros((0, 2)))
            continue
        path = [p.copy()]
        t = 0.0
        for _ in range(n_sub):
            k1 = _velocity(fields, ws.dt, p, t)
            mid = np.clip(p + 0.5 * h * k1, 0.0, 1.0)
            k2 = _velocity(fields, ws.dt, mid, t + 0.5 * h)
            if not np.any(k2):
                break
            nxt = p + h * k2
            t += h
            if not _inside(nxt):
                path.append(_exit_point(p, nxt))
                break
            p = nxt
            path.append(p.copy())
        lines.append(np.asarray(path))
    return lines
