"""Comparison methods: direct image-space advection and entropic optimal transport.

The direct baseline is the main trainer with identity codecs and no
auto-encoder term. The transport baseline solves entropic OT between the two
images with Sinkhorn iterations and renders intermediate frames by splatting
plan mass at convex combinations of source and target pixel positions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from . import config
from .data import ImagePair
from .inference import ImageInference
from .models import LossWeights, TrainConfig
from .networks import ModelBundle
from .tensor import ShapeError, domain_grid
from .training import OptimizerState, TrainResult, train

# Below this entropic weight the Gibbs kernel underflows; iterate on log-potentials instead.
LOG_DOMAIN_THRESHOLD = 1e-2
DEFAULT_FLOOR = 1e-8
_SPLAT_CUTOFF = 1e-15
# Each cooling level of the warm start stops at this violation or this many sweeps.
ANNEAL_TOL = 1e-3
ANNEAL_MAX_ITER = 200


class TransportError(ValueError):
    """Raised when an input cannot be turned into a probability distribution."""


class OversizedInputError(ValueError):
    """Raised when a dense transport plan would exceed the configured pixel cap."""


# =================================================================================================
# DIRECT IMAGE-SPACE ADVECTION
# =================================================================================================


def direct_bundle(cfg: TrainConfig, in_channels: int) -> ModelBundle:
    """Field extractor only, with identity encoder and decoder (one field shared by all channels)."""
    return ModelBundle.build(cfg.bundle_spec(in_channels, codec="identity"))


def direct_weights(cfg: TrainConfig) -> LossWeights:
    return LossWeights(ae=0.0, magnitude=cfg.lambda_magnitude, smooth=cfg.lambda_smooth)


def direct_pde_fit(dataset: Sequence, cfg: TrainConfig, in_channels: int = 1, dump_dir=None) -> TrainResult:
    """Fit eta so that advecting X_t0 in image space reproduces X_t1.

    Runs :func:`~latent_advection.training.train` unchanged on an identity-codec
    bundle, so the objective is the dynamics loss plus the field regularisers.
    """
    bundle = direct_bundle(cfg, in_channels)
    optimizer = OptimizerState.create(bundle.parameters(), cfg.optimizer_settings())
    return train(
        dataset,
        bundle,
        optimizer,
        direct_weights(cfg),
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        log_every=cfg.log_every,
        dump_dir=dump_dir,
    )


# =================================================================================================
# ENTROPIC OPTIMAL TRANSPORT
# =================================================================================================


@dataclass
class TransportPlan:
    """Coupling between two pixel distributions and the solver's bookkeeping."""

    plan: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    cost: float
    epsilon: float
    converged: bool
    iterations: int
    marginal_error: float
    log_domain: bool
    trace: list[float] = field(default_factory=list)

    def marginal_violation(self) -> float:
        rows = np.abs(self.plan.sum(axis=1) - self.mu1).max()
        cols = np.abs(self.plan.sum(axis=0) - self.mu2).max()
        return float(max(rows, cols))


def prepare_distribution(values: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Flatten, normalise to unit mass, floor at ``floor`` and renormalise."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise TransportError("distribution must be non-empty and finite")
    if np.any(arr < 0):
        raise TransportError("distribution has negative mass")
    total = arr.sum()
    if not total > 0:
        raise TransportError("distribution has zero total mass")
    arr = np.maximum(arr / total, floor)
    return arr / arr.sum()


def grid_points(height: int, width: int) -> np.ndarray:
    """Pixel centres of an ``H x W`` grid in ``[0, 1]^2`` as ``(H*W, 2)`` (x, y) rows."""
    return domain_grid(height, width, dtype=np.float64).reshape(-1, 2)


def squared_distance_cost(points_a: np.ndarray, points_b: np.ndarray) -> np.ndarray:
    diff = points_a[:, None, :] - points_b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def epsilon_schedule(diameter_sq: float, epsilon: float, scaling: float = 0.5) -> list[float]:
    """Geometric cooling from the squared diameter down to ``epsilon``."""
    if diameter_sq <= epsilon:
        return [epsilon]
    steps = np.arange(np.log(diameter_sq), np.log(epsilon), np.log(scaling))
    return [float(e) for e in np.exp(steps)] + [epsilon]


def _log_plan(f: np.ndarray, g: np.ndarray, cost: np.ndarray, eps: float) -> np.ndarray:
    return np.exp((f[:, None] + g[None, :] - cost) / eps)


def _log_iterate(log_a, log_b, cost, eps, f, g, max_iter, tol):
    """Alternating log-domain updates from ``(f, g)``; returns the iterate with the smallest column violation."""
    a, b = np.exp(log_a), np.exp(log_b)
    trace: list[float] = []
    best = (np.inf, f, g)
    it = 0
    for it in range(1, max_iter + 1):
        g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
        f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
        plan = _log_plan(f, g, cost, eps)
        trace.append(float(a @ f + b @ g - eps * plan.sum()))
        err = float(np.abs(plan.sum(axis=0) - b).max())
        if err < best[0]:
            best = (err, f.copy(), g.copy())
        if err <= tol:
            break
    return best, it, trace


def _sinkhorn_log(a, b, cost, eps, max_iter, tol, scaling):
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    schedule = epsilon_schedule(float(cost.max()), eps, scaling)
    for e in schedule[:-1]:
        (_, f, g), _, _ = _log_iterate(log_a, log_b, cost, e, f, g, ANNEAL_MAX_ITER, max(tol, ANNEAL_TOL))

    (err, f, g), it, trace = _log_iterate(log_a, log_b, cost, eps, f, g, max_iter, tol)
    if err > tol and len(schedule) > 1:
        logging.debug("warm-started Sinkhorn stalled at violation %.2e; restarting from zero potentials", err)
        (cold_err, cold_f, cold_g), cold_it, cold_trace = _log_iterate(
            log_a, log_b, cost, eps, np.zeros_like(a), np.zeros_like(b), max_iter, tol
        )
        if cold_err < err:
            err, f, g, it, trace = cold_err, cold_f, cold_g, cold_it, cold_trace
    return _log_plan(f, g, cost, eps), err, it, trace


def _sinkhorn_standard(a, b, cost, eps, max_iter, tol):
    kernel = np.exp(-cost / eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    trace: list[float] = []
    best = (np.inf, u, v)
    it = 0
    for it in range(1, max_iter + 1):
        v = b / (kernel.T @ u)
        u = a / (kernel @ v)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            return None
        trace.append(float(eps * (a @ np.log(u) + b @ np.log(v) - u @ kernel @ v)))
        err = float(np.abs(v * (kernel.T @ u) - b).max())
        if err < best[0]:
            best = (err, u.copy(), v.copy())
        if err <= tol:
            break
    err, u, v = best
    return u[:, None] * kernel * v[None, :], err, it, trace


def sinkhorn(
    mu1: np.ndarray,
    mu2: np.ndarray,
    epsilon: float = 1e-3,
    max_iter: int = 10000,
    tol: float = 1e-7,
    cost: np.ndarray | None = None,
    floor: float = DEFAULT_FLOOR,
    scaling: float = 0.5,
) -> TransportPlan:
    """Entropic OT between two distributions by alternating Sinkhorn scalings.

    Args:
        mu1: Source intensities; an ``(H, W)`` grid unless ``cost`` is given.
        mu2: Target intensities, same convention.
        epsilon: Entropic weight; below 1e-2 the log-domain solver is used.
        max_iter: Iteration cap at the final epsilon.
        tol: Largest allowed marginal violation.
        cost: Optional explicit ground cost; defaults to squared Euclidean
            distance between pixel centres in ``[0, 1]^2``.
        floor: Mass floor applied after normalisation.
        scaling: Ratio between successive epsilons of the log-domain warm start.

    Returns:
        The plan with its transport cost ``<C, pi>`` and a per-iteration trace
        of the entropic dual objective, which never decreases. When ``tol`` is
        not reached the best iterate is returned with ``converged=False``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    a = prepare_distribution(mu1, floor)
    b = prepare_distribution(mu2, floor)
    if cost is None:
        s1, s2 = np.shape(mu1), np.shape(mu2)
        if len(s1) != 2 or len(s2) != 2:
            raise ShapeError(f"grid distributions must be (H, W), got {s1} and {s2}")
        cost = squared_distance_cost(grid_points(*s1), grid_points(*s2))
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (a.size, b.size):
        raise ShapeError(f"cost shape {cost.shape} does not match marginals ({a.size}, {b.size})")

    log_domain = epsilon < LOG_DOMAIN_THRESHOLD
    solved = None if log_domain else _sinkhorn_standard(a, b, cost, epsilon, max_iter, tol)
    if solved is None:
        if not log_domain:
            logging.warning("Sinkhorn kernel underflow at epsilon=%g; switching to log domain", epsilon)
        log_domain = True
        solved = _sinkhorn_log(a, b, cost, epsilon, max_iter, tol, scaling)
    plan, err, iterations, trace = solved

    converged = err <= tol
    if converged:
        logging.debug("Sinkhorn converged in %d iterations (violation %.2e)", iterations, err)
    else:
        logging.warning(
            "Sinkhorn did not reach tol %.1e in %d iterations; best violation %.2e", tol, iterations, err
        )
    return TransportPlan(
        plan=plan,
        mu1=a,
        mu2=b,
        cost=float(np.sum(cost * plan)),
        epsilon=epsilon,
        converged=converged,
        iterations=iterations,
        marginal_error=err,
        log_domain=log_domain,
        trace=trace,
    )


def exact_transport_cost(mu1: np.ndarray, mu2: np.ndarray, cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Unregularised OT by linear programming; suitable for small instances only."""
    a = np.asarray(mu1, dtype=np.float64).ravel()
    b = np.asarray(mu2, dtype=np.float64).ravel()
    n, m = a.size, b.size
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    a_eq = sparse.vstack([rows, cols]).tocsr()
    res = linprog(np.asarray(cost).ravel(), A_eq=a_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        raise TransportError(f"linear program failed: {res.message}")
    return float(res.fun), res.x.reshape(n, m)


# =================================================================================================
# DISPLACEMENT INTERPOLATION
# =================================================================================================


@dataclass
class OTInterpolation:
    """Frames at s = j/N; ``normalized`` frames carry unit mass."""

    frames: np.ndarray
    normalized: np.ndarray
    transport: TransportPlan
    source_mass: float

    def as_inference(self) -> ImageInference:
        n = self.frames.shape[0] - 1
        return ImageInference(frames=self.frames[..., None], dt=1.0 / n, method="ot")


def splat_bilinear(points: np.ndarray, mass: np.ndarray, height: int, width: int) -> np.ndarray:
    """Deposit point masses onto the grid with bilinear weights (total mass preserved)."""
    fx = np.clip(points[:, 0], 0.0, 1.0) * (width - 1)
    fy = np.clip(points[:, 1], 0.0, 1.0) * (height - 1)
    x0 = np.minimum(np.floor(fx).astype(np.intp), max(width - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.intp), max(height - 2, 0))
    tx, ty = fx - x0, fy - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    size = height * width
    out = np.bincount(y0 * width + x0, weights=mass * (1 - tx) * (1 - ty), minlength=size)
    out += np.bincount(y0 * width + x1, weights=mass * tx * (1 - ty), minlength=size)
    out += np.bincount(y1 * width + x0, weights=mass * (1 - tx) * ty, minlength=size)
    out += np.bincount(y1 * width + x1, weights=mass * tx * ty, minlength=size)
    return out.reshape(height, width)


def _positive(values: np.ndarray) -> np.ndarray:
    lo = float(values.min())
    return values - lo if lo < 0 else values


def ot_interpolate(
    pair: ImagePair,
    n_steps: int,
    epsilon: float = 1e-3,
    max_iter: int = 10000,
    tol: float = 1e-7,
    floor: float = DEFAULT_FLOOR,
) -> OTInterpolation:
    """Barycentric displacement interpolation between the two endpoint images."""
    if pair.channels != 1:
        raise ShapeError(f"OT interpolation needs single-channel images, got {pair.channels} channels")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    h, w, _ = pair.shape
    if h * w > config.OT_MAX_PIXELS:
        side = int(np.sqrt(config.OT_MAX_PIXELS))
        raise OversizedInputError(
            f"OT baseline refuses {h}x{w} input: dense plans are capped at {config.OT_MAX_PIXELS} pixels "
            f"({side}x{side})"
        )
    x0 = _positive(pair.x0[..., 0])
    x1 = _positive(pair.x1[..., 0])
    source_mass = float(x0.sum())

    transport = sinkhorn(x0, x1, epsilon=epsilon, max_iter=max_iter, tol=tol, floor=floor)
    pts = grid_points(h, w)
    src, dst = np.nonzero(transport.plan > _SPLAT_CUTOFF)
    mass = transport.plan[src, dst]

    normalized = np.empty((n_steps + 1, h, w))
    for j in range(n_steps + 1):
        s = j / n_steps
        normalized[j] = splat_bilinear((1.0 - s) * pts[src] + s * pts[dst], mass, h, w)
    logging.info(
        "OT interpolation: %d frames, cost %.4g, %d plan entries, converged=%s",
        n_steps + 1,
        transport.cost,
        mass.size,
        transport.converged,
    )
    return OTInterpolation(normalized * source_mass, normalized, transport, source_mass)
