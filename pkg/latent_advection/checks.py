"""Verification checks behind ``latent_advection check``.

Each suite returns one :class:`CheckResult` per check with the measured error
and the threshold it was held to.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .advection import FieldSequence, LatentState, advect_rollout, advect_step
from .baselines import exact_transport_cost, grid_points, ot_interpolate, squared_distance_cost
from .data import ImagePair
from .gradcheck import check_gradients
from .models import BundleSpec, EncoderConfig, LossWeights, UNetConfig
from .networks import ModelBundle
from .synthetic import make_synthetic
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    domain_grid,
    grid_sample,
    leaky_relu,
    max_pool2,
    resize_bilinear,
    slice_channels,
)
from .training import Batch, total_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float

    @classmethod
    def at_most(cls, name: str, measured: float, threshold: float) -> CheckResult:
        return cls(name, bool(measured <= threshold), float(measured), float(threshold))


# =================================================================================================
# GRADIENTS
# =================================================================================================

GRAD_TOLERANCE = 1e-3


def toy_spec(n_steps: int = 3, size: int = 16, seed: int = 0) -> BundleSpec:
    """Small learned-codec bundle used by the gradient checks (channel widths 4 to 8)."""
    return BundleSpec(
        in_channels=1,
        n_evolution=n_steps,
        dt=0.1,
        patch_height=size,
        patch_width=size,
        encoder=EncoderConfig(hidden_channels=[4, 8, 4]),
        decoder=UNetConfig(input_channels=4, down_channels=[4, 8, 8], bottleneck_channels=8, output_channels=4),
        field_extractor=UNetConfig(
            input_channels=4,
            down_channels=[4, 8, 8],
            bottleneck_channels=8,
            output_channels=4,
            out_channels=2 * n_steps,
            kernel=5,
        ),
        seed=seed,
    )


def _primitive_checks(rng: np.random.Generator) -> Dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    def param(*shape, lo=-1.0, hi=1.0) -> Tensor:
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    def weighted(out_fn: Callable[[], Tensor], shape) -> Callable[[], Tensor]:
        r = Tensor(rng.normal(size=shape))
        return lambda: (out_fn() * r).sum()

    x = param(2, 6, 6, 3)
    k = param(3, 3, 3, 4)
    bias = param(4)
    pool_in = param(2, 6, 6, 3)
    field = param(2, 5, 7, 2, lo=0.05, hi=0.95)
    values = param(2, 6, 6, 3)
    a, b = param(2, 6, 6, 2), param(2, 6, 6, 3)
    return {
        "conv2d": (weighted(lambda: conv2d(x, k, bias), (2, 6, 6, 4)), [x, k, bias]),
        "max_pool2": (weighted(lambda: max_pool2(pool_in), (2, 3, 3, 3)), [pool_in]),
        "resize_bilinear": (weighted(lambda: resize_bilinear(x, 11, 4), (2, 11, 4, 3)), [x]),
        "grid_sample": (weighted(lambda: grid_sample(values, field), (2, 5, 7, 3)), [values, field]),
        "leaky_relu": (weighted(lambda: leaky_relu(x, 0.2), (2, 6, 6, 3)), [x]),
        "concat_slice": (
            weighted(lambda: slice_channels(concat_channels([a, b]), 1, 4), (2, 6, 6, 3)),
            [a, b],
        ),
        "mul_square": (lambda: (a * a.square() - a).sum(), [a]),
    }


def gradient_suite(samples: int = 50, seed: int = 0) -> List[CheckResult]:
    """Tape gradients of every primitive and of the composed loss against central differences."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (loss_fn, params) in _primitive_checks(rng).items():
        report = check_gradients(loss_fn, params, samples=samples, step=1e-5, seed=seed, atol=1e-4)
        results.append(CheckResult.at_most(f"grad/{name}", report.max_rel_error, GRAD_TOLERANCE))

    spec = toy_spec(seed=seed)
    bundle = ModelBundle.build(spec, dtype=np.float64)
    scene = make_synthetic("translation", 16, 16, spec.n_evolution, seed=seed)
    batch = Batch(scene.texture[None] * 2.0 - 1.0, scene.x1[None] * 2.0 - 1.0)
    weights = LossWeights(ae=1.0, magnitude=0.01, smooth=0.01)

    def loss_fn() -> Tensor:
        return total_loss(batch, bundle, weights)

    scale = max(1.0, abs(loss_fn().item()))
    report = check_gradients(loss_fn, bundle.parameters(), samples=samples, step=1e-6, seed=seed, atol=1e-5 * scale)
    results.append(CheckResult.at_most("grad/total_loss", report.max_rel_error, GRAD_TOLERANCE))
    return results


# =================================================================================================
# ADVECTION
# =================================================================================================


def _gaussian(height: int, width: int, sigma: float) -> np.ndarray:
    grid = domain_grid(height, width, dtype=np.float64)
    d2 = ((grid - 0.5) ** 2).sum(axis=-1)
    return np.exp(-d2 / (2.0 * sigma**2))[None, ..., None]


def advection_suite(trials: int = 1000, seed: int = 0) -> List[CheckResult]:
    """Identity, constant preservation, maximum principle and step splitting."""
    rng = np.random.default_rng(seed)
    results = []

    z = LatentState(Tensor(rng.normal(size=(2, 16, 16, 1))))
    zero = FieldSequence.zeros(4, 2, 16, 16, 0.1)
    out = advect_rollout(z, zero)[-1].numpy()
    results.append(CheckResult.at_most("advect/zero_field_identity", float(np.abs(out - z.numpy()).max()), 0.0))

    const = LatentState(Tensor(np.full((1, 16, 16, 1), 0.37)))
    w = Tensor(rng.normal(scale=3.0, size=(1, 16, 16, 2)))
    moved = advect_step(const, w, 0.1).numpy()
    results.append(CheckResult.at_most("advect/constant_preservation", float(np.abs(moved - 0.37).max()), 0.0))

    worst = 0.0
    for _ in range(trials):
        h, wd = rng.integers(2, 12, size=2)
        zt = rng.normal(size=(1, h, wd, 1))
        wt = Tensor(rng.normal(scale=5.0, size=(1, h, wd, 2)))
        res = advect_step(LatentState(Tensor(zt)), wt, float(rng.uniform(0.01, 1.0))).numpy()
        slack = 8 * np.finfo(np.float64).eps * np.abs(zt).max()
        excess = max(res.max() - zt.max(), zt.min() - res.min(), 0.0)
        worst = max(worst, excess - slack if excess > slack else 0.0)
    results.append(CheckResult.at_most("advect/maximum_principle", worst, 0.0))

    n = 64
    gauss = LatentState(Tensor(_gaussian(n, n, 0.1)))
    # 0.2 cells along x and 0.1 cells along y per full step
    vel = np.zeros((1, n, n, 2))
    vel[..., 0] = 0.2 / (n - 1) / 0.1
    vel[..., 1] = 0.1 / (n - 1) / 0.1
    wv = Tensor(vel)
    full = advect_step(gauss, wv, 0.1).numpy()
    halves = advect_step(advect_step(gauss, wv, 0.05), wv, 0.05).numpy()
    results.append(CheckResult.at_most("advect/half_steps", float(np.abs(full - halves).max()), 1e-3))
    return results


# =================================================================================================
# OPTIMAL TRANSPORT
# =================================================================================================


def transport_suite(size: int = 16, epsilon: float = 1e-3, seed: int = 0) -> List[CheckResult]:
    """Sinkhorn against the LP oracle, plus endpoint and mass checks of the interpolation."""
    scene = make_synthetic("translation", size, size, n_steps=3, seed=seed)
    mu1 = scene.texture[..., 0] + 0.05
    mu2 = scene.x1[..., 0] + 0.05
    interp = ot_interpolate(ImagePair(mu1, mu2), n_steps=4, epsilon=epsilon, max_iter=20000, tol=1e-8)
    plan = interp.transport
    pts = grid_points(size, size)
    exact, _ = exact_transport_cost(plan.mu1, plan.mu2, squared_distance_cost(pts, pts))
    drops = np.diff(plan.trace)
    tv0 = 0.5 * np.abs(interp.normalized[0].ravel() - plan.mu1).sum()
    tv1 = 0.5 * np.abs(interp.normalized[-1].ravel() - plan.mu2).sum()
    mass = np.abs(interp.normalized.sum(axis=(1, 2)) - 1.0).max()
    return [
        CheckResult.at_most("ot/marginals", plan.marginal_violation(), 1e-6),
        CheckResult.at_most("ot/lp_relative_gap", abs(plan.cost - exact) / exact, 0.02),
        CheckResult.at_most("ot/dual_monotone", float(max(0.0, -drops.min())) if drops.size else 0.0, 1e-12),
        CheckResult.at_most("ot/endpoint_tv", float(max(tv0, tv1)), 1e-3),
        CheckResult.at_most("ot/mass_conservation", float(mass), 1e-6),
    ]


SUITES: Dict[str, Callable[[], List[CheckResult]]] = {
    "grad": gradient_suite,
    "advect": advection_suite,
    "ot": transport_suite,
}


def run_suite(name: str) -> List[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown check suite {name!r}; choose from {', '.join(SUITES)}")
    results = SUITES[name]()
    for r in results:
        logging.debug("%s: %.3e (threshold %.1e) %s", r.name, r.measured, r.threshold, "ok" if r.passed else "FAIL")
    return results
