"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients with central differences."""

    max_rel_error: float
    samples: int
    worst: tuple[int, tuple[int, ...]] | None = None
    errors: list[float] = field(default_factory=list)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: float, numeric: float, atol: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, atol); ``atol`` keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


def central_difference(loss_fn: Callable[[], Tensor], array: np.ndarray, index: tuple[int, ...], step: float) -> float:
    """Estimate d(loss)/d(array[index]) by perturbing ``array`` in place."""
    original = array[index]
    array[index] = original + step
    plus = loss_fn().item()
    array[index] = original - step
    minus = loss_fn().item()
    array[index] = original
    return (plus - minus) / (2.0 * step)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    samples: int = 50,
    step: float = 1e-4,
    seed: int = 0,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values on each
    call. Entries are drawn uniformly over all parameter elements; use 64-bit
    parameters for meaningful tolerances.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss).for_parameters(params)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradCheckReport(max_rel_error=0.0, samples=len(picks))
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        index = np.unravel_index(int(flat - offsets[which]), params[which].shape)
        numeric = central_difference(loss_fn, params[which].data, index, step)
        err = relative_error(float(grads[which][index]), numeric, atol)
        report.errors.append(err)
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst = (which, tuple(int(i) for i in index))
    return report
