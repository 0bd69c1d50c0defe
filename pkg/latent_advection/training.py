"""Losses, the Adam optimizer and the stochastic training loop.

All four loss terms share one reduction: squared errors are summed over pixels,
channels and evolution steps, then averaged over the batch. A term whose weight
is zero is not evaluated at all, so zeroing a weight trains exactly as if the
term were absent.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config
from .advection import FieldSequence, LatentState, advect_rollout
from .models import LossWeights, MetricsRow, OptimizerSettings
from .networks import ModelBundle
from .tensor import ShapeError, Tape, Tensor

METRICS_HEADER = ["iter", "loss_total", "loss_dyn", "loss_ae", "loss_mag", "loss_smooth", "lr"]


class NumericalAbort(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, dump_path: Path | None = None) -> None:
        super().__init__(message)
        self.dump_path = dump_path


# =================================================================================================
# BATCHES
# =================================================================================================


@dataclass
class Batch:
    """Stacked patch pairs, each of shape ``(B, Hp, Wp, C)``."""

    x0: np.ndarray
    x1: np.ndarray
    origins: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.x0.shape != self.x1.shape or self.x0.ndim != 4:
            raise ShapeError(f"batch endpoints must share a (B, H, W, C) shape, got {self.x0.shape} and {self.x1.shape}")

    @property
    def size(self) -> int:
        return self.x0.shape[0]


def stack_batch(pairs: Sequence, dtype=None) -> Batch:
    """Stack ``PatchPair``-like objects (``x0``, ``x1``, ``origin``) into a batch."""
    dtype = dtype or config.DTYPE
    x0 = np.stack([np.asarray(p.x0) for p in pairs]).astype(dtype, copy=False)
    x1 = np.stack([np.asarray(p.x1) for p in pairs]).astype(dtype, copy=False)
    return Batch(x0, x1, [tuple(getattr(p, "origin", (0, 0))) for p in pairs])


# =================================================================================================
# LOSSES
# =================================================================================================


def _batch_sum_sq(diff: Tensor, batch_size: int) -> Tensor:
    return diff.square().sum() / batch_size


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


@dataclass
class LossTerms:
    """Weighted total plus each unweighted term; skipped terms are ``None``."""

    total: Tensor
    dynamics: Tensor
    autoencoder: Tensor | None = None
    magnitude: Tensor | None = None
    smooth: Tensor | None = None

    def row(self, iteration: int, lr: float) -> MetricsRow:
        def val(t: Tensor | None) -> float:
            return t.item() if t is not None else 0.0

        return MetricsRow(
            iter=iteration,
            loss_total=self.total.item(),
            loss_dyn=self.dynamics.item(),
            loss_ae=val(self.autoencoder),
            loss_mag=val(self.magnitude),
            loss_smooth=val(self.smooth),
            lr=lr,
        )


def loss_field_regularizers(fields: FieldSequence) -> tuple[Tensor, Tensor]:
    """Return (sum_t |W_t|^2, sum_t |W_t - W_{t-1}|^2), each averaged over the batch."""
    batch_size = fields[0].shape[0]
    magnitude = fields[0].square().sum()
    for w in fields.fields[1:]:
        magnitude = magnitude + w.square().sum()
    magnitude = magnitude / batch_size

    if len(fields) == 1:
        return magnitude, _zero(fields[0].dtype)
    smooth = (fields[1] - fields[0]).square().sum()
    for prev, cur in zip(fields.fields[1:], fields.fields[2:]):
        smooth = smooth + (cur - prev).square().sum()
    return magnitude, smooth / batch_size


def loss_terms(batch: Batch, bundle: ModelBundle, weights: LossWeights) -> LossTerms:
    """Evaluate the weighted objective ``L_dyn + l_ae L_ae + l_mag L_mag + l_smooth L_smooth``."""
    b = batch.size
    x0, x1 = Tensor(batch.x0), Tensor(batch.x1)
    z0 = bundle.encode(x0)
    fields = bundle.extract_fields(x0)
    states = advect_rollout(z0, fields)
    dynamics = _batch_sum_sq(bundle.decode(states[-1]) - x1, b)

    terms = LossTerms(total=dynamics, dynamics=dynamics)
    if weights.ae:
        terms.autoencoder = _autoencoder_terms(x0, x1, z0, states[-1], bundle, b)
        terms.total = terms.total + terms.autoencoder * weights.ae
    if weights.magnitude or weights.smooth:
        magnitude, smooth = loss_field_regularizers(fields)
        if weights.magnitude:
            terms.magnitude = magnitude
            terms.total = terms.total + magnitude * weights.magnitude
        if weights.smooth:
            terms.smooth = smooth
            terms.total = terms.total + smooth * weights.smooth
    return terms


def _autoencoder_terms(
    x0: Tensor, x1: Tensor, z0: LatentState, z_terminal: LatentState, bundle: ModelBundle, b: int
) -> Tensor:
    reconstruction = _batch_sum_sq(x0 - bundle.decode(z0), b)
    consistency = _batch_sum_sq(z_terminal.values - bundle.encode(x1).values, b)
    return reconstruction + consistency


def loss_dynamics(batch: Batch, bundle: ModelBundle) -> Tensor:
    """|psi(P(phi(X0); eta(X0))) - X1|^2 with the shared reduction."""
    return loss_terms(batch, bundle, LossWeights(ae=0.0, magnitude=0.0, smooth=0.0)).dynamics


def loss_autoencoder(batch: Batch, bundle: ModelBundle) -> Tensor:
    """|X0 - psi(phi(X0))|^2 + |Z_terminal - phi(X1)|^2 with the shared reduction."""
    b = batch.size
    x0, x1 = Tensor(batch.x0), Tensor(batch.x1)
    z0 = bundle.encode(x0)
    states = advect_rollout(z0, bundle.extract_fields(x0))
    return _autoencoder_terms(x0, x1, z0, states[-1], bundle, b)


def total_loss(batch: Batch, bundle: ModelBundle, weights: LossWeights) -> Tensor:
    return loss_terms(batch, bundle, weights).total


# =================================================================================================
# OPTIMIZER
# =================================================================================================


@dataclass
class OptimizerState:
    """Adam moments plus the stepwise decayed learning rate."""

    settings: OptimizerSettings
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: Sequence[Tensor], settings: OptimizerSettings | None = None) -> OptimizerState:
        settings = settings or OptimizerSettings()
        return cls(
            settings=settings,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )

    def learning_rate(self, step: int | None = None) -> float:
        """alpha_0 * gamma ** floor(step / decay_interval)."""
        s = self.step if step is None else step
        cfg = self.settings
        return cfg.alpha * cfg.gamma ** (s // cfg.decay_interval)

    def update(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> float:
        """Apply one bias-corrected Adam step in place; returns the rate used."""
        if len(params) != len(self.m):
            raise ShapeError(f"optimizer tracks {len(self.m)} parameters, got {len(params)}")
        cfg = self.settings
        lr = self.learning_rate()
        t = self.step + 1
        c1 = 1.0 - cfg.beta1**t
        c2 = 1.0 - cfg.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(p.dtype, copy=False)
        self.step = t
        return lr


# =================================================================================================
# TRAINING LOOP
# =================================================================================================


class EpochSampler:
    """Seeded batch indices, drawn epoch-wise without replacement."""

    def __init__(self, n_items: int, batch_size: int, seed: int) -> None:
        if n_items < 1:
            raise ValueError("cannot sample from an empty dataset")
        self.n_items = n_items
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order = self.rng.permutation(n_items)
        self._cursor = 0

    def next_batch(self) -> np.ndarray:
        picked: list[np.ndarray] = []
        needed = self.batch_size
        while needed:
            if self._cursor == self.n_items:
                self._order = self.rng.permutation(self.n_items)
                self._cursor = 0
                self.epoch += 1
            take = min(needed, self.n_items - self._cursor)
            picked.append(self._order[self._cursor : self._cursor + take])
            self._cursor += take
            needed -= take
        return np.concatenate(picked)


@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list[MetricsRow]
    optimizer: OptimizerState


def _dump_state(dump_dir: Path, bundle: ModelBundle, iteration: int, terms: LossTerms, batch: Batch) -> Path:
    dump_dir.mkdir(parents=True, exist_ok=True)
    bundle.save(dump_dir / "abort_bundle.bin")
    state = {
        "iteration": iteration,
        "loss_total": terms.total.item(),
        "loss_dyn": terms.dynamics.item(),
        "batch_origins": [list(map(int, o)) for o in batch.origins],
        "nonfinite_parameters": sum(1 for p in bundle.all_parameters() if not p.is_finite()),
    }
    path = dump_dir / "abort_state.json"
    path.write_text(json.dumps(state, indent=2, allow_nan=True))
    return path


def train(
    dataset: Sequence,
    bundle: ModelBundle,
    optimizer: OptimizerState,
    weights: LossWeights,
    iterations: int,
    batch_size: int,
    seed: int,
    log_every: int = 100,
    dump_dir: str | Path | None = None,
) -> TrainResult:
    """Minimise the weighted objective over ``dataset`` with Adam.

    Args:
        dataset: Indexable collection of patch pairs.
        bundle: Networks to train; parameters are updated in place.
        optimizer: Adam state created for ``bundle.parameters()``.
        weights: Loss weights; zero weights skip their terms.
        iterations: Number of optimizer steps.
        batch_size: Patch pairs per step.
        seed: Seed of the batch sampler.
        log_every: A metrics row is kept every ``log_every`` iterations and at the last one.
        dump_dir: Where the bundle and a state summary are written on a non-finite loss.

    Returns:
        The trained bundle, the metrics rows and the optimizer state.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    params = bundle.parameters()
    sampler = EpochSampler(len(dataset), batch_size, seed)
    rows: list[MetricsRow] = []

    logging.info(
        "Training %d iterations on %d patch pairs (batch %d, %d parameters)",
        iterations,
        len(dataset),
        batch_size,
        sum(p.size for p in params),
    )
    for it in range(iterations):
        batch = stack_batch([dataset[int(i)] for i in sampler.next_batch()], bundle.dtype)
        with Tape() as tape:
            terms = loss_terms(batch, bundle, weights)
        if not terms.total.is_finite():
            logging.error("[bold red]Non-finite loss at iteration %d[/]", it)
            dump = _dump_state(Path(dump_dir), bundle, it, terms, batch) if dump_dir is not None else None
            raise NumericalAbort(f"loss became {terms.total.item()} at iteration {it}", dump)
        grads = tape.backward(terms.total).for_parameters(params)
        lr = optimizer.update(params, grads)

        if it % log_every == 0 or it == iterations - 1:
            row = terms.row(it, lr)
            rows.append(row)
            logging.info(
                "iter %d  total %.6g  dyn %.6g  ae %.6g  mag %.6g  smooth %.6g  lr %.3g",
                row.iter,
                row.loss_total,
                row.loss_dyn,
                row.loss_ae,
                row.loss_mag,
                row.loss_smooth,
                row.lr,
            )
    return TrainResult(bundle, rows, optimizer)


# =================================================================================================
# METRICS LOG
# =================================================================================================


def write_metrics(rows: Sequence[MetricsRow], path: str | Path) -> Path:
    """Write the metrics CSV with full float precision so equal runs give equal files."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            values = row.model_dump()
            writer.writerow([values["iter"]] + [format(values[k], ".17g") for k in METRICS_HEADER[1:]])
    return path


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        return [MetricsRow.model_validate(r) for r in csv.DictReader(fh)]
