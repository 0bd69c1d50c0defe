"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive below computes its forward value eagerly with numpy. When a
:class:`Tape` is active and at least one input is tracked (a parameter with
``requires_grad=True`` or the output of an earlier recorded operation), the
primitive appends a node holding its vector-Jacobian product to the tape.
:meth:`Tape.backward` then walks the nodes in reverse append order.

Layout is batch-major NHWC throughout: ``(batch, height, width, channels)``.
Spatial coordinates used by :func:`grid_sample` are in domain units of
``[0, 1]^2`` with corner-aligned sampling: pixel ``(i, j)`` of an ``H x W``
grid sits at ``x = j / (W - 1)``, ``y = i / (H - 1)``; component 0 is ``x``
(width axis) and component 1 is ``y`` (height axis).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import config

MAX_ORDER = 4


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


# =================================================================================================
# TENSOR
# =================================================================================================


class Tensor:
    """Dense array of order <= 4 that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(config.DTYPE)
        if arr.ndim > MAX_ORDER:
            raise ShapeError(f"tensor order {arr.ndim} exceeds {MAX_ORDER}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    # ---------------------------------------------------------------------
    # Introspection
    # ---------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def detach(self) -> Tensor:
        """Return a tensor sharing values but never recorded on a tape."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ---------------------------------------------------------------------
    # Operators
    # ---------------------------------------------------------------------

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(self, other)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return add(neg(self), other)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(self, other)

    def __truediv__(self, other: float) -> Tensor:
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def sum(self) -> Tensor:
        return sum_all(self)

    def square(self) -> Tensor:
        return square(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# =================================================================================================
# TAPE
# =================================================================================================

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("active_tape", default=None)


@dataclass
class _Node:
    tensor: Tensor
    parents: tuple[int | None, ...]
    vjp: VJP | None


class Gradients:
    """Gradients produced by :meth:`Tape.backward`, looked up by tensor."""

    def __init__(self) -> None:
        self._grads: dict[int, np.ndarray] = {}
        self._owners: dict[int, Tensor] = {}

    def _set(self, tensor: Tensor, grad: np.ndarray) -> None:
        self._grads[id(tensor)] = grad
        self._owners[id(tensor)] = tensor

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def __len__(self) -> int:
        return len(self._grads)

    def get(self, tensor: Tensor, default=None):
        return self._grads.get(id(tensor), default)

    def for_parameters(self, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients in parameter order; unreachable parameters get zeros."""
        return [self._grads.get(id(p), np.zeros_like(p.data)) for p in params]


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; primitives evaluated inside the ``with`` block are
    recorded when they touch a tracked tensor. A tape supports one
    :meth:`backward`; call :meth:`reset` before reusing it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self._spent = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            if node.tensor._tape is self:
                node.tensor.node_id = None
                node.tensor._tape = None
        self.nodes.clear()
        self._leaves.clear()
        self._spent = False

    # ---------------------------------------------------------------------
    # Recording
    # ---------------------------------------------------------------------

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or (tensor._tape is self and tensor.node_id is not None)

    def _node_of(self, tensor: Tensor) -> int | None:
        if tensor._tape is self and tensor.node_id is not None:
            return tensor.node_id
        if not tensor.requires_grad:
            return None
        key = id(tensor)
        if key not in self._leaves:
            self._leaves[key] = len(self.nodes)
            self.nodes.append(_Node(tensor, (), None))
        return self._leaves[key]

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
        if self._spent:
            raise TapeError("tape already consumed by backward(); call reset() first")
        parents = tuple(self._node_of(t) for t in inputs)
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(out, parents, vjp))
        return out

    # ---------------------------------------------------------------------
    # Reverse pass
    # ---------------------------------------------------------------------

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``."""
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss is not attached to this tape")
        if self._spent:
            raise TapeError("backward() already ran on this tape; call reset() first")
        self._spent = True

        acc: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for idx in range(loss.node_id, -1, -1):
            grad = acc.get(idx)
            if grad is None:
                continue
            node = self.nodes[idx]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(grad)
            for parent, pg in zip(node.parents, parent_grads):
                if parent is None or pg is None:
                    continue
                if parent in acc:
                    acc[parent] = acc[parent] + pg
                else:
                    acc[parent] = pg

        grads = Gradients()
        for idx, grad in acc.items():
            node = self.nodes[idx]
            grads._set(node.tensor, grad.reshape(node.tensor.shape))
        return grads


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording for the enclosed block, whatever tape is active."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# =================================================================================================
# ELEMENTWISE
# =================================================================================================


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(a.data + np.asarray(c, dtype=a.dtype), [a], lambda g: (g,))
    _require_same_shape(a, b, "add")
    return _emit(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _require_same_shape(a, b, "sub")
    return _emit(a.data - b.data, [a, b], lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, [a], lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(float(b), dtype=a.dtype)
        return _emit(a.data * c, [a], lambda g: (g * c,))
    _require_same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _emit(av * bv, [a, b], lambda g: (g * bv, g * av))


def square(a: Tensor) -> Tensor:
    av = a.data
    return _emit(av * av, [a], lambda g: (2.0 * av * g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.sum(a.data), [a], lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), [a], lambda g: (g.reshape(old),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise ``x if x >= 0 else slope * x``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    positive = x.data >= 0
    s = np.asarray(slope, dtype=x.dtype)
    out = np.where(positive, x.data, s * x.data)
    return _emit(out, [x], lambda g: (np.where(positive, g, s * g),))


# =================================================================================================
# CHANNEL PLUMBING
# =================================================================================================


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NHWC tensors along the channel axis."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: leading shapes {lead} and {t.shape[:-1]} differ")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def vjp(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _emit(np.concatenate([t.data for t in tensors], axis=-1), tensors, vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {x.shape[-1]} channels")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit(x.data[..., start:stop], [x], vjp)


# =================================================================================================
# CONVOLUTION AND POOLING
# =================================================================================================


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    Args:
        x: Input of shape ``(B, H, W, Cin)``.
        kernel: Weights of shape ``(k, k, Cin, Cout)`` with odd ``k``.
        bias: Optional ``(Cout,)`` bias.

    Returns:
        Output of shape ``(B, H, W, Cout)``; zero padding of ``k // 2``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and HWIO kernel, got {x.shape} and {kernel.shape}")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd extent, got {k}x{k2}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    p = k // 2
    pad = ((0, 0), (p, p), (p, p), (0, 0))
    xv, kv = x.data, kernel.data
    windows = sliding_window_view(np.pad(xv, pad), (k, k), axis=(1, 2))  # (B, H, W, Cin, k, k)
    out = np.einsum("bhwcij,ijco->bhwo", windows, kv, optimize=True)
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        grad_kernel = np.einsum("bhwcij,bhwo->ijco", windows, g, optimize=True)
        g_windows = sliding_window_view(np.pad(g, pad), (k, k), axis=(1, 2))  # (B, H, W, Cout, k, k)
        grad_x = np.einsum("bhwoij,ijco->bhwc", g_windows, kv[::-1, ::-1], optimize=True)
        grad_bias = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return grad_x, grad_kernel, grad_bias

    inputs = [x, kernel] if bias is None else [x, kernel, bias]
    return _emit(out, inputs, vjp)


def max_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties resolve to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2 expects NHWC input, got {x.shape}")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial extents, got {h}x{w}")
    windows = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    arg = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(windows, dtype=g.dtype)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        return (gw.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c),)

    return _emit(out, [x], vjp)


# =================================================================================================
# RESAMPLING
# =================================================================================================


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation matrix of shape ``(n_out, n_in)``."""
    weights = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable corner-aligned bilinear resize of an NHWC tensor."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear target must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear expects NHWC input, got {x.shape}")
    _, h, w, _ = x.shape
    ah = _axis_weights(h, out_h).astype(x.dtype)
    aw = _axis_weights(w, out_w).astype(x.dtype)
    rows = np.einsum("oh,bhwc->bowc", ah, x.data, optimize=True)
    out = np.einsum("pw,bowc->bopc", aw, rows, optimize=True)

    def vjp(g):
        g_rows = np.einsum("pw,bopc->bowc", aw, g, optimize=True)
        return (np.einsum("oh,bowc->bhwc", ah, g_rows, optimize=True),)

    return _emit(out, [x], vjp)


def domain_grid(height: int, width: int, dtype=None) -> np.ndarray:
    """Native sample locations of an ``H x W`` grid in ``[0, 1]^2``, shape ``(H, W, 2)``."""
    xs = np.linspace(0.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(dtype or config.DTYPE)


def _to_index(coord: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map domain coordinates to clamped fractional indices plus an in-range mask."""
    scale = n - 1
    raw = coord * scale
    inside = (raw >= 0) & (raw <= scale)
    idx = np.clip(raw, 0, scale)
    # Rounding noise from the domain->index map snaps to the nearest node.
    nearest = np.rint(idx)
    tol = 4 * np.finfo(idx.dtype).eps * max(scale, 1)
    idx = np.where(np.abs(idx - nearest) <= tol, nearest, idx)
    return idx, inside


def _scatter_add(shape: tuple[int, int, int, int], flat_index: np.ndarray, values: np.ndarray) -> np.ndarray:
    b, h, w, c = shape
    out = np.empty((b * h * w, c), dtype=values.dtype)
    idx = flat_index.ravel()
    vals = values.reshape(-1, c)
    for ch in range(c):
        out[:, ch] = np.bincount(idx, weights=vals[:, ch], minlength=b * h * w)
    return out.reshape(shape)


def grid_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinearly sample ``x`` at domain coordinates with clamp-to-boundary.

    Args:
        x: Values of shape ``(B, H, W, C)``.
        coords: Sample points of shape ``(B, Ho, Wo, 2)`` in domain units,
            component 0 along the width axis and component 1 along the height.

    Returns:
        Samples of shape ``(B, Ho, Wo, C)``. Coordinates outside ``[0, 1]``
        are clamped, so the boundary value is extended outward and the
        coordinate gradient vanishes there.
    """
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise ShapeError(f"grid_sample expects (B,H,W,C) values and (B,Ho,Wo,2) coords, got {x.shape}, {coords.shape}")
    if coords.shape[0] != x.shape[0]:
        raise ShapeError(f"grid_sample batch mismatch: {x.shape[0]} vs {coords.shape[0]}")
    b, h, w, c = x.shape
    xv = x.data
    cv = coords.data.astype(xv.dtype, copy=False)

    fx_idx, in_x = _to_index(cv[..., 0], w)
    fy_idx, in_y = _to_index(cv[..., 1], h)
    x0 = np.floor(fx_idx).astype(np.intp)
    y0 = np.floor(fy_idx).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (fx_idx - x0)[..., None]
    fy = (fy_idx - y0)[..., None]

    bi = np.arange(b)[:, None, None]
    v00 = xv[bi, y0, x0]
    v01 = xv[bi, y0, x1]
    v10 = xv[bi, y1, x0]
    v11 = xv[bi, y1, x1]
    # Lerp form keeps constants and exact node hits bit-exact.
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)

    def vjp(g):
        base = bi * (h * w)
        wx0, wy0 = 1 - fx, 1 - fy
        grad_x = _scatter_add((b, h, w, c), base + y0 * w + x0, g * (wx0 * wy0))
        grad_x += _scatter_add((b, h, w, c), base + y0 * w + x1, g * (fx * wy0))
        grad_x += _scatter_add((b, h, w, c), base + y1 * w + x0, g * (wx0 * fy))
        grad_x += _scatter_add((b, h, w, c), base + y1 * w + x1, g * (fx * fy))
        d_fx = wy0 * (v01 - v00) + fy * (v11 - v10)
        d_fy = bot - top
        gcx = np.sum(g * d_fx, axis=-1) * (w - 1) * in_x
        gcy = np.sum(g * d_fy, axis=-1) * (h - 1) * in_y
        grad_coords = np.stack([gcx, gcy], axis=-1).astype(coords.dtype, copy=False)
        return grad_x, grad_coords

    return _emit(out, [x, coords], vjp)
