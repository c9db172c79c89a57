"""
Differentiable ops over ``Tensor``.

Every op validates shapes, computes its value with numpy, and registers a
backward rule on the active tape. Broadcasting is limited to a bias vector
added over the last axis. Integer index arguments (row lists, top-k picks,
argmax results) are constants: no gradient flows through them.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from dlgmoe.core.config import settings
from dlgmoe.core.exceptions import ContractError, DimensionError, NumericalError
from dlgmoe.tensor.tensor_model import BackwardFn, FloatArray, Tensor, current_tape

IntArray = NDArray[np.int64]
Activation = Literal["swish", "relu"]

LAYER_NORM_EPS = 1e-5


def record_op(
    op: str, data: FloatArray, inputs: Sequence[Tensor], backward_fn: BackwardFn
) -> Tensor:
    if settings.CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(op)
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad and tape is not None:
        tape.record(op, out, inputs, backward_fn)
    return out


def _as_index(indices: ArrayLike) -> IntArray:
    return np.asarray(indices, dtype=np.int64).reshape(-1)


def _require_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.ndim != 2:
            raise DimensionError(op, t.shape, detail="expected a 2-D tensor")


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward_fn(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g @ b_data.T, a_data.T @ g

    return record_op("matmul", a_data @ b_data, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis of ``a``."""
    if a.shape == b.shape:

        def backward_fn(g: FloatArray) -> tuple[FloatArray, FloatArray]:
            return g, g

        return record_op("add", a.data + b.data, (a, b), backward_fn)

    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:

        def bias_backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)

        return record_op("add", a.data + b.data, (a, b), bias_backward)

    raise DimensionError("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("sub", a.shape, b.shape)

    def backward_fn(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g, -g

    return record_op("sub", a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward_fn(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g * b_data, g * a_data

    return record_op("mul", a_data * b_data, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (g * factor,)

    return record_op("scale", a.data * factor, (a,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (np.full(shape, float(g)),)

    return record_op("sum", np.array(a.data.sum()), (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise DimensionError("mean", a.shape, detail="empty tensor")
    return scale(sum_all(a), 1.0 / a.data.size)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("add_n needs at least one tensor")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------


def _normalize_axis(op: str, x: Tensor, axis: int) -> int:
    if x.ndim == 0:
        raise DimensionError(op, x.shape, detail="scalar has no axis")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(op, x.shape, detail=f"axis {axis} is empty")
    return axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis("softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", y, (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis("log_softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record_op("log_softmax", out, (x,), backward_fn)


def masked_softmax(x: Tensor, mask: NDArray[np.bool_], floor: float = 0.0) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    A positive ``floor`` bounds every unmasked weight away from 0 when logit
    gaps exceed the float64 exp range (about 745).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError("masked_softmax", x.shape, mask.shape)
    if x.data.size and not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: every row needs at least one unmasked entry")
    masked = np.where(mask, x.data, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True) if x.data.size else masked
    e = np.where(mask, np.maximum(np.exp(masked - row_max), floor), 0.0)
    y = e / e.sum(axis=-1, keepdims=True) if x.data.size else e

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op("masked_softmax", y, (x,), backward_fn)


def layer_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    """Normalise over the last axis; a constant row maps to zeros before the affine."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        dx = (
            inv_std
            / n
            * (
                n * g
                - g.sum(axis=-1, keepdims=True)
                - x_hat * (g * x_hat).sum(axis=-1, keepdims=True)
            )
        )
        return (dx,)

    out = record_op("layer_norm", x_hat, (x,), backward_fn)
    if gamma is not None:
        if gamma.shape != (n,):
            raise DimensionError("layer_norm", x.shape, gamma.shape)
        out = mul_bias(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def mul_bias(x: Tensor, w: Tensor) -> Tensor:
    """Scale every row of ``x`` by the vector ``w`` over the last axis."""
    if w.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError("mul_bias", x.shape, w.shape)
    x_data, w_data = x.data, w.data

    def backward_fn(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g * w_data, (g * x_data).reshape(-1, w_data.shape[0]).sum(axis=0)

    return record_op("mul_bias", x_data * w_data, (x, w), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (g * y * (1.0 - y),)

    return record_op("sigmoid", y, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (g * active,)

    return record_op("relu", np.where(active, x.data, 0.0), (x,), backward_fn)


def swish(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    x_data = x.data

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (g * (s + x_data * s * (1.0 - s)),)

    return record_op("swish", x_data * s, (x,), backward_fn)


def ffn_activation(x: Tensor, kind: Activation = "swish") -> Tensor:
    if kind == "swish":
        return swish(x)
    if kind == "relu":
        return relu(x)
    raise ContractError(f"Unknown activation: {kind}")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: a * sigmoid(b) for [a | b]."""
    width = x.shape[-1]
    if width % 2:
        raise DimensionError("glu", x.shape, detail="last axis must be even")
    half = width // 2
    a, b = x.data[..., :half], x.data[..., half:]
    s = 1.0 / (1.0 + np.exp(-b))

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return record_op("glu", a * s, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Shape manipulation and indexing
# ---------------------------------------------------------------------------


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (g.T,)

    return record_op("transpose", x.data.T.copy(), (x,), backward_fn)


def slice_frames(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError("slice_frames", x.shape, detail=f"[{start}:{stop}]")
    shape = x.data.shape

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return record_op("slice_frames", x.data[start:stop].copy(), (x,), backward_fn)


def concat_frames(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_frames needs at least one tensor")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise DimensionError("concat_frames", *(q.shape for q in parts))
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward_fn(g: FloatArray) -> list[FloatArray]:
        return [g[bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    data = np.concatenate([p.data for p in parts], axis=0)
    return record_op("concat_frames", data, parts, backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_cols", x)
    if not 0 <= start <= stop <= x.shape[1]:
        raise DimensionError("slice_cols", x.shape, detail=f"[:, {start}:{stop}]")
    shape = x.data.shape

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return record_op("slice_cols", x.data[:, start:stop].copy(), (x,), backward_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    _require_2d("concat_cols", *parts)
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise DimensionError("concat_cols", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g: FloatArray) -> list[FloatArray]:
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    data = np.concatenate([p.data for p in parts], axis=1)
    return record_op("concat_cols", data, parts, backward_fn)


def take_rows(x: Tensor, rows: ArrayLike) -> Tensor:
    idx = _as_index(rows)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("take_rows", x.shape, detail="row index out of range")
    shape = x.data.shape

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return record_op("take_rows", x.data[idx].copy(), (x,), backward_fn)


def scatter_rows(
    parts: Sequence[Tensor],
    rows: Sequence[ArrayLike],
    n_rows: int,
    accumulate: bool = False,
) -> Tensor:
    """Write ``parts[i]`` into rows ``rows[i]`` of an ``n_rows`` x d zero tensor.

    Without ``accumulate`` every target row must be written at most once.
    """
    if len(parts) != len(rows) or not parts:
        raise ContractError("scatter_rows needs one row list per part")
    width = parts[0].shape[1:]
    indices = [_as_index(r) for r in rows]
    for part, idx in zip(parts, indices, strict=True):
        if part.shape[1:] != width or part.shape[0] != idx.size:
            raise DimensionError("scatter_rows", part.shape, (idx.size, *width))
        if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
            raise DimensionError("scatter_rows", part.shape, detail="row index out of range")
    if not accumulate:
        written = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
        if np.unique(written).size != written.size:
            raise ContractError("scatter_rows: a row was written more than once")

    data = np.zeros((n_rows, *width))
    for part, idx in zip(parts, indices, strict=True):
        if accumulate:
            np.add.at(data, idx, part.data)
        else:
            data[idx] = part.data

    def backward_fn(g: FloatArray) -> list[FloatArray]:
        return [g[idx] for idx in indices]

    return record_op("scatter_rows", data, parts, backward_fn)


def mul_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Scale row ``i`` of ``x`` by ``weights[i]``."""
    _require_2d("mul_rows", x)
    if weights.shape != (x.shape[0],):
        raise DimensionError("mul_rows", x.shape, weights.shape)
    x_data, w_data = x.data, weights.data

    def backward_fn(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g * w_data[:, None], (g * x_data).sum(axis=1)

    return record_op("mul_rows", x_data * w_data[:, None], (x, weights), backward_fn)


def pick(x: Tensor, rows: ArrayLike, cols: ArrayLike) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` into a vector."""
    _require_2d("pick", x)
    r, c = _as_index(rows), _as_index(cols)
    if r.size != c.size:
        raise DimensionError("pick", r.shape, c.shape)
    if r.size and (r.max() >= x.shape[0] or c.max() >= x.shape[1] or min(r.min(), c.min()) < 0):
        raise DimensionError("pick", x.shape, detail="index out of range")
    shape = x.data.shape

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        full = np.zeros(shape)
        np.add.at(full, (r, c), g)
        return (full,)

    return record_op("pick", x.data[r, c].copy(), (x,), backward_fn)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def depthwise_causal_conv1d(
    x: Tensor, weight: Tensor, left_context: FloatArray | None = None
) -> Tensor:
    """Per-channel causal convolution over frames.

    ``weight`` is K x C; output frame t sees input frames t-K+1..t. The K-1
    frames before the first one come from ``left_context`` (zeros if absent)
    and are treated as constants.
    """
    _require_2d("depthwise_causal_conv1d", x, weight)
    kernel, channels = weight.shape
    if x.shape[1] != channels:
        raise DimensionError("depthwise_causal_conv1d", x.shape, weight.shape)
    pad = kernel - 1
    if left_context is None:
        left_context = np.zeros((pad, channels))
    if left_context.shape != (pad, channels):
        raise DimensionError("depthwise_causal_conv1d", left_context.shape, (pad, channels))
    n_frames = x.shape[0]
    padded = np.concatenate([left_context, x.data], axis=0)
    windows = np.stack([padded[j : j + n_frames] for j in range(kernel)])  # K x T x C
    out = np.einsum("ktc,kc->tc", windows, weight.data)
    w_data = weight.data

    def backward_fn(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        d_padded = np.zeros_like(padded)
        for j in range(kernel):
            d_padded[j : j + n_frames] += g * w_data[j]
        dw = np.einsum("ktc,tc->kc", windows, g)
        return d_padded[pad:], dw

    return record_op("depthwise_causal_conv1d", out, (x, weight), backward_fn)


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data)


def sinusoidal_positions(n_frames: int, d_model: int, offset: int = 0) -> FloatArray:
    """Absolute sinusoidal position table for frames offset..offset+n_frames-1."""
    positions = np.arange(offset, offset + n_frames, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-math.log(10000.0) / d_model))
    table = np.zeros((n_frames, d_model))
    table[:, 0::2] = np.sin(positions * div)
    table[:, 1::2] = np.cos(positions * div[: d_model // 2])
    return table
