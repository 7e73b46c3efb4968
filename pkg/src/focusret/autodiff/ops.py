"""Differentiable primitives.

Each primitive computes its forward value with numpy, and, when a tape is
active and some input requires grad, pushes one tape entry whose backward
closure captures exactly the arrays listed in the policy table in
:mod:`focusret.autodiff.tape`.
"""

from __future__ import annotations

import builtins
import math
from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DegenerateInputError, DimensionError, VocabularyError
from .tape import current_tape
from .tensor import Tensor, as_tensor

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t.node_id = None
    t._tape = None
    return t


def _taping(*inputs: Tensor):
    tape = current_tape()
    if tape is None:
        return None
    for t in inputs:
        if t.requires_grad:
            return tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


# -- binary arithmetic -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = _wrap(a.data + b.data)
    tape = _taping(a, b)
    if tape is not None:
        sa, sb = a.shape, b.shape
        ra, rb = a.requires_grad, b.requires_grad

        def backward(g):
            return (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None)

        tape.push("add", (a, b), out, backward, 0)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = _wrap(a.data - b.data)
    tape = _taping(a, b)
    if tape is not None:
        sa, sb = a.shape, b.shape
        ra, rb = a.requires_grad, b.requires_grad

        def backward(g):
            return (_unbroadcast(g, sa) if ra else None, _unbroadcast(-g, sb) if rb else None)

        tape.push("sub", (a, b), out, backward, 0)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = _wrap(a.data * b.data)
    tape = _taping(a, b)
    if tape is not None:
        ra, rb = a.requires_grad, b.requires_grad
        sa, sb = a.shape, b.shape
        keep_a = a.data if rb else None
        keep_b = b.data if ra else None
        saved = (a.nbytes if rb else 0) + (b.nbytes if ra else 0)

        def backward(g):
            return (
                _unbroadcast(g * keep_b, sa) if ra else None,
                _unbroadcast(g * keep_a, sb) if rb else None,
            )

        tape.push("mul", (a, b), out, backward, saved)
    return out


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = _wrap(a.data * c)
    tape = _taping(a)
    if tape is not None:
        tape.push("scalar_mul", (a,), out, lambda g: (g * c,), 0)
    return out


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    ``a`` is retained only when ``b`` needs a gradient (dL/db = a^T g) and
    ``b`` only when ``a`` needs one (dL/da = g b^T).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        out = _wrap(np.matmul(a.data, b.data))
    except ValueError:
        raise DimensionError(f"matmul: cannot broadcast batch dims of {a.shape} and {b.shape}") from None
    tape = _taping(a, b)
    if tape is not None:
        ra, rb = a.requires_grad, b.requires_grad
        sa, sb = a.shape, b.shape
        keep_a = a.data if rb else None
        keep_b = b.data if ra else None
        saved = (a.nbytes if rb else 0) + (b.nbytes if ra else 0)

        def backward(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(keep_b, -1, -2)), sa) if ra else None
            gb = _unbroadcast(np.matmul(np.swapaxes(keep_a, -1, -2), g), sb) if rb else None
            return ga, gb

        tape.push("matmul", (a, b), out, backward, saved)
    return out


# -- elementwise -------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = _wrap(y)
    tape = _taping(a)
    if tape is not None:
        tape.push("exp", (a,), out, lambda g: (g * y,), y.size * 8)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = _wrap(np.log(x))
    tape = _taping(a)
    if tape is not None:
        tape.push("log", (a,), out, lambda g: (g / x,), x.size * 8)
    return out


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_K * (x + _GELU_C * x**3))
    out = _wrap(0.5 * x * (1.0 + t))
    tape = _taping(a)
    if tape is not None:

        def backward(g):
            th = np.tanh(_GELU_K * (x + _GELU_C * x**3))
            d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
            return (g * d,)

        tape.push("gelu", (a,), out, backward, x.size * 8)
    return out


def clamp_min(a, minimum: float = 0.0) -> Tensor:
    """``max(a, minimum)`` elementwise; the hinge ``[x]_+`` at the default."""
    a = as_tensor(a)
    y = np.maximum(a.data, minimum)
    out = _wrap(y)
    tape = _taping(a)
    if tape is not None:
        tape.push("clamp_min", (a,), out, lambda g: (g * (y > minimum),), y.size * 8)
    return out


# -- normalisations ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis("softmax", axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y)
    tape = _taping(a)
    if tape is not None:

        def backward(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        tape.push("softmax", (a,), out, backward, y.size * 8)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},) for input {x.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mean
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = _wrap(xhat * gamma.data + beta.data)
    tape = _taping(x, gamma, beta)
    if tape is not None:
        rx, rg, rb = x.requires_grad, gamma.requires_grad, beta.requires_grad
        keep = rx or rg
        xs = x.data if keep else None
        g_data = gamma.data
        saved = (x.size + 2 * mean.size) * 8 if keep else 0

        def backward(g):
            lead = tuple(range(g.ndim - 1))
            gb = g.sum(axis=lead) if rb else None
            if not keep:
                return None, None, gb
            xh = (xs - mean) * rstd
            gg = (g * xh).sum(axis=lead) if rg else None
            gx = None
            if rx:
                dxh = g * g_data
                gx = rstd * (
                    dxh
                    - dxh.mean(axis=-1, keepdims=True)
                    - xh * (dxh * xh).mean(axis=-1, keepdims=True)
                )
            return gx, gg, gb

        tape.push("layer_norm", (x, gamma, beta), out, backward, saved)
    return out


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis("l2_normalize", axis, a.ndim)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("l2_normalize: zero-norm vector")
    y = a.data / norm
    out = _wrap(y)
    tape = _taping(a)
    if tape is not None:

        def backward(g):
            return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

        tape.push("l2_normalize", (a,), out, backward, (y.size + norm.size) * 8)
    return out


# -- reductions and shape ops ------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_check_axis("sum", ax, a.ndim) for ax in axes)
    else:
        axes = tuple(range(a.ndim))
    out = _wrap(a.data.sum(axis=axes, keepdims=keepdims))
    tape = _taping(a)
    if tape is not None:
        shape = a.shape

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        tape.push("sum", (a,), out, backward, 0)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    axis = _check_axis("concat", axis, ts[0].ndim)
    try:
        out = _wrap(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    tape = _taping(*ts)
    if tape is not None:
        bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
        flags = [t.requires_grad for t in ts]

        def backward(g):
            parts = np.split(g, bounds, axis=axis)
            return tuple(p if f else None for p, f in zip(parts, flags))

        tape.push("concat", ts, out, backward, 0)
    return out


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (builtins.slice, int, np.integer)) or i is Ellipsis or i is None for i in items
    )


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic (view-style) indexing: ints, slices, ``...`` and ``None``."""
    a = as_tensor(a)
    if not _is_basic_index(index):
        raise ContractError("slice supports basic indexing only; use embedding_lookup to gather")
    try:
        y = np.array(a.data[index])
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {a.shape}") from None
    out = _wrap(y)
    tape = _taping(a)
    if tape is not None:
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            full[index] = g
            return (full,)

        tape.push("slice", (a,), out, backward, 0)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    out = _wrap(y)
    tape = _taping(a)
    if tape is not None:
        src = a.shape
        tape.push("reshape", (a,), out, lambda g: (g.reshape(src),), 0)
    return out


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)) or len(axes) != a.ndim:
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    out = _wrap(np.transpose(a.data, axes))
    tape = _taping(a)
    if tape is not None:
        inv = tuple(np.argsort([ax % a.ndim for ax in axes]))
        tape.push("transpose", (a,), out, lambda g: (np.transpose(g, inv),), 0)
    return out


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def embedding_lookup(table, indices, frozen_rows=None) -> Tensor:
    """Gather rows of a 2-d ``table`` by integer ``indices`` of any shape.

    Rows listed in ``frozen_rows`` never receive gradient even when the
    table is trainable.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup needs a 2-d table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].ravel()[0]
        raise VocabularyError(f"index {int(bad)} outside table of {vocab} rows")
    out = _wrap(table.data[idx])
    tape = _taping(table)
    if tape is not None:
        frozen = None if frozen_rows is None else np.asarray(frozen_rows, dtype=np.int64)
        shape = table.shape

        def backward(g):
            gt = np.zeros(shape)
            np.add.at(gt, idx.ravel(), g.reshape(-1, shape[1]))
            if frozen is not None and frozen.size:
                gt[frozen] = 0.0
            return (gt,)

        tape.push("embedding_lookup", (table,), out, backward, idx.size * 8)
    return out
