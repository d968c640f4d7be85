"""Differentiable primitives.

Each primitive validates operand shapes, computes the forward value through
the active kernel backend, and, when a tape is live and some operand wants
gradients, records a closure producing per-operand gradients.
"""
from __future__ import annotations

import numpy as np

from .backends import kernels as K
from .tensor import ShapeError, Tensor, active_tape


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, *inputs) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    return out


def _record(out, inputs, backward_fn) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _make(data, a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _make(data, a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), backward)
    return out


def scale(x, c: float) -> Tensor:
    x = astensor(x)
    c = float(c)
    out = _make(x.data * c, x)
    _record(out, (x,), lambda g: (g * c,))
    return out


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = _make(K.matmul(a.data, b.data), a, b)

    def backward(g):
        g = np.ascontiguousarray(g)
        return (
            K.matmul_grad_a(g, b.data) if a.requires_grad else None,
            K.matmul_grad_b(a.data, g) if b.requires_grad else None,
        )

    _record(out, (a, b), backward)
    return out


def transpose(x) -> Tensor:
    x = astensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {x.shape}")
    out = _make(np.ascontiguousarray(x.data.T), x)
    _record(out, (x,), lambda g: (np.ascontiguousarray(g.T),))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis and t.shape[i] != ref[i] for i in range(t.ndim)
        ):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {ref} along axis {axis}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, *tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(
            np.ascontiguousarray(p) if t.requires_grad else None
            for t, p in zip(tensors, pieces)
        )

    _record(out, tuple(tensors), backward)
    return out


def concat_time(tensors) -> Tensor:
    """Concatenate (T_i, d) segments along the time axis."""
    return concat(tensors, axis=0)


def narrow(x, axis: int, start: int, stop: int) -> Tensor:
    x = astensor(x)
    if axis >= x.ndim or not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(
            f"narrow: range [{start}:{stop}] on axis {axis} invalid for shape {x.shape}"
        )
    index = tuple(
        slice(start, stop) if i == axis else slice(None) for i in range(x.ndim)
    )
    out = _make(np.ascontiguousarray(x.data[index]), x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    _record(out, (x,), backward)
    return out


def _as2d(a: np.ndarray):
    if a.ndim == 2:
        return a, a.shape
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1])), a.shape


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = astensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax: expected at least 1-d tensor")
    flat, shape = _as2d(x.data if x.ndim > 1 else x.data[None, :])
    p = K.softmax2d(flat)
    data = p.reshape(x.shape)
    out = _make(data, x)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(p.shape))
        return (K.softmax2d_grad(p, g2).reshape(x.shape),)

    _record(out, (x,), backward)
    return out


def sigmoid(x) -> Tensor:
    x = astensor(x)
    y = K.sigmoid(x.data)
    out = _make(y, x)
    _record(out, (x,), lambda g: (K.sigmoid_grad(y, g),))
    return out


def relu(x) -> Tensor:
    x = astensor(x)
    out = _make(K.relu(x.data), x)
    _record(out, (x,), lambda g: (K.relu_grad(x.data, g),))
    return out


def gelu(x) -> Tensor:
    """tanh-form smooth gating unit."""
    x = astensor(x)
    out = _make(K.gelu(x.data), x)
    _record(out, (x,), lambda g: (K.gelu_grad(x.data, g),))
    return out


_NONLINEARITIES = {"gelu": gelu, "relu": relu}


def nonlinearity(name: str):
    try:
        return _NONLINEARITIES[name]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {name!r}") from None


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization over the last axis with learnable gain/bias."""
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: shapes {x.shape}, {gain.shape}, {bias.shape} do not conform"
        )
    y, xhat, rstd = K.layer_norm2d(x.data, gain.data, bias.data, eps)
    out = _make(y, x, gain, bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        dx, dgain, dbias = K.layer_norm2d_grad(xhat, rstd, gain.data, g)
        return (
            dx if x.requires_grad else None,
            dgain if gain.requires_grad else None,
            dbias if bias.requires_grad else None,
        )

    _record(out, (x, gain, bias), backward)
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup; gradients scatter-add into the table."""
    table = astensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(
            f"embedding: table shape {table.shape}, ids shape {ids.shape} do not conform"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.shape[0]} rows"
        )
    out = _make(table.data[ids], table)

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    _record(out, (table,), backward)
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = astensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    if targets.size == 0:
        raise ShapeError("cross_entropy: empty target sequence")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ShapeError(
            f"cross_entropy: target id out of range for {logits.shape[1]} classes"
        )
    n = logits.shape[0]
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    nll = lse - x[np.arange(n), targets]
    out = _make(nll.mean(), logits)

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (p * (float(g) / n),)

    _record(out, (logits,), backward)
    return out


def weighted_sum(coeffs, mats) -> Tensor:
    """sum_i coeffs[i] * mats[i] for equally shaped tensors."""
    coeffs = astensor(coeffs)
    mats = [astensor(m) for m in mats]
    if coeffs.ndim != 1 or len(mats) != coeffs.shape[0]:
        raise ShapeError(
            f"weighted_sum: {len(mats)} operands vs coefficient shape {coeffs.shape}"
        )
    ref = mats[0].shape
    for m in mats[1:]:
        if m.shape != ref:
            raise ShapeError(f"weighted_sum: operand shapes {m.shape} != {ref}")
    stacked = np.stack([m.data for m in mats])
    data = np.tensordot(coeffs.data, stacked, axes=(0, 0))
    out = _make(data, coeffs, *mats)

    def backward(g):
        dc = None
        if coeffs.requires_grad:
            dc = np.array([float((g * m.data).sum()) for m in mats])
        return (dc,) + tuple(
            g * c if m.requires_grad else None
            for m, c in zip(mats, coeffs.data)
        )

    _record(out, (coeffs, *mats), backward)
    return out


def layer_mix(alpha, mats) -> Tensor:
    """Per-timestep weighted sum: out[t] = sum_m alpha[m, t] * mats[m][t]."""
    alpha = astensor(alpha)
    mats = [astensor(m) for m in mats]
    if alpha.ndim != 2 or len(mats) != alpha.shape[0]:
        raise ShapeError(
            f"layer_mix: {len(mats)} layers vs coefficient shape {alpha.shape}"
        )
    T = alpha.shape[1]
    for m in mats:
        if m.ndim != 2 or m.shape[0] != T:
            raise ShapeError(
                f"layer_mix: layer shape {m.shape} incompatible with {alpha.shape[0]}x{T} coefficients"
            )
    stacked = np.stack([m.data for m in mats])  # (M, T, d)
    data = np.einsum("mt,mtd->td", alpha.data, stacked)
    out = _make(data, alpha, *mats)

    def backward(g):
        da = None
        if alpha.requires_grad:
            da = np.einsum("td,mtd->mt", g, stacked)
        return (da,) + tuple(
            alpha.data[i][:, None] * g if m.requires_grad else None
            for i, m in enumerate(mats)
        )

    _record(out, (alpha, *mats), backward)
    return out


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = _make(x.data.reshape(shape), x)
    _record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def sum_all(x) -> Tensor:
    x = astensor(x)
    out = _make(x.data.sum(), x)
    _record(out, (x,), lambda g: (np.full_like(x.data, float(g)),))
    return out


def mean_all(x) -> Tensor:
    x = astensor(x)
    n = x.data.size
    if n == 0:
        raise ShapeError("mean_all: empty tensor")
    out = _make(x.data.mean(), x)
    _record(out, (x,), lambda g: (np.full_like(x.data, float(g) / n),))
    return out
