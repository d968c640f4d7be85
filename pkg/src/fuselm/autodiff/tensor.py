"""Dense float64 tensors plus the tape that records primitive applications.

The tape is rebuilt for every forward pass: ops append (output, inputs,
backward_fn) entries while a tape is active, and Tape.backward walks the
record in reverse creation order, which is a valid reverse topological
order because inputs always exist before the op that consumes them.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "produced")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.produced = False  # True once an op created this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor with shape {self.data.shape} is not scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        out.produced = True
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Accumulate d(seed*loss)/d(leaf) into each leaf tensor's .grad."""
        if loss.data.shape != ():
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(float(seed))}
        leaves: dict[int, Tensor] = {}
        if not loss.produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, contrib in zip(inputs, backward_fn(g)):
                if contrib is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                if not inp.produced:
                    leaves[key] = inp
        for key, tensor in leaves.items():
            if key in grads:
                tensor.accumulate_grad(grads[key])
