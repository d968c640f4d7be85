"""Finite-difference verification of tape gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


class GradCheckError(RuntimeError):
    """The function under check produced a non-finite forward value."""


def grad_check(f, inputs, h: float = 1e-5, coords_per_input=None, seed: int = 0):
    """Max relative error between tape gradients and central differences.

    f must map the given Tensors to a scalar Tensor built from primitives.
    The error for one coordinate is |analytic - numeric| / max(1, |numeric|);
    the maximum over all checked coordinates is returned. coords_per_input
    limits the check to a random coordinate subset per input (None = all).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"grad_check: step h={h} outside [1e-6, 1e-4]")
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ValueError("grad_check: every input must be a Tensor with requires_grad")
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check: non-finite input value")
        t.zero_grad()

    with Tape() as tape:
        out = f(*inputs)
    if not np.isfinite(out.data):
        raise GradCheckError("grad_check: non-finite forward value")
    tape.backward(out)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in inputs
    ]
    for t in inputs:
        t.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        if coords_per_input is None or flat.size <= coords_per_input:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_input, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f(*inputs).data)
            flat[i] = orig - h
            lo = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise GradCheckError("grad_check: non-finite forward value during probing")
            numeric = (hi - lo) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
