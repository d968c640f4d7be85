"""Prompt-adaptive dynamic fusion over the LM's layer outputs.

Each coefficient mixes a task prior with an input-conditioned gate:

    alpha[m, t] = beta * sigma(lam[m, task]) + (1 - beta) * sigma(FFN_m(R_m[t]))

The per-layer gate FFN is shared across tasks; task conditioning reaches it
only through the prompt-conditioned layer outputs. Coefficients are
independent sigmoids, deliberately not normalized across layers.
"""
from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat,
    layer_mix,
    matmul,
    narrow,
    nonlinearity,
    scale,
    sigmoid,
    transpose,
)
from .slm import Task

TASK_COLUMN = {Task.ASR: 0, Task.SER: 1}


class GateFFN:
    """d -> d/4 -> 1 scalar gate, final layer zero-initialized."""

    def __init__(self, rng, d: int, nonlin: str):
        hidden = max(1, d // 4)
        self.nonlin = nonlin
        self.W1 = Tensor(rng.standard_normal((d, hidden)) / np.sqrt(d), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.W2 = Tensor(np.zeros((hidden, 1)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, r: Tensor) -> Tensor:
        act = nonlinearity(self.nonlin)
        return add(matmul(act(add(matmul(r, self.W1), self.b1)), self.W2), self.b2)

    def named_parameters(self):
        for name in ("W1", "b1", "W2", "b2"):
            yield name, getattr(self, name)


class DynamicFusionParams:
    """Task/layer priors lam, the mixing weight beta, and per-layer gate FFNs."""

    def __init__(self, rng, n_layers: int, d: int, beta: float = 0.5,
                 nonlin: str = "gelu"):
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {beta}")
        self.n_layers = n_layers
        self.beta = float(beta)
        self.lam = Tensor(np.zeros((n_layers, 2)), requires_grad=True)
        self.ffns = [GateFFN(rng, d, nonlin) for _ in range(n_layers)]

    def named_parameters(self):
        yield "lambda", self.lam
        for m, ffn in enumerate(self.ffns):
            for name, p in ffn.named_parameters():
                yield f"ffn{m}.{name}", p


def fusion_coefficients(layers, task: Task, params: DynamicFusionParams) -> Tensor:
    """Coefficient matrix alpha of shape (M, T) for the active task."""
    layers = list(layers)
    if len(layers) != params.n_layers:
        raise ShapeError(
            f"fusion_coefficients: {len(layers)} layer outputs vs "
            f"{params.n_layers} fusion layers"
        )
    col = TASK_COLUMN[task]
    prior = sigmoid(narrow(params.lam, 1, col, col + 1))  # (M, 1)
    gates = concat([ffn.forward(r) for ffn, r in zip(params.ffns, layers)], axis=1)
    gate = sigmoid(transpose(gates))  # (M, T)
    return add(scale(prior, params.beta), scale(gate, 1.0 - params.beta))


def fuse_all(layers, alpha: Tensor) -> Tensor:
    """Fused representation for every timestep, shape (T, d)."""
    return layer_mix(alpha, list(layers))


def fuse(layers, alpha: Tensor, t: int) -> Tensor:
    """Fused vector for one timestep, shape (1, d)."""
    layers = list(layers)
    if alpha.ndim != 2 or len(layers) != alpha.shape[0]:
        raise ShapeError(f"fuse: coefficient shape {alpha.shape} vs {len(layers)} layers")
    if not 0 <= t < alpha.shape[1]:
        raise ShapeError(f"fuse: timestep {t} out of range 0..{alpha.shape[1] - 1}")
    alpha_t = narrow(alpha, 1, t, t + 1)  # (M, 1)
    rows = [narrow(r, 0, t, t + 1) for r in layers]  # each (1, d)
    return layer_mix(alpha_t, rows)


def export_lambda(params: DynamicFusionParams, task: Task) -> np.ndarray:
    """Learned per-layer task preference sigma(lam[:, task]) as plain floats."""
    col = TASK_COLUMN[task]
    return 1.0 / (1.0 + np.exp(-params.lam.data[:, col]))
