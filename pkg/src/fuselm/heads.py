"""Task-specific output layers: autoregressive ASR head and SER classifier."""
from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    matmul,
    reshape,
    softmax,
)


class AsrHead:
    def __init__(self, rng, d: int, vocab_size: int):
        self.W = Tensor(rng.standard_normal((d, vocab_size)) / np.sqrt(d),
                        requires_grad=True)
        self.b = Tensor(np.zeros(vocab_size), requires_grad=True)

    def named_parameters(self):
        yield "W", self.W
        yield "b", self.b

    def logits(self, fused: Tensor) -> Tensor:
        return add(matmul(fused, self.W), self.b)


class SerHead:
    def __init__(self, rng, d: int, n_classes: int = 4):
        self.W = Tensor(rng.standard_normal((d, n_classes)) / np.sqrt(d),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)

    def named_parameters(self):
        yield "W", self.W
        yield "b", self.b

    def logits(self, fused: Tensor) -> Tensor:
        return add(matmul(fused, self.W), self.b)


def _as_row(r: Tensor) -> Tensor:
    if r.ndim == 1:
        return reshape(r, (1, r.shape[0]))
    if r.ndim == 2 and r.shape[0] == 1:
        return r
    raise ShapeError(f"expected a single fused vector, got shape {r.shape}")


def asr_step(r_t: Tensor, head: AsrHead) -> Tensor:
    """Next-token distribution at one decoding step."""
    dist = softmax(head.logits(_as_row(r_t)))
    return reshape(dist, (dist.shape[1],))


def asr_loss(fused: Tensor, targets, head: AsrHead) -> Tensor:
    """Mean token-level NLL with teacher forcing; row t predicts target t."""
    targets = list(targets)
    if fused.ndim != 2 or fused.shape[0] != len(targets):
        raise ShapeError(
            f"asr_loss: {fused.shape[0] if fused.ndim == 2 else '?'} fused rows "
            f"vs {len(targets)} targets"
        )
    return cross_entropy(head.logits(fused), targets)


def ser_predict(r_1: Tensor, head: SerHead) -> Tensor:
    """Emotion distribution read at the first decoding position."""
    dist = softmax(head.logits(_as_row(r_1)))
    return reshape(dist, (dist.shape[1],))


def ser_loss(r_1: Tensor, label: int, head: SerHead) -> Tensor:
    return cross_entropy(head.logits(_as_row(r_1)), [int(label)])
