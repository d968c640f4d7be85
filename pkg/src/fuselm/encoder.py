"""Layered feature source and the learnable softmax gate over its layers.

The synthetic source stands in for a pretrained multi-layer speech encoder:
one layer linearly encodes the token sequence (content), one mid layer
linearly encodes the emotion (paralinguistic), the rest carry attenuated
mixtures plus noise. Real encoder stacks can be swapped in through the
binary feature-file format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .autodiff import ShapeError, Tensor, softmax, weighted_sum

STACK_MAGIC = b"HFSTK1"

# bleed of planted signals into neighbouring layers, per layer of distance
BLEED_DECAY = 0.4
# weak content copy mixed into the paralinguistic plant
CONTENT_IN_EMOTION = 0.3


@dataclass(frozen=True)
class SynthSpec:
    """Geometry and signal plan of the synthetic layer stacks."""

    n_layers: int = 8
    n_frames: int = 24
    width: int = 32
    content_layer: int = 8  # 1-based
    paralinguistic_layer: int = 3  # 1-based, below content_layer
    noise: float = 0.1
    vocab: int = 30
    n_emotions: int = 4
    len_min: int = 3
    len_max: int = 8
    codebook_seed: int = 1308

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("SynthSpec: need at least 2 layers")
        if not 1 <= self.paralinguistic_layer < self.content_layer <= self.n_layers:
            raise ValueError(
                "SynthSpec: need 1 <= paralinguistic_layer < content_layer <= n_layers, "
                f"got {self.paralinguistic_layer} and {self.content_layer}"
            )
        if self.n_frames < 1 or self.width < 1:
            raise ValueError("SynthSpec: n_frames and width must be positive")
        if self.noise < 0:
            raise ValueError("SynthSpec: noise must be nonnegative")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("SynthSpec: need 1 <= len_min <= len_max")

    def with_updates(self, **kw) -> "SynthSpec":
        return replace(self, **kw)


class LayerStack:
    """All per-layer hidden states of one utterance, shape (L, T0, d0)."""

    def __init__(self, layers):
        arr = np.asarray(layers, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 2:
            raise ValueError(f"LayerStack: expected (L>=2, T0, d0) array, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("LayerStack: non-finite values")
        self.data = arr

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def layer(self, i: int) -> np.ndarray:
        """1-based layer access."""
        if not 1 <= i <= self.n_layers:
            raise IndexError(f"layer index {i} out of range 1..{self.n_layers}")
        return self.data[i - 1]


@lru_cache(maxsize=8)
def _codebooks(vocab: int, n_emotions: int, width: int, seed: int):
    rng = np.random.default_rng([seed, vocab, n_emotions, width])
    token_codes = rng.standard_normal((vocab, width))
    emotion_codes = rng.standard_normal((n_emotions, width))
    return token_codes, emotion_codes


def codebooks(spec: SynthSpec):
    return _codebooks(spec.vocab, spec.n_emotions, spec.width, spec.codebook_seed)


def frame_tokens(token_ids, n_frames: int) -> np.ndarray:
    """Token index owning each frame; frames split into contiguous groups."""
    n = len(token_ids)
    t = np.arange(n_frames)
    idx = np.minimum(n - 1, t * n // n_frames)
    return np.asarray(token_ids, dtype=np.int64)[idx]


def synth_layer_stack(sample, spec: SynthSpec, seed=None) -> LayerStack:
    """Deterministic layer stack for one sample.

    The sample supplies task, seed, and whichever of token_ids/label exists;
    the missing side is drawn as a hidden nuisance latent from the sample
    seed so that every stack carries both content and paralinguistic signal.
    """
    seed = sample.seed if seed is None else seed
    if seed is None:
        raise ValueError("synth_layer_stack: sample without a seed")
    rng = np.random.default_rng(int(seed))

    token_ids = sample.token_ids
    if token_ids is None:
        n = int(rng.integers(spec.len_min, spec.len_max + 1))
        token_ids = rng.integers(0, spec.vocab, size=n)
    label = sample.label
    if label is None:
        label = int(rng.integers(spec.n_emotions))

    token_codes, emotion_codes = codebooks(spec)
    content = token_codes[frame_tokens(token_ids, spec.n_frames)]  # (T0, d0)
    emotion = np.broadcast_to(emotion_codes[label], content.shape)

    lc, lp = spec.content_layer, spec.paralinguistic_layer
    layers = np.empty((spec.n_layers, spec.n_frames, spec.width))
    for i in range(1, spec.n_layers + 1):
        if i == lc:
            base = content
        elif i == lp:
            base = emotion + CONTENT_IN_EMOTION * content
        else:
            base = (
                BLEED_DECAY ** abs(i - lc) * content
                + BLEED_DECAY ** abs(i - lp) * emotion
            )
        layers[i - 1] = base
    if spec.noise > 0:
        layers += spec.noise * rng.standard_normal(layers.shape)
    return LayerStack(layers)


def init_gate(n_layers: int) -> Tensor:
    """Gate logits start at zero: uniform fusion."""
    return Tensor(np.zeros(n_layers), requires_grad=True)


def gated_fuse(stack, gate: Tensor) -> Tensor:
    """Softmax-weighted sum of the stack's layers, differentiable in both."""
    if isinstance(stack, LayerStack):
        layers = [Tensor(stack.data[i]) for i in range(stack.n_layers)]
    else:
        layers = list(stack)
    if gate.ndim != 1 or gate.shape[0] != len(layers):
        raise ShapeError(
            f"gated_fuse: gate length {gate.shape} vs {len(layers)} layers"
        )
    return weighted_sum(softmax(gate), layers)


def write_stack(path, stack: LayerStack) -> None:
    L, T0, d0 = stack.data.shape
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<III", L, T0, d0))
        fh.write(stack.data.astype("<f8").tobytes())


def read_stack(path) -> LayerStack:
    with open(path, "rb") as fh:
        magic = fh.read(len(STACK_MAGIC))
        if magic != STACK_MAGIC:
            raise ValueError(f"{path}: not a feature stack file")
        header = fh.read(12)
        if len(header) != 12:
            raise ValueError(f"{path}: truncated header")
        L, T0, d0 = struct.unpack("<III", header)
        body = fh.read(L * T0 * d0 * 8)
        if len(body) != L * T0 * d0 * 8:
            raise ValueError(f"{path}: truncated body")
        data = np.frombuffer(body, dtype="<f8").reshape(L, T0, d0)
    return LayerStack(data.copy())
