"""Multi-modal transformer LM: structured input assembly and per-layer outputs.

Input order is fixed: projected speech frames, task prompt tokens, BOS, then
(during training) teacher-forced target embeddings. Attention is causal over
the whole sequence so the ASR head can generate autoregressively.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat,
    concat_time,
    embedding,
    layer_norm,
    matmul,
    narrow,
    nonlinearity,
    scale,
    softmax,
    transpose,
)


class Task(enum.Enum):
    ASR = "asr"
    SER = "ser"


ALPHABET = "abcdefghijklmnopqrstuvwxyz '-."


class Vocab:
    """Character tokens plus reserved specials and per-task prompt blocks.

    Layout: [text tokens][PAD][BOS][EOS][ASR prompt block][SER prompt block].
    Prompt ids are disjoint from text ids by construction.
    """

    def __init__(self, alphabet: str = ALPHABET, prompt_len: int = 1):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("Vocab: duplicate symbols in alphabet")
        if prompt_len < 1:
            raise ValueError("Vocab: prompt_len must be >= 1")
        self.alphabet = alphabet
        self.prompt_len = prompt_len
        self.n_text = len(alphabet)
        self.pad = self.n_text
        self.bos = self.n_text + 1
        self.eos = self.n_text + 2
        self._prompt_base = self.n_text + 3
        self.size = self._prompt_base + 2 * prompt_len
        self._to_id = {c: i for i, c in enumerate(alphabet)}

    def encode(self, text: str):
        try:
            return tuple(self._to_id[c] for c in text)
        except KeyError as e:
            raise ValueError(f"Vocab: symbol {e.args[0]!r} not in alphabet") from None

    def decode(self, ids) -> str:
        return "".join(self.alphabet[i] for i in ids if i < self.n_text)

    def prompt_ids(self, task: Task):
        block = 0 if task is Task.ASR else 1
        start = self._prompt_base + block * self.prompt_len
        return tuple(range(start, start + self.prompt_len))


@dataclass(frozen=True)
class TaskPrompt:
    task: Task
    token_ids: tuple

    @classmethod
    def for_task(cls, task: Task, vocab: Vocab) -> "TaskPrompt":
        return cls(task=task, token_ids=vocab.prompt_ids(task))


@dataclass
class LMInput:
    """Embedded input sequence with recoverable segment boundaries."""

    embedded: Tensor
    speech_len: int
    prompt_len: int
    n_targets: int

    @property
    def bos_index(self) -> int:
        return self.speech_len + self.prompt_len

    @property
    def first_decode_position(self) -> int:
        return self.bos_index

    @property
    def total_len(self) -> int:
        return self.speech_len + self.prompt_len + 1 + self.n_targets


def sinusoidal_encoding(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


_MASK_CACHE: dict = {}


def causal_mask(n: int) -> Tensor:
    """Additive mask, -1e30 strictly above the diagonal."""
    m = _MASK_CACHE.get(n)
    if m is None:
        m = Tensor(np.triu(np.full((n, n), -1e30), k=1))
        _MASK_CACHE[n] = m
    return m


class NonFiniteActivation(RuntimeError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activation after transformer block {layer}")
        self.layer = layer


def _linear_init(rng, n_in, n_out):
    return Tensor(rng.standard_normal((n_in, n_out)) / np.sqrt(n_in), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


class Block:
    """One transformer block: causal self-attention + FFN, post-norm."""

    def __init__(self, rng, d: int, heads: int, ffn: int, nonlin: str):
        if d % heads != 0:
            raise ValueError(f"Block: width {d} not divisible by {heads} heads")
        self.d, self.heads, self.head_dim = d, heads, d // heads
        self.nonlin = nonlin
        self.Wq, self.Wk, self.Wv, self.Wo = (_linear_init(rng, d, d) for _ in range(4))
        self.bq, self.bk, self.bv, self.bo = (_zeros(d) for _ in range(4))
        self.ln1_gain, self.ln1_bias = Tensor(np.ones(d), requires_grad=True), _zeros(d)
        self.W1, self.b1 = _linear_init(rng, d, ffn), _zeros(ffn)
        self.W2, self.b2 = _linear_init(rng, ffn, d), _zeros(d)
        self.ln2_gain, self.ln2_bias = Tensor(np.ones(d), requires_grad=True), _zeros(d)

    def named_parameters(self):
        for name in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
                     "ln1_gain", "ln1_bias", "W1", "b1", "W2", "b2",
                     "ln2_gain", "ln2_bias"):
            yield name, getattr(self, name)

    def _attention(self, x: Tensor, mask: Tensor) -> Tensor:
        q = add(matmul(x, self.Wq), self.bq)
        k = add(matmul(x, self.Wk), self.bk)
        v = add(matmul(x, self.Wv), self.bv)
        outs = []
        inv_sqrt = 1.0 / np.sqrt(self.head_dim)
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = narrow(q, 1, lo, hi)
            kh = narrow(k, 1, lo, hi)
            vh = narrow(v, 1, lo, hi)
            scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), mask)
            outs.append(matmul(softmax(scores), vh))
        o = concat(outs, axis=1)
        return add(matmul(o, self.Wo), self.bo)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        act = nonlinearity(self.nonlin)
        h = layer_norm(add(x, self._attention(x, mask)), self.ln1_gain, self.ln1_bias)
        f = add(matmul(act(add(matmul(h, self.W1), self.b1)), self.W2), self.b2)
        return layer_norm(add(h, f), self.ln2_gain, self.ln2_bias)


@dataclass(frozen=True)
class LMConfig:
    n_blocks: int = 4
    d: int = 64
    heads: int = 4
    ffn: int = 256
    nonlinearity: str = "gelu"
    max_len: int = 512

    def __post_init__(self):
        if self.n_blocks < 2:
            raise ValueError("LMConfig: need at least 2 blocks")


# Configuration at the scale reported for the full-size system; constructed
# in tests but never trained there.
PAPER_SCALE = LMConfig(n_blocks=12, d=768, heads=12, ffn=2048)


class LMParams:
    """Embeddings, speech projection, positional table and the block stack."""

    def __init__(self, cfg: LMConfig, vocab: Vocab, speech_width: int, rng):
        self.cfg = cfg
        self.vocab = vocab
        self.speech_width = speech_width
        self.emb = Tensor(rng.standard_normal((vocab.size, cfg.d)) * 0.5,
                          requires_grad=True)
        self.proj_W = _linear_init(rng, speech_width, cfg.d)
        self.proj_b = _zeros(cfg.d)
        self.blocks = [
            Block(rng, cfg.d, cfg.heads, cfg.ffn, cfg.nonlinearity)
            for _ in range(cfg.n_blocks)
        ]
        self.pos = sinusoidal_encoding(cfg.max_len, cfg.d)

    @property
    def n_blocks(self) -> int:
        return self.cfg.n_blocks

    def named_parameters(self):
        yield "proj.W", self.proj_W
        yield "proj.b", self.proj_b
        yield "embed.table", self.emb
        for i, blk in enumerate(self.blocks):
            for name, p in blk.named_parameters():
                yield f"block{i}.{name}", p

    def assemble_input(self, fused: Tensor, prompt: TaskPrompt, targets=None) -> LMInput:
        """Concatenate speech, prompt, BOS and teacher-forced target segments."""
        if fused.ndim != 2 or fused.shape[1] != self.speech_width:
            raise ShapeError(
                f"assemble_input: fused shape {fused.shape} vs speech width {self.speech_width}"
            )
        if fused.shape[0] == 0:
            raise ShapeError("assemble_input: empty speech segment")
        targets = tuple(targets) if targets is not None else ()
        speech = add(matmul(fused, self.proj_W), self.proj_b)
        tail_ids = list(prompt.token_ids) + [self.vocab.bos] + list(targets)
        tail = embedding(self.emb, tail_ids)
        seq = concat_time([speech, tail])
        total = seq.shape[0]
        if total > self.pos.shape[0]:
            raise ShapeError(f"assemble_input: sequence length {total} exceeds "
                             f"positional table {self.pos.shape[0]}")
        seq = add(seq, Tensor(self.pos[:total]))
        return LMInput(
            embedded=seq,
            speech_len=fused.shape[0],
            prompt_len=len(prompt.token_ids),
            n_targets=len(targets),
        )

    def encode_layers(self, lm_input: LMInput):
        """All post-block contextual representations R_1..R_M."""
        mask = causal_mask(lm_input.embedded.shape[0])
        h = lm_input.embedded
        outputs = []
        for i, blk in enumerate(self.blocks):
            h = blk.forward(h, mask)
            if not np.all(np.isfinite(h.data)):
                raise NonFiniteActivation(i + 1)
            outputs.append(h)
        return outputs
