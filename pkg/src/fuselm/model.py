"""The full trainable system: encoder gate, transformer LM, dynamic fusion,
and both task heads, with a flat named-parameter registry."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, add, narrow, scale
from .encoder import LayerStack, gated_fuse, init_gate
from .fusion import DynamicFusionParams, fuse_all, fusion_coefficients
from .heads import AsrHead, SerHead, asr_step, ser_loss, ser_predict
from .heads import asr_loss as _asr_loss
from .slm import LMConfig, LMParams, Task, TaskPrompt, Vocab

ENCODER_MODES = ("gated", "fixed")
FUSION_MODES = ("dynamic", "last_layer")


@dataclass(frozen=True)
class ModelConfig:
    n_encoder_layers: int = 8
    speech_width: int = 32
    lm: LMConfig = LMConfig()
    n_emotions: int = 4
    prompt_len: int = 1
    beta: float = 0.5
    encoder_mode: str = "gated"
    fixed_layer: int = 8  # 1-based, used when encoder_mode == "fixed"
    fusion_mode: str = "dynamic"

    def __post_init__(self):
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder_mode must be one of {ENCODER_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.encoder_mode == "fixed" and not 1 <= self.fixed_layer <= self.n_encoder_layers:
            raise ValueError(
                f"fixed_layer {self.fixed_layer} out of range 1..{self.n_encoder_layers}"
            )

    def with_updates(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class SpeechLM:
    """Composed model; forward passes build a fresh tape-recorded graph."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int = 0):
        if vocab.prompt_len != cfg.prompt_len:
            raise ValueError("vocab prompt_len disagrees with model config")
        rng = np.random.default_rng([int(seed), 0xF05E])
        self.cfg = cfg
        self.vocab = vocab
        self.gate = init_gate(cfg.n_encoder_layers)
        self.lm = LMParams(cfg.lm, vocab, cfg.speech_width, rng)
        self.fusion = DynamicFusionParams(
            rng, cfg.lm.n_blocks, cfg.lm.d, beta=cfg.beta,
            nonlin=cfg.lm.nonlinearity,
        )
        self.asr_head = AsrHead(rng, cfg.lm.d, vocab.size)
        self.ser_head = SerHead(rng, cfg.lm.d, cfg.n_emotions)
        self._params = [("encoder.gate", self.gate)]
        self._params += [(n, p) for n, p in self.lm.named_parameters()]
        self._params += [(f"fusion.{n}", p) for n, p in self.fusion.named_parameters()]
        self._params += [(f"asr.{n}", p) for n, p in self.asr_head.named_parameters()]
        self._params += [(f"ser.{n}", p) for n, p in self.ser_head.named_parameters()]

    def named_parameters(self):
        return list(self._params)

    def parameter(self, name: str) -> Tensor:
        for n, p in self._params:
            if n == name:
                return p
        raise KeyError(name)

    def zero_grad(self) -> None:
        for _, p in self._params:
            p.zero_grad()

    # ---- forward pieces ----

    def encode_speech(self, stack: LayerStack) -> Tensor:
        if self.cfg.encoder_mode == "gated":
            return gated_fuse(stack, self.gate)
        return Tensor(stack.layer(self.cfg.fixed_layer))

    def _run(self, stack: LayerStack, task: Task, targets=None):
        prompt = TaskPrompt.for_task(task, self.vocab)
        lm_input = self.lm.assemble_input(self.encode_speech(stack), prompt, targets)
        layers = self.lm.encode_layers(lm_input)
        if self.cfg.fusion_mode == "dynamic":
            alpha = fusion_coefficients(layers, task, self.fusion)
            fused = fuse_all(layers, alpha)
        else:
            alpha = None
            fused = layers[-1]
        return lm_input, layers, alpha, fused

    def forward_fused(self, stack: LayerStack, task: Task, targets=None):
        """(LMInput, fused representation) for external probing."""
        lm_input, _, _, fused = self._run(stack, task, targets)
        return lm_input, fused

    def layer_outputs(self, stack: LayerStack, task: Task, targets=None):
        """(LMInput, per-layer outputs) for fusion-coefficient inspection."""
        prompt = TaskPrompt.for_task(task, self.vocab)
        lm_input = self.lm.assemble_input(self.encode_speech(stack), prompt, targets)
        return lm_input, self.lm.encode_layers(lm_input)

    # ---- losses ----

    def sample_loss(self, stack: LayerStack, task: Task, target) -> Tensor:
        if task is Task.ASR:
            targets = list(target)
            if not targets:
                raise ValueError("sample_loss: empty ASR target")
            lm_input, _, _, fused = self._run(stack, task, targets)
            bos = lm_input.bos_index
            rows = narrow(fused, 0, bos, bos + len(targets))
            return _asr_loss(rows, targets, self.asr_head)
        lm_input, _, _, fused = self._run(stack, task)
        row = narrow(fused, 0, lm_input.bos_index, lm_input.bos_index + 1)
        return ser_loss(row, int(target), self.ser_head)

    def batch_loss(self, batch) -> Tensor:
        """Mean of per-sample losses (each itself a per-token mean for ASR)."""
        losses = [
            self.sample_loss(stack, batch.task, target)
            for stack, target in batch.items()
        ]
        total = losses[0]
        for piece in losses[1:]:
            total = add(total, piece)
        return scale(total, 1.0 / len(losses))

    # ---- inference ----

    def predict_ser(self, stack: LayerStack) -> np.ndarray:
        lm_input, _, _, fused = self._run(stack, Task.SER)
        row = narrow(fused, 0, lm_input.bos_index, lm_input.bos_index + 1)
        return ser_predict(row, self.ser_head).data

    def greedy_decode(self, stack: LayerStack, max_len: int = 32):
        """Greedy autoregressive decode; ties break toward the lowest id.

        Returns (token_ids, truncated). Fusion coefficients are recomputed
        from the current layer outputs at every generation step.
        """
        generated: list[int] = []
        truncated = True
        for _ in range(max_len):
            lm_input, _, _, fused = self._run(stack, Task.ASR, generated)
            pos = lm_input.bos_index + len(generated)
            row = narrow(fused, 0, pos, pos + 1)
            dist = asr_step(row, self.asr_head).data
            token = int(np.argmax(dist))
            if token == self.vocab.eos:
                truncated = False
                break
            generated.append(token)
        return generated, truncated

    # ---- state ----

    def state_dict(self):
        return {name: np.array(p.data) for name, p in self._params}

    def load_state_dict(self, state) -> None:
        for name, p in self._params:
            if name not in state:
                raise KeyError(f"missing parameter {name} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name}: shape {arr.shape} != {p.data.shape}"
                )
            p.data = np.array(arr)
