"""Batch-interleaved optimization: Adam with warmup + linear decay, gradient
accumulation, validation-based checkpoint selection, versioned checkpoints."""
from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tape
from .data import interleave
from .slm import NonFiniteActivation, Task

CKPT_MAGIC = b"HFCKPT1"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, task: Task, sample_ids):
        ids = ",".join(sample_ids[:4])
        super().__init__(
            f"non-finite loss at optimizer step {step} on a {task.value} batch "
            f"(samples {ids})"
        )
        self.step = step
        self.task = task
        self.sample_ids = tuple(sample_ids)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    decay_horizon: int = 0  # 0: ramp+decay spans the planned step budget
    accumulation: int = 4
    interleave_ratio: int = 1
    seed: int = 0
    val_every: int = 50
    max_steps: int = 0  # 0: no cap
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("TrainConfig: epochs and batch_size must be >= 1")
        if self.accumulation < 1:
            raise ValueError("TrainConfig: accumulation must be >= 1")
        if self.warmup_steps < 1:
            raise ValueError("TrainConfig: warmup_steps must be >= 1")
        if self.decay_horizon and self.decay_horizon <= self.warmup_steps:
            raise ValueError("TrainConfig: decay_horizon must exceed warmup_steps")
        if self.peak_lr <= 0:
            raise ValueError("TrainConfig: peak_lr must be positive")

    def with_updates(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def lr_at(step: int, peak: float, warmup: int, horizon: int) -> float:
    """Linear ramp 0 -> peak over warmup steps, then linear decay to 0 at
    horizon, zero beyond."""
    if step < 0:
        raise ValueError(f"lr_at: negative step {step}")
    if not 1 <= warmup < horizon:
        raise ValueError(f"lr_at: need 1 <= warmup < horizon, got {warmup}, {horizon}")
    if step <= warmup:
        return peak * (step / warmup)
    if step >= horizon:
        return 0.0
    return peak * (horizon - step) / (horizon - warmup)


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        """One update over every registered parameter; missing gradients are
        treated as exact zeros (moments still decay)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g if p.grad is not None else 0.0)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


@dataclass
class Checkpoint:
    version: int
    config_text: str
    step: int
    val_loss: float
    tensors: dict


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", ckpt.version)]
    cfg = ckpt.config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<Q", ckpt.step))
    chunks.append(struct.pack("<d", ckpt.val_loss))
    chunks.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CKPT_MAGIC) + 8:
        raise CheckpointTruncatedError(f"{path}: file too short")
    body, crc_bytes = raw[:-4], raw[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version > CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} newer than supported {CKPT_VERSION}"
        )
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    (step,) = r.unpack("<Q")
    (val_loss,) = r.unpack("<d")
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape)
        tensors[name] = data.copy()
    if r.off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return Checkpoint(version=version, config_text=config_text, step=step,
                      val_loss=val_loss, tensors=tensors)


def checkpoint_from(model, adam: Adam, step: int, val_loss: float,
                    config_text: str = "") -> Checkpoint:
    tensors = model.state_dict()
    for name, _ in model.named_parameters():
        tensors[f"adam.m.{name}"] = np.array(adam.m[name])
        tensors[f"adam.v.{name}"] = np.array(adam.v[name])
    return Checkpoint(version=CKPT_VERSION, config_text=config_text, step=step,
                      val_loss=val_loss, tensors=tensors)


def restore_into(model, adam: Adam, ckpt: Checkpoint) -> int:
    """Load parameters and optimizer moments; returns the stored step."""
    params = {n: t for n, t in ckpt.tensors.items() if not n.startswith("adam.")}
    model.load_state_dict(params)
    for name, _ in model.named_parameters():
        adam.m[name] = np.array(ckpt.tensors[f"adam.m.{name}"])
        adam.v[name] = np.array(ckpt.tensors[f"adam.v.{name}"])
    adam.t = ckpt.step
    return ckpt.step


def validation_loss(model, dataset, batch_size: int):
    """Mean of per-task mean batch losses, equally weighted across tasks."""
    per_task = []
    detail = {}
    for task in (Task.ASR, Task.SER):
        batches = dataset.make_batches(task, batch_size)
        if not batches:
            continue
        losses = [float(model.batch_loss(b).data) for b in batches]
        task_loss = float(np.mean(losses))
        detail[task.value] = task_loss
        per_task.append(task_loss)
    if not per_task:
        raise ValueError("validation_loss: empty dataset")
    return float(np.mean(per_task)), detail


@dataclass
class TrainResult:
    best_path: str
    best_val_loss: float
    final_step: int
    steps_run: int


def _grad_global_norm(params) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def train(model, train_ds, val_ds, cfg: TrainConfig, out_dir,
          config_text: str = "", resume: Checkpoint | None = None) -> TrainResult:
    """Run the interleaved training loop and keep the lowest-validation-loss
    checkpoint at <out_dir>/best.ckpt. Metrics go to <out_dir>/metrics.log."""
    os.makedirs(out_dir, exist_ok=True)
    adam = Adam(model.named_parameters())
    step = 0
    if resume is not None:
        step = restore_into(model, adam, resume)

    n_asr = len(train_ds.by_task(Task.ASR))
    n_ser = len(train_ds.by_task(Task.SER))
    if n_asr == 0 and n_ser == 0:
        raise ValueError("train: empty training dataset")
    batches_per_epoch = math.ceil(n_asr / cfg.batch_size) + math.ceil(n_ser / cfg.batch_size)
    steps_per_epoch = math.ceil(batches_per_epoch / cfg.accumulation)
    planned = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        planned = min(planned, cfg.max_steps)
    horizon = cfg.decay_horizon or max(cfg.warmup_steps + 1, step + planned)

    best_val = math.inf
    best_path = os.path.join(out_dir, "best.ckpt")
    log_path = os.path.join(out_dir, "metrics.log")
    steps_run = 0
    stop = False

    last_validated = -1

    def validate(at_step: int, lr: float, log):
        nonlocal best_val, last_validated
        last_validated = at_step
        val_total, detail = validation_loss(model, val_ds, cfg.batch_size)
        for task_name, task_loss in sorted(detail.items()):
            log.write(f"{at_step}\tval/{task_name}\t{task_loss:.17g}\t{lr:.17g}\n")
        log.write(f"{at_step}\tval/mean\t{val_total:.17g}\t{lr:.17g}\n")
        if val_total < best_val:
            best_val = val_total
            save_checkpoint(
                checkpoint_from(model, adam, at_step, val_total, config_text),
                best_path,
            )

    with open(log_path, "a", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            if stop:
                break
            rng = np.random.default_rng([cfg.seed, 0xE9, epoch])
            asr_batches = train_ds.make_batches(Task.ASR, cfg.batch_size, rng)
            ser_batches = train_ds.make_batches(Task.SER, cfg.batch_size, rng)
            stream = interleave(asr_batches, ser_batches, cfg.interleave_ratio)
            for start in range(0, len(stream), cfg.accumulation):
                group = stream[start : start + cfg.accumulation]
                adam.zero_grad()
                group_losses = []
                for batch in group:
                    try:
                        with Tape() as tape:
                            loss = model.batch_loss(batch)
                        value = float(loss.data)
                    except NonFiniteActivation as e:
                        raise TrainingDivergedError(
                            step + 1, batch.task, [s.id for s in batch.samples]
                        ) from e
                    if not math.isfinite(value):
                        raise TrainingDivergedError(
                            step + 1, batch.task, [s.id for s in batch.samples]
                        )
                    tape.backward(loss, seed=1.0 / len(group))
                    group_losses.append((batch.task, value))
                step += 1
                lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps, horizon)
                if cfg.clip_norm > 0:
                    norm = _grad_global_norm(adam.params)
                    if norm > cfg.clip_norm:
                        factor = cfg.clip_norm / norm
                        for _, p in adam.params:
                            if p.grad is not None:
                                p.grad = p.grad * factor
                adam.step(lr)
                steps_run += 1
                for task, value in group_losses:
                    log.write(f"{step}\t{task.value}\t{value:.17g}\t{lr:.17g}\n")
                if cfg.val_every and step % cfg.val_every == 0:
                    validate(step, lr, log)
                if cfg.max_steps and steps_run >= cfg.max_steps:
                    stop = True
                    break
        if last_validated != step:
            final_lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps, horizon) if step else 0.0
            validate(step, final_lr, log)

    return TrainResult(best_path=best_path, best_val_loss=best_val,
                       final_step=step, steps_run=steps_run)
