"""Synthetic datasets, manifest I/O, batching and the interleaved batch stream.

A manifest is line-delimited UTF-8, one sample per line:

    <id> TAB <task> TAB <feature-ref> TAB <target>

where feature-ref is "seed:<int>" (stack synthesized on demand) or
"file:<relative path>" (stack stored in the binary feature format). Dataset
metadata lives in a sibling "<manifest>.meta" file as key=value lines.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .encoder import LayerStack, SynthSpec, read_stack, synth_layer_stack, write_stack
from .slm import ALPHABET, Task, Vocab

EMOTIONS = ("happy", "sad", "angry", "neutral")

MANIFEST_FORMAT = "HFMAN1"


class DataError(RuntimeError):
    """Manifest or feature data is malformed or missing."""


@dataclass(frozen=True)
class Sample:
    id: str
    task: Task
    feature_ref: str
    seed: int | None = None
    token_ids: tuple | None = None
    label: int | None = None

    def __post_init__(self):
        has_text = self.token_ids is not None
        has_label = self.label is not None
        if self.task is Task.ASR and not (has_text and not has_label):
            raise ValueError(f"sample {self.id}: ASR sample needs a transcript only")
        if self.task is Task.SER and not (has_label and not has_text):
            raise ValueError(f"sample {self.id}: SER sample needs a label only")


@dataclass
class Batch:
    """Single-task minibatch with padded target arrays."""

    task: Task
    samples: tuple
    stacks: tuple  # LayerStack per sample
    targets: tuple  # per-sample teacher sequence (ASR) or int label (SER)
    padded_targets: np.ndarray
    target_mask: np.ndarray

    def __len__(self):
        return len(self.samples)

    def items(self):
        return zip(self.stacks, self.targets)


class Dataset:
    """Samples plus everything needed to materialize their feature stacks."""

    def __init__(self, samples, spec: SynthSpec, vocab: Vocab, base_dir: str = "."):
        self.samples = list(samples)
        self.spec = spec
        self.vocab = vocab
        self.base_dir = base_dir
        self._cache: dict[str, LayerStack] = {}
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")

    def __len__(self):
        return len(self.samples)

    def by_task(self, task: Task):
        return [s for s in self.samples if s.task is task]

    def stack(self, sample: Sample) -> LayerStack:
        cached = self._cache.get(sample.id)
        if cached is not None:
            return cached
        if sample.feature_ref.startswith("seed:"):
            st = synth_layer_stack(sample, self.spec)
        elif sample.feature_ref.startswith("file:"):
            path = os.path.join(self.base_dir, sample.feature_ref[5:])
            if not os.path.exists(path):
                raise DataError(f"feature file missing: {path}")
            st = read_stack(path)
        else:
            raise DataError(f"sample {sample.id}: bad feature ref {sample.feature_ref!r}")
        self._cache[sample.id] = st
        return st

    def train_target(self, sample: Sample):
        if sample.task is Task.ASR:
            return tuple(sample.token_ids) + (self.vocab.eos,)
        return int(sample.label)

    def make_batches(self, task: Task, batch_size: int, rng=None):
        """Chunk one task's samples into batches, optionally shuffled first."""
        samples = self.by_task(task)
        if rng is not None:
            order = rng.permutation(len(samples))
            samples = [samples[i] for i in order]
        return [
            self._build_batch(task, samples[i : i + batch_size])
            for i in range(0, len(samples), batch_size)
        ]

    def _build_batch(self, task: Task, samples) -> Batch:
        stacks = tuple(self.stack(s) for s in samples)
        targets = tuple(self.train_target(s) for s in samples)
        if task is Task.ASR:
            width = max(len(t) for t in targets)
            padded = np.full((len(samples), width), self.vocab.pad, dtype=np.int64)
            mask = np.zeros((len(samples), width), dtype=bool)
            for i, t in enumerate(targets):
                padded[i, : len(t)] = t
                mask[i, : len(t)] = True
        else:
            padded = np.asarray(targets, dtype=np.int64).reshape(-1, 1)
            mask = np.ones_like(padded, dtype=bool)
        return Batch(
            task=task,
            samples=tuple(samples),
            stacks=stacks,
            targets=targets,
            padded_targets=padded,
            target_mask=mask,
        )


def generate_samples(spec: SynthSpec, n_asr: int, n_ser: int, seed: int,
                     vocab: Vocab, name: str = "train"):
    """Draw sample records; transcripts uniform over token sequences,
    labels near-uniform over the emotion classes. Deterministic per seed."""
    if n_asr < 0 or n_ser < 0:
        raise ValueError("sample counts must be nonnegative")
    rng = np.random.default_rng([int(seed), 0xDA7A])
    samples = []
    for i in range(n_asr):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        ids = tuple(int(x) for x in rng.integers(0, spec.vocab, size=length))
        s = int(rng.integers(2**62))
        samples.append(Sample(
            id=f"{name}-asr-{i:05d}", task=Task.ASR,
            feature_ref=f"seed:{s}", seed=s, token_ids=ids,
        ))
    for i in range(n_ser):
        label = int(rng.integers(len(EMOTIONS)))
        s = int(rng.integers(2**62))
        samples.append(Sample(
            id=f"{name}-ser-{i:05d}", task=Task.SER,
            feature_ref=f"seed:{s}", seed=s, label=label,
        ))
    return samples


def _meta_text(spec: SynthSpec, vocab: Vocab) -> str:
    lines = [
        f"format={MANIFEST_FORMAT}",
        f"layers={spec.n_layers}",
        f"frames={spec.n_frames}",
        f"width={spec.width}",
        f"content_layer={spec.content_layer}",
        f"paralinguistic_layer={spec.paralinguistic_layer}",
        f"noise={spec.noise!r}",
        f"vocab={spec.vocab}",
        f"emotions={spec.n_emotions}",
        f"len_min={spec.len_min}",
        f"len_max={spec.len_max}",
        f"codebook_seed={spec.codebook_seed}",
        f"alphabet={vocab.alphabet}",
        f"prompt_len={vocab.prompt_len}",
        f"emotion_names={','.join(EMOTIONS)}",
    ]
    return "\n".join(lines) + "\n"


def write_manifest(path, samples, spec: SynthSpec, vocab: Vocab) -> None:
    """Write manifest atomically (no partial file on failure) plus its meta."""
    lines = []
    for s in samples:
        if s.task is Task.ASR:
            target = vocab.decode(s.token_ids)
        else:
            target = EMOTIONS[s.label]
        lines.append(f"{s.id}\t{s.task.value}\t{s.feature_ref}\t{target}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, path)
    with open(f"{path}.meta", "w", encoding="utf-8") as fh:
        fh.write(_meta_text(spec, vocab))


def read_manifest(path) -> Dataset:
    meta_path = f"{path}.meta"
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    if not os.path.exists(meta_path):
        raise DataError(f"manifest meta not found: {meta_path}")
    meta = {}
    with open(meta_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            meta[key] = value
    if meta.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{meta_path}: unsupported format {meta.get('format')!r}")
    spec = SynthSpec(
        n_layers=int(meta["layers"]),
        n_frames=int(meta["frames"]),
        width=int(meta["width"]),
        content_layer=int(meta["content_layer"]),
        paralinguistic_layer=int(meta["paralinguistic_layer"]),
        noise=float(meta["noise"]),
        vocab=int(meta["vocab"]),
        n_emotions=int(meta["emotions"]),
        len_min=int(meta["len_min"]),
        len_max=int(meta["len_max"]),
        codebook_seed=int(meta["codebook_seed"]),
    )
    vocab = Vocab(meta["alphabet"], prompt_len=int(meta.get("prompt_len", 1)))
    emotion_names = tuple(meta["emotion_names"].split(","))

    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            sid, task_str, ref, target = parts
            try:
                task = Task(task_str)
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown task {task_str!r}") from None
            seed = int(ref[5:]) if ref.startswith("seed:") else None
            if task is Task.ASR:
                token_ids = vocab.encode(target)
                if any(t >= spec.vocab for t in token_ids):
                    raise DataError(f"{path}:{lineno}: token id out of range")
                samples.append(Sample(id=sid, task=task, feature_ref=ref,
                                      seed=seed, token_ids=token_ids))
            else:
                if target not in emotion_names:
                    raise DataError(f"{path}:{lineno}: unknown emotion {target!r}")
                samples.append(Sample(id=sid, task=task, feature_ref=ref,
                                      seed=seed, label=emotion_names.index(target)))
    return Dataset(samples, spec, vocab, base_dir=os.path.dirname(os.path.abspath(path)))


def generate_dataset(spec: SynthSpec, n_asr: int, n_ser: int, seed: int,
                     out_dir, name: str = "train", inline: bool = False,
                     vocab: Vocab | None = None) -> str:
    """Create samples, write features (unless inline) and the manifest.

    Returns the manifest path. Feature files land under <out_dir>/features/.
    """
    vocab = vocab or Vocab(ALPHABET[: spec.vocab] if spec.vocab <= len(ALPHABET) else ALPHABET)
    if vocab.n_text != spec.vocab:
        raise ValueError("vocab size disagrees with synth spec")
    samples = generate_samples(spec, n_asr, n_ser, seed, vocab, name=name)
    os.makedirs(out_dir, exist_ok=True)
    if not inline:
        feat_dir = os.path.join(out_dir, "features")
        os.makedirs(feat_dir, exist_ok=True)
        materialized = []
        for s in samples:
            rel = os.path.join("features", f"{s.id}.bin")
            write_stack(os.path.join(out_dir, rel), synth_layer_stack(s, spec))
            materialized.append(Sample(
                id=s.id, task=s.task, feature_ref=f"file:{rel}",
                seed=s.seed, token_ids=s.token_ids, label=s.label,
            ))
        samples = materialized
    manifest_path = os.path.join(out_dir, f"{name}.manifest")
    write_manifest(manifest_path, samples, spec, vocab)
    return manifest_path


def manifest_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def interleave(asr_batches, ser_batches, ratio: int = 1, seed=None,
               shuffle: bool = False):
    """Deterministic stream: ratio ASR batches then one SER batch, cycling.

    When one stream runs out the rest of the other is emitted in order. An
    empty stream on one side is allowed (single-task training); both empty
    is an error. With shuffle=True each stream is permuted first using seed.
    """
    asr_batches, ser_batches = list(asr_batches), list(ser_batches)
    if not isinstance(ratio, int) or ratio < 1:
        raise ValueError(f"interleave: ratio must be an integer >= 1, got {ratio}")
    if not asr_batches and not ser_batches:
        raise ValueError("interleave: both streams empty")
    if shuffle:
        rng = np.random.default_rng([0 if seed is None else int(seed), 0x51EA])
        asr_batches = [asr_batches[i] for i in rng.permutation(len(asr_batches))]
        ser_batches = [ser_batches[i] for i in rng.permutation(len(ser_batches))]
    out = []
    ia = is_ = 0
    while ia < len(asr_batches) or is_ < len(ser_batches):
        if ia < len(asr_batches):
            out.extend(asr_batches[ia : ia + ratio])
            ia += ratio
        if is_ < len(ser_batches):
            out.append(ser_batches[is_])
            is_ += 1
    return out
