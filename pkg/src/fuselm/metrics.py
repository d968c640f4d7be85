"""Evaluation: word error rate for ASR, unweighted/weighted accuracy for SER."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .slm import Task


def edit_distance(ref, hyp) -> int:
    """Minimal edit distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def wer(reference, hypothesis) -> float:
    """(substitutions + deletions + insertions) / |reference|; may exceed 1."""
    reference = list(reference)
    if not reference:
        raise ValueError("wer: empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape:
        raise ValueError("confusion_matrix: length mismatch")
    if labs.size and (labs.min() < 0 or labs.max() >= n_classes):
        raise ValueError("confusion_matrix: label out of range")
    if preds.size and (preds.min() < 0 or preds.max() >= n_classes):
        raise ValueError("confusion_matrix: prediction out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labs, preds), 1)
    return cm


def ua_wa(predictions, labels, n_classes: int):
    """Unweighted accuracy (mean per-class recall over classes present)
    and weighted accuracy (overall fraction correct)."""
    cm = confusion_matrix(predictions, labels, n_classes)
    total = cm.sum()
    if total == 0:
        raise ValueError("ua_wa: no samples")
    counts = cm.sum(axis=1)
    present = counts > 0
    recalls = np.diag(cm)[present] / counts[present]
    return float(recalls.mean()), float(np.trace(cm) / total)


@dataclass
class EvalReport:
    asr: dict | None = None
    ser: dict | None = None

    def to_text(self) -> str:
        lines = []
        if self.asr is not None:
            lines.append(f"asr.utterances={self.asr['n']}")
            lines.append(f"asr.ref_tokens={self.asr['ref_tokens']}")
            lines.append(f"asr.edits={self.asr['edits']}")
            lines.append(f"asr.wer={self.asr['wer']:.6f}")
        if self.ser is not None:
            lines.append(f"ser.utterances={self.ser['n']}")
            lines.append(f"ser.ua={self.ser['ua']:.6f}")
            lines.append(f"ser.wa={self.ser['wa']:.6f}")
            for i, row in enumerate(self.ser["confusion"]):
                lines.append(f"ser.confusion.{i}={','.join(str(v) for v in row)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"asr": self.asr, "ser": self.ser}, indent=2, sort_keys=True)

    def write(self, base_path) -> None:
        with open(f"{base_path}.txt", "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(f"{base_path}.json", "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def evaluate_model(model, dataset, max_decode_len: int = 16) -> EvalReport:
    """Corpus metrics: greedy-decode WER over ASR samples, UA/WA over SER."""
    if (model.vocab.alphabet != dataset.vocab.alphabet
            or model.vocab.prompt_len != dataset.vocab.prompt_len):
        raise ValueError("evaluate_model: checkpoint and manifest tokenizers disagree")
    report = EvalReport()
    asr_samples = dataset.by_task(Task.ASR)
    if asr_samples:
        edits = 0
        ref_tokens = 0
        for s in asr_samples:
            hyp, _ = model.greedy_decode(dataset.stack(s), max_len=max_decode_len)
            edits += edit_distance(s.token_ids, hyp)
            ref_tokens += len(s.token_ids)
        report.asr = {
            "n": len(asr_samples),
            "ref_tokens": ref_tokens,
            "edits": edits,
            "wer": edits / ref_tokens,
        }
    ser_samples = dataset.by_task(Task.SER)
    if ser_samples:
        preds = [int(np.argmax(model.predict_ser(dataset.stack(s)))) for s in ser_samples]
        labels = [s.label for s in ser_samples]
        n_classes = model.cfg.n_emotions
        ua, wa = ua_wa(preds, labels, n_classes)
        cm = confusion_matrix(preds, labels, n_classes)
        report.ser = {
            "n": len(ser_samples),
            "ua": ua,
            "wa": wa,
            "confusion": cm.tolist(),
        }
    return report
