"""Ablation grid: encoder modes x fusion modes x task modes under one budget.

Every cell trains on the same generated datasets (manifests are hash-pinned
into the results table) with identical step budgets, so row orderings are
attributable to architecture choices alone.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import fusion
from .config import RunConfig
from .data import Dataset, generate_dataset, manifest_sha256, read_manifest
from .metrics import evaluate_model
from .model import SpeechLM
from .slm import Task
from .train import TrainingDivergedError, load_checkpoint, train

TASK_MODES = ("asr", "ser", "multitask")

_VAL_SEED_OFFSET = 500009


@dataclass(frozen=True)
class AblationSpec:
    encoder_mode: str  # "gated" or "fixed"
    fusion_mode: str  # "dynamic" or "last_layer"
    task_mode: str  # "asr", "ser" or "multitask"
    fixed_layer: int | None = None

    def __post_init__(self):
        if self.encoder_mode not in ("gated", "fixed"):
            raise ValueError(f"bad encoder mode {self.encoder_mode!r}")
        if self.fusion_mode not in ("dynamic", "last_layer"):
            raise ValueError(f"bad fusion mode {self.fusion_mode!r}")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"bad task mode {self.task_mode!r}")
        if (self.encoder_mode == "fixed") != (self.fixed_layer is not None):
            raise ValueError("fixed_layer is required iff encoder_mode is 'fixed'")

    @property
    def cell_id(self) -> str:
        enc = f"fixed{self.fixed_layer}" if self.encoder_mode == "fixed" else "gated"
        return f"{enc}:{self.fusion_mode}:{self.task_mode}"


def parse_cell(text: str) -> AblationSpec:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"cell must be encoder:fusion:task, got {text!r}")
    enc, fus, task = parts
    if enc.startswith("fixed"):
        return AblationSpec("fixed", fus, task, fixed_layer=int(enc[5:]))
    return AblationSpec(enc, fus, task)


def default_grid(n_layers: int, paralinguistic_layer: int):
    """Single-task and multitask rows over three encoder choices, plus the
    full dynamic-fusion multitask cell."""
    encoders = [("fixed", paralinguistic_layer), ("fixed", n_layers), ("gated", None)]
    cells = []
    for task_mode in TASK_MODES:
        for enc, k in encoders:
            cells.append(AblationSpec(enc, "last_layer", task_mode, fixed_layer=k))
    cells.append(AblationSpec("gated", "dynamic", "multitask"))
    return cells


def lm_band(encoder_layer: int, n_encoder_layers: int, n_blocks: int) -> int:
    """Proportional depth mapping from an encoder layer to an LM block (1-based)."""
    band = round(encoder_layer * n_blocks / n_encoder_layers)
    return min(max(band, 1), n_blocks)


def _subset(dataset: Dataset, task_mode: str) -> Dataset:
    if task_mode == "multitask":
        return dataset
    task = Task.ASR if task_mode == "asr" else Task.SER
    return Dataset(dataset.by_task(task), dataset.spec, dataset.vocab,
                   base_dir=dataset.base_dir)


def run_cell(spec: AblationSpec, run_cfg: RunConfig, train_ds: Dataset,
             val_ds: Dataset, seed: int, out_dir):
    """Train and evaluate one grid cell; returns a result row dict."""
    model_cfg = run_cfg.model_config().with_updates(
        encoder_mode=spec.encoder_mode,
        fixed_layer=spec.fixed_layer or run_cfg.model_config().fixed_layer,
        fusion_mode=spec.fusion_mode,
    )
    tcfg = run_cfg.train_config().with_updates(seed=seed)
    model = SpeechLM(model_cfg, train_ds.vocab, seed=seed)
    row = {
        "cell": spec.cell_id,
        "seed": seed,
        "status": "ok",
        "wer": math.nan,
        "ua": math.nan,
        "wa": math.nan,
    }
    try:
        result = train(model, _subset(train_ds, spec.task_mode),
                       _subset(val_ds, spec.task_mode), tcfg, out_dir,
                       config_text=run_cfg.to_text())
        best = load_checkpoint(result.best_path)
        model.load_state_dict(
            {n: t for n, t in best.tensors.items() if not n.startswith("adam.")}
        )
        report = evaluate_model(model, _subset(val_ds, spec.task_mode),
                                max_decode_len=run_cfg.get_int("eval", "max_decode_len"))
        if report.asr is not None:
            row["wer"] = report.asr["wer"]
        if report.ser is not None:
            row["ua"] = report.ser["ua"]
            row["wa"] = report.ser["wa"]
    except TrainingDivergedError as e:
        row["status"] = f"diverged@{e.step}"
        return row, None
    if spec.fusion_mode == "dynamic":
        table = np.stack([
            fusion.export_lambda(model.fusion, Task.ASR),
            fusion.export_lambda(model.fusion, Task.SER),
        ], axis=1)
        np.savetxt(os.path.join(out_dir, "fusion_lambda.csv"), table,
                   delimiter=",", header="asr,ser", comments="")
    else:
        table = None
    return row, table


def run_ablation(cells, seeds, run_cfg: RunConfig, out_dir):
    """Run every (cell, seed) on shared per-seed datasets; write results.tsv."""
    os.makedirs(out_dir, exist_ok=True)
    spec = run_cfg.synth_spec()
    vocab = run_cfg.vocab()
    n_asr = run_cfg.get_int("data", "n_asr")
    n_ser = run_cfg.get_int("data", "n_ser")
    val_frac = run_cfg.get_float("data", "val_frac")
    n_val_asr = max(1, round(n_asr * val_frac)) if n_asr else 0
    n_val_ser = max(1, round(n_ser * val_frac)) if n_ser else 0

    rows = []
    lambda_tables = {}
    for seed in seeds:
        data_dir = os.path.join(out_dir, f"data-seed{seed}")
        train_mani = generate_dataset(spec, n_asr, n_ser, seed, data_dir,
                                      name="train", inline=True, vocab=vocab)
        val_mani = generate_dataset(spec, n_val_asr, n_val_ser,
                                    seed + _VAL_SEED_OFFSET, data_dir,
                                    name="val", inline=True, vocab=vocab)
        shas = (manifest_sha256(train_mani), manifest_sha256(val_mani))
        train_ds = read_manifest(train_mani)
        val_ds = read_manifest(val_mani)
        for cell in cells:
            cell_dir = os.path.join(out_dir, f"{cell.cell_id.replace(':', '_')}-seed{seed}")
            row, table = run_cell(cell, run_cfg, train_ds, val_ds, seed, cell_dir)
            row["train_sha"], row["val_sha"] = shas
            rows.append(row)
            if table is not None:
                lambda_tables[(cell.cell_id, seed)] = table

    columns = ("cell", "seed", "status", "wer", "ua", "wa", "train_sha", "val_sha")
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_fmt(row[c]) for c in columns))
    with open(os.path.join(out_dir, "results.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows, lambda_tables


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)
