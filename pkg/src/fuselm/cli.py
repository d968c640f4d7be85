"""Operator commands: gen-data, train, eval, decode, export-fusion, run-ablation.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
error. Commands that write outputs also write the effective configuration
beside them.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import fusion
from .config import ConfigError, RunConfig
from .data import DataError, EMOTIONS, generate_dataset, read_manifest
from .encoder import read_stack
from .experiments import default_grid, parse_cell, run_ablation
from .metrics import evaluate_model
from .model import SpeechLM
from .slm import Task
from .train import CheckpointError, load_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="key=value config file with sections")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int, help="override the command's seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="fuselm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--inline", action="store_true",
                   help="reference stacks by seed instead of writing feature files")

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--train-manifest", help="training manifest path")
    p.add_argument("--val-manifest", help="validation manifest path")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("manifest")

    p = sub.add_parser("decode", help="decode one feature file")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("feature_file")
    p.add_argument("--task", choices=[t.value for t in Task], required=True)

    p = sub.add_parser("export-fusion",
                       help="per-task learned layer preferences, CSV")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest",
                   help="also summarize mean fusion coefficients over this set")

    p = sub.add_parser("run-ablation", help="train and evaluate the ablation grid")
    _add_common(p)
    p.add_argument("--cells", help="comma-separated encoder:fusion:task cells")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    return parser


def _load_config(args, seed_targets=()) -> RunConfig:
    cfg = RunConfig.load(args.config, args.overrides)
    if args.seed is not None:
        for section, key in seed_targets:
            cfg.set(section, key, str(args.seed))
    return cfg


def _write_effective(cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    cfg = RunConfig.load(None)
    text = ckpt.config_text
    if text:
        import configparser

        parser = configparser.ConfigParser()
        parser.read_string(text)
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    model = SpeechLM(cfg.model_config(), cfg.vocab(), seed=cfg.get_int("model", "init_seed"))
    model.load_state_dict(
        {n: t for n, t in ckpt.tensors.items() if not n.startswith("adam.")}
    )
    return model, cfg, ckpt


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, seed_targets=[("data", "seed")])
    out_dir = args.out or "."
    spec = cfg.synth_spec()
    vocab = cfg.vocab()
    seed = cfg.get_int("data", "seed")
    n_asr = cfg.get_int("data", "n_asr")
    n_ser = cfg.get_int("data", "n_ser")
    inline = args.inline or cfg.get_bool("data", "inline")
    manifest = generate_dataset(spec, n_asr, n_ser, seed, out_dir,
                                name="train", inline=inline, vocab=vocab)
    print(f"wrote {manifest}")
    val_frac = cfg.get_float("data", "val_frac")
    if val_frac > 0:
        n_val_asr = max(1, round(n_asr * val_frac)) if n_asr else 0
        n_val_ser = max(1, round(n_ser * val_frac)) if n_ser else 0
        val_manifest = generate_dataset(spec, n_val_asr, n_val_ser, seed + 1,
                                        out_dir, name="val", inline=inline,
                                        vocab=vocab)
        print(f"wrote {val_manifest}")
    _write_effective(cfg, out_dir)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args, seed_targets=[("train", "seed")])
    if args.train_manifest:
        cfg.set("data", "train_manifest", args.train_manifest)
    if args.val_manifest:
        cfg.set("data", "val_manifest", args.val_manifest)
    train_path = cfg.get("data", "train_manifest")
    if not train_path:
        raise UsageError("train: no training manifest (flag --train-manifest "
                         "or config data.train_manifest)")
    train_ds = read_manifest(train_path)
    val_path = cfg.get("data", "val_manifest")
    val_ds = read_manifest(val_path) if val_path else train_ds

    out_dir = args.out or "run"
    _write_effective(cfg, out_dir)
    model = SpeechLM(cfg.model_config(), train_ds.vocab,
                     seed=cfg.get_int("model", "init_seed"))
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(model, train_ds, val_ds, cfg.train_config(), out_dir,
                   config_text=cfg.to_text(), resume=resume)
    print(f"best checkpoint: {result.best_path} "
          f"(val loss {result.best_val_loss:.6f}, step {result.final_step})")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    dataset = read_manifest(args.manifest)
    if len(dataset) == 0:
        raise DataError(f"{args.manifest}: empty manifest")
    report = evaluate_model(model, dataset,
                            max_decode_len=cfg.get_int("eval", "max_decode_len"))
    sys.stdout.write(report.to_text())
    if args.out:
        _write_effective(cfg, args.out)
        report.write(os.path.join(args.out, "report"))
    return 0


def cmd_decode(args) -> int:
    model, _, _ = _model_from_checkpoint(args.checkpoint)
    if not os.path.exists(args.feature_file):
        raise DataError(f"feature file missing: {args.feature_file}")
    stack = read_stack(args.feature_file)
    if args.task == Task.ASR.value:
        ids, truncated = model.greedy_decode(stack)
        text = model.vocab.decode(ids)
        print(text + (" [truncated]" if truncated else ""))
    else:
        probs = model.predict_ser(stack)
        print(EMOTIONS[int(np.argmax(probs))])
    return 0


def cmd_export_fusion(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    lines = ["layer,asr,ser"]
    asr = fusion.export_lambda(model.fusion, Task.ASR)
    ser = fusion.export_lambda(model.fusion, Task.SER)
    for m in range(model.cfg.lm.n_blocks):
        lines.append(f"{m + 1},{asr[m]:.6f},{ser[m]:.6f}")
    if args.manifest:
        dataset = read_manifest(args.manifest)
        means = _mean_alpha(model, dataset)
        lines.append("")
        lines.append("layer,asr_mean_alpha,ser_mean_alpha")
        for m in range(model.cfg.lm.n_blocks):
            lines.append(f"{m + 1},{means[Task.ASR][m]:.6f},{means[Task.SER][m]:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "fusion.csv"), "w", encoding="utf-8") as fh:
            fh.write(text)
        _write_effective(cfg, args.out)
    sys.stdout.write(text)
    return 0


def _mean_alpha(model, dataset):
    """Mean input-conditioned coefficient per layer over a validation pass."""
    from .fusion import fusion_coefficients

    sums = {t: np.zeros(model.cfg.lm.n_blocks) for t in Task}
    counts = {t: 0 for t in Task}
    for sample in dataset.samples:
        task = sample.task
        _, layers = model.layer_outputs(dataset.stack(sample), task)
        alpha = fusion_coefficients(layers, task, model.fusion)
        sums[task] += alpha.data.mean(axis=1)
        counts[task] += 1
    return {
        t: (sums[t] / counts[t] if counts[t] else np.full(model.cfg.lm.n_blocks, np.nan))
        for t in Task
    }


def cmd_run_ablation(args) -> int:
    cfg = _load_config(args, seed_targets=[("train", "seed")])
    out_dir = args.out or "ablation"
    spec = cfg.synth_spec()
    if args.cells:
        cells = [parse_cell(c) for c in args.cells.split(",") if c]
    else:
        cells = default_grid(spec.n_layers, spec.paralinguistic_layer)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    _write_effective(cfg, out_dir)
    rows, _ = run_ablation(cells, seeds, cfg, out_dir)
    for row in rows:
        print(f"{row['cell']}\tseed={row['seed']}\t{row['status']}\t"
              f"wer={row['wer']}\tua={row['ua']}\twa={row['wa']}")
    print(f"results: {os.path.join(out_dir, 'results.tsv')}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "export-fusion": cmd_export_fusion,
    "run-ablation": cmd_run_ablation,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
