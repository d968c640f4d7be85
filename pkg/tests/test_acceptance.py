"""Acceptance suite: one test per criterion, each printing a PASS line.

Budgets: the gradient-integrity check runs the full model at reduced widths
so that central differences over every parameter coordinate finish inside
a minute; the routing experiment runs the calibrated desk-scale budget.
"""
import math
import time
import numpy as np
import pytest

from fuselm.autodiff import Tape, Tensor, grad_check
from fuselm.cli import main as cli_main
from fuselm.config import RunConfig
from fuselm.data import Dataset, generate_samples
from fuselm.encoder import gated_fuse
from fuselm.experiments import lm_band, parse_cell, run_ablation
from fuselm.fusion import fusion_coefficients
from fuselm.metrics import edit_distance, ua_wa
from fuselm.model import SpeechLM
from fuselm.slm import Task
from fuselm.train import (
    Adam,
    TrainConfig,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)

def _report(criterion: str, detail: str = ""):
    print(f"\n[{criterion}] PASS {detail}")


# ---------------------------------------------------------------- A1

GRADCHECK_OVERRIDES = [
    "synth.layers=4", "synth.frames=6", "synth.width=6",
    "synth.content_layer=4", "synth.paralinguistic_layer=2",
    "synth.vocab=10", "synth.len_min=2", "synth.len_max=3",
    "model.blocks=2", "model.width=16", "model.heads=2", "model.ffn=32",
]


class TestA1GradientIntegrity:
    def test_end_to_end_gradient_vs_central_differences(self):
        start = time.monotonic()
        cfg = RunConfig.load(overrides=GRADCHECK_OVERRIDES)
        spec, vocab = cfg.synth_spec(), cfg.vocab()
        samples = generate_samples(spec, 1, 1, seed=0, vocab=vocab)
        ds = Dataset(samples, spec, vocab)
        model = SpeechLM(cfg.model_config(), vocab, seed=0)
        params = [p for _, p in model.named_parameters()]

        worst = 0.0
        for task in (Task.ASR, Task.SER):
            batch = ds.make_batches(task, 1)[0]

            def f(*_):
                return model.batch_loss(batch)

            worst = max(worst, grad_check(f, params))
        elapsed = time.monotonic() - start
        assert worst < 1e-4, f"end-to-end gradient error {worst}"
        assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
        _report("A1", f"end-to-end max rel err {worst:.3e} in {elapsed:.1f}s "
                      f"({sum(p.data.size for p in params)} coordinates, both tasks)")

    def test_per_primitive_checks(self):
        from test_autodiff import _composite_cases

        worst = 0.0
        for seed in range(10):
            for name, (f, inputs) in _composite_cases(np.random.default_rng(seed)).items():
                err = grad_check(f, inputs)
                assert err < 1e-5, f"{name} at seed {seed}: {err}"
                worst = max(worst, err)
        _report("A1", f"per-primitive max rel err {worst:.3e} over 10 seeds")


# ---------------------------------------------------------------- A2

class TestA2FusionAlgebra:
    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(0)
        layers = [Tensor(rng.standard_normal((5, 4))) for _ in range(6)]
        w = rng.standard_normal(6)
        base = gated_fuse(layers, Tensor(w)).data
        for c in (-3.0, 0.125, 40.0):
            shifted = gated_fuse(layers, Tensor(w + c)).data
            assert np.max(np.abs(shifted - base)) <= 1e-12
        _report("A2", "gate shift invariance <= 1e-12")

    def test_convex_combination_bound(self):
        rng = np.random.default_rng(1)
        stacked = rng.standard_normal((6, 5, 4))
        out = gated_fuse([Tensor(h) for h in stacked],
                         Tensor(rng.standard_normal(6))).data
        assert np.all(out <= stacked.max(axis=0) + 1e-12)
        assert np.all(out >= stacked.min(axis=0) - 1e-12)
        _report("A2", "convex combination bound holds entrywise")

    def test_alpha_spot_values(self):
        from fuselm.fusion import DynamicFusionParams

        rng = np.random.default_rng(2)
        layers = [Tensor(rng.standard_normal((3, 8))) for _ in range(2)]

        params = DynamicFusionParams(np.random.default_rng(0), 2, 8, beta=0.5)
        alpha = fusion_coefficients(layers, Task.ASR, params).data
        assert np.max(np.abs(alpha - 0.5)) <= 1e-12

        for ffn in params.ffns:
            ffn.W1.data[:] = 0.0
            ffn.b1.data[:] = 0.0
            ffn.W2.data[:] = 0.0
            ffn.b2.data[:] = math.log(3.0)
        alpha = fusion_coefficients(layers, Task.SER, params).data
        assert np.max(np.abs(alpha - 0.625)) <= 1e-12
        _report("A2", "alpha = 0.5 at neutral init, 0.625 at FFN output ln 3")


# ---------------------------------------------------------------- A3

class TestA3TaskGradientIsolation:
    def _window(self, model, ds, task, n_batches=4):
        model.zero_grad()
        batches = ds.make_batches(task, 4)[:n_batches]
        for batch in batches:
            with Tape() as tape:
                loss = model.batch_loss(batch)
            tape.backward(loss, seed=1.0 / len(batches))

    def test_isolation_both_directions(self):
        cfg = RunConfig.load()
        spec, vocab = cfg.synth_spec(), cfg.vocab()
        ds = Dataset(generate_samples(spec, 16, 16, seed=0, vocab=vocab), spec, vocab)
        model = SpeechLM(cfg.model_config(), vocab, seed=0)

        def grad(name):
            g = model.parameter(name).grad
            return np.zeros(1) if g is None else g

        self._window(model, ds, Task.SER)
        assert np.all(grad("asr.W") == 0.0) and np.all(grad("asr.b") == 0.0)
        lam = model.parameter("fusion.lambda").grad
        assert np.all(lam[:, 0] == 0.0)
        assert np.any(grad("encoder.gate") != 0.0)
        for i in range(model.cfg.lm.n_blocks):
            assert np.any(grad(f"block{i}.Wq") != 0.0)

        self._window(model, ds, Task.ASR)
        assert np.all(grad("ser.W") == 0.0) and np.all(grad("ser.b") == 0.0)
        # lambda gradients now live only in the ASR column beyond the SER
        # residue of the previous window; rebuild from clean state instead
        model.zero_grad()
        self._window(model, ds, Task.ASR)
        lam = model.parameter("fusion.lambda").grad
        assert np.all(lam[:, 1] == 0.0) and np.any(lam[:, 0] != 0.0)
        assert np.any(grad("encoder.gate") != 0.0)
        _report("A3", "SER window zeroes ASR head and lambda_asr; "
                      "trunk and gate stay live (and symmetrically)")


# ---------------------------------------------------------------- A4

# Calibrated difficulty: noise and transcript length keep both task losses
# live for the whole budget, so the fusion coefficients keep receiving
# gradient (at the default noise both tasks saturate early and the layer
# priors stay at their neutral 0.5). l_p stays mid-band and l_c = L.
A4_OVERRIDES = [
    "synth.noise=0.6", "synth.len_min=4", "synth.len_max=8",
    "data.n_asr=2000", "data.n_ser=2000", "data.val_frac=0.1",
    "train.batch_size=16", "train.accumulation=1", "train.warmup=100",
    "train.max_steps=2200", "train.epochs=10", "train.val_every=550",
    "train.peak_lr=0.0015", "train.horizon=2200",
    "eval.max_decode_len=12",
]


class TestA4RoutingReproduction:
    def test_routing_and_ordering_majority(self, tmp_path):
        start = time.monotonic()
        cfg = RunConfig.load(overrides=A4_OVERRIDES)
        spec = cfg.synth_spec()
        assert spec.content_layer == spec.n_layers  # l_c = L
        band = lm_band(spec.paralinguistic_layer, spec.n_layers,
                       cfg.model_config().lm.n_blocks)
        cells = [parse_cell("gated:dynamic:multitask"),
                 parse_cell("gated:last_layer:multitask")]
        seeds = [0, 1, 2]
        rows, tables = run_ablation(cells, seeds, cfg, tmp_path / "grid")
        by = {(r["cell"], r["seed"]): r for r in rows}

        votes_a = votes_b = 0
        detail = []
        for seed in seeds:
            tab = tables[("gated:dynamic:multitask", seed)]
            asr_peak = int(np.argmax(tab[:, 0])) + 1
            ser_peak = int(np.argmax(tab[:, 1])) + 1
            # (a) SER's max within one layer of the band l_p maps to; the
            # ASR max strictly deeper than SER's
            ok_a = abs(ser_peak - band) <= 1 and asr_peak > ser_peak
            dyn = by[("gated:dynamic:multitask", seed)]
            sta = by[("gated:last_layer:multitask", seed)]
            assert dyn["status"] == "ok" and sta["status"] == "ok"
            ok_b = dyn["wer"] <= sta["wer"] and dyn["ua"] >= sta["ua"]
            votes_a += ok_a
            votes_b += ok_b
            detail.append(
                f"seed {seed}: ser_peak={ser_peak} asr_peak={asr_peak} "
                f"{'ok' if ok_a else 'MISS'}; wer {dyn['wer']:.3f}<= {sta['wer']:.3f} "
                f"ua {dyn['ua']:.3f}>={sta['ua']:.3f} {'ok' if ok_b else 'MISS'}"
            )
        elapsed = time.monotonic() - start
        assert elapsed < 1800.0, f"routing experiment took {elapsed:.0f}s"
        assert votes_a >= 2, f"(a) routing majority failed: {detail}"
        assert votes_b >= 2, f"(b) ordering majority failed: {detail}"
        _report("A4", f"(a) {votes_a}/3 seeds, (b) {votes_b}/3 seeds, "
                      f"{elapsed:.0f}s; " + " | ".join(detail))


# ---------------------------------------------------------------- A5

class TestA5MetricOracles:
    def test_wer_against_brute_force(self):
        from test_metrics import brute_force_distance

        rng = np.random.default_rng(0)
        for _ in range(1000):
            ref = tuple(rng.integers(0, 5, size=rng.integers(1, 7)))
            hyp = tuple(rng.integers(0, 5, size=rng.integers(0, 7)))
            assert edit_distance(ref, hyp) == brute_force_distance(ref, hyp)
        _report("A5", "wer DP equals brute-force recursion on 1000 pairs")

    def test_ua_wa_against_counting(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 50))
            c = int(rng.integers(2, 6))
            labels = rng.integers(0, c, size=n)
            preds = rng.integers(0, c, size=n)
            ua, wa = ua_wa(preds, labels, c)
            per_class = [float((preds[labels == k] == k).mean())
                         for k in range(c) if (labels == k).any()]
            assert ua == pytest.approx(float(np.mean(per_class)))
            assert wa == pytest.approx(float((preds == labels).mean()))
        _report("A5", "ua/wa equal counting oracles on 1000 random sets")

    def test_worked_example(self):
        labels = [0, 0] + [1] * 6
        preds = [0, 1] + [1] * 6
        ua, wa = ua_wa(preds, labels, 2)
        assert ua == pytest.approx(0.75) and wa == pytest.approx(0.875)
        _report("A5", "worked example UA=0.75 WA=0.875 reproduces")


# ---------------------------------------------------------------- A6

A6_OVERRIDES = [
    "synth.layers=4", "synth.frames=8", "synth.width=8",
    "synth.content_layer=4", "synth.paralinguistic_layer=2",
    "synth.len_min=2", "synth.len_max=4",
    "model.blocks=2", "model.width=16", "model.heads=2", "model.ffn=32",
]


class TestA6ScheduleAndTrainerContracts:
    def test_lr_boundaries_exact(self):
        assert lr_at(0, 0.123, 2000, 10000) == 0.0
        assert lr_at(2000, 0.123, 2000, 10000) == 0.123
        assert lr_at(10000, 0.123, 2000, 10000) == 0.0
        _report("A6", "lr_at boundary values exact")

    def test_accumulation_matches_big_batch(self):
        cfg = RunConfig.load(overrides=A6_OVERRIDES)
        spec, vocab = cfg.synth_spec(), cfg.vocab()
        ds = Dataset(generate_samples(spec, 8, 0, seed=2, vocab=vocab), spec, vocab)

        model_a = SpeechLM(cfg.model_config(), vocab, seed=5)
        adam_a = Adam(model_a.named_parameters())
        model_a.zero_grad()
        for b in ds.make_batches(Task.ASR, 2):
            with Tape() as tape:
                loss = model_a.batch_loss(b)
            tape.backward(loss, seed=0.25)
        adam_a.step(1e-3)

        model_b = SpeechLM(cfg.model_config(), vocab, seed=5)
        adam_b = Adam(model_b.named_parameters())
        model_b.zero_grad()
        with Tape() as tape:
            loss = model_b.batch_loss(ds.make_batches(Task.ASR, 8)[0])
        tape.backward(loss)
        adam_b.step(1e-3)

        worst = 0.0
        for (na, pa), (_, pb) in zip(model_a.named_parameters(),
                                     model_b.named_parameters()):
            worst = max(worst, float(np.max(np.abs(pa.data - pb.data))))
        assert worst < 1e-10, worst
        _report("A6", f"accumulation=4 equals one 4x batch step (max diff {worst:.2e})")

    def test_fixed_seed_training_bitwise_reproducible(self, tmp_path):
        cfg = RunConfig.load(overrides=A6_OVERRIDES)
        spec, vocab = cfg.synth_spec(), cfg.vocab()
        tcfg = TrainConfig(epochs=2, batch_size=4, peak_lr=1e-3, warmup_steps=2,
                           decay_horizon=50, accumulation=2, seed=3, val_every=3)
        blobs = []
        for name in ("x", "y"):
            ds = Dataset(generate_samples(spec, 6, 6, seed=0, vocab=vocab),
                         spec, vocab)
            model = SpeechLM(cfg.model_config(), vocab, seed=3)
            out = tmp_path / name
            train(model, ds, ds, tcfg, out)
            blobs.append(((out / "metrics.log").read_bytes(),
                          (out / "best.ckpt").read_bytes()))
        assert blobs[0] == blobs[1]
        _report("A6", "fixed-seed training bitwise reproducible "
                      "(metrics log and checkpoint)")

    def test_checkpoint_round_trip_bitwise(self, tmp_path):
        from fuselm.train import checkpoint_from

        cfg = RunConfig.load(overrides=A6_OVERRIDES)
        model = SpeechLM(cfg.model_config(), cfg.vocab(), seed=7)
        adam = Adam(model.named_parameters())
        ckpt = checkpoint_from(model, adam, step=3, val_loss=0.5,
                               config_text=cfg.to_text())
        path = tmp_path / "rt.ckpt"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        for name, arr in ckpt.tensors.items():
            assert arr.tobytes() == back.tensors[name].tobytes(), name
        save_checkpoint(back, tmp_path / "rt2.ckpt")
        assert (tmp_path / "rt.ckpt").read_bytes() == \
            (tmp_path / "rt2.ckpt").read_bytes()
        _report("A6", "checkpoint round trip is bitwise identity")


# ---------------------------------------------------------------- A7

class TestA7EndToEndOverfit:
    def test_memorize_mixed_dataset_via_cli(self, tmp_path, capsys):
        start = time.monotonic()
        data_dir = tmp_path / "data"
        run_dir = tmp_path / "run"
        overrides = []
        for item in ("data.n_asr=16", "data.n_ser=16", "data.val_frac=0",
                     "train.batch_size=4", "train.accumulation=1",
                     "train.warmup=100", "train.horizon=2000",
                     "train.max_steps=2000", "train.epochs=1000",
                     "train.peak_lr=0.0015", "train.val_every=500"):
            overrides += ["--set", item]
        assert cli_main(["gen-data", *overrides, "--inline", "--seed", "0",
                         "--out", str(data_dir)]) == 0
        assert cli_main(["train", *overrides,
                         "--train-manifest", str(data_dir / "train.manifest"),
                         "--out", str(run_dir)]) == 0
        assert cli_main(["eval", str(run_dir / "best.ckpt"),
                         str(data_dir / "train.manifest"),
                         "--out", str(tmp_path / "report")]) == 0
        captured = capsys.readouterr().out
        elapsed = time.monotonic() - start

        import json
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        assert report["asr"]["wer"] == 0.0, captured
        assert report["ser"]["ua"] == 1.0 and report["ser"]["wa"] == 1.0, captured
        assert elapsed < 300.0, f"end-to-end overfit took {elapsed:.0f}s"

        # the memorizing checkpoint also decodes single feature files back to
        # their own targets through the decode command
        from fuselm.data import EMOTIONS, read_manifest
        from fuselm.encoder import write_stack

        ds = read_manifest(data_dir / "train.manifest")
        asr_sample = ds.by_task(Task.ASR)[0]
        ser_sample = ds.by_task(Task.SER)[0]
        write_stack(tmp_path / "a.bin", ds.stack(asr_sample))
        write_stack(tmp_path / "s.bin", ds.stack(ser_sample))
        capsys.readouterr()
        assert cli_main(["decode", str(run_dir / "best.ckpt"),
                         str(tmp_path / "a.bin"), "--task", "asr"]) == 0
        assert cli_main(["decode", str(run_dir / "best.ckpt"),
                         str(tmp_path / "s.bin"), "--task", "ser"]) == 0
        out_lines = capsys.readouterr().out.strip().split("\n")
        assert out_lines[0] == ds.vocab.decode(asr_sample.token_ids)
        assert out_lines[1] == EMOTIONS[ser_sample.label]
        _report("A7", f"WER=0, UA=WA=1 on the training set after 2000 steps "
                      f"in {elapsed:.0f}s; decode returns each sample's own target")
