#!/usr/bin/env python3
"""Compare the compiled kernel backend against the numpy fallback.

Times individual kernels at model shapes, then a full training step
(forward + backward + Adam update) in a subprocess per backend so each run
gets a clean import-time selection.

    python3 benchmarks/bench_backends.py
"""
import os
import subprocess
import sys
import time

import numpy as np

from fuselm.autodiff import available_backends, load_backend

KERNEL_SHAPES = {
    "matmul qkv (35x64 @ 64x64)": ("matmul", (35, 64), (64, 64)),
    "matmul ffn (35x64 @ 64x256)": ("matmul", (35, 64), (64, 256)),
    "softmax scores (35x35)": ("softmax2d", (35, 35)),
    "layer_norm (35x64)": ("layer_norm2d", (35, 64)),
    "sigmoid gate (35x16)": ("sigmoid", (35, 16)),
    "gelu ffn (35x256)": ("gelu", (35, 256)),
}

STEP_SNIPPET = """
import time
import numpy as np
from fuselm.autodiff import Tape, BACKEND
from fuselm.config import RunConfig
from fuselm.data import Dataset, generate_samples
from fuselm.model import SpeechLM
from fuselm.slm import Task
from fuselm.train import Adam

cfg = RunConfig.load()
spec, vocab = cfg.synth_spec(), cfg.vocab()
ds = Dataset(generate_samples(spec, 8, 8, seed=0, vocab=vocab), spec, vocab)
model = SpeechLM(cfg.model_config(), vocab, seed=0)
adam = Adam(model.named_parameters())
batches = [ds.make_batches(Task.ASR, 8)[0], ds.make_batches(Task.SER, 8)[0]]

def step(b):
    model.zero_grad()
    with Tape() as tape:
        loss = model.batch_loss(b)
    tape.backward(loss)
    adam.step(1e-4)

for b in batches:
    step(b)
best = 1e9
for _ in range(5):
    t0 = time.perf_counter()
    for b in batches:
        step(b)
    best = min(best, time.perf_counter() - t0)
print(f"{BACKEND} {best:.6f}")
"""


def time_kernel(mod, name, shapes, rng, reps=5, inner=300):
    if name == "matmul":
        args = [rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1])]
        fn = mod.matmul
    elif name == "softmax2d":
        args = [rng.standard_normal(shapes[0])]
        fn = mod.softmax2d
    elif name == "layer_norm2d":
        d = shapes[0][1]
        args = [rng.standard_normal(shapes[0]), np.ones(d), np.zeros(d), 1e-5]
        fn = mod.layer_norm2d
    else:
        args = [rng.standard_normal(shapes[0])]
        fn = getattr(mod, name)
    best = 1e9
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best * 1e6


def main():
    backends = available_backends()
    print(f"available backends: {', '.join(backends)}")
    if "cython" not in backends:
        print("compiled extension not built; kernel table covers python only")

    mods = {b: load_backend(b) for b in backends}
    rng = np.random.default_rng(0)
    width = max(len(k) for k in KERNEL_SHAPES) + 2
    header = f"{'kernel':<{width}}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print("\n" + header)
    print("-" * len(header))
    for label, (name, *shapes) in KERNEL_SHAPES.items():
        times = [time_kernel(mods[b], name, shapes, rng) for b in backends]
        row = f"{label:<{width}}" + "".join(f"{t:>10.1f}us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.2f}x"
        print(row)

    print("\nfull training step (two 8-sample batches, desk-scale model):")
    step_times = {}
    for backend in backends:
        env = dict(os.environ, FUSELM_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET],
                             capture_output=True, text=True, env=env, check=True)
        name, seconds = out.stdout.split()
        step_times[name] = float(seconds)
        print(f"  {name:<8} {float(seconds) * 1000:8.1f} ms")
    if len(step_times) == 2:
        print(f"  speedup  {step_times['python'] / step_times['cython']:8.2f}x")


if __name__ == "__main__":
    main()
