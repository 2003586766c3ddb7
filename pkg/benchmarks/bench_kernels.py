"""Compiled vs numpy kernels, plus one full training step under each backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--train-steps 10]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from maskattn import _pykernels as py

try:
    from maskattn import _ckernels as ck
except ImportError:
    ck = None

TRAIN_SNIPPET = """
import time
from maskattn import kernels
from maskattn.data import scene_batches
from maskattn.diffusion import ModelConfig, ToyUNet, make_schedule
from maskattn.optim import TrainConfig, train_phase
sched = make_schedule(1000)
model = ToyUNet(ModelConfig(), seed=0)
model.gates_open = True
cfg = TrainConfig(steps={steps}, warmup_steps=1, lr_peak=1e-3)
batches = scene_batches(0, 8, sched)
t0 = time.perf_counter()
train_phase(model, batches, cfg, model.backbone_names(), sched)
print(kernels.BACKEND, (time.perf_counter() - t0) / {steps})
"""


def cases(rng):
    att = rng.normal(size=(8, 2, 16, 8))
    w = py.softmax_rows(att)
    act = rng.normal(size=(8, 16, 16, 128))
    img = rng.normal(size=(8, 16, 16, 32))
    cols = py.im2col(img, 3, 3, 1, 1)
    return [
        ("softmax_rows", lambda m: m.softmax_rows(att)),
        ("softmax_rows_backward", lambda m: m.softmax_rows_backward(w, att)),
        ("gelu", lambda m: m.gelu(act)),
        ("gelu_grad", lambda m: m.gelu_grad(act)),
        ("im2col 3x3", lambda m: m.im2col(img, 3, 3, 1, 1)),
        ("col2im 3x3", lambda m: m.col2im(cols, img.shape, 3, 3, 1, 1)),
    ]


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def train_step_seconds(backend, steps):
    env = dict(os.environ, MASKATTN_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    name, sec = out.stdout.split()
    return name, float(sec)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-steps", type=int, default=10)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for name, fn in cases(rng):
        t_py = best_of(lambda: fn(py), args.repeat) * 1e3
        if ck is None:
            print(f"{name:<24}{t_py:>10.3f}{'n/a':>13}{'':>9}")
            continue
        t_ck = best_of(lambda: fn(ck), args.repeat) * 1e3
        print(f"{name:<24}{t_py:>10.3f}{t_ck:>13.3f}{t_py / t_ck:>8.2f}x")
    print(f"\ntraining step (batch 8, default geometry, mean of {args.train_steps} steps)")
    backends = ["python"] + (["compiled"] if ck is not None else [])
    for b in backends:
        name, sec = train_step_seconds(b, args.train_steps)
        print(f"  {name:<10}{sec * 1e3:>9.1f} ms/step")


if __name__ == "__main__":
    main()
