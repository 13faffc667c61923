"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--step]

Shapes follow the default model (dim 32, 8 encoder channels, 80 mel bins,
batch 8 of ~1.2 s utterances).  ``--step`` also times one full training step
with each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from w2vbert._kernels import _reference

try:
    from w2vbert._kernels import _fast
except ImportError:
    _fast = None


def cases(rng):
    x1 = rng.standard_normal((8, 1, 120, 80)).astype(np.float32)
    x2 = rng.standard_normal((8, 8, 60, 40)).astype(np.float32)
    g1 = rng.standard_normal((8, 60, 40, 9)).astype(np.float32)
    dx = rng.standard_normal((8, 30, 64)).astype(np.float32)
    dw = rng.standard_normal((64, 5)).astype(np.float32)
    src = rng.standard_normal((2400, 32)).astype(np.float32)
    idx = rng.integers(0, 240, size=2400)
    return {
        "im2col (conv 1)": lambda k: k.im2col(x1, 3, 3, 2, 2, 60, 40),
        "im2col (conv 2)": lambda k: k.im2col(x2, 3, 3, 2, 2, 30, 20),
        "col2im (conv 1)": lambda k: k.col2im(g1, 1, 120, 80, 3, 3, 2, 2),
        "depthwise fwd": lambda k: k.depthwise_conv1d_forward(dx, dw),
        "depthwise bwd": lambda k: k.depthwise_conv1d_backward(dx, dx, dw),
        "scatter rows": lambda k: k.scatter_add_rows(src, idx, 240),
    }


def time_call(fn, repeat):
    t = timeit.Timer(fn)
    n, _ = t.autorange()
    return min(t.repeat(repeat, n)) / n


def step_time(backend: str) -> float:
    code = ("import time, w2vbert._kernels as k; from w2vbert.config import TrainConfig; "
            "from w2vbert.trainer import synthetic_corpus, corpus_features, run_pretraining; "
            "cfg = TrainConfig().replace(total_steps=20, log_every=20); f = corpus_features(synthetic_corpus(cfg)); "
            "run_pretraining(cfg.replace(total_steps=2), f); t = time.perf_counter(); run_pretraining(cfg, f); "
            "print((time.perf_counter() - t) / 20)")
    env = {**os.environ, "W2VBERT_KERNELS": backend}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = ap.parse_args(argv)
    if _fast is None:
        print("compiled kernels not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy (us)':>12}{'cython (us)':>13}{'speedup':>9}")
    for name, fn in cases(rng).items():
        ref = time_call(lambda: fn(_reference), args.repeat) * 1e6
        if _fast is None:
            print(f"{name:<18}{ref:>12.1f}{'-':>13}{'-':>9}")
            continue
        fast = time_call(lambda: fn(_fast), args.repeat) * 1e6
        print(f"{name:<18}{ref:>12.1f}{fast:>13.1f}{ref / fast:>8.1f}x")
    if args.step:
        py = step_time("python")
        line = f"{'training step':<18}{py * 1e3:>10.1f}ms"
        if _fast is not None:
            cy = step_time("")
            line += f"{cy * 1e3:>11.1f}ms{py / cy:>8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
