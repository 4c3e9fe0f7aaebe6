"""Compare the numba kernels with their numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py            # kernel timings plus an end-to-end run
    python3 benchmarks/bench_kernels.py --kernels  # kernel timings only

Kernel timings call both implementations in one process. Row log-softmax
has no numba twin: numpy's vectorized exp was about twice as fast. The end-to-end
timing runs short phase-0 and binding phases twice in subprocesses, once with
``M3BIND_DISABLE_NUMBA=1``.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from m3bind import _kernels as K

E2E = """
import time
from m3bind.config import RunConfig
from m3bind.pipeline import make_dataset, run_experiment
cfg = RunConfig()
cfg.pretrain.steps = 2
cfg.bind.iters = 2
data = make_dataset(cfg)
run_experiment(cfg, data, distill=False)  # warm-up: loads compiled kernels
cfg.pretrain.steps = 50
cfg.bind.iters = 100
t = time.perf_counter()
run_experiment(cfg, data, distill=False)
print(time.perf_counter() - t)
"""


def _cases(rng):
    vocab, dim, batch = 64, 32, 256
    lengths = rng.integers(3, 9, size=batch)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    ids = rng.integers(0, vocab, size=offsets[-1]).astype(np.int64)
    table = rng.normal(size=(vocab, dim))
    grad = rng.normal(size=(batch, dim))
    sims = rng.normal(size=(200, 400))
    relevant = rng.random((200, 400)) < 0.1
    relevant[:, 0] = True
    p, g = rng.normal(size=(64, 64)), rng.normal(size=(64, 64))

    def adamw(fn):
        m, v = np.zeros_like(p), np.zeros_like(p)
        return lambda: fn(p.copy(), g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)

    return {
        "embedding_bag_mean": lambda fn: (lambda: fn(table, ids, offsets)),
        "embedding_bag_mean_grad": lambda fn: (lambda: fn(grad, ids, offsets, vocab)),
        "adamw_update": adamw,
        "first_relevant_rank": lambda fn: (lambda: fn(sims, relevant)),
    }


def bench_kernels(repeat: int = 5, number: int = 200) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, make in _cases(rng).items():
        np_fn = make(getattr(K, f"_np_{name}"))
        row = f"{name:<26}{_best(np_fn, repeat, number):>12.1f}"
        if K.HAS_NUMBA:
            nb_fn = make(getattr(K, f"_nb_{name}"))
            nb_fn()  # compile outside the timed region
            t_np, t_nb = _best(np_fn, repeat, number), _best(nb_fn, repeat, number)
            row = f"{name:<26}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.1f}x"
        print(row)


def _best(fn, repeat, number) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e6


def bench_end_to_end() -> None:
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, M3BIND_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        print(f"50 phase-0 + 100 binding steps, {label:<6} backend: {float(out.stdout.strip()):.2f}s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--kernels", action="store_true", help="skip the end-to-end comparison")
    args = ap.parse_args()
    bench_kernels()
    if not args.kernels:
        bench_end_to_end()


if __name__ == "__main__":
    main()
