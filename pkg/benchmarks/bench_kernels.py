"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Kernel timings call both implementations directly.  The training-step timing
runs one subprocess per backend with ``MPGAT_NUMBA`` set, since the backend is
bound at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mpgat import kernels

STEP_SNIPPET = """
import json, time, numpy as np
from mpgat import autodiff as ad, kernels
from mpgat.graph import default_graph
from mpgat.model import MPGAT, ModelConfig
from mpgat.training import mae_loss
m = MPGAT(ModelConfig(d_latent=16, d_residual=16, d_skip=32, d_end=64), default_graph(), seed=0)
rng = np.random.default_rng(0)
x, y = rng.normal(size=(64, 4, 6, 12)), rng.normal(size=(64, 6, 12))
opt = ad.Adam(m.params)
def step():
    opt.zero_grad()
    loss = mae_loss(m.forward(x), y)
    ad.backward(loss)
    opt.step()
step()
t = time.perf_counter()
for _ in range({repeat}):
    step()
print(json.dumps({{"backend": kernels.BACKEND, "seconds": (time.perf_counter() - t) / {repeat}}}))
"""


def best_of(fn, repeat):
    fn()  # warm-up / jit compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64 * 6, 16, 12))
    w = rng.normal(size=(16, 16, 2))
    g = rng.normal(size=(64 * 6, 16, 12))
    counts = rng.uniform(0, 500, (17280, 6))
    ranks = np.arange(2, 50, 2, dtype=np.int64)
    cases = {
        "conv forward (384x16x12)": (lambda: kernels.causal_conv_forward_loop(x, w, 2),
                                     lambda: kernels.causal_conv_forward_numpy(x, w, 2)),
        "conv backward (384x16x12)": (lambda: kernels.causal_conv_backward_loop(g, x, w, 2),
                                      lambda: kernels.causal_conv_backward_numpy(g, x, w, 2)),
        "moving average (60 days, w=20)": (lambda: kernels.moving_average_loop(counts, 20),
                                           lambda: kernels.moving_average_numpy(counts, 20)),
        "rank-sum null (n=m=12)": (lambda: kernels.subset_sum_counts_loop(ranks, 12),
                                   lambda: kernels.subset_sum_counts_numpy(ranks, 12)),
    }
    for name, (loop, vec) in cases.items():
        yield name, best_of(loop, repeat), best_of(vec, repeat)


def training_step(repeat):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, MPGAT_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        doc = json.loads(res.stdout.strip().splitlines()[-1])
        out[doc["backend"]] = doc["seconds"]
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-step", action="store_true", help="only time the standalone kernels")
    args = ap.parse_args(argv)

    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, t_nb, t_np in kernel_rows(args.repeat):
        print(f"{name:34s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}")
    if not args.skip_step:
        step = training_step(max(3, args.repeat // 4))
        print()
        for backend, sec in step.items():
            print(f"training step, batch 64, backend={backend:6s} {sec * 1e3:9.1f} ms")


if __name__ == "__main__":
    main()
