"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times each kernel on shapes the default model actually uses, then one
forward+backward pass of the default 64x64 model under each backend.
"""
import argparse
import subprocess
import sys
import time

import numpy as np

from datar.kernels import available_backends


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x = rng.standard_normal((64, 8, 8))
    dw = rng.standard_normal((64, 1, 5, 5))
    go_dw = rng.standard_normal((64, 2, 2))
    img = rng.standard_normal((1, 64, 64))
    pe = rng.standard_normal((16, 1, 4, 4))
    go_pe = rng.standard_normal((16, 16, 16))
    mg_in = rng.standard_normal((32, 8, 8))
    mg = rng.standard_normal((64, 32, 2, 2))
    go_mg = rng.standard_normal((64, 4, 4))
    z = rng.standard_normal((64, 4, 4))
    uy, ux = rng.uniform(0, 3, 2000), rng.uniform(0, 3, 2000)
    gs = rng.standard_normal((2000, 64))
    return {
        "conv depthwise 5x5 s4 fwd": lambda k: k.conv2d_forward(x, dw, 4, 2, 64),
        "conv depthwise 5x5 s4 bwd": lambda k: k.conv2d_backward(x, dw, go_dw, 4, 2, 64),
        "conv patch 4x4 s4 fwd": lambda k: k.conv2d_forward(img, pe, 4, 0, 1),
        "conv patch 4x4 s4 bwd": lambda k: k.conv2d_backward(img, pe, go_pe, 4, 0, 1),
        "conv merge 2x2 s2 fwd": lambda k: k.conv2d_forward(mg_in, mg, 2, 0, 1),
        "conv merge 2x2 s2 bwd": lambda k: k.conv2d_backward(mg_in, mg, go_mg, 2, 0, 1),
        "bilinear 2000 pts fwd": lambda k: k.bilinear_forward(z, uy, ux),
        "bilinear 2000 pts bwd": lambda k: k.bilinear_backward(z, uy, ux, gs),
    }


MODEL_SNIPPET = """
import time, numpy as np
from datar import BACKEND
from datar.backbone import DATAR, ModelConfig
from datar.train import cross_entropy
m = DATAR(ModelConfig(), seed=0)
x = np.random.default_rng(0).standard_normal((64, 64))
best = 1e9
for _ in range({repeat}):
    t0 = time.perf_counter()
    cross_entropy(m(x), 0).backward()
    m.zero_grad()
    best = min(best, time.perf_counter() - t0)
print(BACKEND, best)
"""


def model_step(pure: bool, repeat: int):
    env = {"DATAR_PURE_PYTHON": "1" if pure else "0"}
    import os

    out = subprocess.run([sys.executable, "-c", MODEL_SNIPPET.format(repeat=repeat)],
                         env={**os.environ, **env}, capture_output=True, text=True, check=True)
    name, secs = out.stdout.split()
    return name, float(secs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = available_backends()
    names = sorted(backends)
    rng = np.random.default_rng(0)

    print(f"{'kernel':<28}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for label, fn in kernel_cases(rng).items():
        t = {n: best_of(lambda: fn(backends[n]), args.repeat) for n in names}
        row = f"{label:<28}" + "".join(f"{t[n] * 1e6:>16.1f}" for n in names)
        if "cython" in t:
            row += f"{t['python'] / t['cython']:>9.1f}x"
        print(row)

    print()
    results = [model_step(pure, max(3, args.repeat // 4)) for pure in (True, False)]
    for name, secs in results:
        print(f"default model fwd+bwd, {name:<7} backend: {secs * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
