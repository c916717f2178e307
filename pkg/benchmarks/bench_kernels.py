"""Compare the numba and numpy convolution backends.

Times forward + backward of the three network convolutions at training
batch shapes, then one full training step per backend in a fresh
interpreter (the backend is fixed at import).

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from mcdalab import _kernels as K

# (input, weight, stride, pad) for g1, g2, g3 on a batch of 64 images
SHAPES = {
    "g1 3->16 s1": ((64, 3, 16, 16), (16, 3, 3, 3), 1, 1),
    "g2 16->32 s2": ((64, 16, 16, 16), (32, 16, 3, 3), 2, 1),
    "g3 32->32 s2": ((64, 32, 8, 8), (32, 32, 3, 3), 2, 1),
}

STEP_SNIPPET = """
import time, json
import numpy as np
from mcdalab import _kernels
from mcdalab.datagen import standard_benchmark
from mcdalab.mcda import TrainConfig, train_step
from mcdalab.nnet.model import arch_for, init_model
from mcdalab.seeding import make_rng
ds = standard_benchmark(seed=0, n_per_domain=64)
cfg = TrainConfig(batch_size=32)
bundle = init_model(arch_for(ds), 0)
rng = make_rng(0, 1)
x = ds.inputs()
batch = {"xs": x[:32], "ys": ds.class_labels[:32], "xt": x[64:96]}
bundle, vel, _ = train_step(bundle, batch, cfg, 0.0, rng)  # warm-up and jit
t = time.perf_counter()
for i in range(REPEAT):
    bundle, vel, _ = train_step(bundle, batch, cfg, i / REPEAT, rng, vel)
print(json.dumps({"backend": _kernels.BACKEND, "step_ms": 1e3 * (time.perf_counter() - t) / REPEAT}))
"""


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return 1e3 * min(times)


def bench_conv(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, (xs, ws, stride, pad) in SHAPES.items():
        x, w, b = rng.normal(size=xs), rng.normal(size=ws), rng.normal(size=ws[0])
        out, _ = K.conv2d_forward_np(x, w, b, stride, pad)
        g = rng.normal(size=out.shape)
        row = {"layer": name}
        impls = [("numpy", K.conv2d_forward_np, K.conv2d_backward_np)]
        if K.HAVE_NUMBA:
            impls.append(("numba", K.conv2d_forward_nb, K.conv2d_backward_nb))
        for label, fwd, bwd in impls:
            def run():
                _, cols = fwd(x, w, b, stride, pad)
                bwd(cols, x.shape, w, g, stride, pad)
            row[label] = best_of(run, repeat)
        rows.append(row)
    return rows


def bench_step(backend, repeat):
    env = dict(os.environ, MCDALAB_BACKEND=backend)
    code = STEP_SNIPPET.replace("REPEAT", str(repeat))
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    print(f"conv forward+backward, best of {args.repeat} (ms)")
    print(f"{'layer':<16}{'numpy':>10}{'numba':>10}{'speedup':>10}")
    for row in bench_conv(args.repeat):
        nb = row.get("numba", float("nan"))
        print(f"{row['layer']:<16}{row['numpy']:>10.2f}{nb:>10.2f}{row['numpy'] / nb:>10.2f}")

    print(f"\nfull training step, batch 32, mean of {args.repeat} (ms)")
    for backend in ("numpy", "numba"):
        res = bench_step(backend, args.repeat)
        print(f"{res['backend']:<16}{res['step_ms']:>10.2f}")


if __name__ == "__main__":
    main()
