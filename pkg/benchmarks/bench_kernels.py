"""Compiled vs. numpy kernels: per-call timings and one end-to-end training run.

    python benchmarks/bench_kernels.py [--repeat 200] [--epochs 10]

Both backends are imported directly, so one process measures both. The
end-to-end row swaps the kernel functions nncore calls and trains the
default server model on the default dataset.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from fusionfilter import _kernels_py, kernels
from fusionfilter.datagen import GenConfig, generate
from fusionfilter.fusionmodel import make_fusion_spec, train_server_fusion
from fusionfilter.nncore import MlpSpec, TrainConfig, init_model

try:
    from fusionfilter import _kernels as _kernels_cy
except ImportError:
    _kernels_cy = None

SHAPES = [
    ("near-sensor 16-16-1", (16, 16, 1), 32),
    ("extractor 16-64-32", (16, 64, 32), 32),
    ("head 64-32-6", (64, 32, 6), 32),
    ("extractor 16-64-32, batch 512", (16, 64, 32), 512),
]


def _buffers(widths, batch, rng):
    spec = MlpSpec(widths)
    params = init_model(spec, 0).params.copy()
    w = np.asarray(widths, dtype=np.int64)
    X = rng.normal(size=(batch, widths[0]))
    acts = np.zeros(batch * sum(widths[1:]))
    dz = rng.normal(size=(batch, widths[-1]))
    grad = np.zeros_like(params)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    return params, w, X, acts, dz, grad, m, v


def _time(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def kernel_step(impl, bufs):
    params, w, X, acts, dz, grad, m, v = bufs

    def step():
        impl.mlp_forward(params, w, False, X, acts)
        impl.mlp_backward(params, w, X, acts, dz, grad)
        impl.adam_update(params, grad, m, v, 1e-9, 0.9, 0.999, 1e-8, 1)

    return step


def end_to_end(impl, epochs):
    saved = (kernels.mlp_forward, kernels.mlp_backward, kernels.adam_update)
    kernels.mlp_forward, kernels.mlp_backward, kernels.adam_update = (
        impl.mlp_forward,
        impl.mlp_backward,
        impl.adam_update,
    )
    try:
        ds = generate(GenConfig(seed=0))
        spec = make_fusion_spec([16, 16], 6)
        t0 = time.perf_counter()
        model = train_server_fusion(ds, spec, TrainConfig(epochs=epochs, seed=0))
        return time.perf_counter() - t0, model
    finally:
        kernels.mlp_forward, kernels.mlp_backward, kernels.adam_update = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=200, help="timed calls per kernel row")
    ap.add_argument("--epochs", type=int, default=10, help="epochs for the end-to-end row")
    args = ap.parse_args(argv)

    impls = [("numpy", _kernels_py)]
    if _kernels_cy is not None:
        impls.append(("cython", _kernels_cy))
    else:
        print("compiled kernels not built; numpy only")

    rng = np.random.default_rng(0)
    print(f"{'forward+backward+adam':<34}" + "".join(f"{n:>12}" for n, _ in impls) + ("     speedup" if len(impls) > 1 else ""))
    for label, widths, batch in SHAPES:
        times = [_time(kernel_step(impl, _buffers(widths, batch, rng)), args.repeat) for _, impl in impls]
        cells = "".join(f"{t * 1e6:>10.1f}us" for t in times)
        extra = f"{times[0] / times[1]:>11.2f}x" if len(times) > 1 else ""
        print(f"{label:<34}{cells}{extra}")

    results = [end_to_end(impl, args.epochs) for _, impl in impls]
    cells = "".join(f"{t:>11.2f}s" for t, _ in results)
    extra = f"{results[0][0] / results[1][0]:>11.2f}x" if len(results) > 1 else ""
    print(f"{f'server training, {args.epochs} epochs':<34}{cells}{extra}")
    if len(results) > 1:
        a, b = (m.flat() for m in (results[0][1], results[1][1]))
        same = results[0][1].same_parameters(results[1][1])
        print(f"trained parameters identical across backends: {same} (max abs difference {np.abs(a - b).max():.1e})")


if __name__ == "__main__":
    main()
