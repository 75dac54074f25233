"""Time the hot kernels under the numba and pure-numpy backends.

Each kernel runs on the activation shapes the desk-scale model actually
produces (rows = batch * seq positions).  The numba functions are called
once before timing so JIT compilation never lands inside a measurement.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --rows 8192 --repeats 50 --end-to-end
"""

import argparse
import time

import numpy as np

from adarank import kernels


def time_call(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def kernel_cases(rows, width, rng):
    x = np.ascontiguousarray(rng.standard_normal((rows, width)))
    g = np.ascontiguousarray(rng.standard_normal((rows, width)))
    gain = np.ascontiguousarray(rng.standard_normal(width))
    bias = np.ascontiguousarray(rng.standard_normal(width))
    probs = kernels.softmax(x)
    flat = np.ascontiguousarray(rng.standard_normal(rows * width))
    grad = np.ascontiguousarray(rng.standard_normal(rows * width))
    m = np.zeros(rows * width)
    v = np.zeros(rows * width)
    return [
        ("gelu", "gelu", (x,)),
        ("gelu_vjp", "gelu_vjp", (x, g)),
        ("softmax", "softmax", (x,)),
        ("softmax_vjp", "softmax_vjp", (probs, g)),
        ("layer_norm", "layer_norm", (x, gain, bias, 1e-12)),
        ("layer_norm_vjp", "layer_norm_vjp", (x, gain, g, 1e-12)),
        ("adam_update", "adam_update",
         (flat, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)),
    ]


def bench_kernels(rows, width, repeats):
    rng = np.random.default_rng(0)
    cases = kernel_cases(rows, width, rng)
    backends = kernels.available_backends()
    results = {}
    for backend in backends:
        kernels.use_backend(backend)
        for label, name, args in cases:
            fn = getattr(kernels, name)
            fn(*args)  # warm-up; compiles under numba
            results[(label, backend)] = time_call(fn, args, repeats)

    print(f"kernel timings, rows={rows} width={width}, best of {repeats}")
    header = f"{'kernel':<16}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for label, _, _ in cases:
        row = f"{label:<16}"
        times = [results[(label, b)] for b in backends]
        for t in times:
            row += f"{1e3 * t:>14.3f}"
        if len(times) == 2:
            # backends sort as (numba, numpy); quote numba's speedup over numpy
            row += f"{times[1] / times[0]:>9.2f}x"
        print(row)


def bench_end_to_end(repeats):
    from adarank.data import synthetic_dataset
    from adarank.harness import TrainConfig, finetune
    from adarank.lora import RankPlan
    from adarank.model import ModelConfig, TransformerModel

    config = ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ff=128, n_classes=4)
    model = TransformerModel.build(config, 0)
    train = synthetic_dataset(4, 512, noise_rate=0.05, seed=0)
    test = synthetic_dataset(4, 128, noise_rate=0.05, seed=1, split="test")
    plan = RankPlan.uniform(config, 8)
    cfg = TrainConfig(epochs=1, seed=0)

    print(f"\none finetune epoch, {len(train)} examples, uniform rank 8")
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        finetune(model, plan, train, test, cfg)  # warm-up
        best = float("inf")
        for _ in range(repeats):
            start = time.perf_counter()
            finetune(model, plan, train, test, cfg)
            best = min(best, time.perf_counter() - start)
        print(f"  {backend:<6} {best:.2f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=2048,
                        help="activation rows (batch * seq)")
    parser.add_argument("--width", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--end-to-end", action="store_true",
                        help="also time a full finetune epoch per backend")
    args = parser.parse_args()

    if "numba" not in kernels.available_backends():
        print("note: numba unavailable, timing the numpy backend only")
    original = kernels.active_backend
    try:
        bench_kernels(args.rows, args.width, args.repeats)
        if args.end_to_end:
            bench_end_to_end(max(1, args.repeats // 10))
    finally:
        kernels.use_backend(original)


if __name__ == "__main__":
    main()
