"""Time the compiled conv kernels against the numpy reference.

Runs forward, grad-input, and grad-weight at a few batch shapes spanning
desk-scale tests and reference-scale training, and prints a small table
with the speedup. Usage:

    python benchmarks/bench_kernels.py [--repeats 30] [--dtype float32]
"""

import argparse
import time

import numpy as np

from convqa.kernels import reference

try:
    from convqa.kernels import _core as compiled
except ImportError:
    compiled = None

# (label, batch, in_ch, out_ch, length, kernel_width) -- the first four are
# the encoder/decoder conv shapes of the desk-scale acceptance runs, the last
# is a full-size training step
SHAPES = [
    ("overfit-enc", 8, 64, 128, 56, 3),
    ("overfit-dec", 8, 64, 128, 7, 3),
    ("ablation-enc", 64, 64, 128, 56, 3),
    ("ablation-dec", 64, 64, 128, 7, 3),
    ("full-scale", 64, 512, 1024, 64, 3),
]


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return best


def bench_shape(label, batch, in_ch, out_ch, length, k, repeats, dtype):
    rng = np.random.default_rng(0)
    pad = k - 1
    x = rng.standard_normal((batch, in_ch, length + pad)).astype(dtype)
    w = rng.standard_normal((out_ch, in_ch, k)).astype(dtype)
    gy = rng.standard_normal((batch, out_ch, length)).astype(dtype)

    rows = []
    cases = [
        ("forward", lambda m: m.conv1d_forward(x, w)),
        ("grad_input", lambda m: m.conv1d_grad_input(gy, w, length + pad)),
        ("grad_weight", lambda m: m.conv1d_grad_weight(gy, x, k)),
    ]
    for name, call in cases:
        want = call(reference)
        t_ref = best_of(lambda: call(reference), repeats)
        if compiled is None:
            rows.append((label, name, t_ref, None, None))
            continue
        got = call(compiled)
        err = float(np.abs(np.asarray(got) - np.asarray(want)).max())
        tol = 1e-3 if dtype == np.float32 else 1e-10
        if err > tol:
            raise AssertionError(f"{label}/{name}: backends disagree by {err:.2e}")
        t_cmp = best_of(lambda: call(compiled), repeats)
        rows.append((label, name, t_ref, t_cmp, t_ref / t_cmp))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = parser.parse_args()
    dtype = np.dtype(args.dtype).type

    if compiled is None:
        print("compiled backend not built; timing the numpy reference only")

    header = f"{'shape':<10} {'kernel':<12} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for shape in SHAPES:
        for label, name, t_ref, t_cmp, speedup in bench_shape(*shape,
                                                              repeats=args.repeats,
                                                              dtype=dtype):
            cmp_ms = f"{t_cmp * 1e3:12.3f}" if t_cmp is not None else f"{'-':>12}"
            ratio = f"{speedup:7.2f}x" if speedup is not None else f"{'-':>8}"
            print(f"{label:<10} {name:<12} {t_ref * 1e3:10.3f} {cmp_ms} {ratio}")


if __name__ == "__main__":
    main()
