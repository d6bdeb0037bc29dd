"""Kernel backend benchmark: numba vs pure numpy.

Times the convolution and pooling kernels at a few representative shapes,
plus one full training iteration of the small network, under each available
backend. Run as `python -m sefer.bench`.
"""

import argparse
import json
import time

import numpy as np

from . import kernels
from .nn.network import SEResNet, split_parameter_groups, tiny_config
from .training import accumulate_gradients, sgd_step

# (label, N, C_in, C_out, H, ksize, stride, pad)
CONV_CASES = [
    ("conv 8x3->8 32px k3", 8, 3, 8, 32, 3, 1, 1),
    ("conv 8x16->32 16px k3", 8, 16, 32, 16, 3, 1, 1),
    ("conv 4x64->64 56px k3", 4, 64, 64, 56, 3, 1, 1),
]

POOL_CASES = [
    ("maxpool 8x8 32px", 8, 8, 32),
    ("maxpool 4x64 56px", 4, 64, 56),
]


def _time(fn, repeats: int) -> float:
    fn()  # warm: first call may compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(backend: str, repeats: int, seed: int = 0):
    previous = kernels.use_backend(backend)
    try:
        rng = np.random.default_rng(seed)
        rows = {}
        for label, n, cin, cout, h, k, stride, pad in CONV_CASES:
            x = rng.standard_normal((n, cin, h, h)).astype(np.float32)
            w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
            out = kernels.conv2d_forward(x, w, stride, pad)
            dout = rng.standard_normal(out.shape).astype(np.float32)
            rows[label + " fwd"] = _time(
                lambda: kernels.conv2d_forward(x, w, stride, pad), repeats)
            rows[label + " dx"] = _time(
                lambda: kernels.conv2d_backward_dx(dout, w, x.shape, stride, pad),
                repeats)
            rows[label + " dw"] = _time(
                lambda: kernels.conv2d_backward_dw(dout, x, w.shape, stride, pad),
                repeats)
        for label, n, c, h in POOL_CASES:
            x = rng.standard_normal((n, c, h, h)).astype(np.float32)
            out, switches = kernels.maxpool2d_forward(x, 3, 2, 1)
            dout = rng.standard_normal(out.shape).astype(np.float32)
            rows[label + " fwd"] = _time(
                lambda: kernels.maxpool2d_forward(x, 3, 2, 1), repeats)
            rows[label + " bwd"] = _time(
                lambda: kernels.maxpool2d_backward(dout, switches, x.shape, 3, 2, 1),
                repeats)

        model = SEResNet(tiny_config(), seed=seed)
        x = rng.standard_normal((16, 3, 32, 32)).astype(np.float32)
        y = rng.integers(0, 7, size=16)
        weights = np.ones(7)
        groups = split_parameter_groups(model)
        lr_map = groups.lr_map(0.01, 0.01)
        params = model.named_parameters()
        buffers = {}

        def train_iter():
            accumulate_gradients(model, y, x, weights, 4)
            sgd_step(params, model.named_grads(), buffers, lr_map, 0.9, 0.0005)

        rows["tiny net train iteration (B=16, K=4)"] = _time(train_iter, max(3, repeats // 3))
        return rows
    finally:
        kernels.use_backend(previous)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="benchmark the numba and numpy kernel backends")
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions per case (best is kept)")
    parser.add_argument("--json-out", default=None,
                        help="also write results as JSON to this path")
    args = parser.parse_args(argv)

    backends = ["numpy"]
    try:
        import numba  # noqa: F401
        backends.insert(0, "numba")
    except ImportError:
        print("numba not importable; benchmarking numpy only")

    results = {}
    for backend in backends:
        print(f"timing backend: {backend}")
        results[backend] = bench_backend(backend, args.repeats)

    labels = list(results[backends[0]])
    width = max(len(s) for s in labels)
    header = f"{'case':<{width}}" + "".join(f"  {b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>9}"
    print()
    print(header)
    print("-" * len(header))
    for label in labels:
        line = f"{label:<{width}}"
        for b in backends:
            line += f"  {results[b][label] * 1e3:>10.3f}ms"
        if len(backends) == 2:
            ratio = results["numpy"][label] / results["numba"][label]
            line += f"  {ratio:>8.2f}x"
        print(line)

    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as f:
            json.dump(results, f, indent=2)
        print(f"\nwrote {args.json_out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
