"""Compiled kernels versus the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes are those of the tiny desk model (batch 8) and of one ViT-Ti/16
forward at 512x512. Each row reports the best of N timings per backend and
the speed-up; outputs of both backends are checked to agree first.
"""
import argparse
import os
import sys
import timeit

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from emra import _pykernels  # noqa: E402
from emra.kernels import available_backends  # noqa: E402


def cases(rng):
    f32 = np.float32
    for label, (n, g, d) in {"tiny b8": (8, 6, 32), "ViT-Ti 512": (1, 32, 192)}.items():
        x = rng.standard_normal((n, g, g, d)).astype(f32)
        k = rng.standard_normal((n, 3, 3, d)).astype(f32)
        b = rng.standard_normal((n, d)).astype(f32)
        yield f"dwconv3x3 fwd  {label}", "dwconv3x3_forward", (x, k, b)
        yield f"dwconv3x3 bwd  {label}", "dwconv3x3_backward", (x, k, x)
    for label, (n, g, c) in {"tiny b8": (8, 6, 4), "ViT-Ti 512": (1, 32, 7)}.items():
        q = rng.random((n, 4 * g, 4 * g, 9)).astype(f32)
        r = rng.standard_normal((n, g, g, c)).astype(f32)
        gy = rng.standard_normal((n, 4 * g, 4 * g, c)).astype(f32)
        yield f"fuse fwd       {label}", "fuse_forward", (q, r, 4, 4)
        yield f"fuse bwd       {label}", "fuse_backward", (q, r, gy, 4, 4)
    yield "crc64          256 KiB", "crc64", (rng.integers(0, 256, 1 << 18, dtype=np.uint8).tobytes(),)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, int):
        return a == b
    return np.allclose(a, b, rtol=1e-4, atol=1e-4)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s}")
    for label, name, call_args in cases(rng):
        times = {}
        outs = {}
        for backend, mod in backends.items():
            fn = getattr(mod, name)
            outs[backend] = fn(*call_args)
            number = 1 if name == "crc64" and backend == "python" else 3
            best = min(timeit.repeat(lambda: fn(*call_args), number=number, repeat=args.repeat))
            times[backend] = 1e3 * best / number
        if "cython" in outs and not _same(outs["python"], outs["cython"]):
            raise SystemExit(f"{label}: backends disagree")
        cy = times.get("cython")
        cy_txt = f"{cy:10.3f}" if cy is not None else f"{'-':>10s}"
        ratio = f"{times['python'] / cy:8.1f}x" if cy else f"{'-':>9s}"
        print(f"{label:32s} {times['python']:10.3f} {cy_txt} {ratio}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
