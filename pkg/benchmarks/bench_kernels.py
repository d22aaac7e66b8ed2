"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Inputs match what one training step sees on a 256 x 256 image.
"""
import argparse
import timeit

import numpy as np

from safire import _pykernels

try:
    from safire import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(g):
    mask = (g.random((256, 256)) < 0.3).astype(np.uint8)
    mask[64:192, 64:192] = 1
    labels, _, _ = _pykernels.label_components(mask)
    part = np.zeros((256, 256), np.int32)
    part[40:200, 30:150] = 1
    part[150:250, 120:250] = 2
    u = g.normal(size=(1024, 16))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    region = (g.random(1024) < 0.3).astype(np.intp)
    size = np.bincount(region)[region].astype(np.intp)
    sim = np.ascontiguousarray(u @ u.T)
    x = g.normal(size=(256, 256))
    yp = g.integers(-1, 2, (256, 256)).astype(np.int8)
    return {
        "label_components": (mask,),
        "adjacency_pairs": (labels,),
        "majority_downsample": (part, 8, 3),
        "r2r_anchor_loss": (sim, region, size, 0.1),
        "aass_fused": (x, yp, 3.0, 1.5),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    inputs = cases(np.random.default_rng(0))
    print(f"{'kernel':22s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, a in inputs.items():
        py = min(timeit.repeat(lambda: getattr(_pykernels, name)(*a), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:22s} {py:10.3f} {'n/a':>10s}")
            continue
        cy = min(timeit.repeat(lambda: getattr(_ckernels, name)(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:22s} {py:10.3f} {cy:10.3f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
