"""Compiled vs NumPy raster kernels on a Lucchi-sized test split.

    python3 benchmarks/bench_kernels.py [--slices 165] [--repeat 3]

The workload mirrors evaluation of one dataset: 165 slices of 768x1024,
binarizing the ground truth, mapping a 770x1022 prediction back to native
size, and accumulating IoU counts.
"""

import argparse
import timeit

import numpy as np

from emvfm import _kernels_py, kernels

try:
    from emvfm import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def workload(slices, impl):
    rng = np.random.default_rng(0)
    gts = rng.integers(0, 256, size=(slices, 768, 1024), dtype=np.uint8)
    preds = rng.integers(0, 2, size=(slices, 770, 1022), dtype=np.uint8)

    def binarize():
        for g in gts:
            kernels.binarize(g, 128, impl=impl)

    def resize():
        for p in preds:
            kernels.resize_nearest(p, 768, 1024, impl=impl)

    def iou():
        for p, g in zip(preds[:, :768, :1022], gts[:, :, :1022]):
            kernels.iou_counts(p, g, impl=impl)

    return {"binarize": binarize, "resize_nearest": resize, "iou_counts": iou}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--slices", type=int, default=165)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    impls = {"python": _kernels_py}
    if _kernels_c is not None:
        impls["cython"] = _kernels_c
    else:
        print("compiled extension not built; timing the NumPy path only")

    results = {}
    for name, impl in impls.items():
        for kernel, fn in workload(args.slices, impl).items():
            results[kernel, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))

    print(f"{'kernel':<16}{'python s':>10}{'cython s':>10}{'speedup':>9}")
    for kernel in ("binarize", "resize_nearest", "iou_counts"):
        py = results[kernel, "python"]
        cy = results.get((kernel, "cython"))
        extra = f"{cy:>10.3f}{py / cy:>8.1f}x" if cy else f"{'-':>10}{'-':>9}"
        print(f"{kernel:<16}{py:>10.3f}{extra}")


if __name__ == "__main__":
    main()
