"""Pixel-level raster kernels with a compiled core and a NumPy fallback.

The compiled extension (``emvfm._kernels``) is used when it was built at
install time. Set ``EMVFM_PURE_PYTHON=1`` to force the NumPy path. Both
paths share one index convention for nearest-neighbour resampling::

    src = min(floor((2 * dst + 1) * in_len / (2 * out_len)), in_len - 1)

which is the half-pixel-centre rule in exact integer arithmetic. torch's
``nearest-exact`` computes it in floating point and can differ at exact ties.
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("EMVFM_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _flat_u8(a):
    a = np.asarray(a)
    if a.dtype == np.bool_:
        a = a.view(np.uint8)
    elif a.dtype != np.uint8:
        a = (a > 0).view(np.uint8)
    return np.ascontiguousarray(a).reshape(-1)


def iou_counts(pred, gt, impl=None):
    """Foreground intersection and union pixel counts of two label rasters.

    Any value ``> 0`` counts as foreground. Returns a pair of Python ints.
    """
    impl = impl or _impl
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    inter, union = impl.iou_counts(_flat_u8(pred), _flat_u8(gt))
    return int(inter), int(union)


def binarize(mask, threshold=128, impl=None):
    """Map ``mask >= threshold`` to 1 and everything else to 0 (uint8)."""
    impl = impl or _impl
    mask = np.asarray(mask)
    out = np.empty(mask.shape, dtype=np.uint8)
    if mask.dtype in (np.uint8, np.uint16) and threshold >= 0:
        impl.binarize(np.ascontiguousarray(mask).reshape(-1), int(threshold), out.reshape(-1))
    else:
        np.greater_equal(mask, threshold, out=out.view(bool))
    return out


def resize_nearest(labels, out_h, out_w, impl=None):
    """Nearest-neighbour resample of a 2-D label raster to ``(out_h, out_w)``."""
    impl = impl or _impl
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {labels.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    dtype = labels.dtype
    src = labels
    if dtype != np.uint8:
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            out = np.empty((out_h, out_w), dtype=dtype)
            _kernels_py.resize_nearest(labels, out)
            return out
        src = labels.astype(np.uint8)
    out = np.empty((out_h, out_w), dtype=np.uint8)
    impl.resize_nearest(np.ascontiguousarray(src), out)
    return out if dtype == np.uint8 else out.astype(dtype)
