"""Compiled raster kernels. Semantics must match ``_kernels_py`` exactly."""

from libc.stdint cimport int64_t, uint8_t, uint16_t

ctypedef fused label_t:
    uint8_t
    uint16_t


def iou_counts(const uint8_t[::1] pred, const uint8_t[::1] gt):
    """Return ``(|p & g|, |p | g|)`` over flat rasters, non-zero = foreground."""
    cdef Py_ssize_t i, n = pred.shape[0]
    cdef int64_t inter = 0, union = 0
    cdef bint p, g
    if gt.shape[0] != n:
        raise ValueError("pred and gt must have the same number of pixels")
    with nogil:
        for i in range(n):
            p = pred[i] != 0
            g = gt[i] != 0
            inter += p & g
            union += p | g
    return inter, union


def binarize(const label_t[::1] mask, int64_t threshold, uint8_t[::1] out):
    cdef Py_ssize_t i, n = mask.shape[0]
    cdef int64_t top = 255 if label_t is uint8_t else 65535
    cdef label_t t
    if threshold > top:
        out[:] = 0
        return
    # compare in the label type so the loop vectorizes
    t = <label_t>max(threshold, 0)
    with nogil:
        for i in range(n):
            out[i] = mask[i] >= t


def resize_nearest(const uint8_t[:, ::1] src, uint8_t[:, ::1] out):
    cdef Py_ssize_t in_h = src.shape[0], in_w = src.shape[1]
    cdef Py_ssize_t out_h = out.shape[0], out_w = out.shape[1]
    cdef Py_ssize_t y, x, sy
    cdef Py_ssize_t[::1] col_map
    import numpy as np
    col_map = np.empty(out_w, dtype=np.intp)
    for x in range(out_w):
        col_map[x] = min(((2 * x + 1) * in_w) // (2 * out_w), in_w - 1)
    with nogil:
        for y in range(out_h):
            sy = min(((2 * y + 1) * in_h) // (2 * out_h), in_h - 1)
            for x in range(out_w):
                out[y, x] = src[sy, col_map[x]]
