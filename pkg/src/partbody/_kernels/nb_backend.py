"""Numba-jitted hot kernels.

Scalar loops, same IEEE arithmetic per element as the numpy backend
(no fastmath), so suppression decisions are bit-identical across
backends. Compiled objects are cached on disk.
"""
from __future__ import annotations

import numpy as np
from numba import njit

BACKEND = "numba"


@njit(cache=True)
def _iou_elem(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2):
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@njit(cache=True)
def _pairwise_iou(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            out[i, j] = _iou_elem(
                a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                b[j, 0], b[j, 1], b[j, 2], b[j, 3],
            )
    return out


@njit(cache=True)
def _nms_keep(boxes, order, iou_thr):
    n = order.shape[0]
    suppressed = np.zeros(boxes.shape[0], dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    count = 0
    for oi in range(n):
        i = order[oi]
        if suppressed[i]:
            continue
        keep[count] = i
        count += 1
        for oj in range(oi + 1, n):
            j = order[oj]
            if suppressed[j]:
                continue
            v = _iou_elem(
                boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3],
            )
            if v > iou_thr:
                suppressed[j] = True
    return keep[:count]


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _pairwise_iou(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
    )


def nms_keep(boxes: np.ndarray, order: np.ndarray, iou_thr: float) -> np.ndarray:
    return _nms_keep(
        np.ascontiguousarray(boxes, dtype=np.float64),
        np.ascontiguousarray(order, dtype=np.int64),
        float(iou_thr),
    )
