"""Pure-numpy implementations of the hot kernels.

These are the fallback path used when numba is unavailable or disabled
via ``PARTBODY_NUMBA=0``. The arithmetic is element-for-element the
same as the jitted versions so both backends make identical decisions.
"""
from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between two corner-form box arrays, shapes (n,4) and (m,4)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    iw = np.maximum(iw, 0.0)
    ih = np.maximum(ih, 0.0)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms_keep(boxes: np.ndarray, order: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy suppression over boxes visited in ``order``.

    Keeps a box iff its IoU with every already-kept box is <= iou_thr.
    Returns the kept positions (indices into ``boxes``) in visit order.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.asarray(order, dtype=np.int64)
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        if rest.size == 0:
            break
        iw = np.maximum(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0)
        ih = np.maximum(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        iou = np.zeros_like(inter)
        np.divide(inter, union, out=iou, where=union > 0.0)
        order = rest[iou <= iou_thr]
    return np.asarray(keep, dtype=np.int64)
