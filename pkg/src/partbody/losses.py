"""Association, box, distribution and classification losses with
analytic gradients.

Gradients are returned alongside every loss value so they can be
verified against central finite differences without pulling in a
learning framework. Reductions run in fixed index order, keeping all
results deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import AssignmentResult, normalized_cls_target
from .decoder import DenseMaps, dfl_expectation
from .encoder import DenseTargetMaps, encode_box_offsets
from .geometry import BBox


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite training objective."""

    w_iou: float = 7.5
    w_dfl: float = 1.5
    w_cls: float = 0.5
    w_assoc: float = 0.2

    def __post_init__(self):
        for v in (self.w_iou, self.w_dfl, self.w_cls, self.w_assoc):
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"loss weight {v} must be finite and nonnegative")


@dataclass(frozen=True)
class DflConfig:
    """Bin count of the per-side distance distributions."""

    bins_per_side: int = 16

    def __post_init__(self):
        if self.bins_per_side < 2:
            raise ValueError("at least 2 bins per side required")

    @property
    def max_offset(self) -> float:
        return float(self.bins_per_side - 1)


@dataclass
class LossReport:
    """Per-term values plus the weighted total and its gradients."""

    iou: float
    dfl: float
    cls: float
    assoc: float
    total: float
    gradients: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# association loss


def assoc_loss(
    pred_assoc: list[np.ndarray],
    targets: DenseTargetMaps,
    assignment: AssignmentResult,
    lam: float,
):
    """Mean L1 distance between floored parent centers and the centers
    reconstructed from the predicted offsets, over the selected anchors
    of every part object.

    The prefactor is 1 / (K * P) with K the configured top-K (even when
    fewer anchors were selected) and P the number of parts in the
    scene; zero parts gives loss 0. Returns (value, per-level gradient
    grids matching ``pred_assoc``).
    """
    grads = [np.zeros_like(np.asarray(a, dtype=np.float64)) for a in pred_assoc]
    part_ids = targets.part_object_indices()
    p_count = int(part_ids.size)
    if p_count == 0:
        return 0.0, grads
    k = assignment.cfg.k
    scale = 1.0 / (k * p_count)
    total = 0.0
    for g in part_ids:
        for a in assignment.selected[g]:
            x, y = a.cell
            fx, fy = targets.floored_parent_center(int(g), a.level)
            m, n = np.asarray(pred_assoc[a.level], dtype=np.float64)[y, x]
            rx = fx - (x + lam * m)
            ry = fy - (y + lam * n)
            total += 0.5 * (abs(rx) + abs(ry))
            grads[a.level][y, x, 0] += -lam * np.sign(rx) * 0.5 * scale
            grads[a.level][y, x, 1] += -lam * np.sign(ry) * 0.5 * scale
    return total * scale, grads


# ---------------------------------------------------------------------------
# GIoU loss


def giou(pred: np.ndarray, gt: np.ndarray):
    """Generalized IoU of corner-form box pairs, with the gradient of
    GIoU w.r.t. the predicted corners. Shapes (n, 4) -> (n,), (n, 4)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (gt[:, i] for i in range(4))

    pw = px2 - px1
    ph = py2 - py1
    area_p = pw * ph
    area_g = (gx2 - gx1) * (gy2 - gy1)

    iw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    act = (iw > 0) & (ih > 0)
    iw_c = np.where(act, iw, 0.0)
    ih_c = np.where(act, ih, 0.0)
    inter = iw_c * ih_c
    union = area_p + area_g - inter

    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    hull = cw * ch

    safe_u = union > 0
    iou_v = np.where(safe_u, inter / np.where(safe_u, union, 1.0), 0.0)
    safe_c = hull > 0
    penalty = np.where(safe_c, (hull - union) / np.where(safe_c, hull, 1.0), 0.0)
    giou_v = iou_v - penalty

    # dA_p / d(corner)
    d_ap = np.stack([-ph, -pw, ph, pw], axis=1)
    # dI / d(corner): the moving corner only matters when it is the
    # binding side of the intersection and the intersection is live
    d_i = np.stack(
        [
            np.where(px1 > gx1, -ih_c, 0.0),
            np.where(py1 > gy1, -iw_c, 0.0),
            np.where(px2 < gx2, ih_c, 0.0),
            np.where(py2 < gy2, iw_c, 0.0),
        ],
        axis=1,
    ) * act[:, None]
    d_u = d_ap - d_i
    # dC / d(corner)
    d_hull = np.stack(
        [
            np.where(px1 < gx1, -ch, 0.0),
            np.where(py1 < gy1, -cw, 0.0),
            np.where(px2 > gx2, ch, 0.0),
            np.where(py2 > gy2, cw, 0.0),
        ],
        axis=1,
    )

    u2 = np.where(safe_u, union * union, 1.0)
    d_iou = (d_i * union[:, None] - inter[:, None] * d_u) / u2[:, None]
    d_iou *= safe_u[:, None]
    c2 = np.where(safe_c, hull * hull, 1.0)
    d_penalty = (union[:, None] * d_hull - hull[:, None] * d_u) / c2[:, None]
    d_penalty *= safe_c[:, None]
    return giou_v, d_iou - d_penalty


def iou_loss(pred_boxes: np.ndarray, gt_boxes: np.ndarray):
    """Mean (1 - GIoU) over box pairs; gradient w.r.t. predicted
    corners. Empty input gives (0, empty grad)."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = pred_boxes.shape[0]
    if n == 0:
        return 0.0, np.zeros((0, 4), dtype=np.float64)
    g, dg = giou(pred_boxes, gt_boxes)
    return float(np.mean(1.0 - g)), -dg / n


# ---------------------------------------------------------------------------
# distribution focal loss


def dfl_loss(pred_side_logits: np.ndarray, targets: np.ndarray, cfg: DflConfig):
    """Cross-entropy on the two bins bracketing each continuous side
    offset, weighted by linear interpolation.

    Targets are clamped into [0, bins - 1]; the clamp count is
    reported. Returns (value, gradient on the logits, clamped)."""
    logits = np.asarray(pred_side_logits, dtype=np.float64).reshape(-1, cfg.bins_per_side)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if logits.shape[0] != y.shape[0]:
        raise ValueError("logit rows and targets disagree")
    n = y.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(np.asarray(pred_side_logits, dtype=np.float64)), 0

    y_cl = np.clip(y, 0.0, cfg.max_offset)
    clamped = int(np.sum(y_cl != y))
    li = np.minimum(np.floor(y_cl), cfg.bins_per_side - 2).astype(np.int64)
    ri = li + 1
    wr = y_cl - li
    wl = 1.0 - wr

    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    rows = np.arange(n)
    value = float(np.mean(-(wl * logp[rows, li] + wr * logp[rows, ri])))

    w = np.zeros_like(logits)
    w[rows, li] += wl
    w[rows, ri] += wr
    grad = (np.exp(logp) - w) / n
    return value, grad.reshape(np.asarray(pred_side_logits).shape), clamped


# ---------------------------------------------------------------------------
# classification loss


def cls_loss(pred_logits: list[np.ndarray], targets: list[np.ndarray]):
    """Mean binary cross-entropy against soft targets over all anchors
    and classes of all levels. Returns (value, per-level gradients)."""
    total = 0.0
    count = 0
    grads = []
    for z, yv in zip(pred_logits, targets):
        z = np.asarray(z, dtype=np.float64)
        yv = np.asarray(yv, dtype=np.float64)
        if z.shape != yv.shape:
            raise ValueError(f"logit/target shape mismatch {z.shape} vs {yv.shape}")
        total += float(np.sum(np.maximum(z, 0.0) - z * yv + np.log1p(np.exp(-np.abs(z)))))
        count += z.size
        grads.append(1.0 / (1.0 + np.exp(-z)) - yv)
    if count == 0:
        return 0.0, grads
    return total / count, [g / count for g in grads]


# ---------------------------------------------------------------------------
# composite


def total_loss(iou_term, dfl_term, cls_term, assoc_term, weights: LossWeights) -> LossReport:
    """Weighted sum of the four terms; gradients scale with the weights.

    Each ``*_term`` is (value, gradient) as returned by the individual
    loss functions (the dfl term may carry a trailing clamp count).
    """
    v_iou, g_iou = iou_term[0], iou_term[1]
    v_dfl, g_dfl = dfl_term[0], dfl_term[1]
    v_cls, g_cls = cls_term[0], cls_term[1]
    v_assoc, g_assoc = assoc_term[0], assoc_term[1]
    total = (
        weights.w_iou * v_iou
        + weights.w_dfl * v_dfl
        + weights.w_cls * v_cls
        + weights.w_assoc * v_assoc
    )
    gradients = {
        "iou": weights.w_iou * np.asarray(g_iou, dtype=np.float64),
        "dfl": (None if g_dfl is None else weights.w_dfl * np.asarray(g_dfl, dtype=np.float64)),
        "cls": [weights.w_cls * g for g in g_cls],
        "assoc": [weights.w_assoc * g for g in g_assoc],
    }
    return LossReport(
        iou=v_iou, dfl=v_dfl, cls=v_cls, assoc=v_assoc, total=total, gradients=gradients
    )


def gather_assigned(maps: DenseMaps, targets: DenseTargetMaps, assignment: AssignmentResult):
    """Per assigned anchor: decoded predicted box, the stride-scaled
    floored target box of the assigned object, and (anchor, object)
    bookkeeping. The box head is supervised against floored corners, so
    those are the regression targets here."""
    pred_rows = []
    gt_rows = []
    anchors = []
    for g, sel in enumerate(assignment.selected):
        box = BBox(*targets.boxes[g])
        for a in sel:
            level = targets.levels[a.level]
            s = float(level.stride)
            x, y = a.cell
            raw = maps.box[a.level]
            if maps.dfl_bins:
                offs = dfl_expectation(np.asarray(raw[y, x], dtype=np.float64))
            else:
                offs = np.asarray(raw[y, x], dtype=np.float64)
            offs = np.maximum(offs, 0.0)
            pred_rows.append(
                [s * (x - offs[0]), s * (y - offs[1]), s * (x + offs[2]), s * (y + offs[3])]
            )
            fo = encode_box_offsets(box, (x, y), level)
            gt_rows.append([s * (x - fo[0]), s * (y - fo[1]), s * (x + fo[2]), s * (y + fo[3])])
            anchors.append((g, a))
    pred = np.asarray(pred_rows, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_rows, dtype=np.float64).reshape(-1, 4)
    return pred, gt, anchors


def scene_loss(
    maps: DenseMaps,
    targets: DenseTargetMaps,
    assignment: AssignmentResult,
    weights: LossWeights,
    dfl_cfg: DflConfig | None = None,
) -> LossReport:
    """Full per-scene objective on one prediction/target pair."""
    pred_boxes, gt_boxes, anchors = gather_assigned(maps, targets, assignment)
    iou_term = iou_loss(pred_boxes, gt_boxes)

    if maps.dfl_bins:
        cfg = dfl_cfg or DflConfig(bins_per_side=maps.dfl_bins)
        logit_rows = np.zeros((len(anchors), 4, cfg.bins_per_side), dtype=np.float64)
        tgt_rows = np.zeros((len(anchors), 4), dtype=np.float64)
        for row, (g, a) in enumerate(anchors):
            x, y = a.cell
            logit_rows[row] = maps.box[a.level][y, x]
            tgt_rows[row] = encode_box_offsets(BBox(*targets.boxes[g]), (x, y), targets.levels[a.level])
        dfl_term = dfl_loss(logit_rows, tgt_rows, cfg)
    else:
        dfl_term = (0.0, None, 0)

    cls_targets = normalized_cls_target(assignment)
    cls_term = cls_loss(list(maps.cls), cls_targets)
    assoc_term = assoc_loss(list(maps.assoc), targets, assignment, maps.lam)
    return total_loss(iou_term, dfl_term, cls_term, assoc_term, weights)
