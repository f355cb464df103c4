"""Task-aligned anchor assignment.

Each ground-truth object scores its candidate anchors (anchors inside
its floored box at any level) with t = s^alpha * u^beta, where s is the
predicted probability of the object's class and u is the IoU between
the box decoded at the anchor and the object. The top-K anchors per
object supervise all three losses; anchors claimed by several objects
go to the claimant with the higher t.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .decoder import DenseMaps, dfl_expectation, sigmoid
from .encoder import DenseTargetMaps


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    """Exponents and top-K of the anchor alignment metric."""

    alpha: float = 1.0
    beta: float = 6.0
    k: int = 13

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise AssignmentError("alignment exponents must be nonnegative")
        if self.k < 1:
            raise AssignmentError("top-K must be at least 1")


def alignment_metric(s: float, u: float, cfg: AlignmentConfig) -> float:
    """t = s^alpha * u^beta with 0^0 defined as 1."""
    return float(s) ** cfg.alpha * float(u) ** cfg.beta


@dataclass(frozen=True)
class SelectedAnchor:
    """One anchor chosen to supervise an object."""

    level: int
    cell: tuple[int, int]  # (x, y)
    anchor_id: int
    t: float
    u: float
    s: float


@dataclass
class AssignmentResult:
    """Per-object selected anchors after conflict resolution."""

    cfg: AlignmentConfig
    levels: list
    object_classes: np.ndarray
    num_classes: int
    selected: list[list[SelectedAnchor]]
    conflicts: list[tuple[int, int, list[int]]] = field(default_factory=list)
    # conflicts: (anchor_id, winning object, losing objects)

    def foreground_maps(self) -> list[np.ndarray]:
        """Per level (H, W) int32 map of the assigned object index, -1
        where the anchor supervises nothing."""
        maps = [np.full((lv.height, lv.width), -1, dtype=np.int32) for lv in self.levels]
        for g, anchors in enumerate(self.selected):
            for a in anchors:
                x, y = a.cell
                maps[a.level][y, x] = g
        return maps


def _decoded_corner_grids(predictions: DenseMaps) -> list[np.ndarray]:
    grids = []
    for i, level in enumerate(predictions.levels):
        raw = predictions.box[i]
        if predictions.dfl_bins:
            raw = dfl_expectation(raw)
        offs = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
        s = float(level.stride)
        xs = np.arange(level.width, dtype=np.float64)[None, :]
        ys = np.arange(level.height, dtype=np.float64)[:, None]
        corners = np.empty((level.height, level.width, 4), dtype=np.float64)
        corners[..., 0] = s * (xs - offs[..., 0])
        corners[..., 1] = s * (ys - offs[..., 1])
        corners[..., 2] = s * (xs + offs[..., 2])
        corners[..., 3] = s * (ys + offs[..., 3])
        grids.append(corners)
    return grids


def _check_geometry(predictions: DenseMaps, targets: DenseTargetMaps) -> None:
    if len(predictions.levels) != len(targets.levels):
        raise AssignmentError("prediction and target level counts differ")
    for a, b in zip(predictions.levels, targets.levels):
        if (a.stride, a.height, a.width) != (b.stride, b.height, b.width):
            raise AssignmentError(f"level geometry mismatch: {a} vs {b}")


def _gather_candidates(predictions, targets, cfg):
    """Per object: candidate anchors with (t, u, s), sorted for top-K."""
    corner_grids = _decoded_corner_grids(predictions)
    prob_grids = [sigmoid(np.asarray(c, dtype=np.float64)) for c in predictions.cls]
    level_offset = np.cumsum([0] + [lv.num_cells for lv in predictions.levels])

    per_object = []
    for g in range(targets.num_objects):
        gt_box = targets.boxes[g : g + 1]
        cls_channel = int(targets.classes[g]) - 1
        cands = []
        for i, level in enumerate(predictions.levels):
            mask = targets.per_level[i].candidate_mask[:, :, g]
            ys, xs = np.nonzero(mask)
            if ys.size == 0:
                continue
            pred = corner_grids[i][ys, xs]
            u = _kernels.pairwise_iou(pred, gt_box)[:, 0]
            s = prob_grids[i][ys, xs, cls_channel]
            t = s**cfg.alpha * u**cfg.beta
            ids = level_offset[i] + ys * level.width + xs
            cands.extend(
                (float(t[j]), float(u[j]), float(s[j]), int(ids[j]), i, int(xs[j]), int(ys[j]))
                for j in range(ys.size)
            )
        cands.sort(key=lambda c: (-c[0], -c[1], c[3]))
        per_object.append(cands)
    return per_object


def _resolve(per_object, k):
    """Top-K per object, then give contested anchors to the higher-t
    claimant (ties by higher u, then lower object index)."""
    picks = [c[:k] for c in per_object]
    claims: dict[int, list[tuple]] = {}
    for g, chosen in enumerate(picks):
        for c in chosen:
            claims.setdefault(c[3], []).append((g, c))
    conflicts = []
    winners: dict[int, int] = {}
    for aid, claimants in claims.items():
        if len(claimants) == 1:
            winners[aid] = claimants[0][0]
            continue
        claimants.sort(key=lambda gc: (-gc[1][0], -gc[1][1], gc[0]))
        winners[aid] = claimants[0][0]
        conflicts.append((aid, claimants[0][0], [g for g, _ in claimants[1:]]))
    selected = []
    for g, chosen in enumerate(picks):
        kept = [
            SelectedAnchor(level=c[4], cell=(c[5], c[6]), anchor_id=c[3], t=c[0], u=c[1], s=c[2])
            for c in chosen
            if winners[c[3]] == g
        ]
        selected.append(kept)
    conflicts.sort(key=lambda t: t[0])
    return selected, conflicts


def assign(
    predictions: DenseMaps, targets: DenseTargetMaps, cfg: AlignmentConfig
) -> AssignmentResult:
    """Task-aligned top-K assignment over the candidate masks."""
    _check_geometry(predictions, targets)
    per_object = _gather_candidates(predictions, targets, cfg)
    selected, conflicts = _resolve(per_object, cfg.k)
    return AssignmentResult(
        cfg=cfg,
        levels=list(predictions.levels),
        object_classes=targets.classes.copy(),
        num_classes=predictions.schema.num_classes,
        selected=selected,
        conflicts=conflicts,
    )


def assign_all_positive(
    predictions: DenseMaps, targets: DenseTargetMaps, cfg: AlignmentConfig
) -> AssignmentResult:
    """Ablation variant: every candidate anchor supervises (no top-K).

    Contested anchors are still resolved with the standard conflict
    rule so no anchor serves two objects.
    """
    _check_geometry(predictions, targets)
    per_object = _gather_candidates(predictions, targets, cfg)
    selected, conflicts = _resolve(per_object, max((len(c) for c in per_object), default=1))
    return AssignmentResult(
        cfg=cfg,
        levels=list(predictions.levels),
        object_classes=targets.classes.copy(),
        num_classes=predictions.schema.num_classes,
        selected=selected,
        conflicts=conflicts,
    )


def normalized_cls_target(assignment: AssignmentResult) -> list[np.ndarray]:
    """Soft classification targets per level, shape (H, W, N).

    Per object the selected anchors get t / max(t) * max(u); everything
    else stays 0. Objects whose best t is 0 contribute nothing.
    """
    out = [
        np.zeros((lv.height, lv.width, assignment.num_classes), dtype=np.float64)
        for lv in assignment.levels
    ]
    for g, anchors in enumerate(assignment.selected):
        if not anchors:
            continue
        t_max = max(a.t for a in anchors)
        u_max = max(a.u for a in anchors)
        if t_max <= 0.0:
            continue
        ch = int(assignment.object_classes[g]) - 1
        for a in anchors:
            x, y = a.cell
            out[a.level][y, x, ch] = a.t / t_max * u_max
    return out
