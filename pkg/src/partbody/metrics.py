"""Evaluation suite: VOC AP, COCO-style AP sweeps, log-average miss
rate, miss-matching rate over part-body pairs, and the conditional
accuracy / joint AP pair metrics.

Matching is greedy in descending score order within each image; a
prediction takes the unmatched ground truth of highest IoU above the
threshold. Association-conditioned metrics reuse that matching and
demote a matched prediction to false positive when its association
fails, which keeps every constrained AP at or below its original.
Undefined metrics (no ground truth, no true positives) are reported as
``None`` rather than 0 so means cannot be silently biased.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import DecodedScene, Detection
from .encoder import SceneAnnotation
from .geometry import BBox, ClassSchema, iou

FPPI_REFS = np.logspace(-2.0, 0.0, 9)
COCO_THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]
SIZE_BUCKETS = {"M": (32.0**2, 96.0**2), "L": (96.0**2, float("inf"))}


@dataclass
class EvalPair:
    """Ground truth and predictions of one image."""

    scene: SceneAnnotation
    predicted: DecodedScene

    @property
    def image_id(self) -> int:
        return self.scene.image_id


# ---------------------------------------------------------------------------
# matching primitives


def _class_dets(pred: DecodedScene, class_index: int) -> list[tuple[int, Detection, bool]]:
    """Detections of one class with their position in the body or part
    list (the association table indexes those positions)."""
    out = []
    for pos, d in enumerate(pred.bodies):
        if d.class_index == class_index:
            out.append((pos, d, False))
    for pos, d in enumerate(pred.parts):
        if d.class_index == class_index:
            out.append((pos, d, True))
    return out


def _greedy_match(gt_boxes: list[BBox], dets: list[tuple[float, BBox]], iou_thr: float):
    """Match detections (already in visit order) to ground truths.

    Each detection takes the unmatched ground truth with the highest
    IoU >= iou_thr (ties to the lower index). Returns the matched
    ground-truth index per detection, -1 where unmatched.
    """
    taken = [False] * len(gt_boxes)
    out = []
    for _, box in dets:
        best = -1
        best_iou = iou_thr
        for gi, gbox in enumerate(gt_boxes):
            if taken[gi]:
                continue
            v = iou(box, gbox)
            if v > best_iou or (v == best_iou and v >= iou_thr and best == -1):
                best = gi
                best_iou = v
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


def _sorted_records(records):
    """Deterministic, image-order-invariant global ranking."""
    return sorted(records, key=lambda r: (-r[0], r[1], r[2]))


def _ap_all_points(tp_flags, n_gt: int) -> float:
    """All-points interpolated area under the precision/recall curve."""
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1.0)
    # envelope: precision at each recall is the max at any higher rank
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _pr_curve(tp_flags, scores, n_gt: int):
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    recall = (tp / n_gt) if n_gt else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1.0)
    return {
        "scores": [float(s) for s in scores],
        "recall": recall.tolist(),
        "precision": precision.tolist(),
    }


def _log_average(values) -> float:
    vals = np.asarray(values, dtype=np.float64)
    if np.all(vals == 0.0):
        return 0.0
    return float(np.exp(np.mean(np.log(np.maximum(vals, 1e-10)))))


def _lamr_from_staircase(fppi: np.ndarray, miss: np.ndarray) -> float:
    """Miss rate at the largest achieved FPPI <= each reference point
    (1 when no operating point qualifies), log-averaged."""
    picks = []
    for ref in FPPI_REFS:
        k = int(np.searchsorted(fppi, ref, side="right")) - 1
        picks.append(1.0 if k < 0 else float(miss[k]))
    return _log_average(picks)


# ---------------------------------------------------------------------------
# detection metrics


def _class_records(pairs, class_index: int, iou_thr: float, assoc_check=None):
    """Globally ranked (score, image_id, pos, tp) records for a class.

    ``assoc_check(pair, det_pos, is_part, matched_gt_index) -> bool``
    demotes a matched detection to false positive when it returns
    False (matching itself ignores associations).
    """
    records = []
    n_gt = 0
    for pair in pairs:
        gt_idx = [
            i for i, o in enumerate(pair.scene.objects) if o.class_index == class_index
        ]
        gt_boxes = [pair.scene.objects[i].box for i in gt_idx]
        n_gt += len(gt_boxes)
        dets = _class_dets(pair.predicted, class_index)
        dets.sort(key=lambda t: (-t[1].score, t[0]))
        matches = _greedy_match(gt_boxes, [(d.score, d.box) for _, d, _ in dets], iou_thr)
        for (pos, det, is_part), m in zip(dets, matches):
            tp = m >= 0
            if tp and assoc_check is not None:
                tp = assoc_check(pair, pos, is_part, gt_idx[m])
            records.append((det.score, pair.image_id, pos, tp))
    return _sorted_records(records), n_gt


def voc_ap(pairs, class_index: int, iou_thr: float = 0.5):
    """VOC average precision of one class; None with zero ground truth."""
    records, n_gt = _class_records(pairs, class_index, iou_thr)
    if n_gt == 0:
        return None
    return _ap_all_points([r[3] for r in records], n_gt)


def log_avg_miss_rate(pairs, class_index: int, iou_thr: float = 0.5):
    """Log-average miss rate over the 9 FPPI reference points."""
    records, n_gt = _class_records(pairs, class_index, iou_thr)
    if n_gt == 0:
        return None
    flags = np.asarray([r[3] for r in records], dtype=np.float64)
    fppi = np.cumsum(1.0 - flags) / max(len(pairs), 1)
    miss = 1.0 - np.cumsum(flags) / n_gt
    return _lamr_from_staircase(fppi, miss)


# ---------------------------------------------------------------------------
# association metrics


def _body_match_map(pair: EvalPair, iou_thr: float, body_class: int):
    """Matched ground-truth object index per body detection position."""
    gt_idx = [i for i, o in enumerate(pair.scene.objects) if o.class_index == body_class]
    gt_boxes = [pair.scene.objects[i].box for i in gt_idx]
    order = sorted(range(len(pair.predicted.bodies)), key=lambda i: (-pair.predicted.bodies[i].score, i))
    dets = [(pair.predicted.bodies[i].score, pair.predicted.bodies[i].box) for i in order]
    matches = _greedy_match(gt_boxes, dets, iou_thr)
    out = {}
    for pos, m in zip(order, matches):
        out[pos] = gt_idx[m] if m >= 0 else -1
    return out


def miss_matching_rate(pairs, part_class: int, schema: ClassSchema, iou_thr: float = 0.5):
    """Log-average miss-matching rate of ground-truth (body, part)
    pairs for one part class.

    A pair is hit when the part and its parent body are both matched at
    IoU >= iou_thr and the predicted association links exactly those
    two detections. Wrongly associated true-positive parts count as
    false pairs for the FPPI axis.
    """
    body_class = schema.body_index
    records = []
    n_pairs = 0
    for pair in pairs:
        gt_part_idx = [
            i for i, o in enumerate(pair.scene.objects) if o.class_index == part_class
        ]
        n_pairs += len(gt_part_idx)
        gt_boxes = [pair.scene.objects[i].box for i in gt_part_idx]
        body_map = _body_match_map(pair, iou_thr, body_class)
        dets = [
            (pos, d) for pos, d in enumerate(pair.predicted.parts) if d.class_index == part_class
        ]
        dets.sort(key=lambda t: (-t[1].score, t[0]))
        matches = _greedy_match(gt_boxes, [(d.score, d.box) for _, d in dets], iou_thr)
        for (pos, det), m in zip(dets, matches):
            tp = m >= 0
            assoc_body = pair.predicted.associations.body_of(pos)
            hit = False
            false_pair = False
            if tp and assoc_body is not None:
                parent = pair.scene.objects[gt_part_idx[m]].parent
                hit = body_map.get(assoc_body, -1) == parent
                false_pair = not hit
            records.append((det.score, pair.image_id, pos, hit, false_pair))
    if n_pairs == 0:
        return None
    records = _sorted_records(records)
    hits = np.cumsum([r[3] for r in records]).astype(np.float64)
    falses = np.cumsum([r[4] for r in records]).astype(np.float64)
    fppi = falses / max(len(pairs), 1)
    miss = 1.0 - hits / n_pairs
    return _lamr_from_staircase(fppi, miss)


def conditional_accuracy_and_joint_ap(
    pairs, schema: ClassSchema, part_class: int | None = None, iou_thr: float = 0.5
):
    """Association quality of a single part class.

    Conditional accuracy: among true-positive part detections, the
    fraction whose associated body box overlaps the ground-truth parent
    at IoU >= iou_thr (no association counts as wrong). Joint AP: VOC
    AP where a matched part stays a true positive only under that same
    parent check. Returns (conditional_accuracy, joint_ap), each None
    when undefined.
    """
    if part_class is None:
        if len(schema.part_indices) != 1:
            raise ValueError("part_class required when the schema has several part classes")
        part_class = schema.part_indices[0]

    def parent_ok(pair, pos, is_part, gt_obj_idx):
        if not is_part:
            return True
        assoc_body = pair.predicted.associations.body_of(pos)
        if assoc_body is None:
            return False
        parent = pair.scene.objects[gt_obj_idx].parent
        if parent is None:
            return False
        body_box = pair.predicted.bodies[assoc_body].box
        return iou(body_box, pair.scene.objects[parent].box) >= iou_thr

    plain, n_gt = _class_records(pairs, part_class, iou_thr)
    joint, _ = _class_records(pairs, part_class, iou_thr, assoc_check=parent_ok)

    n_tp = sum(1 for r in plain if r[3])
    if n_tp == 0:
        cond = None
    else:
        correct = sum(1 for r in joint if r[3])
        cond = correct / n_tp
    joint_ap = None if n_gt == 0 else _ap_all_points([r[3] for r in joint], n_gt)
    return cond, joint_ap


# ---------------------------------------------------------------------------
# COCO-style sweep


def _bucket_filter(pairs, bucket: str | None):
    if bucket is None:
        return pairs
    lo, hi = SIZE_BUCKETS[bucket]

    def keep(box: BBox) -> bool:
        return lo < box.area <= hi

    out = []
    for pair in pairs:
        keep_obj = [o for o in pair.scene.objects if keep(o.box)]
        # parent links are not used by plain AP, so drop them rather
        # than remap indices through the filter
        scene = SceneAnnotation(
            pair.scene.width,
            pair.scene.height,
            [type(o)(box=o.box, class_index=o.class_index, parent=None) for o in keep_obj],
            pair.scene.image_id,
        )
        pred = DecodedScene(
            bodies=[d for d in pair.predicted.bodies if keep(d.box)],
            parts=[d for d in pair.predicted.parts if keep(d.box)],
            associations=pair.predicted.associations,
            image_id=pair.predicted.image_id,
        )
        out.append(EvalPair(scene, pred))
    return out


def _subordinate_check(schema: ClassSchema, thr: float):
    def check(pair, pos, is_part, gt_obj_idx):
        if not is_part:
            return True
        assoc_body = pair.predicted.associations.body_of(pos)
        if assoc_body is None:
            return False
        parent = pair.scene.objects[gt_obj_idx].parent
        if parent is None:
            return False
        return iou(pair.predicted.bodies[assoc_body].box, pair.scene.objects[parent].box) >= thr

    return check


def _sweep_class(pairs, class_index: int, schema: ClassSchema, subordinate: bool):
    aps = []
    for thr in COCO_THRESHOLDS:
        check = _subordinate_check(schema, thr) if subordinate else None
        records, n_gt = _class_records(pairs, class_index, thr, assoc_check=check)
        aps.append(None if n_gt == 0 else _ap_all_points([r[3] for r in records], n_gt))
    return aps


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def coco_ap_sweep(pairs, schema: ClassSchema) -> dict:
    """Per-class AP at IoU 0.50:0.05:0.95 plus size-bucketed AP_M and
    AP_L, in original and association-subordinate variants.

    Subordination keeps the plain matching and demotes part detections
    whose associated body misses the parent at the sweep threshold;
    body-class subordinate APs equal the originals.
    """
    report: dict = {"thresholds": list(COCO_THRESHOLDS), "per_class": {}}
    for c in range(1, schema.num_classes + 1):
        is_part = schema.is_part(c)
        entry: dict = {"name": schema.name_of(c)}
        for sub in (False, True):
            if sub and not is_part:
                aps = entry["ap_per_threshold"]
                ap_m = entry["ap_m"]
                ap_l = entry["ap_l"]
            else:
                aps = _sweep_class(pairs, c, schema, sub)
                ap_m = _mean_defined(_sweep_class(_bucket_filter(pairs, "M"), c, schema, sub))
                ap_l = _mean_defined(_sweep_class(_bucket_filter(pairs, "L"), c, schema, sub))
            prefix = "sub_" if sub else ""
            entry[prefix + "ap_per_threshold"] = aps
            entry[prefix + "ap50"] = aps[0]
            entry[prefix + "ap5095"] = _mean_defined(aps)
            entry[prefix + "ap_m"] = ap_m
            entry[prefix + "ap_l"] = ap_l
        report["per_class"][c] = entry
    for key in ("ap50", "ap5095", "ap_m", "ap_l", "sub_ap50", "sub_ap5095", "sub_ap_m", "sub_ap_l"):
        report[key] = _mean_defined(e[key] for e in report["per_class"].values())
    return report


# ---------------------------------------------------------------------------
# full report


@dataclass
class MetricsReport:
    """Everything the evaluator produces for one dataset."""

    per_class: dict = field(default_factory=dict)
    mmr2: dict = field(default_factory=dict)
    conditional_accuracy: float | None = None
    joint_ap: float | None = None
    coco: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "mmr2": {str(k): v for k, v in self.mmr2.items()},
            "conditional_accuracy": self.conditional_accuracy,
            "joint_ap": self.joint_ap,
            "coco": _stringify_keys(self.coco),
            "curves": self.curves,
            "config": self.config,
        }


def _stringify_keys(obj):
    if isinstance(obj, dict):
        return {str(k): _stringify_keys(v) for k, v in obj.items()}
    return obj


def evaluate(
    pairs,
    schema: ClassSchema,
    iou_thr: float = 0.5,
    include_coco: bool = True,
    config_echo: dict | None = None,
) -> MetricsReport:
    """Run the full metric suite over evaluation pairs."""
    report = MetricsReport(config=dict(config_echo or {}))
    curves_pr = {}
    curves_fppi = {}
    for c in range(1, schema.num_classes + 1):
        records, n_gt = _class_records(pairs, c, iou_thr)
        flags = [r[3] for r in records]
        scores = [r[0] for r in records]
        entry = {
            "name": schema.name_of(c),
            "ap50": None if n_gt == 0 else _ap_all_points(flags, n_gt),
            "mr2": log_avg_miss_rate(pairs, c, iou_thr),
            "num_gt": n_gt,
        }
        curves_pr[str(c)] = _pr_curve(flags, scores, n_gt)
        if n_gt:
            f = np.asarray(flags, dtype=np.float64)
            curves_fppi[str(c)] = {
                "fppi": (np.cumsum(1.0 - f) / max(len(pairs), 1)).tolist(),
                "miss_rate": (1.0 - np.cumsum(f) / n_gt).tolist(),
            }
        if schema.is_part(c):
            entry["mmr2"] = miss_matching_rate(pairs, c, schema, iou_thr)
            cond, joint = conditional_accuracy_and_joint_ap(pairs, schema, c, iou_thr)
            entry["cond_accuracy"] = cond
            entry["joint_ap"] = joint
            report.mmr2[c] = entry["mmr2"]
        report.per_class[c] = entry
    if len(schema.part_indices) == 1:
        only = report.per_class[schema.part_indices[0]]
        report.conditional_accuracy = only["cond_accuracy"]
        report.joint_ap = only["joint_ap"]
    if include_coco:
        report.coco = coco_ap_sweep(pairs, schema)
    report.curves = {"pr": curves_pr, "fppi": curves_fppi}
    return report
