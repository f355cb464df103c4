"""Inference path: dense maps to scored boxes, NMS, body-center
reconstruction, and greedy minimum-distance part-to-body matching.

Every stage is a pure function with fully specified tie-breaks, so the
whole pipeline is deterministic and oracle-testable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import (
    BBox,
    ClassSchema,
    FeatureLevel,
    Point,
    center,
    contains,
    validate_levels,
)

REASON_NO_BODY = "no-enclosing-body"
REASON_CAPACITY = "capacity-exhausted"


@dataclass
class DenseMaps:
    """Raw per-level prediction grids plus the metadata needed to
    decode them (class table, offset scaling, optional DFL bins).

    ``box[i]`` is (H, W, 4) side offsets, or (H, W, 4, bins) logits in
    DFL mode; ``cls[i]`` is (H, W, N) logits; ``assoc[i]`` is (H, W, 2).
    ``assoc_absolute`` switches the association channel to
    image-normalized absolute offsets (the single-scale ablation).
    """

    levels: list[FeatureLevel]
    box: list[np.ndarray]
    cls: list[np.ndarray]
    assoc: list[np.ndarray]
    schema: ClassSchema
    lam: float
    dfl_bins: int | None = None
    assoc_absolute: bool = False

    def __post_init__(self):
        validate_levels(self.levels)
        n = self.schema.num_classes
        for lvl, b, c, a in zip(self.levels, self.box, self.cls, self.assoc):
            hw = (lvl.height, lvl.width)
            want_box = hw + ((4, self.dfl_bins) if self.dfl_bins else (4,))
            if b.shape != want_box:
                raise ValueError(f"box map shape {b.shape}, expected {want_box}")
            if c.shape != hw + (n,):
                raise ValueError(f"cls map shape {c.shape}, expected {hw + (n,)}")
            if a.shape != hw + (2,):
                raise ValueError(f"assoc map shape {a.shape}, expected {hw + (2,)}")

    @property
    def image_width(self) -> int:
        return self.levels[0].width * self.levels[0].stride

    @property
    def image_height(self) -> int:
        return self.levels[0].height * self.levels[0].stride


@dataclass(frozen=True)
class Detection:
    """One decoded detection with its source anchor."""

    box: BBox
    class_index: int
    score: float
    level: int
    cell: tuple[int, int]
    body_center: Point | None = None


@dataclass(frozen=True)
class NmsConfig:
    """Confidence and IoU thresholds, separately for bodies and parts."""

    body_conf: float = 0.05
    body_iou: float = 0.6
    part_conf: float = 0.05
    part_iou: float = 0.6

    def __post_init__(self):
        for v in (self.body_conf, self.body_iou, self.part_conf, self.part_iou):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"threshold {v} outside [0, 1]")

    @classmethod
    def body_hands(cls) -> "NmsConfig":
        return cls(0.05, 0.6, 0.05, 0.6)

    @classmethod
    def human_parts(cls) -> "NmsConfig":
        return cls(0.05, 0.6, 0.005, 0.75)


@dataclass
class AssociationResult:
    """Greedy matching output: matched pairs and unmatched parts.

    ``pairs`` holds (part index, body index, center distance in pixels)
    with indices into the part and body detection lists of the same
    decode. ``unmatched`` holds (part index, reason).
    """

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched: list[tuple[int, str]] = field(default_factory=list)

    def body_of(self, part_idx: int) -> int | None:
        for p, b, _ in self.pairs:
            if p == part_idx:
                return b
        return None


@dataclass
class DecodedScene:
    """Final per-image inference output."""

    bodies: list[Detection]
    parts: list[Detection]
    associations: AssociationResult
    image_id: int = 0

    @property
    def detections(self) -> list[Detection]:
        return self.bodies + self.parts


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dfl_expectation(logits: np.ndarray) -> np.ndarray:
    """Expectation decode of per-side bin distributions.

    ``logits`` has bins on the last axis; returns softmax-weighted bin
    indices with that axis reduced.
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    bins = np.arange(logits.shape[-1], dtype=np.float64)
    return p @ bins


def _level_offsets(maps: DenseMaps, i: int) -> np.ndarray:
    """Side offsets (H, W, 4) of level ``i``, expectation-decoded in DFL
    mode and clamped at 0 (side distances are nonnegative by
    construction, negative values can only come from noise)."""
    raw = maps.box[i]
    if maps.dfl_bins:
        raw = dfl_expectation(raw)
    return np.maximum(raw.astype(np.float64, copy=False), 0.0)


def decode_boxes(maps: DenseMaps, conf_floor: float) -> list[Detection]:
    """All anchors whose best class probability reaches ``conf_floor``.

    Boxes invert the side-offset encoding; part-class anchors also get
    the reconstructed body center. Output is in anchor order (levels in
    stride order, cells row-major), which later stages rely on for
    deterministic tie-breaking.
    """
    dets: list[Detection] = []
    img_w = maps.image_width
    schema = maps.schema
    part_set = set(schema.part_indices)
    for i, level in enumerate(maps.levels):
        s = float(level.stride)
        probs = sigmoid(np.asarray(maps.cls[i], dtype=np.float64))
        best_cls = probs.argmax(axis=-1)
        best_score = probs.max(axis=-1)
        ys, xs = np.nonzero(best_score >= conf_floor)
        if ys.size == 0:
            continue
        offs = _level_offsets(maps, i)
        assoc = np.asarray(maps.assoc[i], dtype=np.float64)
        for y, x in zip(ys.tolist(), xs.tolist()):
            l, t, r, b = offs[y, x]
            cls_idx = int(best_cls[y, x]) + 1
            bc = None
            if cls_idx in part_set:
                m, n = assoc[y, x]
                if maps.assoc_absolute:
                    bc = Point(s * x + m * img_w, s * y + n * img_w)
                else:
                    bc = Point(s * (x + maps.lam * m), s * (y + maps.lam * n))
            dets.append(
                Detection(
                    box=BBox(s * (x - l), s * (y - t), s * (x + r), s * (y + b)),
                    class_index=cls_idx,
                    score=float(best_score[y, x]),
                    level=i,
                    cell=(x, y),
                    body_center=bc,
                )
            )
    return dets


def nms(dets: list[Detection], cfg: NmsConfig, schema: ClassSchema) -> list[Detection]:
    """Class-aware greedy NMS with per-kind thresholds.

    Detections are visited by descending score (ties by input order); a
    detection is kept iff its score reaches the kind's confidence
    threshold and its IoU with every kept same-class detection does not
    exceed the kind's IoU threshold. Output keeps the visit order.
    """
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_index for d in dets], dtype=np.int64)

    kept: list[int] = []
    for c in sorted(set(classes.tolist())):
        is_part = schema.is_part(int(c))
        conf = cfg.part_conf if is_part else cfg.body_conf
        iou_thr = cfg.part_iou if is_part else cfg.body_iou
        idx = np.nonzero((classes == c) & (scores >= conf))[0]
        if idx.size == 0:
            continue
        order = idx[np.argsort(-scores[idx], kind="stable")]
        kept.extend(_kernels.nms_keep(boxes, order, iou_thr).tolist())

    kept.sort(key=lambda i: (-scores[i], i))
    return [dets[i] for i in kept]


def _remaining_capacity(capacity: dict[int, int], n_bodies: int) -> list[dict[int, int]]:
    return [dict(capacity) for _ in range(n_bodies)]


def _greedy_match(
    bodies: list[Detection],
    parts: list[Detection],
    capacity: dict[int, int],
    mode: str,
    point_of,
) -> AssociationResult:
    result = AssociationResult()
    remaining = _remaining_capacity(capacity, len(bodies))
    order = sorted(range(len(parts)), key=lambda i: (-parts[i].score, i))
    for pi in order:
        part = parts[pi]
        target = point_of(part)
        enclosing = [
            bi for bi, body in enumerate(bodies) if contains(body.box, part.box, mode)
        ]
        if not enclosing:
            result.unmatched.append((pi, REASON_NO_BODY))
            continue
        open_bodies = [
            bi for bi in enclosing if remaining[bi].get(part.class_index, 0) > 0
        ]
        if not open_bodies:
            result.unmatched.append((pi, REASON_CAPACITY))
            continue
        best_bi = None
        best_key = None
        for bi in open_bodies:
            bc = center(bodies[bi].box)
            dist = math.hypot(target.x - bc.x, target.y - bc.y)
            key = (dist, bodies[bi].box.area, bi)
            if best_key is None or key < best_key:
                best_key = key
                best_bi = bi
        remaining[best_bi][part.class_index] -= 1
        result.pairs.append((pi, best_bi, best_key[0]))
    result.pairs.sort(key=lambda t: t[0])
    result.unmatched.sort(key=lambda t: t[0])
    return result


def match_parts(
    bodies: list[Detection],
    parts: list[Detection],
    capacity: dict[int, int],
    mode: str = "center",
) -> AssociationResult:
    """Greedy minimum-distance matching of parts to enclosing bodies.

    Parts are processed in descending score order (ties by index). Each
    part considers bodies that enclose it and still have capacity for
    its class, and takes the one whose center is nearest its predicted
    body center (ties by smaller body area, then lower index).
    """
    return _greedy_match(
        bodies, parts, capacity, mode, lambda p: p.body_center or center(p.box)
    )


def match_parts_baseline(
    bodies: list[Detection],
    parts: list[Detection],
    capacity: dict[int, int],
    mode: str = "center",
) -> AssociationResult:
    """Ablation matcher: distance from the part's own box center."""
    return _greedy_match(bodies, parts, capacity, mode, lambda p: center(p.box))


def decode_pipeline(
    maps: DenseMaps,
    nms_cfg: NmsConfig,
    capacity: dict[int, int],
    lam: float | None = None,
    mode: str = "center",
    baseline_matcher: bool = False,
) -> DecodedScene:
    """decode -> split by kind -> NMS per stream -> greedy matching."""
    if lam is not None and lam != maps.lam:
        maps = DenseMaps(
            levels=maps.levels,
            box=maps.box,
            cls=maps.cls,
            assoc=maps.assoc,
            schema=maps.schema,
            lam=lam,
            dfl_bins=maps.dfl_bins,
            assoc_absolute=maps.assoc_absolute,
        )
    schema = maps.schema
    floor = min(nms_cfg.body_conf, nms_cfg.part_conf)
    dets = decode_boxes(maps, floor)
    body_stream = [d for d in dets if not schema.is_part(d.class_index)]
    part_stream = [d for d in dets if schema.is_part(d.class_index)]
    bodies = nms(body_stream, nms_cfg, schema)
    parts = nms(part_stream, nms_cfg, schema)
    matcher = match_parts_baseline if baseline_matcher else match_parts
    assoc = matcher(bodies, parts, capacity, mode)
    return DecodedScene(bodies=bodies, parts=parts, associations=assoc)
