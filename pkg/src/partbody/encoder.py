"""Ground-truth annotations to dense per-level target maps.

Targets per grid cell: 4-channel box side offsets in cell units, a
2-channel scaled offset from part anchors to the floored parent body
center, a class index, and a per-object candidate mask. Every anchor
cell inside an object's floored box is a positive candidate for it;
when several objects claim one cell the dense grids store the
smallest-area object (ties to the lowest index) and the full claim set
stays available in the candidate mask for the assignment stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BBox,
    ClassSchema,
    FeatureLevel,
    Point,
    center,
    contains,
    validate_levels,
)

BACKGROUND = 0


class EncodingError(ValueError):
    """A scene or request violates the encoder's preconditions."""


@dataclass(frozen=True)
class GroundTruthObject:
    """One annotated object: box, class index, optional parent link.

    ``parent`` is the index of a body object in the same scene and is
    required for part-kind objects before encoding.
    """

    box: BBox
    class_index: int
    parent: int | None = None


@dataclass
class SceneAnnotation:
    """All annotations of one image."""

    width: int
    height: int
    objects: list[GroundTruthObject] = field(default_factory=list)
    image_id: int = 0

    def validate(self, schema: ClassSchema) -> None:
        for i, obj in enumerate(self.objects):
            if obj.class_index not in range(1, schema.num_classes + 1):
                raise EncodingError(f"object {i}: class {obj.class_index} not in schema")
            if obj.box.area <= 0.0:
                raise EncodingError(f"object {i}: degenerate (zero-area) box")
            if schema.is_part(obj.class_index):
                if obj.parent is None:
                    raise EncodingError(f"object {i}: part without parent")
                if not (0 <= obj.parent < len(self.objects)):
                    raise EncodingError(f"object {i}: parent index {obj.parent} out of range")
                if schema.is_part(self.objects[obj.parent].class_index):
                    raise EncodingError(f"object {i}: parent {obj.parent} is not a body")
            elif obj.parent is not None:
                raise EncodingError(f"object {i}: body objects cannot carry a parent link")

    def clamped(self) -> "SceneAnnotation":
        """Copy with boxes clamped to the image extent."""
        w, h = float(self.width), float(self.height)
        objs = [
            GroundTruthObject(
                box=BBox(
                    min(max(o.box.x_l, 0.0), w),
                    min(max(o.box.y_t, 0.0), h),
                    min(max(o.box.x_r, 0.0), w),
                    min(max(o.box.y_b, 0.0), h),
                ),
                class_index=o.class_index,
                parent=o.parent,
            )
            for o in self.objects
        ]
        return SceneAnnotation(self.width, self.height, objs, self.image_id)


@dataclass
class LevelTargets:
    """Dense target grids of a single feature level."""

    level: FeatureLevel
    box_offsets: np.ndarray        # (H, W, 4) float64, (l, t, r, b) in cell units
    assoc_offsets: np.ndarray      # (H, W, 2) float64, (m, n)
    class_target: np.ndarray       # (H, W) int32, 0 = background
    candidate_mask: np.ndarray     # (H, W, G) bool
    body_center_target: np.ndarray  # (H, W, 2) float64, floored parent center
    owner: np.ndarray              # (H, W) int32, object index or -1


@dataclass
class DenseTargetMaps:
    """Per-level targets plus the per-object scene arrays losses need."""

    levels: list[FeatureLevel]
    per_level: list[LevelTargets]
    schema: ClassSchema
    lam: float
    boxes: np.ndarray           # (G, 4) float64 corner form
    classes: np.ndarray         # (G,) int32
    parents: np.ndarray         # (G,) int32, -1 for bodies
    parent_centers: np.ndarray  # (G, 2) float64, NaN rows for bodies

    @property
    def num_objects(self) -> int:
        return int(self.boxes.shape[0])

    def part_object_indices(self) -> np.ndarray:
        return np.nonzero(self.parents >= 0)[0]

    def floored_parent_center(self, g: int, level_idx: int) -> tuple[int, int]:
        """floor(parent center / stride) of part object ``g`` at a level."""
        s = self.levels[level_idx].stride
        cx, cy = self.parent_centers[g]
        return (int(math.floor(cx / s)), int(math.floor(cy / s)))


def floored_corners(box: BBox, level: FeatureLevel) -> tuple[int, int, int, int]:
    """Box corners mapped to cell coordinates by flooring (unclamped)."""
    s = level.stride
    return (
        int(math.floor(box.x_l / s)),
        int(math.floor(box.y_t / s)),
        int(math.floor(box.x_r / s)),
        int(math.floor(box.y_b / s)),
    )


def encode_box_offsets(box: BBox, cell: tuple[int, int], level: FeatureLevel) -> np.ndarray:
    """Side offsets (l, t, r, b) of ``cell`` against the floored box corners.

    The cell must lie inside the floored box extents, which makes all
    four offsets nonnegative and the encoding exactly invertible.
    """
    fx_l, fy_t, fx_r, fy_b = floored_corners(box, level)
    x_i, y_i = cell
    if not (fx_l <= x_i <= fx_r and fy_t <= y_i <= fy_b):
        raise EncodingError(
            f"cell {cell} outside floored box extents "
            f"({fx_l},{fy_t})..({fx_r},{fy_b}) at stride {level.stride}"
        )
    return np.array([x_i - fx_l, y_i - fy_t, fx_r - x_i, fy_b - y_i], dtype=np.float64)


def encode_assoc_offset(
    body_center: Point, cell: tuple[int, int], level: FeatureLevel, lam: float
) -> np.ndarray:
    """Scaled offset (m, n) from ``cell`` to the floored body center."""
    if lam <= 0.0:
        raise EncodingError(f"lambda must be positive, got {lam}")
    s = level.stride
    fx = math.floor(body_center.x / s)
    fy = math.floor(body_center.y / s)
    x_i, y_i = cell
    return np.array([(fx - x_i) / lam, (fy - y_i) / lam], dtype=np.float64)


def resolve_parent(part: GroundTruthObject, scene: SceneAnnotation, schema: ClassSchema) -> int:
    """Pick the parent body of a part lacking an explicit link.

    Uses the explicit parent when present; otherwise the enclosing body
    (center mode) with the nearest center, ties broken by smaller area
    then lower index. Raises if nothing encloses the part.
    """
    if not schema.is_part(part.class_index):
        raise EncodingError("resolve_parent called on a non-part object")
    if part.parent is not None:
        return part.parent
    pc = center(part.box)
    best = None
    for i, obj in enumerate(scene.objects):
        if schema.is_part(obj.class_index):
            continue
        if not contains(obj.box, part.box, "center"):
            continue
        bc = center(obj.box)
        dist = math.hypot(bc.x - pc.x, bc.y - pc.y)
        key = (dist, obj.box.area, i)
        if best is None or key < best[0]:
            best = (key, i)
    if best is None:
        raise EncodingError("orphan part: no enclosing body found")
    return best[1]


def encode_scene(
    scene: SceneAnnotation,
    levels: list[FeatureLevel],
    lam: float,
    schema: ClassSchema,
) -> DenseTargetMaps:
    """Encode one scene into dense target maps for every level.

    Cells inside several objects' floored boxes carry all claims in the
    candidate mask; the dense grids store the smallest-area claimant.
    """
    validate_levels(levels)
    scene.validate(schema)
    if lam <= 0.0:
        raise EncodingError(f"lambda must be positive, got {lam}")

    g_count = len(scene.objects)
    boxes = np.array(
        [o.box.as_tuple() for o in scene.objects], dtype=np.float64
    ).reshape(g_count, 4)
    classes = np.array([o.class_index for o in scene.objects], dtype=np.int32)
    parents = np.array(
        [o.parent if o.parent is not None else -1 for o in scene.objects], dtype=np.int32
    )
    parent_centers = np.full((g_count, 2), np.nan, dtype=np.float64)
    for g, obj in enumerate(scene.objects):
        if obj.parent is not None:
            pc = center(scene.objects[obj.parent].box)
            parent_centers[g] = (pc.x, pc.y)

    # smallest area wins the dense slots; paint larger objects first
    if g_count:
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        paint_order = sorted(range(g_count), key=lambda g: (-areas[g], -g))
    else:
        paint_order = []

    per_level = []
    for level in levels:
        h, w = level.height, level.width
        lt = LevelTargets(
            level=level,
            box_offsets=np.zeros((h, w, 4), dtype=np.float64),
            assoc_offsets=np.zeros((h, w, 2), dtype=np.float64),
            class_target=np.zeros((h, w), dtype=np.int32),
            candidate_mask=np.zeros((h, w, g_count), dtype=bool),
            body_center_target=np.zeros((h, w, 2), dtype=np.float64),
            owner=np.full((h, w), -1, dtype=np.int32),
        )
        s = level.stride
        spans = {}
        for g, obj in enumerate(scene.objects):
            fx_l, fy_t, fx_r, fy_b = floored_corners(obj.box, level)
            x0, x1 = max(fx_l, 0), min(fx_r, w - 1)
            y0, y1 = max(fy_t, 0), min(fy_b, h - 1)
            if x0 > x1 or y0 > y1:
                continue
            lt.candidate_mask[y0 : y1 + 1, x0 : x1 + 1, g] = True
            spans[g] = (x0, x1, y0, y1, fx_l, fy_t, fx_r, fy_b)

        for g in paint_order:
            if g not in spans:
                continue
            x0, x1, y0, y1, fx_l, fy_t, fx_r, fy_b = spans[g]
            lt.owner[y0 : y1 + 1, x0 : x1 + 1] = g

        for g in spans:
            x0, x1, y0, y1, fx_l, fy_t, fx_r, fy_b = spans[g]
            sel = lt.owner[y0 : y1 + 1, x0 : x1 + 1] == g
            if not sel.any():
                continue
            xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
            ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
            block = np.empty(sel.shape + (4,), dtype=np.float64)
            block[..., 0] = xs - fx_l
            block[..., 1] = ys - fy_t
            block[..., 2] = fx_r - xs
            block[..., 3] = fy_b - ys
            view = lt.box_offsets[y0 : y1 + 1, x0 : x1 + 1]
            view[sel] = block[sel]
            cls_view = lt.class_target[y0 : y1 + 1, x0 : x1 + 1]
            cls_view[sel] = classes[g]
            if parents[g] >= 0:
                cx, cy = parent_centers[g]
                fx = math.floor(cx / s)
                fy = math.floor(cy / s)
                ab = np.empty(sel.shape + (2,), dtype=np.float64)
                ab[..., 0] = (fx - xs) / lam
                ab[..., 1] = (fy - ys) / lam
                av = lt.assoc_offsets[y0 : y1 + 1, x0 : x1 + 1]
                av[sel] = ab[sel]
                bc = lt.body_center_target[y0 : y1 + 1, x0 : x1 + 1]
                bc[sel] = (fx, fy)
        per_level.append(lt)

    return DenseTargetMaps(
        levels=list(levels),
        per_level=per_level,
        schema=schema,
        lam=float(lam),
        boxes=boxes,
        classes=classes,
        parents=parents,
        parent_centers=parent_centers,
    )
