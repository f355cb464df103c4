"""Synthetic scene generator and prediction-noise model.

Scenes come with known part-parent links, so the decode pipeline and
every association metric can be tested end to end without a trained
network. Noise-free rendering lifts the encoder's targets into
prediction space; class logits carry the task-aligned soft targets
(so anchor scores equal the aligned quality of their boxes), which is
what makes the noiseless round trip exact. All randomness is drawn
from seeds combined with per-scene counters, so corpora are
reproducible and order-independent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import AlignmentConfig, assign, assign_all_positive
from .decoder import DenseMaps, NmsConfig, decode_pipeline
from .encoder import (
    DenseTargetMaps,
    GroundTruthObject,
    SceneAnnotation,
    encode_assoc_offset,
    encode_box_offsets,
    encode_scene,
)
from .geometry import BBox, ClassSchema, FeatureLevel, Point, iou, make_levels
from .metrics import EvalPair, evaluate

LOGIT_HI = 8.0
LOGIT_LO = -8.0


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class PartSpec:
    """How one part class is sampled inside each body.

    Default sizes keep parts large enough that their floored boxes at
    stride 8 still overlap the truth at IoU >= 0.5, which the noiseless
    round trip relies on.
    """

    class_index: int
    prob: float = 1.0
    size_min: float = 0.3    # relative to the parent body
    size_max: float = 0.42
    max_count: int = 1

    def __post_init__(self):
        if not (0.0 <= self.prob <= 1.0):
            raise SimulationError(f"part probability {self.prob} outside [0, 1]")
        if self.size_min > self.size_max:
            raise SimulationError("part size_min exceeds size_max")
        if self.size_max > 1.0:
            raise SimulationError("infeasible spec: parts larger than bodies")
        if self.max_count < 1:
            raise SimulationError("part max_count must be >= 1")


@dataclass(frozen=True)
class SceneSpec:
    """Scene sampling parameters. Deterministic given (spec, index)."""

    width: int = 512
    height: int = 512
    bodies_min: int = 1
    bodies_max: int = 4
    body_size_min: float = 0.3   # relative to min(width, height)
    body_size_max: float = 0.45
    parts: tuple[PartSpec, ...] = ()
    crowding: float = 0.0        # target pairwise IoU of chained placements
    occlusion_prob: float = 0.0  # chance a body box is cropped on one side
    min_center_separation: float = 0.0
    part_min_pixels: float = 48.0
    part_overlap_cap: float = 0.35  # max IoU between same-class parts
    body_overlap_cap: float = 0.55  # max incidental body-body IoU (below NMS tau)
    seed: int = 0

    def __post_init__(self):
        if self.bodies_min < 0 or self.bodies_max < self.bodies_min:
            raise SimulationError("invalid body count range")
        if not (0.0 <= self.crowding < 1.0):
            raise SimulationError("crowding must be in [0, 1)")
        if not (0.0 <= self.occlusion_prob <= 1.0):
            raise SimulationError("occlusion probability outside [0, 1]")
        if self.crowding > 0.0 and self.min_center_separation > 0.0:
            w_min = self.body_size_min * min(self.width, self.height)
            gap = w_min * (1.0 - self.crowding) / (1.0 + self.crowding)
            if gap < self.min_center_separation:
                raise SimulationError(
                    "infeasible spec: crowded placements cannot honor "
                    f"min_center_separation ({gap:.1f} < {self.min_center_separation})"
                )


@dataclass(frozen=True)
class NoiseSpec:
    """Prediction-space perturbations; all rates and sigmas >= 0."""

    box_sigma: float = 0.0    # cell units on the side offsets
    assoc_sigma: float = 0.0  # raw units on the association channel
    cls_sigma: float = 0.0    # logits
    fp_rate: float = 0.0      # expected spurious anchors per GT object
    drop_rate: float = 0.0    # chance an object's anchors go dark
    seed: int = 0

    def __post_init__(self):
        for v in (self.box_sigma, self.assoc_sigma, self.cls_sigma):
            if v < 0.0:
                raise SimulationError(f"sigma {v} must be nonnegative")
        if not (0.0 <= self.drop_rate <= 1.0):
            raise SimulationError("drop rate outside [0, 1]")
        if self.fp_rate < 0.0:
            raise SimulationError("false-positive rate must be nonnegative")


def default_parts(schema: ClassSchema, prob: float = 0.9) -> tuple[PartSpec, ...]:
    """One PartSpec per part class; the side-agnostic hand class may
    appear twice per body."""
    specs = []
    for c in schema.part_indices:
        count = 2 if schema.name_of(c) == "hand" else 1
        specs.append(PartSpec(class_index=c, prob=prob, max_count=count))
    return tuple(specs)


# ---------------------------------------------------------------------------
# scene generation


def _separated(x, y, w, h, placed, min_sep) -> bool:
    cx, cy = x + w / 2.0, y + h / 2.0
    for bx in placed:
        ox, oy = (bx.x_l + bx.x_r) / 2.0, (bx.y_t + bx.y_b) / 2.0
        if math.hypot(cx - ox, cy - oy) < min_sep:
            return False
    return True


def _place_bodies(rng, spec: SceneSpec, n: int) -> list[BBox]:
    w_img, h_img = float(spec.width), float(spec.height)
    base = min(w_img, h_img)
    overlap_cap = max(spec.body_overlap_cap, spec.crowding) + 1e-9
    placed: list[BBox] = []
    for i in range(n):
        accepted = None
        for _attempt in range(32):
            crowd = spec.crowding > 0.0 and placed and _attempt < 24
            if crowd:
                anchor = placed[int(rng.integers(0, len(placed)))]
                bw, bh = anchor.width, anchor.height
                axis = int(rng.integers(0, 2))
                sign = 1.0 if rng.random() < 0.5 else -1.0
                c = spec.crowding
                if axis == 0:
                    d = bw * (1.0 - c) / (1.0 + c)
                    x, y = anchor.x_l + sign * d, anchor.y_t
                    if not (0.0 <= x <= w_img - bw):
                        x = anchor.x_l - sign * d
                else:
                    d = bh * (1.0 - c) / (1.0 + c)
                    x, y = anchor.x_l, anchor.y_t + sign * d
                    if not (0.0 <= y <= h_img - bh):
                        y = anchor.y_t - sign * d
            else:
                bw = rng.uniform(spec.body_size_min * base, spec.body_size_max * base)
                bh = min(bw * rng.uniform(1.0, 1.35), 0.92 * h_img)
                x = rng.uniform(0.0, w_img - bw)
                y = rng.uniform(0.0, h_img - bh)
            x = min(max(x, 0.0), w_img - bw)
            y = min(max(y, 0.0), h_img - bh)
            cand = BBox(x, y, x + bw, y + bh)
            if spec.min_center_separation > 0.0 and not _separated(
                x, y, bw, bh, placed, spec.min_center_separation
            ):
                continue
            # stay below the NMS threshold so two true bodies can
            # never suppress each other after quantization
            if any(iou(cand, other) > overlap_cap for other in placed):
                continue
            accepted = cand
            break
        if accepted is not None:
            placed.append(accepted)
    return placed


def _occlude(rng, body: BBox, child_centers) -> BBox:
    side = int(rng.integers(0, 4))
    frac = rng.uniform(0.1, 0.4)
    x_l, y_t, x_r, y_b = body.as_tuple()
    margin = 1.0
    if side == 0:  # crop left edge inward
        limit = min([c[0] for c in child_centers], default=x_r) - margin
        x_l = min(x_l + frac * body.width, limit, x_r - margin)
        x_l = max(x_l, body.x_l)
    elif side == 1:
        limit = max([c[0] for c in child_centers], default=x_l) + margin
        x_r = max(x_r - frac * body.width, limit, x_l + margin)
        x_r = min(x_r, body.x_r)
    elif side == 2:
        limit = min([c[1] for c in child_centers], default=y_b) - margin
        y_t = min(y_t + frac * body.height, limit, y_b - margin)
        y_t = max(y_t, body.y_t)
    else:
        limit = max([c[1] for c in child_centers], default=y_t) + margin
        y_b = max(y_b - frac * body.height, limit, y_t + margin)
        y_b = min(y_b, body.y_b)
    return BBox(x_l, y_t, x_r, y_b)


def generate_scene(spec: SceneSpec, schema: ClassSchema, index: int = 0) -> SceneAnnotation:
    """Sample one scene: bodies with controlled overlap, parts placed
    fully inside their parents with recorded links."""
    rng = np.random.default_rng([spec.seed, index])
    n_bodies = int(rng.integers(spec.bodies_min, spec.bodies_max + 1))
    bodies = _place_bodies(rng, spec, n_bodies)

    part_specs = spec.parts or default_parts(schema)
    part_objs: list[GroundTruthObject] = []
    child_centers: list[list[tuple[float, float]]] = [[] for _ in bodies]
    for bi, body in enumerate(bodies):
        for ps in part_specs:
            for _ in range(ps.max_count):
                if rng.random() >= ps.prob:
                    continue
                rel = rng.uniform(ps.size_min, ps.size_max)
                pw = max(rel * body.width, min(spec.part_min_pixels, 0.9 * body.width))
                ph = max(rel * body.height, min(spec.part_min_pixels, 0.9 * body.height))
                if pw > body.width or ph > body.height:
                    raise SimulationError("infeasible spec: parts larger than bodies")
                # keep same-class parts apart so NMS cannot merge two
                # true boxes; give up on the instance after a few tries
                for _try in range(12):
                    px = rng.uniform(body.x_l, body.x_r - pw)
                    py = rng.uniform(body.y_t, body.y_b - ph)
                    cand = BBox(px, py, px + pw, py + ph)
                    clash = any(
                        o.class_index == ps.class_index
                        and iou(o.box, cand) > spec.part_overlap_cap
                        for o in part_objs
                    )
                    if not clash:
                        break
                else:
                    continue
                part_objs.append(
                    GroundTruthObject(box=cand, class_index=ps.class_index, parent=bi)
                )
                child_centers[bi].append((px + pw / 2.0, py + ph / 2.0))

    final_bodies = []
    for bi, body in enumerate(bodies):
        if spec.occlusion_prob > 0.0 and rng.random() < spec.occlusion_prob:
            body = _occlude(rng, body, child_centers[bi])
        final_bodies.append(GroundTruthObject(box=body, class_index=schema.body_index))

    scene = SceneAnnotation(
        width=spec.width,
        height=spec.height,
        objects=final_bodies + part_objs,
        image_id=index,
    )
    scene.validate(schema)
    return scene


# ---------------------------------------------------------------------------
# prediction rendering


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1.0 / (1.0 + math.exp(-LOGIT_LO)), 1.0 / (1.0 + math.exp(-LOGIT_HI)))
    return np.log(p / (1.0 - p))


def _free_candidate(targets: DenseTargetMaps, g: int, used: set):
    """First candidate anchor of object ``g`` not supervising anything
    else, searching finest level first in row-major order."""
    from .assignment import SelectedAnchor

    offset = 0
    for i, lt in enumerate(targets.per_level):
        ys, xs = np.nonzero(lt.candidate_mask[:, :, g])
        for y, x in zip(ys.tolist(), xs.tolist()):
            aid = offset + y * lt.level.width + x
            if aid not in used:
                return SelectedAnchor(level=i, cell=(x, y), anchor_id=aid, t=0.0, u=0.0, s=1.0)
        offset += lt.level.num_cells
    return None


def _absolute_assoc(targets: DenseTargetMaps) -> list[np.ndarray]:
    """Association offsets as image-normalized absolute distances, for
    the single-scale ablation. Normalizes by the grid extent so the
    decoder inverts it exactly."""
    lv0 = targets.levels[0]
    img_w = float(lv0.width * lv0.stride)
    out = []
    for lt in targets.per_level:
        s = float(lt.level.stride)
        grid = np.zeros_like(lt.assoc_offsets)
        ys, xs = np.nonzero(lt.owner >= 0)
        for y, x in zip(ys.tolist(), xs.tolist()):
            g = lt.owner[y, x]
            if targets.parents[g] < 0:
                continue
            cx, cy = targets.parent_centers[g]
            grid[y, x, 0] = (cx - s * x) / img_w
            grid[y, x, 1] = (cy - s * y) / img_w
        out.append(grid)
    return out


def render_predictions(
    scene: SceneAnnotation,
    levels: list[FeatureLevel],
    schema: ClassSchema,
    lam: float = 2.0,
    noise: NoiseSpec | None = None,
    align: AlignmentConfig | None = None,
    task_align: bool = True,
    multi_scale: bool = True,
    dfl_bins: int | None = None,
) -> DenseMaps:
    """Lift a scene's encoder targets into prediction maps, then apply
    the noise model.

    Class logits encode the task-aligned soft targets of an assignment
    run on the clean maps, so with zero noise the decode pipeline
    recovers every box and association (each anchor's score equals the
    aligned quality of the box it carries, and weakly aligned anchors
    fall below any sensible confidence threshold).
    """
    targets = encode_scene(scene, levels, lam, schema)
    n_cls = schema.num_classes

    box_maps = [lt.box_offsets.copy() for lt in targets.per_level]
    if multi_scale:
        assoc_maps = [lt.assoc_offsets.copy() for lt in targets.per_level]
    else:
        assoc_maps = _absolute_assoc(targets)

    # phase 1: saturated logits on owned cells, used only to score the
    # assignment (uniform s makes t follow the box IoU)
    cls_stage1 = []
    for lt in targets.per_level:
        logits = np.full((lt.level.height, lt.level.width, n_cls), LOGIT_LO)
        ys, xs = np.nonzero(lt.class_target > 0)
        logits[ys, xs, lt.class_target[ys, xs] - 1] = LOGIT_HI
        cls_stage1.append(logits)

    def build_maps(cls_list):
        return DenseMaps(
            levels=list(levels),
            box=[b.copy() for b in box_maps],
            cls=cls_list,
            assoc=[a.copy() for a in assoc_maps],
            schema=schema,
            lam=lam,
            assoc_absolute=not multi_scale,
        )

    cfg = align or AlignmentConfig()
    assigner = assign if task_align else assign_all_positive
    assignment = assigner(build_maps(cls_stage1), targets, cfg)

    # an object can lose its whole top-K to conflicts (no backfill);
    # the ideal network would still fire somewhere inside it, so give
    # such objects their first free candidate anchor, finest level
    selected = [list(sel) for sel in assignment.selected]
    used = {a.anchor_id for sel in selected for a in sel}
    for g, sel in enumerate(selected):
        if sel:
            continue
        fallback = _free_candidate(targets, g, used)
        if fallback is not None:
            selected[g] = [fallback]
            used.add(fallback.anchor_id)

    # phase 2: every selected anchor carries its own object's exact
    # offsets (the dense grids hold one object per cell, but objects
    # fully covered by overlapping neighbors still keep supervision
    # anchors after conflict resolution), and its logit encodes the
    # aligned soft target of the box actually written there, so anchor
    # scores match box quality and weakly aligned anchors fall below
    # any sensible confidence threshold
    cls_maps = [
        np.full((lv.height, lv.width, n_cls), LOGIT_LO, dtype=np.float64) for lv in levels
    ]
    img_w = float(levels[0].width * levels[0].stride)
    for g, sel in enumerate(selected):
        if not sel:
            continue
        gt_box = BBox(*targets.boxes[g])
        is_part = targets.parents[g] >= 0
        ch = int(targets.classes[g]) - 1
        u_by_level = {}
        for a in sel:
            x, y = a.cell
            level = levels[a.level]
            offs = encode_box_offsets(gt_box, (x, y), level)
            box_maps[a.level][y, x] = offs
            if a.level not in u_by_level:
                s = float(level.stride)
                own = BBox(s * (x - offs[0]), s * (y - offs[1]), s * (x + offs[2]), s * (y + offs[3]))
                u_by_level[a.level] = iou(own, gt_box)
            if is_part:
                cx, cy = targets.parent_centers[g]
                if multi_scale:
                    assoc_maps[a.level][y, x] = encode_assoc_offset(
                        Point(cx, cy), (x, y), level, lam
                    )
                else:
                    s = float(level.stride)
                    assoc_maps[a.level][y, x] = ((cx - s * x) / img_w, (cy - s * y) / img_w)
        u_max = max(u_by_level.values())
        if u_max <= 0.0:
            continue
        for a in sel:
            x, y = a.cell
            score = (u_by_level[a.level] / u_max) ** cfg.beta * u_max
            if score > 0.0:
                cls_maps[a.level][y, x, ch] = _logit(np.float64(score))

    if dfl_bins:
        dfl_maps = []
        for b in box_maps:
            logits = np.full(b.shape + (dfl_bins,), LOGIT_LO)
            bins = np.clip(np.rint(b).astype(np.int64), 0, dfl_bins - 1)
            for side in range(4):
                idx = bins[..., side]
                h, w = idx.shape
                logits[np.arange(h)[:, None], np.arange(w)[None, :], side, idx] = LOGIT_HI
            dfl_maps.append(logits)
        box_maps = dfl_maps

    if noise is not None:
        rng = np.random.default_rng([noise.seed, scene.image_id])
        # sigmas scale fixed draws, so sweeping a sigma moves every
        # prediction monotonically away from its clean value
        box_maps = [b + noise.box_sigma * rng.standard_normal(b.shape) for b in box_maps]
        assoc_maps = [a + noise.assoc_sigma * rng.standard_normal(a.shape) for a in assoc_maps]
        cls_maps = [c + noise.cls_sigma * rng.standard_normal(c.shape) for c in cls_maps]
        if noise.drop_rate > 0.0:
            for g in range(targets.num_objects):
                dropped = rng.random() < noise.drop_rate
                if not dropped:
                    continue
                ch = int(targets.classes[g]) - 1
                for a in selected[g]:
                    x, y = a.cell
                    cls_maps[a.level][y, x, ch] = LOGIT_LO
        if noise.fp_rate > 0.0:
            count = int(rng.poisson(noise.fp_rate * max(targets.num_objects, 1)))
            for _ in range(count):
                li = int(rng.integers(0, len(levels)))
                lv = levels[li]
                y = int(rng.integers(0, lv.height))
                x = int(rng.integers(0, lv.width))
                c = int(rng.integers(0, n_cls))
                score = rng.uniform(0.3, 0.8)
                cls_maps[li][y, x, c] = math.log(score / (1.0 - score))
                if not dfl_bins:
                    box_maps[li][y, x] = rng.uniform(0.5, 3.0, size=4)

    maps = DenseMaps(
        levels=list(levels),
        box=[np.ascontiguousarray(b, dtype=np.float32) for b in box_maps],
        cls=[np.ascontiguousarray(c, dtype=np.float32) for c in cls_maps],
        assoc=[np.ascontiguousarray(a, dtype=np.float32) for a in assoc_maps],
        schema=schema,
        lam=lam,
        dfl_bins=dfl_bins,
        assoc_absolute=not multi_scale,
    )
    return maps


# ---------------------------------------------------------------------------
# corpora and the ablation suite


def simulate_pairs(
    scene_spec: SceneSpec,
    schema: ClassSchema,
    strides=(8, 16, 32),
    lam: float = 2.0,
    count: int = 10,
    noise: NoiseSpec | None = None,
    align: AlignmentConfig | None = None,
    nms_cfg: NmsConfig | None = None,
    capacity: dict[int, int] | None = None,
    task_align: bool = True,
    multi_scale: bool = True,
    baseline_matcher: bool = False,
) -> list[EvalPair]:
    """Generate scenes, render predictions, decode, and pair them up."""
    from .geometry import default_capacity

    nms_cfg = nms_cfg or NmsConfig()
    capacity = capacity if capacity is not None else default_capacity(schema)
    levels = make_levels(strides, scene_spec.width, scene_spec.height)
    pairs = []
    for i in range(count):
        scene = generate_scene(scene_spec, schema, index=i)
        maps = render_predictions(
            scene, levels, schema, lam=lam, noise=noise, align=align,
            task_align=task_align, multi_scale=multi_scale,
        )
        decoded = decode_pipeline(maps, nms_cfg, capacity, baseline_matcher=baseline_matcher)
        decoded.image_id = scene.image_id
        pairs.append(EvalPair(scene=scene, predicted=decoded))
    return pairs


@dataclass
class AblationConfig:
    """Fixed corpus plus decode settings shared by all configurations."""

    scene_spec: SceneSpec
    schema: ClassSchema
    noise: NoiseSpec | None = None
    strides: tuple[int, ...] = (8, 16, 32)
    lam: float = 2.0
    count: int = 20
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    capacity: dict[int, int] | None = None


ABLATION_CONFIGS = ("full", "baseline_matcher", "no_multi_scale", "no_task_align")


def ablation_suite(cfg: AblationConfig) -> dict:
    """Run the pipeline in four configurations over one corpus and
    report the association metrics of each."""
    variants = {
        "full": {},
        "baseline_matcher": {"baseline_matcher": True},
        "no_multi_scale": {"multi_scale": False},
        "no_task_align": {"task_align": False},
    }
    report: dict = {"configurations": {}}
    for name, kwargs in variants.items():
        pairs = simulate_pairs(
            cfg.scene_spec,
            cfg.schema,
            strides=cfg.strides,
            lam=cfg.lam,
            count=cfg.count,
            noise=cfg.noise,
            align=cfg.align,
            nms_cfg=cfg.nms,
            capacity=cfg.capacity,
            **kwargs,
        )
        metrics = evaluate(pairs, cfg.schema, include_coco=False)
        report["configurations"][name] = metrics.to_dict()
    report["corpus"] = {
        "count": cfg.count,
        "seed": cfg.scene_spec.seed,
        "strides": list(cfg.strides),
        "lambda": cfg.lam,
        "noise": (None if cfg.noise is None else {
            "box_sigma": cfg.noise.box_sigma,
            "assoc_sigma": cfg.noise.assoc_sigma,
            "cls_sigma": cfg.noise.cls_sigma,
            "fp_rate": cfg.noise.fp_rate,
            "drop_rate": cfg.noise.drop_rate,
            "seed": cfg.noise.seed,
        }),
    }
    return report
