"""File formats: COCO-style annotation JSON, the binary prediction
dump with its JSON sidecar manifest, decoded-detection JSON, and the
schema-validated metrics report.

The binary dump is little-endian regardless of host, streams one image
at a time, and round-trips float32 planes bit-exactly. Every error
names the offending entity (annotation id or byte offset).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import jsonschema

from . import __version__
from .decoder import AssociationResult, DecodedScene, DenseMaps, Detection
from .encoder import GroundTruthObject, SceneAnnotation, resolve_parent
from .geometry import BBox, ClassDef, ClassSchema, FeatureLevel, Point
from .metrics import MetricsReport

MAGIC = b"PBAD"
DUMP_VERSION = 1


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation data."""

    def __init__(self, message: str, entity_id=None):
        super().__init__(message if entity_id is None else f"{message} (id={entity_id})")
        self.entity_id = entity_id


class DumpFormatError(ValueError):
    """Malformed prediction dump."""

    def __init__(self, message: str, offset: int | None = None, image_id=None):
        detail = message
        if offset is not None:
            detail += f" (byte offset {offset})"
        if image_id is not None:
            detail += f" (image id {image_id})"
        super().__init__(detail)
        self.offset = offset
        self.image_id = image_id


# ---------------------------------------------------------------------------
# annotation files


@dataclass
class LoadResult:
    schema: ClassSchema
    scenes: list[SceneAnnotation]
    resolved_parents: int = 0
    image_ids: list[int] = field(default_factory=list)


def schema_to_json(schema: ClassSchema) -> list[dict]:
    return [{"id": c.index, "name": c.name, "kind": c.kind} for c in schema.classes]


def schema_from_json(categories) -> ClassSchema:
    try:
        return ClassSchema(
            [ClassDef(int(c["id"]), str(c["name"]), str(c["kind"])) for c in categories]
        )
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"bad category table: {exc}") from exc


def save_annotations(path, scenes: list[SceneAnnotation], schema: ClassSchema) -> None:
    images = []
    annotations = []
    next_id = 1
    for scene in scenes:
        images.append({"id": scene.image_id, "width": scene.width, "height": scene.height})
        base = next_id
        for obj in scene.objects:
            entry = {
                "id": next_id,
                "image_id": scene.image_id,
                "category_id": obj.class_index,
                "bbox": [obj.box.x_l, obj.box.y_t, obj.box.width, obj.box.height],
            }
            if obj.parent is not None:
                entry["parent_annotation_id"] = base + obj.parent
            annotations.append(entry)
            next_id += 1
    doc = {
        "images": images,
        "categories": schema_to_json(schema),
        "annotations": annotations,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_annotations(path) -> LoadResult:
    """Read and validate an annotation file.

    Missing parent links on parts are resolved via the enclosing-body
    rule; the number of resolutions is reported in the result.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed JSON: {exc}") from exc
    for key in ("images", "categories", "annotations"):
        if key not in doc:
            raise AnnotationError(f"missing top-level key {key!r}")
    schema = schema_from_json(doc["categories"])

    images = {}
    for im in doc["images"]:
        iid = int(im["id"])
        if iid in images:
            raise AnnotationError("duplicate image id", iid)
        images[iid] = SceneAnnotation(
            width=int(im["width"]), height=int(im["height"]), objects=[], image_id=iid
        )

    ann_by_id = {}
    placement = {}  # annotation id -> (image id, object index)
    for ann in doc["annotations"]:
        aid = int(ann["id"])
        if aid in ann_by_id:
            raise AnnotationError("duplicate annotation id", aid)
        ann_by_id[aid] = ann
        iid = int(ann["image_id"])
        if iid not in images:
            raise AnnotationError(f"annotation references unknown image {iid}", aid)
        cat = int(ann["category_id"])
        if cat not in range(1, schema.num_classes + 1):
            raise AnnotationError(f"unknown category {cat}", aid)
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w <= 0 or h <= 0:
            raise AnnotationError(f"bbox width/height must be positive, got {w}x{h}", aid)
        scene = images[iid]
        placement[aid] = (iid, len(scene.objects))
        scene.objects.append(
            GroundTruthObject(box=BBox(x, y, x + w, y + h), class_index=cat, parent=None)
        )

    # second pass: wire explicit parent links
    for ann in doc["annotations"]:
        aid = int(ann["id"])
        pid = ann.get("parent_annotation_id")
        if pid is None:
            continue
        pid = int(pid)
        if pid not in ann_by_id:
            raise AnnotationError(f"parent annotation {pid} does not exist", aid)
        iid, idx = placement[aid]
        p_iid, p_idx = placement[pid]
        if p_iid != iid:
            raise AnnotationError(f"parent {pid} lives in another image", aid)
        if not schema.is_part(int(ann["category_id"])):
            raise AnnotationError("body annotations cannot carry parent links", aid)
        if schema.is_part(int(ann_by_id[pid]["category_id"])):
            raise AnnotationError(f"parent {pid} is not a body", aid)
        scene = images[iid]
        scene.objects[idx] = GroundTruthObject(
            box=scene.objects[idx].box,
            class_index=scene.objects[idx].class_index,
            parent=p_idx,
        )

    # third pass: resolve parents for parts without explicit links
    resolved = 0
    for ann in doc["annotations"]:
        aid = int(ann["id"])
        if not schema.is_part(int(ann["category_id"])):
            continue
        if ann.get("parent_annotation_id") is not None:
            continue
        iid, idx = placement[aid]
        scene = images[iid]
        obj = scene.objects[idx]
        try:
            parent = resolve_parent(obj, scene, schema)
        except Exception as exc:
            raise AnnotationError(f"orphan part: {exc}", aid) from exc
        scene.objects[idx] = GroundTruthObject(
            box=obj.box, class_index=obj.class_index, parent=parent
        )
        resolved += 1

    scenes = [images[iid].clamped() for iid in sorted(images)]
    for scene in scenes:
        scene.validate(schema)
    return LoadResult(
        schema=schema,
        scenes=scenes,
        resolved_parents=resolved,
        image_ids=sorted(images),
    )


# ---------------------------------------------------------------------------
# binary prediction dumps


def _manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_prediction_dump(path, items, schema: ClassSchema | None = None) -> None:
    """Write (image_id, DenseMaps) pairs plus the sidecar manifest.

    Planes are float32 little-endian, one plane per channel, in the
    fixed order box / class / assoc.
    """
    path = Path(path)
    manifest = None
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", DUMP_VERSION))
        for image_id, maps in items:
            if manifest is None:
                manifest = {
                    "format": "partbody-prediction-dump",
                    "version": DUMP_VERSION,
                    "lambda": maps.lam,
                    "dfl_bins": maps.dfl_bins,
                    "assoc_absolute": maps.assoc_absolute,
                    "categories": schema_to_json(schema or maps.schema),
                }
            fh.write(struct.pack("<II", int(image_id), len(maps.levels)))
            n = maps.schema.num_classes
            for i, level in enumerate(maps.levels):
                fh.write(struct.pack("<IIII", level.stride, level.height, level.width, n))
                box = np.asarray(maps.box[i], dtype="<f4")
                if maps.dfl_bins:
                    box = box.reshape(level.height, level.width, 4 * maps.dfl_bins)
                for plane_src in (box, np.asarray(maps.cls[i], dtype="<f4"),
                                  np.asarray(maps.assoc[i], dtype="<f4")):
                    fh.write(np.ascontiguousarray(np.moveaxis(plane_src, -1, 0)).tobytes())
    if manifest is None:
        manifest = {
            "format": "partbody-prediction-dump",
            "version": DUMP_VERSION,
            "lambda": 2.0,
            "dfl_bins": None,
            "assoc_absolute": False,
            "categories": schema_to_json(schema) if schema else [],
        }
    _manifest_path(path).write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )


def read_prediction_dump(path):
    """Stream (image_id, DenseMaps) records from a dump.

    Generator; one image is materialized at a time. Raises
    DumpFormatError with byte offsets on magic/version mismatch or
    truncation.
    """
    path = Path(path)
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise DumpFormatError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    schema = schema_from_json(manifest["categories"])
    lam = float(manifest["lambda"])
    dfl_bins = manifest.get("dfl_bins")
    assoc_absolute = bool(manifest.get("assoc_absolute", False))
    box_ch = 4 * dfl_bins if dfl_bins else 4

    with path.open("rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DumpFormatError(f"bad magic {magic!r}", offset=0)
        raw = fh.read(4)
        if len(raw) < 4:
            raise DumpFormatError("truncated header", offset=4)
        (version,) = struct.unpack("<I", raw)
        if version != DUMP_VERSION:
            raise DumpFormatError(f"unsupported version {version}", offset=4)

        def read_exact(n, image_id=None):
            data = fh.read(n)
            if len(data) != n:
                raise DumpFormatError(
                    "truncated dump", offset=fh.tell() - len(data), image_id=image_id
                )
            return data

        while True:
            head = fh.read(8)
            if len(head) == 0:
                return
            if len(head) < 8:
                raise DumpFormatError("truncated image header", offset=fh.tell() - len(head))
            image_id, level_count = struct.unpack("<II", head)
            levels = []
            box_list, cls_list, assoc_list = [], [], []
            for _ in range(level_count):
                stride, h, w, n = struct.unpack("<IIII", read_exact(16, image_id))
                levels.append(FeatureLevel(stride=stride, height=h, width=w))

                def read_planes(channels):
                    buf = read_exact(4 * channels * h * w, image_id)
                    arr = np.frombuffer(buf, dtype="<f4").reshape(channels, h, w)
                    return np.ascontiguousarray(np.moveaxis(arr, 0, -1))

                box = read_planes(box_ch)
                if dfl_bins:
                    box = box.reshape(h, w, 4, dfl_bins)
                box_list.append(box)
                cls_list.append(read_planes(n))
                assoc_list.append(read_planes(2))
            yield int(image_id), DenseMaps(
                levels=levels,
                box=box_list,
                cls=cls_list,
                assoc=assoc_list,
                schema=schema,
                lam=lam,
                dfl_bins=dfl_bins,
                assoc_absolute=assoc_absolute,
            )


# ---------------------------------------------------------------------------
# decoded detections JSON


def _det_to_json(d: Detection) -> dict:
    out = {
        "box": [d.box.x_l, d.box.y_t, d.box.x_r, d.box.y_b],
        "class": d.class_index,
        "score": d.score,
    }
    if d.body_center is not None:
        out["body_center"] = [d.body_center.x, d.body_center.y]
    return out


def _det_from_json(entry: dict) -> Detection:
    bc = entry.get("body_center")
    return Detection(
        box=BBox(*entry["box"]),
        class_index=int(entry["class"]),
        score=float(entry["score"]),
        level=-1,
        cell=(0, 0),
        body_center=None if bc is None else Point(bc[0], bc[1]),
    )


def save_detections(path, decoded: list[DecodedScene], config: dict | None = None) -> None:
    doc = {
        "tool": "partbody",
        "version": __version__,
        "config": config or {},
        "images": [
            {
                "id": d.image_id,
                "bodies": [_det_to_json(b) for b in d.bodies],
                "parts": [_det_to_json(p) for p in d.parts],
                "associations": [[p, b, dist] for p, b, dist in d.associations.pairs],
                "unmatched": [[p, reason] for p, reason in d.associations.unmatched],
            }
            for d in decoded
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_detections(path) -> list[DecodedScene]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for im in doc["images"]:
        assoc = AssociationResult(
            pairs=[(int(p), int(b), float(d)) for p, b, d in im["associations"]],
            unmatched=[(int(p), str(r)) for p, r in im["unmatched"]],
        )
        out.append(
            DecodedScene(
                bodies=[_det_from_json(e) for e in im["bodies"]],
                parts=[_det_from_json(e) for e in im["parts"]],
                associations=assoc,
                image_id=int(im["id"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# metrics files

METRICS_SCHEMA = {
    "type": "object",
    "required": ["tool", "version", "report"],
    "properties": {
        "tool": {"const": "partbody"},
        "version": {"type": "string"},
        "report": {
            "type": "object",
            "required": ["per_class", "mmr2", "conditional_accuracy", "joint_ap", "coco",
                         "curves", "config"],
            "properties": {
                "per_class": {"type": "object"},
                "mmr2": {"type": "object"},
                "conditional_accuracy": {"type": ["number", "null"]},
                "joint_ap": {"type": ["number", "null"]},
                "coco": {"type": "object"},
                "curves": {"type": "object"},
                "config": {"type": "object"},
            },
        },
    },
}


def write_metrics(path, report: MetricsReport | dict) -> None:
    body = report.to_dict() if isinstance(report, MetricsReport) else report
    doc = {"tool": "partbody", "version": __version__, "report": body}
    jsonschema.validate(doc, METRICS_SCHEMA)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def read_metrics(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    jsonschema.validate(doc, METRICS_SCHEMA)
    return doc


ABLATION_SCHEMA = {
    "type": "object",
    "required": ["tool", "version", "configurations", "corpus"],
    "properties": {
        "tool": {"const": "partbody"},
        "version": {"type": "string"},
        "configurations": {
            "type": "object",
            "additionalProperties": METRICS_SCHEMA["properties"]["report"],
        },
        "corpus": {"type": "object"},
    },
}


def write_ablation_report(path, report: dict) -> None:
    """Persist an ablation report; each configuration block uses the
    metrics report schema."""
    doc = {
        "tool": "partbody",
        "version": __version__,
        "configurations": report["configurations"],
        "corpus": report["corpus"],
    }
    jsonschema.validate(doc, ABLATION_SCHEMA)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def read_ablation_report(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    jsonschema.validate(doc, ABLATION_SCHEMA)
    return doc
