"""Deterministic SVG overlays: body boxes, part boxes, association
lines from parts to their body centers, unmatched parts flagged.

Floats are formatted with two decimals so identical inputs always
produce byte-identical files.
"""
from __future__ import annotations

from pathlib import Path

from .decoder import DecodedScene
from .encoder import SceneAnnotation
from .geometry import BBox, ClassSchema, center

BODY_STYLE = 'fill="none" stroke="#1f6fb4" stroke-width="2"'
PART_STYLE = 'fill="none" stroke="#2ca02c" stroke-width="2"'
UNMATCHED_STYLE = 'fill="none" stroke="#ff8c00" stroke-width="2" stroke-dasharray="6,3"'
LINE_STYLE = 'stroke="#d62728" stroke-width="1.5"'


def _f(v: float) -> str:
    return f"{v:.2f}"


def _rect(box: BBox, style: str) -> str:
    return (
        f'<rect x="{_f(box.x_l)}" y="{_f(box.y_t)}" '
        f'width="{_f(box.width)}" height="{_f(box.height)}" {style}/>'
    )


def _line(x1, y1, x2, y2) -> str:
    return f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" {LINE_STYLE}/>'


def _document(width: int, height: int, body: list[str]) -> str:
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">\n'
        f'<rect x="0" y="0" width="{width}" height="{height}" '
        'fill="#ffffff" stroke="#000000" stroke-width="1"/>\n'
    )
    return head + "\n".join(body) + ("\n" if body else "") + "</svg>\n"


def render_scene_svg(scene: SceneAnnotation, schema: ClassSchema, path) -> None:
    """Ground-truth overlay: boxes plus part-to-parent-center lines."""
    elems = []
    for obj in scene.objects:
        if schema.is_part(obj.class_index):
            continue
        elems.append(_rect(obj.box, BODY_STYLE))
    for obj in scene.objects:
        if not schema.is_part(obj.class_index):
            continue
        elems.append(_rect(obj.box, PART_STYLE))
        pc = center(obj.box)
        bc = center(scene.objects[obj.parent].box)
        elems.append(_line(pc.x, pc.y, bc.x, bc.y))
    Path(path).write_text(_document(scene.width, scene.height, elems), encoding="utf-8")


def render_detections_svg(decoded: DecodedScene, width: int, height: int, path) -> None:
    """Decoded overlay; unmatched parts get a dashed orange box."""
    elems = []
    for det in decoded.bodies:
        elems.append(_rect(det.box, BODY_STYLE))
    matched = {p: b for p, b, _ in decoded.associations.pairs}
    for pi, det in enumerate(decoded.parts):
        if pi in matched:
            elems.append(_rect(det.box, PART_STYLE))
            pc = center(det.box)
            bc = center(decoded.bodies[matched[pi]].box)
            elems.append(_line(pc.x, pc.y, bc.x, bc.y))
        else:
            elems.append(_rect(det.box, UNMATCHED_STYLE))
    Path(path).write_text(_document(width, height, elems), encoding="utf-8")


def render_svg(target, path, schema: ClassSchema | None = None,
               width: int | None = None, height: int | None = None) -> None:
    """Render a scene annotation or a decoded scene to SVG."""
    if isinstance(target, SceneAnnotation):
        if schema is None:
            raise ValueError("a class schema is required to render a scene")
        render_scene_svg(target, schema, path)
    elif isinstance(target, DecodedScene):
        if width is None or height is None:
            raise ValueError("image width and height are required for detections")
        render_detections_svg(target, width, height, path)
    else:
        raise TypeError(f"cannot render {type(target).__name__}")
