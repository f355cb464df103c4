"""Core spatial types and box arithmetic.

Conventions used throughout the package:

* continuous image pixel coordinates, origin at the top-left corner,
  y increasing downward;
* boxes are closed intervals ``[x_l, x_r] x [y_t, y_b]``, so a point on
  the boundary counts as inside;
* feature-grid cells are obtained by flooring, ``(x_i, y_i) =
  (floor(x / s), floor(y / s))`` for a level of stride ``s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

KIND_BODY = "body"
KIND_PART = "part"

CONTAIN_CENTER = "center"
CONTAIN_FULL = "full"


class GeometryError(ValueError):
    """Raised when a spatial value violates its invariants."""


@dataclass(frozen=True)
class Point:
    """A location in continuous image pixels."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with corners (x_l, y_t) and (x_r, y_b)."""

    x_l: float
    y_t: float
    x_r: float
    y_b: float

    def __post_init__(self):
        for v in (self.x_l, self.y_t, self.x_r, self.y_b):
            if not math.isfinite(v):
                raise GeometryError(f"non-finite box corner in {self}")
        if self.x_l > self.x_r or self.y_t > self.y_b:
            raise GeometryError(
                f"inverted box ({self.x_l}, {self.y_t}, {self.x_r}, {self.y_b})"
            )

    @property
    def width(self) -> float:
        return self.x_r - self.x_l

    @property
    def height(self) -> float:
        return self.y_b - self.y_t

    @property
    def area(self) -> float:
        return self.width * self.height

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_l + dx, self.y_t + dy, self.x_r + dx, self.y_b + dy)

    def contains_point(self, p: Point) -> bool:
        return self.x_l <= p.x <= self.x_r and self.y_t <= p.y <= self.y_b

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_l, self.y_t, self.x_r, self.y_b)


@dataclass(frozen=True)
class FeatureLevel:
    """Geometry of one prediction grid: stride and cell counts.

    ``height * stride`` and ``width * stride`` must cover the image
    extent (grids are built with ceil division). ``channels`` is
    metadata only; no backbone exists in this package.
    """

    stride: int
    height: int
    width: int
    channels: int | None = None

    def __post_init__(self):
        if self.stride < 1:
            raise GeometryError(f"stride must be >= 1, got {self.stride}")
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"empty grid {self.height}x{self.width}")

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def cell_index(self, x_i: int, y_i: int) -> int:
        """Row-major index of a cell inside this level."""
        return y_i * self.width + x_i


def make_levels(strides, image_width: int, image_height: int) -> list[FeatureLevel]:
    """Build the level list for an image, one grid per stride (ceil division)."""
    levels = [
        FeatureLevel(
            stride=int(s),
            height=-(-int(image_height) // int(s)),
            width=-(-int(image_width) // int(s)),
        )
        for s in strides
    ]
    validate_levels(levels)
    return levels


def validate_levels(levels) -> None:
    if not levels:
        raise GeometryError("at least one feature level is required")
    for a, b in zip(levels, levels[1:]):
        if b.stride <= a.stride:
            raise GeometryError(
                f"level strides must be strictly increasing, got {a.stride} then {b.stride}"
            )


@dataclass(frozen=True)
class ClassDef:
    """One entry of the class table."""

    index: int
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in (KIND_BODY, KIND_PART):
            raise GeometryError(f"unknown class kind {self.kind!r}")


class ClassSchema:
    """Class table mapping indices 1..N to names and kinds.

    Exactly one class must be the body class, and there must be at
    least one part class.
    """

    def __init__(self, classes):
        classes = tuple(classes)
        if len(classes) < 2:
            raise GeometryError("schema needs at least a body class and a part class")
        indices = sorted(c.index for c in classes)
        if indices != list(range(1, len(classes) + 1)):
            raise GeometryError(f"class indices must be 1..N contiguous, got {indices}")
        bodies = [c for c in classes if c.kind == KIND_BODY]
        if len(bodies) != 1:
            raise GeometryError(f"exactly one body class required, got {len(bodies)}")
        self.classes = tuple(sorted(classes, key=lambda c: c.index))
        self._by_index = {c.index: c for c in self.classes}

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def body_index(self) -> int:
        return next(c.index for c in self.classes if c.kind == KIND_BODY)

    @property
    def part_indices(self) -> tuple[int, ...]:
        return tuple(c.index for c in self.classes if c.kind == KIND_PART)

    def kind_of(self, index: int) -> str:
        return self._by_index[index].kind

    def name_of(self, index: int) -> str:
        return self._by_index[index].name

    def index_of(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.index
        raise KeyError(name)

    def is_part(self, index: int) -> bool:
        return self.kind_of(index) == KIND_PART

    def __eq__(self, other):
        return isinstance(other, ClassSchema) and self.classes == other.classes

    def __repr__(self):
        names = ", ".join(f"{c.index}:{c.name}({c.kind})" for c in self.classes)
        return f"ClassSchema({names})"

    @classmethod
    def body_hands(cls) -> "ClassSchema":
        """Two-class schema: one body class plus side-agnostic hands."""
        return cls([ClassDef(1, "body", KIND_BODY), ClassDef(2, "hand", KIND_PART)])

    @classmethod
    def human_parts(cls) -> "ClassSchema":
        """Seven-class schema with side-specific parts."""
        return cls(
            [
                ClassDef(1, "person", KIND_BODY),
                ClassDef(2, "head", KIND_PART),
                ClassDef(3, "face", KIND_PART),
                ClassDef(4, "right-hand", KIND_PART),
                ClassDef(5, "left-hand", KIND_PART),
                ClassDef(6, "right-foot", KIND_PART),
                ClassDef(7, "left-foot", KIND_PART),
            ]
        )


def default_capacity(schema: ClassSchema) -> dict[int, int]:
    """How many parts of each class may attach to one body.

    Side-specific classes get capacity 1; the side-agnostic "hand"
    class gets 2 (a person has two undistinguished hands).
    """
    return {i: (2 if schema.name_of(i) == "hand" else 1) for i in schema.part_indices}


# ---------------------------------------------------------------------------
# operations


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1].

    Two zero-area boxes (union 0) give 0 by convention.
    """
    iw = min(a.x_r, b.x_r) - max(a.x_l, b.x_l)
    ih = min(a.y_b, b.y_b) - max(a.y_t, b.y_t)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def center(b: BBox) -> Point:
    """Box midpoint."""
    return Point((b.x_l + b.x_r) / 2.0, (b.y_t + b.y_b) / 2.0)


def grid_cell(p: Point, level: FeatureLevel) -> tuple[int, int]:
    """Cell of ``p`` at this level: floor(p / stride), clamped to the grid."""
    x_i = int(math.floor(p.x / level.stride))
    y_i = int(math.floor(p.y / level.stride))
    x_i = min(max(x_i, 0), level.width - 1)
    y_i = min(max(y_i, 0), level.height - 1)
    return (x_i, y_i)


def contains(body: BBox, part: BBox, mode: str = CONTAIN_CENTER) -> bool:
    """Whether ``body`` encloses ``part``.

    ``center`` mode tests the part's midpoint; ``full`` mode requires
    all four part corners inside (closed boundary counts as inside).
    """
    if mode == CONTAIN_CENTER:
        return body.contains_point(center(part))
    if mode == CONTAIN_FULL:
        return (
            body.x_l <= part.x_l
            and body.y_t <= part.y_t
            and part.x_r <= body.x_r
            and part.y_b <= body.y_b
        )
    raise GeometryError(f"unknown containment mode {mode!r}")
