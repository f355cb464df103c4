import pytest
from hypothesis import given, strategies as st

from partbody import BBox, ClassSchema, FeatureLevel, Point, center, contains, grid_cell, iou
from partbody.geometry import ClassDef, GeometryError, default_capacity, make_levels, validate_levels

coord = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)
size = st.floats(0.0, 1e3, allow_nan=False, allow_infinity=False)
# sizes comparable to the translation magnitudes, so float cancellation
# cannot swallow a box edge entirely
solid_size = st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False)


def boxes(sizes=size):
    return st.builds(
        lambda x, y, w, h: BBox(x, y, x + w, y + h), coord, coord, sizes, sizes
    )


class TestBBox:
    def test_invariants(self):
        with pytest.raises(GeometryError):
            BBox(5, 0, 0, 10)
        with pytest.raises(GeometryError):
            BBox(0, 0, 1, float("nan"))

    def test_area(self):
        assert BBox(0, 0, 10, 10).area == 100
        assert BBox(3, 3, 3, 9).area == 0


class TestIou:
    def test_identity(self):
        assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)) == 0.0

    def test_partial_overlap(self):
        # intersection 50, union 150
        assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_two_zero_area_boxes(self):
        assert iou(BBox(1, 1, 1, 1), BBox(1, 1, 1, 1)) == 0.0

    @given(boxes(), boxes())
    def test_symmetry_and_range(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes(solid_size), boxes(solid_size), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_translation_invariance(self, a, b, dx, dy):
        assert iou(a.translated(dx, dy), b.translated(dx, dy)) == pytest.approx(
            iou(a, b), abs=1e-9, rel=1e-6
        )


class TestCenter:
    @pytest.mark.parametrize(
        "box,expected",
        [
            (BBox(0, 0, 10, 10), (5, 5)),
            (BBox(16, 16, 48, 48), (32, 32)),
            (BBox(2, 4, 7, 9), (4.5, 6.5)),
        ],
    )
    def test_examples(self, box, expected):
        c = center(box)
        assert (c.x, c.y) == expected


class TestGridCell:
    def test_examples(self):
        lv8 = FeatureLevel(stride=8, height=128, width=128)
        assert grid_cell(Point(40, 40), lv8) == (5, 5)
        assert grid_cell(Point(7.9, 0), lv8) == (0, 0)
        lv32 = FeatureLevel(stride=32, height=32, width=32)
        assert grid_cell(Point(1023.5, 1023.5), lv32) == (31, 31)

    @given(st.integers(0, 63), st.integers(0, 63), st.sampled_from([4, 8, 16, 32]))
    def test_round_trip(self, x_i, y_i, s):
        lv = FeatureLevel(stride=s, height=64, width=64)
        assert grid_cell(Point(x_i * s, y_i * s), lv) == (x_i, y_i)


class TestContains:
    def test_center_mode(self):
        assert contains(BBox(0, 0, 100, 100), BBox(40, 40, 60, 60), "center")

    def test_boundary_counts_inside(self):
        assert contains(BBox(0, 0, 100, 100), BBox(90, 90, 110, 110), "center")

    def test_full_mode(self):
        assert not contains(BBox(0, 0, 100, 100), BBox(90, 90, 110, 110), "full")

    @given(boxes(), boxes())
    def test_full_implies_center(self, body, part):
        if contains(body, part, "full"):
            assert contains(body, part, "center")


class TestLevels:
    def test_make_levels_ceil(self):
        levels = make_levels((8, 16, 32), 1000, 500)
        assert [(lv.width, lv.height) for lv in levels] == [(125, 63), (63, 32), (32, 16)]
        for lv in levels:
            assert lv.width * lv.stride >= 1000
            assert lv.height * lv.stride >= 500

    def test_strictly_increasing(self):
        with pytest.raises(GeometryError):
            validate_levels(
                [FeatureLevel(8, 4, 4), FeatureLevel(8, 2, 2)]
            )


class TestSchema:
    def test_exactly_one_body(self):
        with pytest.raises(GeometryError):
            ClassSchema([ClassDef(1, "a", "part"), ClassDef(2, "b", "part")])
        with pytest.raises(GeometryError):
            ClassSchema([ClassDef(1, "a", "body"), ClassDef(2, "b", "body")])

    def test_needs_two_classes(self):
        with pytest.raises(GeometryError):
            ClassSchema([ClassDef(1, "a", "body")])

    def test_presets(self):
        bh = ClassSchema.body_hands()
        assert bh.body_index == 1
        assert bh.part_indices == (2,)
        hp = ClassSchema.human_parts()
        assert hp.num_classes == 7
        assert len(hp.part_indices) == 6

    def test_default_capacity(self):
        assert default_capacity(ClassSchema.body_hands()) == {2: 2}
        caps = default_capacity(ClassSchema.human_parts())
        assert set(caps.values()) == {1}
