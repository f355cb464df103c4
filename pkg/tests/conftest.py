import pytest
from hypothesis import settings

from partbody import (
    BBox,
    ClassSchema,
    DenseMaps,
    GroundTruthObject,
    SceneAnnotation,
    make_levels,
)


settings.register_profile("deterministic", derandomize=True, max_examples=100)
settings.load_profile("deterministic")


@pytest.fixture
def schema():
    return ClassSchema.body_hands()


def random_scene(rng, schema, width=256, height=256, max_bodies=3, max_parts_per_body=2):
    """Random but always-valid scene: bodies anywhere, parts fully inside."""
    objects = []
    n_bodies = int(rng.integers(1, max_bodies + 1))
    for _ in range(n_bodies):
        w = rng.uniform(0.15 * width, 0.5 * width)
        h = rng.uniform(0.15 * height, 0.5 * height)
        x = rng.uniform(0, width - w)
        y = rng.uniform(0, height - h)
        objects.append(GroundTruthObject(BBox(x, y, x + w, y + h), schema.body_index))
    part_classes = schema.part_indices
    for bi in range(n_bodies):
        body = objects[bi].box
        for _ in range(int(rng.integers(0, max_parts_per_body + 1))):
            pw = rng.uniform(0.2 * body.width, 0.5 * body.width)
            ph = rng.uniform(0.2 * body.height, 0.5 * body.height)
            px = rng.uniform(body.x_l, body.x_r - pw)
            py = rng.uniform(body.y_t, body.y_b - ph)
            cls = int(part_classes[int(rng.integers(0, len(part_classes)))])
            objects.append(GroundTruthObject(BBox(px, py, px + pw, py + ph), cls, parent=bi))
    return SceneAnnotation(width, height, objects)


def random_maps(rng, levels, schema, lam=2.0, spread=3.0):
    """Random raw prediction maps with offsets that decode to sane boxes."""
    n = schema.num_classes
    return DenseMaps(
        levels=list(levels),
        box=[rng.uniform(0.0, spread, size=(lv.height, lv.width, 4)) for lv in levels],
        cls=[rng.normal(0.0, 2.0, size=(lv.height, lv.width, n)) for lv in levels],
        assoc=[rng.normal(0.0, 1.0, size=(lv.height, lv.width, 2)) for lv in levels],
        schema=schema,
        lam=lam,
    )


def levels_for(width, height, strides=(8, 16, 32)):
    return make_levels(strides, width, height)
