"""Compare the numba kernels against the pure-numpy fallback.

Runs the two hot kernels (pairwise IoU, greedy NMS suppression) and
the full decode pipeline with each backend and prints timings. The
backends must agree exactly; this script asserts that while timing.

Usage: python benchmarks/bench_backends.py [--sets 50] [--boxes 200]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from partbody._kernels import nb_backend, np_backend
from partbody import ClassSchema, NmsConfig, default_capacity, make_levels
from partbody.decoder import decode_pipeline
from partbody.simulator import NoiseSpec, SceneSpec, generate_scene, render_predictions


def random_boxes(rng, n):
    xy = rng.uniform(0, 800, size=(n, 2))
    wh = rng.uniform(5, 200, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def time_fn(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(args):
    rng = np.random.default_rng(0)
    backends = {"numpy": np_backend, "numba": nb_backend}

    print(f"pairwise_iou: {args.boxes} x {args.boxes} boxes, {args.sets} sets")
    data = [(random_boxes(rng, args.boxes), random_boxes(rng, args.boxes))
            for _ in range(args.sets)]
    ref = None
    for name, impl in backends.items():
        impl.pairwise_iou(data[0][0][:4], data[0][1][:4])  # warm compile
        t = time_fn(lambda: [impl.pairwise_iou(a, b) for a, b in data])
        out = impl.pairwise_iou(*data[0])
        if ref is None:
            ref = out
        else:
            assert np.array_equal(ref, out), "backends disagree on pairwise_iou"
        print(f"  {name:>6}: {t * 1e3:8.2f} ms")

    print(f"nms_keep: {args.boxes} boxes, {args.sets} sets")
    sets = []
    for _ in range(args.sets):
        boxes = random_boxes(rng, args.boxes)
        scores = rng.uniform(0, 1, size=args.boxes)
        order = np.argsort(-scores, kind="stable")
        sets.append((boxes, order))
    ref = None
    for name, impl in backends.items():
        impl.nms_keep(sets[0][0][:8], np.arange(8, dtype=np.int64), 0.5)  # warm compile
        t = time_fn(lambda: [impl.nms_keep(b, o, 0.5) for b, o in sets])
        out = [impl.nms_keep(b, o, 0.5).tolist() for b, o in sets]
        if ref is None:
            ref = out
        else:
            assert ref == out, "backends disagree on nms_keep"
        print(f"  {name:>6}: {t * 1e3:8.2f} ms")


def bench_pipeline():
    import partbody._kernels as kernels

    schema = ClassSchema.body_hands()
    spec = SceneSpec(width=1024, height=1024, bodies_min=10, bodies_max=12,
                     body_size_min=0.18, body_size_max=0.24, seed=5,
                     min_center_separation=24.0)
    scene = generate_scene(spec, schema, index=0)
    levels = make_levels((8, 16, 32), 1024, 1024)
    maps = render_predictions(
        scene, levels, schema,
        noise=NoiseSpec(cls_sigma=0.4, box_sigma=0.1, fp_rate=2.0, seed=1),
    )
    cap = default_capacity(schema)
    cfg = NmsConfig()

    print("decode_pipeline: 1024x1024, three levels")
    results = {}
    for name, impl in (("numpy", np_backend), ("numba", nb_backend)):
        kernels.pairwise_iou = impl.pairwise_iou
        kernels.nms_keep = impl.nms_keep
        decoded = decode_pipeline(maps, cfg, cap)  # warm
        t = time_fn(lambda: decode_pipeline(maps, cfg, cap))
        results[name] = decoded
        print(f"  {name:>6}: {t * 1e3:8.2f} ms "
              f"({len(decoded.bodies)} bodies, {len(decoded.parts)} parts)")
    assert results["numpy"].bodies == results["numba"].bodies
    assert results["numpy"].parts == results["numba"].parts


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sets", type=int, default=50)
    parser.add_argument("--boxes", type=int, default=200)
    args = parser.parse_args()
    bench_kernels(args)
    bench_pipeline()


if __name__ == "__main__":
    main()
