import json
import struct
from pathlib import Path

import numpy as np
import pytest

from partbody import DenseMaps, evaluate
from partbody.cli import main
from partbody.formats import (
    AnnotationError,
    DumpFormatError,
    load_annotations,
    read_metrics,
    read_prediction_dump,
    save_annotations,
    write_metrics,
    write_prediction_dump,
)
from partbody.simulator import SceneSpec, generate_scene
from partbody.svg import render_scene_svg, render_detections_svg

from conftest import levels_for


def minimal_annotations(path):
    doc = {
        "images": [{"id": 1, "width": 128, "height": 128}],
        "categories": [
            {"id": 1, "name": "body", "kind": "body"},
            {"id": 2, "name": "hand", "kind": "part"},
        ],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 80, 80]},
            {"id": 2, "image_id": 1, "category_id": 2, "bbox": [30, 30, 20, 20],
             "parent_annotation_id": 1},
        ],
    }
    Path(path).write_text(json.dumps(doc))
    return doc


class TestAnnotations:
    def test_minimal_round(self, tmp_path):
        path = tmp_path / "ann.json"
        minimal_annotations(path)
        loaded = load_annotations(path)
        assert len(loaded.scenes) == 1
        scene = loaded.scenes[0]
        assert len(scene.objects) == 2
        assert scene.objects[1].parent == 0
        assert loaded.resolved_parents == 0

    def test_parent_referencing_part_rejected(self, tmp_path):
        path = tmp_path / "ann.json"
        doc = minimal_annotations(path)
        doc["annotations"].append(
            {"id": 3, "image_id": 1, "category_id": 2, "bbox": [35, 35, 10, 10],
             "parent_annotation_id": 2}
        )
        path.write_text(json.dumps(doc))
        with pytest.raises(AnnotationError, match="not a body"):
            load_annotations(path)

    def test_missing_parent_resolved(self, tmp_path):
        path = tmp_path / "ann.json"
        doc = minimal_annotations(path)
        del doc["annotations"][1]["parent_annotation_id"]
        path.write_text(json.dumps(doc))
        loaded = load_annotations(path)
        assert loaded.resolved_parents == 1
        assert loaded.scenes[0].objects[1].parent == 0

    def test_orphan_part_error_names_annotation(self, tmp_path):
        path = tmp_path / "ann.json"
        doc = minimal_annotations(path)
        doc["annotations"][1]["bbox"] = [110, 110, 15, 15]
        del doc["annotations"][1]["parent_annotation_id"]
        path.write_text(json.dumps(doc))
        with pytest.raises(AnnotationError, match="id=2"):
            load_annotations(path)

    def test_zero_size_bbox_rejected(self, tmp_path):
        path = tmp_path / "ann.json"
        doc = minimal_annotations(path)
        doc["annotations"][0]["bbox"] = [10, 10, 0, 40]
        path.write_text(json.dumps(doc))
        with pytest.raises(AnnotationError, match="positive"):
            load_annotations(path)

    def test_save_load_round_trip(self, tmp_path, schema):
        spec = SceneSpec(seed=3)
        scenes = [generate_scene(spec, schema, index=i) for i in range(3)]
        path = tmp_path / "out.json"
        save_annotations(path, scenes, schema)
        loaded = load_annotations(path)
        assert len(loaded.scenes) == 3
        for a, b in zip(scenes, loaded.scenes):
            assert len(a.objects) == len(b.objects)
            for oa, ob in zip(a.objects, b.objects):
                assert oa.class_index == ob.class_index
                assert oa.parent == ob.parent
                assert oa.box.as_tuple() == pytest.approx(ob.box.as_tuple())


def random_f32_maps(rng, schema, dfl_bins=None):
    levels = levels_for(64, 64)
    def arr(shape):
        return rng.normal(0, 1, size=shape).astype(np.float32)
    n = schema.num_classes
    return DenseMaps(
        levels=levels,
        box=[
            arr((lv.height, lv.width, 4) if not dfl_bins else (lv.height, lv.width, 4, dfl_bins))
            for lv in levels
        ],
        cls=[arr((lv.height, lv.width, n)) for lv in levels],
        assoc=[arr((lv.height, lv.width, 2)) for lv in levels],
        schema=schema,
        lam=2.0,
        dfl_bins=dfl_bins,
    )


class TestPredictionDump:
    def test_bitwise_round_trip(self, tmp_path, schema):
        rng = np.random.default_rng(1)
        items = [(i, random_f32_maps(rng, schema)) for i in range(3)]
        path = tmp_path / "pred.pbad"
        write_prediction_dump(path, items, schema=schema)
        back = list(read_prediction_dump(path))
        assert [i for i, _ in back] == [0, 1, 2]
        for (_, orig), (_, readback) in zip(items, back):
            for a, b in zip(orig.box + orig.cls + orig.assoc,
                            readback.box + readback.cls + readback.assoc):
                assert a.dtype == b.dtype == np.float32
                assert (a == b).all()
        # writing what was read reproduces the file byte for byte
        path2 = tmp_path / "pred2.pbad"
        write_prediction_dump(path2, back, schema=schema)
        assert path.read_bytes() == path2.read_bytes()

    def test_dfl_mode_round_trip(self, tmp_path, schema):
        rng = np.random.default_rng(2)
        items = [(7, random_f32_maps(rng, schema, dfl_bins=16))]
        path = tmp_path / "pred.pbad"
        write_prediction_dump(path, items, schema=schema)
        ((iid, maps),) = list(read_prediction_dump(path))
        assert iid == 7
        assert maps.dfl_bins == 16
        assert maps.box[0].shape[-2:] == (4, 16)
        assert (maps.box[0] == items[0][1].box[0]).all()

    def test_magic_and_endianness(self, tmp_path, schema):
        path = tmp_path / "pred.pbad"
        write_prediction_dump(path, [(1, random_f32_maps(np.random.default_rng(0), schema))],
                              schema=schema)
        raw = path.read_bytes()
        assert raw[:4] == b"PBAD"
        assert struct.unpack("<I", raw[4:8])[0] == 1
        # first level header: stride 8, 8x8 grid, 2 classes
        assert struct.unpack("<IIII", raw[16:32]) == (8, 8, 8, 2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pbad"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        Path(str(path) + ".manifest.json").write_text(json.dumps({
            "format": "partbody-prediction-dump", "version": 1, "lambda": 2.0,
            "dfl_bins": None, "assoc_absolute": False,
            "categories": [{"id": 1, "name": "body", "kind": "body"},
                            {"id": 2, "name": "hand", "kind": "part"}],
        }))
        with pytest.raises(DumpFormatError, match="magic"):
            list(read_prediction_dump(path))

    def test_truncation_names_image(self, tmp_path, schema):
        path = tmp_path / "pred.pbad"
        write_prediction_dump(path, [(5, random_f32_maps(np.random.default_rng(0), schema))],
                              schema=schema)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(DumpFormatError, match="image id 5"):
            list(read_prediction_dump(path))


class TestMetricsFile:
    def test_write_read_validated(self, tmp_path, schema):
        from partbody.simulator import simulate_pairs

        pairs = simulate_pairs(SceneSpec(seed=4, min_center_separation=24.0), schema, count=3)
        report = evaluate(pairs, schema, include_coco=False)
        path = tmp_path / "metrics.json"
        write_metrics(path, report)
        doc = read_metrics(path)
        assert doc["tool"] == "partbody"
        assert doc["report"]["conditional_accuracy"] == 1.0

    def test_invalid_report_rejected(self, tmp_path):
        import jsonschema

        with pytest.raises(jsonschema.ValidationError):
            write_metrics(tmp_path / "m.json", {"nonsense": True})


class TestSvg:
    def test_empty_scene(self, tmp_path, schema):
        from partbody import SceneAnnotation

        path = tmp_path / "empty.svg"
        render_scene_svg(SceneAnnotation(64, 64, []), schema, path)
        text = path.read_text()
        assert text.startswith("<?xml")
        assert "<svg" in text and "</svg>" in text
        assert text.count("<rect") == 1  # frame only
        assert "<line" not in text

    def test_one_association_one_line(self, tmp_path, schema):
        from partbody import BBox, GroundTruthObject, SceneAnnotation

        scene = SceneAnnotation(
            128, 128,
            [
                GroundTruthObject(BBox(10, 10, 90, 90), 1),
                GroundTruthObject(BBox(30, 30, 50, 50), 2, parent=0),
            ],
        )
        path = tmp_path / "one.svg"
        render_scene_svg(scene, schema, path)
        text = path.read_text()
        assert text.count("<line") == 1

    def test_byte_identical(self, tmp_path, schema):
        spec = SceneSpec(seed=6)
        scene = generate_scene(spec, schema, index=0)
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        render_scene_svg(scene, schema, p1)
        render_scene_svg(scene, schema, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unmatched_part_flagged(self, tmp_path, schema):
        from partbody import BBox, Detection
        from partbody.decoder import AssociationResult, DecodedScene

        decoded = DecodedScene(
            bodies=[],
            parts=[Detection(BBox(10, 10, 30, 30), 2, 0.8, 0, (0, 0))],
            associations=AssociationResult(unmatched=[(0, "no-enclosing-body")]),
        )
        path = tmp_path / "um.svg"
        render_detections_svg(decoded, 64, 64, path)
        assert "stroke-dasharray" in path.read_text()


class TestCli:
    def _config(self, tmp_path, extra=None):
        cfg = {
            "scene": {
                "bodies_min": 1,
                "bodies_max": 3,
                "crowding": 0.4,
                "min_center_separation": 24.0,
            },
            "count": 6,
        }
        cfg.update(extra or {})
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_simulate_then_eval_noiseless_perfect(self, tmp_path):
        cfg = self._config(tmp_path)
        ann = tmp_path / "ann.json"
        dump = tmp_path / "pred.pbad"
        metrics = tmp_path / "metrics.json"
        assert main(["simulate", "--config", cfg, "--seed", "12",
                     "--out-annotations", str(ann), "--out-dump", str(dump)]) == 0
        assert main(["eval", "--annotations", str(ann), "--dump", str(dump),
                     "--no-coco", "--out", str(metrics)]) == 0
        doc = read_metrics(metrics)
        assert doc["report"]["conditional_accuracy"] == 1.0
        assert doc["report"]["joint_ap"] == 1.0
        assert doc["report"]["mmr2"]["2"] == 0.0
        assert doc["report"]["config"]["nms"] == {
            "body_conf": 0.05, "body_iou": 0.6, "part_conf": 0.05, "part_iou": 0.6,
        }

    def test_decode_and_render_deterministic(self, tmp_path):
        cfg = self._config(tmp_path)
        ann = tmp_path / "ann.json"
        dump = tmp_path / "pred.pbad"
        main(["simulate", "--config", cfg, "--seed", "12",
              "--out-annotations", str(ann), "--out-dump", str(dump)])
        d1, d2 = tmp_path / "d1.json", tmp_path / "d2.json"
        assert main(["decode", "--dump", str(dump), "--out", str(d1)]) == 0
        assert main(["decode", "--dump", str(dump), "--out", str(d2)]) == 0
        assert d1.read_bytes() == d2.read_bytes()
        s1, s2 = tmp_path / "r1.svg", tmp_path / "r2.svg"
        assert main(["render", "--detections", str(d1), "--image-id", "0",
                     "--out", str(s1)]) == 0
        assert main(["render", "--detections", str(d1), "--image-id", "0",
                     "--out", str(s2)]) == 0
        assert s1.read_bytes() == s2.read_bytes()

    def test_eval_from_detections_json(self, tmp_path):
        cfg = self._config(tmp_path)
        ann = tmp_path / "ann.json"
        dump = tmp_path / "pred.pbad"
        dets = tmp_path / "dets.json"
        metrics = tmp_path / "m.json"
        main(["simulate", "--config", cfg, "--seed", "12",
              "--out-annotations", str(ann), "--out-dump", str(dump)])
        main(["decode", "--dump", str(dump), "--out", str(dets)])
        assert main(["eval", "--annotations", str(ann), "--detections", str(dets),
                     "--no-coco", "--out", str(metrics)]) == 0
        assert read_metrics(metrics)["report"]["conditional_accuracy"] == 1.0

    def test_encode_subcommand(self, tmp_path):
        path = tmp_path / "ann.json"
        minimal_annotations(path)
        out = tmp_path / "enc.pbad"
        assert main(["encode", "--annotations", str(path), "--out", str(out)]) == 0
        images = list(read_prediction_dump(out))
        assert len(images) == 1

    def test_ablate_subcommand(self, tmp_path):
        cfg = self._config(tmp_path, extra={"count": 3})
        out = tmp_path / "abl.json"
        assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
        from partbody.formats import read_ablation_report

        report = read_ablation_report(out)
        assert set(report["configurations"]) == {
            "full", "baseline_matcher", "no_multi_scale", "no_task_align",
        }

    def test_unknown_subcommand_exit_1(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag_exit_1(self, capsys):
        assert main(["decode", "--nope"]) == 1

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["decode", "--dump", str(tmp_path / "missing.pbad"),
                     "--out", str(tmp_path / "out.json")]) == 2

    def test_decode_empty_dump_exit_0(self, tmp_path, schema):
        dump = tmp_path / "empty.pbad"
        write_prediction_dump(dump, [], schema=schema)
        out = tmp_path / "out.json"
        assert main(["decode", "--dump", str(dump), "--out", str(out)]) == 0
        assert json.loads(out.read_text())["images"] == []

    def test_invalid_annotations_exit_1(self, tmp_path):
        path = tmp_path / "bad.json"
        doc = minimal_annotations(path)
        doc["annotations"][0]["bbox"] = [1, 1, -5, 5]
        path.write_text(json.dumps(doc))
        assert main(["encode", "--annotations", str(path),
                     "--out", str(tmp_path / "x.pbad")]) == 1

    def test_capacity_flag_parsing(self, tmp_path):
        cfg = self._config(tmp_path)
        ann = tmp_path / "ann.json"
        dump = tmp_path / "pred.pbad"
        metrics = tmp_path / "m.json"
        main(["simulate", "--config", cfg, "--seed", "2",
              "--out-annotations", str(ann), "--out-dump", str(dump)])
        assert main(["eval", "--annotations", str(ann), "--dump", str(dump),
                     "--capacity", "hand=3", "--no-coco", "--out", str(metrics)]) == 0
        doc = read_metrics(metrics)
        assert doc["report"]["config"]["capacity"] == {"hand": 3}

    def test_preset_flag(self, tmp_path):
        cfg = self._config(tmp_path)
        ann = tmp_path / "ann.json"
        dump = tmp_path / "pred.pbad"
        metrics = tmp_path / "m.json"
        main(["simulate", "--config", cfg, "--seed", "1",
              "--out-annotations", str(ann), "--out-dump", str(dump)])
        assert main(["eval", "--annotations", str(ann), "--dump", str(dump),
                     "--preset", "cocohumanparts", "--no-coco", "--out", str(metrics)]) == 0
        doc = read_metrics(metrics)
        assert doc["report"]["config"]["nms"]["part_conf"] == 0.005
        assert doc["report"]["config"]["nms"]["part_iou"] == 0.75
