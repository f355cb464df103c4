import math

import numpy as np
import pytest

from partbody import (
    BBox,
    Detection,
    EvalPair,
    GroundTruthObject,
    Point,
    SceneAnnotation,
    coco_ap_sweep,
    conditional_accuracy_and_joint_ap,
    evaluate,
    log_avg_miss_rate,
    miss_matching_rate,
    voc_ap,
)
from partbody.decoder import AssociationResult, DecodedScene
from partbody.metrics import FPPI_REFS
from partbody.simulator import NoiseSpec, SceneSpec, simulate_pairs


def det(box, score, cls=1, bc=None):
    return Detection(box=BBox(*box), class_index=cls, score=score, level=0, cell=(0, 0),
                     body_center=None if bc is None else Point(*bc))


def gt(box, cls=1, parent=None):
    return GroundTruthObject(box=BBox(*box), class_index=cls, parent=parent)


def pair(image_id, gts, bodies=(), parts=(), assoc=None, size=512):
    scene = SceneAnnotation(size, size, list(gts), image_id=image_id)
    decoded = DecodedScene(
        bodies=list(bodies),
        parts=list(parts),
        associations=assoc or AssociationResult(),
        image_id=image_id,
    )
    return EvalPair(scene=scene, predicted=decoded)


class TestVocAp:
    def test_single_perfect(self):
        p = pair(0, [gt((0, 0, 10, 10))], bodies=[det((0, 0.5, 10, 10), 0.9)])
        assert voc_ap([p], 1, 0.5) == 1.0

    def test_single_disjoint(self):
        p = pair(0, [gt((0, 0, 10, 10))], bodies=[det((50, 50, 60, 60), 0.9)])
        assert voc_ap([p], 1, 0.5) == 0.0

    def test_hand_computed_fixture(self):
        # 2 GT; rank order TP, FP, TP -> AP = 0.5*1 + 0.5*(2/3) = 5/6
        gts = [gt((0, 0, 10, 10)), gt((100, 100, 120, 120))]
        preds = [
            det((0, 0, 10, 9), 0.9),        # IoU 0.9 with gt0 -> TP
            det((0, 0, 10, 6), 0.8),        # best gt0 already taken, IoU vs gt1 = 0 -> FP
            det((100, 100, 120, 118), 0.7),  # TP with gt1
        ]
        p = pair(0, gts, bodies=preds)
        assert voc_ap([p], 1, 0.5) == pytest.approx(5 / 6, abs=1e-12)

    def test_no_gt_undefined(self):
        p = pair(0, [], bodies=[det((0, 0, 10, 10), 0.9)])
        assert voc_ap([p], 1, 0.5) is None

    def test_adding_correct_detection_never_decreases(self):
        gts = [gt((0, 0, 10, 10)), gt((100, 100, 130, 130))]
        base = [det((0, 0, 10, 9), 0.9)]
        with_extra = base + [det((100, 100, 130, 129), 0.5)]
        ap0 = voc_ap([pair(0, gts, bodies=base)], 1)
        ap1 = voc_ap([pair(0, gts, bodies=with_extra)], 1)
        assert ap1 >= ap0

    def test_duplicate_fp_never_increases(self):
        gts = [gt((0, 0, 10, 10))]
        base = [det((0, 0, 10, 9), 0.9)]
        with_dup = base + [det((0, 0, 10, 8.5), 0.95)]
        ap0 = voc_ap([pair(0, gts, bodies=base)], 1)
        ap1 = voc_ap([pair(0, gts, bodies=with_dup)], 1)
        assert ap1 <= ap0


class TestLogAvgMissRate:
    def test_perfect(self):
        pairs = [
            pair(i, [gt((0, 0, 10, 10))], bodies=[det((0, 0, 10, 10), 0.9)])
            for i in range(4)
        ]
        assert log_avg_miss_rate(pairs, 1) == 0.0

    def test_no_detections(self):
        pairs = [pair(i, [gt((0, 0, 10, 10))]) for i in range(4)]
        assert log_avg_miss_rate(pairs, 1) == 1.0

    def test_hand_computed_staircase(self):
        """4 images, 4 GT, detections ranked TP FP TP FP TP."""
        g = gt((0, 0, 10, 10))
        fp_box = (200, 200, 220, 220)
        pairs = [
            pair(0, [g], bodies=[det((0, 0, 10, 10), 0.9), det(fp_box, 0.8)]),
            pair(1, [g], bodies=[det((0, 0, 10, 10), 0.7), det(fp_box, 0.6)]),
            pair(2, [g], bodies=[det((0, 0, 10, 10), 0.5)]),
            pair(3, [g], bodies=[]),
        ]
        # staircase: (fppi, mr) = (0,.75) (.25,.75) (.25,.5) (.5,.5) (.5,.25)
        # refs < 0.25 -> .75 (6 refs), 0.3162 -> .5, 0.5623 & 1.0 -> .25
        expected = math.exp((6 * math.log(0.75) + math.log(0.5) + 2 * math.log(0.25)) / 9)
        assert log_avg_miss_rate(pairs, 1) == pytest.approx(expected, abs=1e-12)

    def test_reference_points(self):
        assert len(FPPI_REFS) == 9
        assert FPPI_REFS[0] == pytest.approx(1e-2)
        assert FPPI_REFS[-1] == pytest.approx(1.0)

    def test_zero_only_when_all_reference_points_zero(self):
        # an FP ranked between the TPs keeps low-FPPI reference points
        # at miss rate 0.5, so the log average must stay positive
        gts = [gt((0, 0, 10, 10)), gt((100, 100, 120, 120))]
        dets = [
            det((0, 0, 10, 10), 0.9),
            det((200, 200, 210, 210), 0.8),
            det((100, 100, 120, 120), 0.7),
        ]
        pairs = [pair(0, gts, bodies=dets), pair(1, [], bodies=[])]
        value = log_avg_miss_rate(pairs, 1)
        assert 0.0 < value < 1.0


def assoc_pairs(*entries):
    return AssociationResult(pairs=[(p, b, 0.0) for p, b in entries])


class TestMissMatchingRate:
    def _scene(self, image_id, wrong=False, schema=None):
        gts = [
            gt((0, 0, 100, 100), 1),
            gt((200, 0, 300, 100), 1),
            gt((20, 20, 60, 60), 2, parent=0),
        ]
        bodies = [det((0, 0, 100, 99), 0.9), det((200, 0, 300, 99), 0.85)]
        parts = [det((20, 20, 60, 59), 0.8, cls=2, bc=(50, 50))]
        assoc = assoc_pairs((0, 1 if wrong else 0))
        return pair(image_id, gts, bodies=bodies, parts=parts, assoc=assoc)

    def test_perfect(self, schema):
        pairs = [self._scene(i) for i in range(3)]
        assert miss_matching_rate(pairs, 2, schema) == 0.0

    def test_all_wrong(self, schema):
        pairs = [self._scene(i, wrong=True) for i in range(3)]
        assert miss_matching_rate(pairs, 2, schema) == 1.0

    def test_monotone_under_corruption(self, schema):
        spec = SceneSpec(seed=41, crowding=0.4, bodies_min=2, bodies_max=3,
                         min_center_separation=24.0)
        pairs = simulate_pairs(spec, schema, count=40)
        rng = np.random.default_rng(0)
        # one fixed corruption order => nested corruption sets
        flat = [
            (i, j)
            for i, p in enumerate(pairs)
            for j in range(len(p.predicted.associations.pairs))
        ]
        order = rng.permutation(len(flat))
        values = []
        for q in (0.0, 0.25, 0.5, 0.75, 1.0):
            corrupted = [
                EvalPair(
                    scene=p.scene,
                    predicted=DecodedScene(
                        bodies=p.predicted.bodies,
                        parts=p.predicted.parts,
                        associations=AssociationResult(
                            pairs=list(p.predicted.associations.pairs),
                            unmatched=list(p.predicted.associations.unmatched),
                        ),
                        image_id=p.predicted.image_id,
                    ),
                )
                for p in pairs
            ]
            for k in order[: int(q * len(flat))]:
                i, j = flat[k]
                trio = corrupted[i].predicted.associations.pairs[j]
                n_bodies = len(corrupted[i].predicted.bodies)
                wrong = (trio[1] + 1) % n_bodies if n_bodies > 1 else None
                if wrong is None:
                    corrupted[i].predicted.associations.pairs[j] = (trio[0], trio[1], trio[2])
                    corrupted[i].predicted.associations.pairs.pop(j)
                    corrupted[i].predicted.associations.pairs.insert(
                        j, (trio[0], -1, trio[2])
                    )
                else:
                    corrupted[i].predicted.associations.pairs[j] = (trio[0], wrong, trio[2])
            values.append(miss_matching_rate(corrupted, 2, schema))
        assert values[0] == 0.0
        for a, b in zip(values, values[1:]):
            assert b >= a - 1e-12, values


class TestConditionalAndJoint:
    def _pairs(self, wrong_assoc=False):
        gts = [
            gt((0, 0, 100, 100), 1),
            gt((200, 0, 300, 100), 1),
            gt((20, 20, 60, 60), 2, parent=0),
        ]
        bodies = [det((0, 0, 100, 100), 0.9), det((200, 0, 300, 100), 0.85)]
        parts = [det((20, 20, 60, 60), 0.8, cls=2, bc=(50, 50))]
        assoc = assoc_pairs((0, 1 if wrong_assoc else 0))
        return [pair(0, gts, bodies=bodies, parts=parts, assoc=assoc)]

    def test_perfect(self, schema):
        cond, joint = conditional_accuracy_and_joint_ap(self._pairs(), schema)
        assert cond == 1.0 and joint == 1.0

    def test_all_wrong(self, schema):
        cond, joint = conditional_accuracy_and_joint_ap(self._pairs(True), schema)
        assert cond == 0.0 and joint == 0.0

    def test_no_tp_undefined(self, schema):
        gts = [gt((0, 0, 100, 100), 1), gt((20, 20, 60, 60), 2, parent=0)]
        p = pair(0, gts, bodies=[det((0, 0, 100, 100), 0.9)], parts=[])
        cond, joint = conditional_accuracy_and_joint_ap([p], schema)
        assert cond is None and joint == 0.0


class TestCocoSweep:
    def _noisy_pairs(self, schema, seed=0, count=15):
        spec = SceneSpec(seed=seed, crowding=0.4, bodies_min=1, bodies_max=3,
                         min_center_separation=24.0)
        noise = NoiseSpec(box_sigma=0.4, assoc_sigma=0.6, cls_sigma=1.0,
                          fp_rate=0.4, drop_rate=0.1, seed=seed)
        return simulate_pairs(spec, schema, count=count, noise=noise)

    def test_perfect_predictions_all_ones(self, schema):
        spec = SceneSpec(seed=42, min_center_separation=24.0)
        pairs = simulate_pairs(spec, schema, count=10)
        report = coco_ap_sweep(pairs, schema)
        # floored boxes cap achievable IoU, so only check AP at 0.5
        for entry in report["per_class"].values():
            assert entry["ap50"] == 1.0
            assert entry["sub_ap50"] == 1.0

    def test_subordinate_never_exceeds_original(self, schema):
        for seed in range(3):
            report = coco_ap_sweep(self._noisy_pairs(schema, seed=seed), schema)
            for entry in report["per_class"].values():
                for orig, sub in zip(entry["ap_per_threshold"], entry["sub_ap_per_threshold"]):
                    if orig is not None and sub is not None:
                        assert sub <= orig + 1e-12

    def test_matches_voc_ap_loop_oracle(self, schema):
        pairs = self._noisy_pairs(schema, seed=7, count=10)
        report = coco_ap_sweep(pairs, schema)
        thresholds = report["thresholds"]
        for c, entry in report["per_class"].items():
            for thr, ap in zip(thresholds, entry["ap_per_threshold"]):
                assert ap == pytest.approx(voc_ap(pairs, c, thr), abs=1e-12)


class TestEvaluate:
    def test_permutation_invariance(self, schema):
        spec = SceneSpec(seed=9, crowding=0.4, bodies_min=1, bodies_max=3,
                         min_center_separation=24.0)
        noise = NoiseSpec(cls_sigma=1.0, box_sigma=0.3, assoc_sigma=0.5, seed=9)
        pairs = simulate_pairs(spec, schema, count=12, noise=noise)
        fwd = evaluate(pairs, schema, include_coco=False)
        rev = evaluate(pairs[::-1], schema, include_coco=False)
        assert fwd.to_dict() == rev.to_dict()

    def test_report_fields(self, schema):
        spec = SceneSpec(seed=10, min_center_separation=24.0)
        pairs = simulate_pairs(spec, schema, count=5)
        rep = evaluate(pairs, schema, include_coco=True)
        assert rep.conditional_accuracy == 1.0
        assert rep.joint_ap == 1.0
        assert rep.mmr2[2] == 0.0
        assert set(rep.curves) == {"pr", "fppi"}
        assert rep.coco["per_class"]
