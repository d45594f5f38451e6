import itertools

import numpy as np
import pytest

from obbkit.errors import UnknownCategory, UnknownClass
from obbkit.evaluation import (
    FP,
    IGNORED,
    MODE_11POINT,
    MODE_ALLPOINT,
    TP,
    ClassTable,
    GtIndex,
    average_precision,
    evaluate,
    match_detections,
    pr_curve,
)
from obbkit.geometry import polygon_iou
from obbkit.inference import Detection
from obbkit.targets import GroundTruthObject

from helpers import axis_box, random_rect


def fixture_scene():
    """Hand-checked 5-detection, 2-class scene.

    plane flags come out [TP, FP, TP] with 2 ground truth, ship [TP, FP]
    with 2 ground truth; mAP is 23/33 in 11-point mode and 2/3 in
    all-point mode.
    """
    classes = ClassTable(("plane", "ship"))
    gt = GtIndex(
        {
            "P0001": [
                GroundTruthObject(axis_box(0, 0, 10, 10), 1),
                GroundTruthObject(axis_box(20, 0, 30, 10), 1),
                GroundTruthObject(axis_box(0, 20, 10, 30), 2),
            ],
            "P0002": [GroundTruthObject(axis_box(0, 0, 10, 10), 2)],
        },
        classes,
    )
    dets = {
        "P0001": [
            Detection(axis_box(0, 0, 10, 10), 1, 0.9),
            Detection(axis_box(0, 0, 10, 10), 1, 0.8),
            Detection(axis_box(22, 0, 32, 10), 1, 0.7),  # IoU 2/3 with its gt
            Detection(axis_box(0, 28, 10, 38), 2, 0.6),  # IoU 1/9, a miss
        ],
        "P0002": [Detection(axis_box(0, 0, 10, 10), 2, 0.85)],
    }
    return dets, gt


class TestMatchDetections:
    def test_exact_hit_is_tp(self):
        dets, gt = fixture_scene()
        m = match_detections(dets, gt, 0.5)
        assert list(m[1].flags) == [TP, FP, TP]
        assert list(m[2].flags) == [TP, FP]
        assert m[1].num_gt == 2 and m[2].num_gt == 2

    def test_double_detection_is_fp(self):
        classes = ClassTable(("plane",))
        gt = GtIndex({"A": [GroundTruthObject(axis_box(0, 0, 10, 10), 1)]}, classes)
        dets = {
            "A": [
                Detection(axis_box(0, 0, 10, 10), 1, 0.9),
                Detection(axis_box(0, 0, 10, 10), 1, 0.8),
            ]
        }
        m = match_detections(dets, gt, 0.5)
        assert list(m[1].flags) == [TP, FP]

    def test_low_iou_is_fp(self):
        classes = ClassTable(("plane",))
        gt = GtIndex({"A": [GroundTruthObject(axis_box(0, 0, 10, 10), 1)]}, classes)
        dets = {"A": [Detection(axis_box(6, 0, 16, 10), 1, 0.9)]}  # IoU 4/16
        m = match_detections(dets, gt, 0.5)
        assert list(m[1].flags) == [FP]

    def test_difficult_ignored_both_ways(self):
        classes = ClassTable(("plane",))
        gt = GtIndex(
            {"A": [GroundTruthObject(axis_box(0, 0, 10, 10), 1, difficult=True)]}, classes
        )
        dets = {
            "A": [
                Detection(axis_box(0, 0, 10, 10), 1, 0.9),
                Detection(axis_box(0, 0, 10, 10), 1, 0.8),
            ]
        }
        m = match_detections(dets, gt, 0.5)
        assert list(m[1].flags) == [IGNORED, IGNORED]
        assert m[1].num_gt == 0

    def test_unknown_class_raises(self):
        dets, gt = fixture_scene()
        dets["P0001"].append(Detection(axis_box(0, 0, 1, 1), 7, 0.5))
        with pytest.raises(UnknownClass):
            match_detections(dets, gt, 0.5)

    def test_greedy_matches_exhaustive_max_tp(self):
        rng = np.random.default_rng(88)
        classes = ClassTable(("c",))
        for _ in range(40):
            n_gt = int(rng.integers(1, 4))
            gts = []
            while len(gts) < n_gt:
                q = random_rect(rng, 80, 10, 40)
                if all(polygon_iou(q, g.quad) < 0.2 for g in gts):
                    gts.append(GroundTruthObject(q, 1))
            gt = GtIndex({"A": gts}, classes)
            dets = []
            for _ in range(int(rng.integers(1, 7))):
                base = gts[int(rng.integers(0, n_gt))].quad
                dets.append(
                    Detection(
                        base.translated(rng.uniform(-6, 6), rng.uniform(-6, 6)),
                        1,
                        float(rng.random()),
                    )
                )
            m = match_detections({"A": dets}, gt, 0.5)
            greedy_tp = int((m[1].flags == TP).sum())

            ious = [[polygon_iou(d.quad, g.quad) for g in gts] for d in dets]
            best = 0
            for assignment in itertools.product(range(-1, n_gt), repeat=len(dets)):
                used = [j for j in assignment if j >= 0]
                if len(used) != len(set(used)):
                    continue
                if any(j >= 0 and ious[i][j] < 0.5 for i, j in enumerate(assignment)):
                    continue
                best = max(best, len(used))
            assert greedy_tp == best


class TestPrCurve:
    def test_single_tp(self):
        curve = pr_curve([TP], [0.9], 1)
        assert np.allclose(curve.recalls, [1.0])
        assert np.allclose(curve.precisions, [1.0])

    def test_cumulative_sweep(self):
        curve = pr_curve([TP, FP, TP], [0.9, 0.8, 0.7], 2)
        assert np.allclose(curve.recalls, [0.5, 0.5, 1.0])
        assert np.allclose(curve.precisions, [1.0, 0.5, 2 / 3])

    def test_unsorted_input_is_sorted_by_score(self):
        curve = pr_curve([FP, TP, TP], [0.8, 0.9, 0.7], 2)
        assert np.allclose(curve.precisions, [1.0, 0.5, 2 / 3])

    def test_no_detections(self):
        curve = pr_curve([], [], 3)
        assert curve.recalls.size == 0
        assert average_precision(curve, MODE_11POINT) == 0.0

    def test_zero_gt_defines_ap_zero(self):
        curve = pr_curve([FP, FP], [0.9, 0.8], 0)
        assert average_precision(curve, MODE_11POINT) == 0.0
        assert average_precision(curve, MODE_ALLPOINT) == 0.0

    def test_ignored_drop_out(self):
        curve = pr_curve([TP, IGNORED, FP], [0.9, 0.8, 0.7], 1)
        assert curve.recalls.size == 2


class TestAveragePrecision:
    def test_perfect_curve(self):
        curve = pr_curve([TP], [0.9], 1)
        assert average_precision(curve, MODE_11POINT) == 1.0
        assert average_precision(curve, MODE_ALLPOINT) == 1.0

    def test_hand_computed_11_point(self):
        curve = pr_curve([TP, FP, TP], [0.9, 0.8, 0.7], 2)
        assert abs(average_precision(curve, MODE_11POINT) - 28 / 33) < 1e-12

    def test_hand_computed_all_point(self):
        curve = pr_curve([TP, FP, TP], [0.9, 0.8, 0.7], 2)
        assert abs(average_precision(curve, MODE_ALLPOINT) - 5 / 6) < 1e-12

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            average_precision(pr_curve([TP], [0.9], 1), "bogus")


class TestEvaluate:
    def test_fixture_map_both_modes(self):
        dets, gt = fixture_scene()
        report11 = evaluate(dets, gt, 0.5, MODE_11POINT)
        assert abs(report11.per_class["plane"] - 28 / 33) < 1e-12
        assert abs(report11.per_class["ship"] - 6 / 11) < 1e-12
        assert abs(report11.mean_ap - 23 / 33) < 1e-12
        report_all = evaluate(dets, gt, 0.5, MODE_ALLPOINT)
        assert abs(report_all.per_class["plane"] - 5 / 6) < 1e-12
        assert abs(report_all.per_class["ship"] - 0.5) < 1e-12
        assert abs(report_all.mean_ap - 2 / 3) < 1e-12

    def test_perfect_detections(self):
        _, gt = fixture_scene()
        dets = {
            img: [Detection(o.quad, o.class_id, 1.0) for o in objs]
            for img, objs in gt.images.items()
        }
        for mode in (MODE_11POINT, MODE_ALLPOINT):
            report = evaluate(dets, gt, 0.5, mode)
            assert report.mean_ap == 1.0
            assert all(v == 1.0 for v in report.per_class.values())

    def test_zero_gt_class_excluded_from_mean(self):
        classes = ClassTable(("plane", "ghost"))
        gt = GtIndex({"A": [GroundTruthObject(axis_box(0, 0, 10, 10), 1)]}, classes)
        dets = {"A": [Detection(axis_box(0, 0, 10, 10), 1, 0.9)]}
        report = evaluate(dets, gt, 0.5, MODE_11POINT)
        assert report.per_class["ghost"] == 0.0
        assert report.mean_ap == 1.0

    def test_duplicating_detections_never_raises_ap(self):
        rng = np.random.default_rng(99)
        dets, gt = fixture_scene()
        base = evaluate(dets, gt, 0.5, MODE_11POINT).mean_ap
        doubled = {img: list(d) + list(d) for img, d in dets.items()}
        assert evaluate(doubled, gt, 0.5, MODE_11POINT).mean_ap <= base + 1e-12

    def test_ap_non_increasing_in_iou_threshold(self):
        dets, gt = fixture_scene()
        maps = [evaluate(dets, gt, t, MODE_11POINT).mean_ap for t in (0.3, 0.5, 0.7, 0.9)]
        assert maps == sorted(maps, reverse=True)

    def test_tp_bounded_by_gt(self):
        dets, gt = fixture_scene()
        m = match_detections(dets, gt, 0.1)
        for class_id, matches in m.items():
            assert (matches.flags == TP).sum() <= gt.num_ground_truth(class_id)

    def test_threaded_map_matches_serial(self):
        from concurrent.futures import ThreadPoolExecutor

        dets, gt = fixture_scene()
        serial = evaluate(dets, gt, 0.5, MODE_11POINT)
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = evaluate(dets, gt, 0.5, MODE_11POINT, map_fn=pool.map)
        assert serial.per_class == threaded.per_class
        assert serial.mean_ap == threaded.mean_ap


class TestClassTable:
    def test_lookup(self):
        table = ClassTable(("a", "b"))
        assert table.id_of("b") == 2
        assert table.name_of(1) == "a"

    def test_unknown_raise(self):
        table = ClassTable(("a",))
        with pytest.raises(UnknownCategory):
            table.id_of("zzz")
        with pytest.raises(UnknownClass):
            table.name_of(5)

    def test_gt_index_validates_ids(self):
        with pytest.raises(UnknownClass):
            GtIndex({"A": [GroundTruthObject(axis_box(0, 0, 1, 1), 9)]}, ClassTable(("a",)))
