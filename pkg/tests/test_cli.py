import json
import math

import numpy as np
import pytest

from obbkit import cli
from obbkit.config import build_config, parse_level_ranges, read_config_file
from obbkit.dota import (
    parse_dota_annotations,
    parse_dota_detections,
    write_dota_annotations,
    write_dota_detections,
)
from obbkit.errors import ParseError

GT_P0001 = """\
imagesource:GoogleEarth
gsd:0.1
0 0 10 0 10 10 0 10 plane 0
20 0 30 0 30 10 20 10 plane 0
0 20 10 20 10 30 0 30 ship 0
"""
GT_P0002 = "0 0 10 0 10 10 0 10 ship 0\n"
DETS_PLANE = """\
P0001 0.9 0 0 10 0 10 10 0 10
P0001 0.8 0 0 10 0 10 10 0 10
P0001 0.7 22 0 32 0 32 10 22 10
"""
DETS_SHIP = """\
P0002 0.85 0 0 10 0 10 10 0 10
P0001 0.6 0 28 10 28 10 38 0 38
"""


@pytest.fixture
def scene(tmp_path):
    gt = tmp_path / "gt"
    dets = tmp_path / "dets"
    gt.mkdir()
    dets.mkdir()
    (gt / "P0001.txt").write_text(GT_P0001)
    (gt / "P0002.txt").write_text(GT_P0002)
    (dets / "plane.txt").write_text(DETS_PLANE)
    (dets / "ship.txt").write_text(DETS_SHIP)
    return tmp_path


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestIouCommand:
    def test_identical(self, capsys):
        code, out, _ = run_cli(
            capsys, "iou", "--quad-a", "0,1,1,0,2,1,1,2", "--quad-b", "0,1,1,0,2,1,1,2"
        )
        assert code == 0
        assert out.splitlines()[0] == "iou 1"

    def test_raster_check(self, capsys):
        code, out, _ = run_cli(
            capsys,
            "iou",
            "--quad-a",
            "0 0 1 0 1 1 0 1",
            "--quad-b",
            "0.5 0 1.5 0 1.5 1 0.5 1",
            "--raster-check",
        )
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "iou 0.333333"
        assert lines[1].startswith("raster 0.33")
        assert float(lines[2].split()[1]) <= 0.01

    def test_missing_flag_is_usage_error(self, capsys):
        code, _, err = run_cli(capsys, "iou", "--quad-a", "0,0,1,0,1,1,0,1")
        assert code == 1
        assert "usage error" in err

    def test_bad_quad_is_data_error(self, capsys):
        code, _, err = run_cli(capsys, "iou", "--quad-a", "1,2", "--quad-b", "0,0,1,0,1,1,0,1")
        assert code == 2
        assert "error" in err

    def test_degenerate_quad_is_data_error(self, capsys):
        code, _, _ = run_cli(
            capsys, "iou", "--quad-a", "0,0,1,1,2,2,3,3", "--quad-b", "0,0,1,0,1,1,0,1"
        )
        assert code == 2

    def test_no_command_prints_help(self, capsys):
        code, out, _ = run_cli(capsys)
        assert code == 1
        assert "usage" in out


class TestEncodeDecodeCommands:
    def test_encode(self, tmp_path, capsys):
        f = tmp_path / "quads.txt"
        f.write_text("0 3 3 0 4 1 1 4\n0 0 4 0 4 2 0 2\n")
        code, out, _ = run_cli(capsys, "encode", str(f))
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "0 0 4 4 1 1 roundtrip 1"
        assert lines[1] == "0 0 4 2 0 2 roundtrip 1"
        assert "worst roundtrip iou 1" in lines[2]

    def test_decode(self, tmp_path, capsys):
        f = tmp_path / "enc.txt"
        f.write_text("0 0 2 2 1 1\n")
        code, out, _ = run_cli(capsys, "decode", str(f))
        assert code == 0
        assert out.splitlines()[0] == "0 1 1 0 2 1 1 2"

    def test_decode_invalid_offsets(self, tmp_path, capsys):
        f = tmp_path / "enc.txt"
        f.write_text("0 0 2 2 5 1\n")
        code, _, err = run_cli(capsys, "decode", str(f))
        assert code == 2

    def test_encode_bad_line(self, tmp_path, capsys):
        f = tmp_path / "quads.txt"
        f.write_text("1 2 3\n")
        code, _, err = run_cli(capsys, "encode", str(f))
        assert code == 2
        assert "quads.txt:1" in err


class TestAssignCommand:
    def test_dump_is_stable(self, scene, capsys):
        argv = [
            "assign",
            "--gt",
            str(scene / "gt"),
            "--set",
            "strides=8",
            "--set",
            "level_ranges=0:inf",
        ]
        code, first, _ = run_cli(capsys, *argv)
        assert code == 0
        code, second, _ = run_cli(capsys, *argv)
        assert first == second
        assert "# image P0001" in first
        assert "# level 3:" in first

    def test_radius_flag_shrinks_positives(self, scene, capsys):
        base = ["assign", "--gt", str(scene / "gt"), "--set", "strides=4",
                "--set", "level_ranges=0:inf"]
        _, wide, _ = run_cli(capsys, *base, "--radius-mult", "2.0")
        _, narrow, _ = run_cli(capsys, *base, "--radius-mult", "0.5")

        def count(out):
            return sum(1 for line in out.splitlines() if not line.startswith("#"))

        assert count(narrow) <= count(wide)


class TestLossCommand:
    def write_files(self, tmp_path, centerness="0.6", kink_free=False):
        targets = tmp_path / "targets.txt"
        preds = tmp_path / "preds.txt"
        targets.write_text("1 2 1 4 3 1 2 0.40824829046386296\n0\n")
        if kink_free:
            # offsets chosen away from the smooth-L1, |ltrb-wh| and min()
            # switch points so finite differences stay two-sided
            preds.write_text(
                f"{centerness} 3.3 2.2 3.6 2.3 0.45 1.1 0.7 0.2\n"
                "0.5 1 1 1 1 0.5 0.5 0.3 0.4\n"
            )
        else:
            preds.write_text(
                f"{centerness} 3 2 3 2 0.5 1 0.7 0.2\n0.5 1 1 1 1 0 0 0.3 0.4\n"
            )
        return targets, preds

    def test_breakdown(self, tmp_path, capsys):
        targets, preds = self.write_files(tmp_path)
        code, out, _ = run_cli(capsys, "loss", "--targets", str(targets), "--preds", str(preds))
        assert code == 0
        values = dict(line.split() for line in out.splitlines())
        assert values["num_pos"] == "1"
        assert values["normalizer"] == "1"
        # match the library on the same fixture
        from obbkit.losses import LossWeights, PredictionBatch, total_loss
        from obbkit.targets import RegressionTarget
        from obbkit.geometry import Point2

        batch = PredictionBatch(
            np.array([[0.7, 0.2], [0.3, 0.4]]),
            np.array([0.6, 0.5]),
            np.array([[3.0, 2, 3, 2], [1, 1, 1, 1]]),
            np.array([[0.5, 1], [0, 0]]),
        )
        t = [
            RegressionTarget(
                0, 0, Point2(0, 0), 1, ltrb=(2, 1, 4, 3), wh=(1, 2),
                centerness=0.40824829046386296,
            ),
            RegressionTarget(1, 0, Point2(0, 0), 0),
        ]
        expected = total_loss(batch, t, LossWeights()).breakdown.total
        # stdout carries 6 significant digits
        assert abs(float(values["total"]) - expected) <= 1e-5 * max(1.0, expected)

    def test_grad_check_flag(self, tmp_path, capsys):
        targets, preds = self.write_files(tmp_path, kink_free=True)
        code, out, _ = run_cli(
            capsys, "loss", "--targets", str(targets), "--preds", str(preds), "--grad-check"
        )
        assert code == 0
        checks = [line for line in out.splitlines() if line.startswith("grad_check")]
        assert len(checks) == 4
        for line in checks:
            assert float(line.split()[2]) <= 1e-4

    def test_boundary_score_is_numeric_error(self, tmp_path, capsys):
        targets, preds = self.write_files(tmp_path, centerness="1.0")
        code, _, err = run_cli(capsys, "loss", "--targets", str(targets), "--preds", str(preds))
        assert code == 3
        assert "numeric error" in err

    def test_weight_override_changes_total(self, tmp_path, capsys):
        targets, preds = self.write_files(tmp_path)
        _, base, _ = run_cli(capsys, "loss", "--targets", str(targets), "--preds", str(preds))
        _, scaled, _ = run_cli(
            capsys,
            "loss",
            "--targets",
            str(targets),
            "--preds",
            str(preds),
            "--set",
            "reg_weight=2.0",
        )
        get = lambda out, key: float(dict(l.split() for l in out.splitlines())[key])
        assert get(scaled, "reg_loss") == get(base, "reg_loss")
        assert get(scaled, "total") > get(base, "total")


class TestNmsCommand:
    def test_suppression(self, scene, capsys, tmp_path):
        out_dir = tmp_path / "nms_out"
        code, out, _ = run_cli(
            capsys, "nms", "--dets", str(scene / "dets"), "--iou", "0.5", "--out", str(out_dir)
        )
        assert code == 0
        plane_lines = (out_dir / "plane.txt").read_text().splitlines()
        assert len(plane_lines) == 2  # duplicate 0.8 suppressed
        assert plane_lines[0].startswith("P0001 0.9")
        ship_lines = (out_dir / "ship.txt").read_text().splitlines()
        assert len(ship_lines) == 2
        assert "kept 3 of 4" in out


class TestEvalCommand:
    def test_fixture_map(self, scene, capsys):
        code, out, _ = run_cli(
            capsys, "eval", "--gt", str(scene / "gt"), "--dets", str(scene / "dets"),
            "--mode", "07",
        )
        assert code == 0
        payload = json.loads(out.splitlines()[-1])
        assert abs(payload["map"] - 23 / 33) < 1e-12
        assert abs(payload["per_class"]["plane"] - 28 / 33) < 1e-12
        assert payload["mode"] == "11point"
        assert "mAP" in out

    def test_all_point_mode(self, scene, capsys):
        code, out, _ = run_cli(
            capsys, "eval", "--gt", str(scene / "gt"), "--dets", str(scene / "dets"),
            "--mode", "all",
        )
        payload = json.loads(out.splitlines()[-1])
        assert abs(payload["map"] - 2 / 3) < 1e-12

    def test_json_file_output(self, scene, capsys, tmp_path):
        json_path = tmp_path / "report.json"
        code, out, _ = run_cli(
            capsys, "eval", "--gt", str(scene / "gt"), "--dets", str(scene / "dets"),
            "--json", str(json_path),
        )
        assert code == 0
        payload = json.loads(json_path.read_text())
        assert abs(payload["map"] - 23 / 33) < 1e-12
        assert "per_class" not in out  # table only on stdout

    def test_thread_counts_do_not_change_bytes(self, scene, capsys):
        outputs = []
        for threads in ("1", "4", "8"):
            code, out, _ = run_cli(
                capsys, "eval", "--gt", str(scene / "gt"), "--dets", str(scene / "dets"),
                "--threads", threads, "--seed", "0",
            )
            assert code == 0
            outputs.append(out)
        assert outputs[0] == outputs[1] == outputs[2]

    def test_score_out_of_range_is_data_error(self, scene, capsys):
        bad = scene / "dets" / "plane.txt"
        bad.write_text("P0001 1.5 0 0 10 0 10 10 0 10\n")
        code, _, err = run_cli(
            capsys, "eval", "--gt", str(scene / "gt"), "--dets", str(scene / "dets")
        )
        assert code == 2
        assert "outside [0, 1]" in err

    def test_unknown_detection_class(self, scene, capsys):
        (scene / "dets" / "rocket.txt").write_text("P0001 0.5 0 0 1 0 1 1 0 1\n")
        code, _, err = run_cli(
            capsys, "eval", "--gt", str(scene / "gt"), "--dets", str(scene / "dets")
        )
        assert code == 2
        code, _, _ = run_cli(
            capsys, "eval", "--gt", str(scene / "gt"), "--dets", str(scene / "dets"),
            "--unknown-category", "skip",
        )
        assert code == 0


class TestFitDemoCommand:
    def test_three_object_scene_converges(self, tmp_path, capsys):
        gt = tmp_path / "gt"
        gt.mkdir()
        gt.joinpath("scene.txt").write_text(
            "28.251289 58.990381 43.251289 33.009619 91.748711 61.009619 "
            "76.748711 86.990381 plane 0\n"
            "134.109908 71.657670 175.248315 22.630826 205.890092 48.342330 "
            "164.751685 97.369174 ship 0\n"
            "73.935856 135.238275 115.282331 120.189389 146.064144 204.761725 "
            "104.717669 219.810611 harbor 0\n"
        )
        code, out, _ = run_cli(
            capsys, "fit-demo", "--gt", str(gt), "--steps", "2000", "--lr", "0.05",
            "--set", "strides=8,16", "--set", "level_ranges=0:64,64:inf",
            "--trace-every", "1000",
        )
        assert code == 0
        ious = [
            float(line.split()[4])
            for line in out.splitlines()
            if line.startswith("object")
        ]
        assert len(ious) == 3
        assert min(ious) >= 0.95

    def test_smoke_and_determinism(self, tmp_path, capsys):
        gt = tmp_path / "gt"
        gt.mkdir()
        gt.joinpath("scene.txt").write_text(
            "35.75 33.0 60.0 19.0 84.25 61.0 60.0 75.0 plane 0\n"
        )
        argv = [
            "fit-demo", "--gt", str(gt), "--steps", "60", "--lr", "0.05",
            "--set", "strides=8,16", "--set", "level_ranges=0:64,64:inf",
            "--trace-every", "30",
        ]
        code, first, _ = run_cli(capsys, *argv, "--threads", "1")
        assert code == 0
        assert "object 0 plane iou" in first
        assert "step 0 " in first
        code, second, _ = run_cli(capsys, *argv, "--threads", "8")
        assert first == second


class TestDotaRoundtrip:
    def test_annotations_roundtrip(self, scene, tmp_path):
        gt = parse_dota_annotations(scene / "gt")
        out_dir = tmp_path / "rt"
        write_dota_annotations(gt, out_dir)
        again = parse_dota_annotations(out_dir)
        assert again.classes.names == gt.classes.names
        assert set(again.images) == set(gt.images)
        for image_id, objs in gt.images.items():
            rt = again.images[image_id]
            assert len(rt) == len(objs)
            for a, b in zip(objs, rt):
                assert a.class_id == b.class_id
                assert a.difficult == b.difficult
                assert a.quad.as_flat() == b.quad.as_flat()

    def test_detections_roundtrip(self, scene, tmp_path):
        dets, classes = parse_dota_detections(scene / "dets")
        out_dir = tmp_path / "rt"
        write_dota_detections(dets, classes, out_dir)
        again, _ = parse_dota_detections(out_dir, classes)
        assert {k: len(v) for k, v in again.items()} == {k: len(v) for k, v in dets.items()}

    def test_nine_token_line_defaults_difficult(self, tmp_path):
        d = tmp_path / "gt"
        d.mkdir()
        (d / "A.txt").write_text("0 0 10 0 10 10 0 10 plane\n")
        gt = parse_dota_annotations(d)
        assert gt.images["A"][0].difficult is False

    def test_seven_numbers_is_parse_error(self, tmp_path):
        d = tmp_path / "gt"
        d.mkdir()
        (d / "A.txt").write_text("0 0 10 0 10 10 0 plane 0\n")
        with pytest.raises(ParseError):
            parse_dota_annotations(d)

    def test_empty_file_is_empty_image(self, tmp_path):
        d = tmp_path / "gt"
        d.mkdir()
        (d / "A.txt").write_text("")
        gt = parse_dota_annotations(d)
        assert gt.images["A"] == []

    def test_task1_prefix_stripped(self, tmp_path):
        d = tmp_path / "dets"
        d.mkdir()
        (d / "Task1_plane.txt").write_text("A 0.5 0 0 1 0 1 1 0 1\n")
        dets, classes = parse_dota_detections(d)
        assert classes.names == ("plane",)

    def test_duplicate_lines_preserved(self, tmp_path):
        d = tmp_path / "dets"
        d.mkdir()
        (d / "plane.txt").write_text("A 0.5 0 0 1 0 1 1 0 1\nA 0.5 0 0 1 0 1 1 0 1\n")
        dets, _ = parse_dota_detections(d)
        assert len(dets["A"]) == 2


class TestConfig:
    def test_defaults(self):
        cfg = build_config()
        assert cfg.weights.focal_alpha == 0.3
        assert cfg.weights.focal_beta == 4.0
        assert cfg.weights.reg_weight == 1.0
        assert cfg.weights.ori_weight == 1.0
        assert cfg.weights.reg_l1_weight == 0.2
        assert cfg.weights.ori_l1_weight == 0.2
        assert cfg.inference.score_threshold == 0.05
        assert cfg.inference.nms_iou_threshold == 0.5
        assert cfg.inference.max_detections == 2000
        assert cfg.center_radius_mult == 1.5
        assert cfg.strides == (8, 16, 32, 64, 128)
        assert len(cfg.level_ranges) == 5

    def test_file_and_override_precedence(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("# comment\nfocal_alpha = 0.9\nscore_threshold=0.2\n")
        values = read_config_file(f)
        cfg = build_config(values)
        assert cfg.weights.focal_alpha == 0.9
        cfg = build_config(values, focal_alpha="0.25")
        assert cfg.weights.focal_alpha == 0.25
        assert cfg.inference.score_threshold == 0.2

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            build_config({"bogus": "1"})

    def test_bad_config_line(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("not a pair\n")
        with pytest.raises(ParseError):
            read_config_file(f)

    def test_level_ranges_parse(self):
        r = parse_level_ranges("0:64,64:128,128:inf")
        assert len(r) == 3
        assert math.isinf(r[2][1])

    def test_threads_env_default(self, monkeypatch):
        monkeypatch.setenv("OBBKIT_THREADS", "6")
        assert build_config().threads == 6
        monkeypatch.setenv("OBBKIT_THREADS", "junk")
        assert build_config().threads == 1

    def test_strides_ranges_length_mismatch(self):
        with pytest.raises(ValueError):
            build_config({"strides": "8,16"})
