"""Command-line interface.

Subcommands: iou, encode, decode, assign, loss, nms, eval, fit-demo.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dota
from .config import (
    THREADS_ENV_VAR,
    RunConfig,
    build_config,
    parse_metric_mode,
    read_config_file,
)
from .errors import (
    DegenerateQuad,
    Diverged,
    NonFiniteScore,
    ObbkitError,
    ParseError,
    PointOutsideBox,
    ShapeMismatch,
    UnknownCategory,
    UnknownClass,
)
from .evaluation import evaluate
from .geometry import EncodedBox, HBB, canonicalize, decode, encode, polygon_iou, raster_iou_oracle
from .inference import rotated_nms
from .losses import PredictionBatch, fit_demo, grad_check, total_loss
from .targets import Point2, RegressionTarget, assign_targets, grid_specs

_USAGE_EXIT = 1
_DATA_EXIT = 2
_NUMERIC_EXIT = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise _UsageError(message)


def _parallel_map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _load_config(args) -> RunConfig:
    file_values = {}
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
    overrides: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = str(args.threads)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return build_config(file_values, **overrides)


def _parse_quad_flag(raw: str):
    tokens = raw.replace(",", " ").split()
    if len(tokens) != 8:
        raise ValueError(f"expected 8 coordinates, got {len(tokens)}")
    values = [float(t) for t in tokens]
    return canonicalize(list(zip(values[0::2], values[1::2])))


def _numeric_lines(path, expected: int):
    """Yield (line_no, floats) for each non-empty line of a numeric table file."""
    path = Path(path)
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        values = []
        for tok in tokens[:expected]:
            try:
                values.append(float(tok))
            except ValueError:
                raise ParseError(path, line_no, f"expected a number, got {tok!r}") from None
        if len(values) < expected:
            raise ParseError(path, line_no, f"expected {expected} numbers, got {len(values)}")
        yield line_no, values, tokens


def _derive_image_size(objects, strides) -> tuple[int, int]:
    step = max(strides)
    xmax = 0.0
    ymax = 0.0
    for obj in objects:
        b = obj.quad.bounds()
        xmax = max(xmax, b.xmax)
        ymax = max(ymax, b.ymax)
    width = max(int(math.ceil((xmax + 1) / step)) * step, step)
    height = max(int(math.ceil((ymax + 1) / step)) * step, step)
    return width, height


def _parse_image_size(raw: str) -> tuple[int, int]:
    w, sep, h = raw.lower().partition("x")
    if not sep:
        raise ValueError(f"expected WxH, got {raw!r}")
    return int(w), int(h)


def _fmt(value: float) -> str:
    return f"{value:.6g}"


# ---------------------------------------------------------------- commands


def _cmd_iou(args) -> int:
    quad_a = _parse_quad_flag(args.quad_a)
    quad_b = _parse_quad_flag(args.quad_b)
    value = polygon_iou(quad_a, quad_b)
    print(f"iou {_fmt(value)}")
    if args.raster_check:
        oracle = raster_iou_oracle(quad_a, quad_b, args.grid)
        print(f"raster {_fmt(oracle)}")
        print(f"delta {_fmt(abs(value - oracle))}")
    return 0


def _cmd_encode(args) -> int:
    worst = 1.0
    count = 0
    for _line_no, values, _tokens in _numeric_lines(args.file, 8):
        quad = canonicalize(list(zip(values[0::2], values[1::2])))
        enc = encode(quad)
        roundtrip = polygon_iou(decode(enc), quad)
        worst = min(worst, roundtrip)
        count += 1
        fields = (enc.hbb.xmin, enc.hbb.ymin, enc.hbb.xmax, enc.hbb.ymax, enc.w, enc.h)
        print(" ".join(_fmt(v) for v in fields) + f" roundtrip {_fmt(roundtrip)}")
    print(f"# {count} boxes, worst roundtrip iou {_fmt(worst if count else 1.0)}")
    return 0


def _cmd_decode(args) -> int:
    for _line_no, values, _tokens in _numeric_lines(args.file, 6):
        xmin, ymin, xmax, ymax, w, h = values
        quad = decode(EncodedBox(HBB(xmin, ymin, xmax, ymax), w, h))
        print(" ".join(_fmt(v) for v in quad.as_flat()))
    return 0


def _cmd_assign(args) -> int:
    cfg = _load_config(args)
    gt = dota.parse_dota_annotations(args.gt)
    radius = args.radius_mult if args.radius_mult is not None else cfg.center_radius_mult
    for image_id in sorted(gt.images):
        objects = gt.images[image_id]
        if args.image_size:
            width, height = _parse_image_size(args.image_size)
        else:
            width, height = _derive_image_size(objects, cfg.strides)
        specs = grid_specs(width, height, cfg.strides)
        levels = assign_targets(specs, cfg.level_ranges, objects, radius)
        print(f"# image {image_id} size {width}x{height}")
        for spec, targets in zip(specs, levels):
            positives = [t for t in targets if t.is_positive]
            for t in positives:
                values = (*t.ltrb, *t.wh, t.centerness)
                print(
                    f"{spec.level} {t.x_s} {t.y_s} {t.class_id} "
                    + " ".join(dota.format_number(v) for v in values)
                    + f" {int(t.difficult)}"
                )
            print(f"# level {spec.level}: {len(positives)} positive of {len(targets)} locations")
    return 0


def _read_targets_file(path) -> list[RegressionTarget]:
    path = Path(path)
    targets: list[RegressionTarget] = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        try:
            class_id = int(tokens[0])
        except ValueError:
            raise ParseError(path, line_no, f"expected a class id, got {tokens[0]!r}") from None
        if class_id == 0:
            targets.append(RegressionTarget(len(targets), 0, Point2(0.0, 0.0), 0))
            continue
        if len(tokens) != 8:
            raise ParseError(
                path, line_no, f"positive targets need class_id l t r b w h centerness"
            )
        values = [float(t) for t in tokens[1:]]
        targets.append(
            RegressionTarget(
                len(targets),
                0,
                Point2(0.0, 0.0),
                class_id,
                ltrb=tuple(values[0:4]),
                wh=tuple(values[4:6]),
                centerness=values[6],
            )
        )
    return targets


def _read_preds_file(path) -> PredictionBatch:
    path = Path(path)
    rows = []
    width = None
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if width is None:
            width = len(tokens)
            if width < 8:
                raise ParseError(
                    path, line_no, "predictions need centerness, l t r b, w h and class scores"
                )
        elif len(tokens) != width:
            raise ParseError(path, line_no, f"expected {width} fields, got {len(tokens)}")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise ParseError(path, line_no, "expected numbers") from None
    if not rows:
        raise ParseError(path, 1, "no predictions")
    data = np.array(rows)
    return PredictionBatch(
        class_scores=data[:, 7:],
        centerness=data[:, 0],
        ltrb=data[:, 1:5],
        wh=data[:, 5:7],
    )


def _loss_grad_checks(batch: PredictionBatch, targets, weights) -> dict[str, float]:
    """Finite-difference verification of each prediction block's gradient."""

    def block_fn(build, grad_of):
        def fn(x):
            res = total_loss(build(x), targets, weights)
            return res.breakdown.total, grad_of(res).reshape(-1)

        return fn

    blocks = {
        "class_scores": (
            lambda x: PredictionBatch(
                x.reshape(batch.class_scores.shape), batch.centerness, batch.ltrb, batch.wh
            ),
            lambda r: r.class_score_grad,
            batch.class_scores.reshape(-1),
        ),
        "centerness": (
            lambda x: PredictionBatch(batch.class_scores, x, batch.ltrb, batch.wh),
            lambda r: r.centerness_grad,
            batch.centerness.reshape(-1),
        ),
        "ltrb": (
            lambda x: PredictionBatch(
                batch.class_scores, batch.centerness, x.reshape(batch.ltrb.shape), batch.wh
            ),
            lambda r: r.ltrb_grad,
            batch.ltrb.reshape(-1),
        ),
        "wh": (
            lambda x: PredictionBatch(
                batch.class_scores, batch.centerness, batch.ltrb, x.reshape(batch.wh.shape)
            ),
            lambda r: r.wh_grad,
            batch.wh.reshape(-1),
        ),
    }
    return {
        name: grad_check(block_fn(build, grad_of), point)
        for name, (build, grad_of, point) in blocks.items()
    }


def _cmd_loss(args) -> int:
    cfg = _load_config(args)
    targets = _read_targets_file(args.targets)
    batch = _read_preds_file(args.preds)
    result = total_loss(batch, targets, cfg.weights)
    b = result.breakdown
    print(f"total      {_fmt(b.total)}")
    print(f"cls_loss   {_fmt(b.cls_loss)}")
    print(f"reg_loss   {_fmt(b.reg_loss)}")
    print(f"ori_loss   {_fmt(b.ori_loss)}")
    print(f"num_pos    {b.num_pos}")
    print(f"normalizer {b.normalizer}")
    if args.grad_check:
        for name, err in _loss_grad_checks(batch, targets, cfg.weights).items():
            print(f"grad_check {name} {_fmt(err)}")
    return 0


def _cmd_nms(args) -> int:
    dets, classes = dota.parse_dota_detections(args.dets)
    threads = args.threads if args.threads is not None else 1
    image_ids = sorted(dets)
    kept_lists = _parallel_map(
        lambda image_id: rotated_nms(dets[image_id], args.iou), image_ids, threads
    )
    kept = dict(zip(image_ids, kept_lists))
    dota.write_dota_detections(kept, classes, args.out)
    for image_id in image_ids:
        print(f"{image_id}: kept {len(kept[image_id])} of {len(dets[image_id])}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    gt = dota.parse_dota_annotations(args.gt, unknown_category=args.unknown_category)
    dets, _ = dota.parse_dota_detections(
        args.dets, gt.classes, unknown_category=args.unknown_category
    )
    iou = args.iou if args.iou is not None else cfg.eval_iou_threshold
    mode = parse_metric_mode(args.mode) if args.mode else cfg.metric_mode

    def run(map_fn):
        return evaluate(dets, gt, iou, mode, map_fn=map_fn)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            report = run(pool.map)
    else:
        report = run(map)

    name_width = max([len(n) for n in gt.classes.names] + [len("class"), len("mAP")])
    print(f"{'class':<{name_width}}  ap")
    for name in gt.classes.names:
        print(f"{name:<{name_width}}  {_fmt(report.per_class[name])}")
    print(f"{'mAP':<{name_width}}  {_fmt(report.mean_ap)}")
    payload = json.dumps(
        {
            "per_class": report.per_class,
            "map": report.mean_ap,
            "iou_threshold": report.iou_threshold,
            "mode": report.mode,
        }
    )
    if args.json:
        Path(args.json).write_text(payload + "\n")
    else:
        print(payload)
    return 0


def _cmd_fit_demo(args) -> int:
    cfg = _load_config(args)
    gt = dota.parse_dota_annotations(args.gt)
    trace_every = args.trace_every if args.trace_every else max(args.steps // 10, 1)
    for image_id in sorted(gt.images):
        objects = gt.images[image_id]
        print(f"# image {image_id}")
        if not objects:
            print("no objects")
            continue
        if args.image_size:
            width, height = _parse_image_size(args.image_size)
        else:
            width, height = _derive_image_size(objects, cfg.strides)
        specs = grid_specs(width, height, cfg.strides)
        levels = assign_targets(specs, cfg.level_ranges, objects, cfg.center_radius_mult)
        flat = [t for level in levels for t in level]
        if not any(t.is_positive for t in flat):
            print("no positive locations")
            continue
        result = fit_demo(
            flat, cfg.weights, steps=args.steps, lr=args.lr, num_classes=len(gt.classes)
        )
        for step, breakdown in enumerate(result.trajectory):
            if step % trace_every == 0 or step == len(result.trajectory) - 1:
                print(
                    f"step {step} total {_fmt(breakdown.total)} cls {_fmt(breakdown.cls_loss)} "
                    f"reg {_fmt(breakdown.reg_loss)} ori {_fmt(breakdown.ori_loss)}"
                )
        best: dict[int, tuple[float, int]] = {}
        for k, idx in enumerate(result.positive_indices):
            j = flat[idx].object_index
            score = result.fused_scores[k]
            if j not in best or score > best[j][0]:
                best[j] = (score, k)
        for j, obj in enumerate(objects):
            if j not in best:
                print(f"object {j} {gt.classes.name_of(obj.class_id)} unassigned")
                continue
            score, k = best[j]
            iou = polygon_iou(result.decoded_quads[k], obj.quad)
            print(
                f"object {j} {gt.classes.name_of(obj.class_id)} iou {_fmt(iou)} score {_fmt(score)}"
            )
    return 0


# ---------------------------------------------------------------- wiring


def _add_config_flags(sub, threads: bool = True):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config field (repeatable)",
    )
    sub.add_argument("--seed", type=int, help="seed for randomized demos")
    if threads:
        sub.add_argument(
            "--threads",
            type=int,
            help=f"worker threads (default from ${THREADS_ENV_VAR} or 1)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="obbkit", description=__doc__)
    commands = parser.add_subparsers(dest="command")

    p = commands.add_parser("iou", parents=[], help="polygon IoU of two quads")
    p.add_argument("--quad-a", required=True, help="8 comma/space separated coordinates")
    p.add_argument("--quad-b", required=True)
    p.add_argument("--raster-check", action="store_true", help="also run the grid-counting oracle")
    p.add_argument("--grid", type=int, default=1000, help="oracle grid resolution")
    p.set_defaults(handler=_cmd_iou)

    p = commands.add_parser("encode", help="oriented quads -> HBB plus (w, h)")
    p.add_argument("file", help="text file, 8 coordinates per line")
    p.set_defaults(handler=_cmd_encode)

    p = commands.add_parser("decode", help="HBB plus (w, h) -> oriented quads")
    p.add_argument("file", help="text file, lines of xmin ymin xmax ymax w h")
    p.set_defaults(handler=_cmd_decode)

    p = commands.add_parser("assign", help="dump per-level training targets")
    p.add_argument("--gt", required=True, help="annotation directory")
    p.add_argument("--radius-mult", type=float, help="center sampling radius in strides")
    p.add_argument("--image-size", help="WxH (default: derived from the annotations)")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_assign)

    p = commands.add_parser("loss", help="composite loss of a prediction/target pair")
    p.add_argument("--targets", required=True, help="targets file")
    p.add_argument("--preds", required=True, help="predictions file")
    p.add_argument("--grad-check", action="store_true", help="verify analytic gradients")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_loss)

    p = commands.add_parser("nms", help="rotated NMS over detection files")
    p.add_argument("--dets", required=True, help="detection directory")
    p.add_argument("--iou", type=float, default=0.5, help="suppression IoU threshold")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, help="worker threads")
    p.set_defaults(handler=_cmd_nms)

    p = commands.add_parser("eval", help="VOC-style AP / mAP over rotated IoU")
    p.add_argument("--gt", required=True, help="annotation directory")
    p.add_argument("--dets", required=True, help="detection directory")
    p.add_argument("--iou", type=float, help="match IoU threshold (default 0.5)")
    p.add_argument("--mode", choices=["07", "all"], help="AP interpolation mode")
    p.add_argument("--json", help="write the JSON report here instead of stdout")
    p.add_argument(
        "--unknown-category",
        choices=["error", "skip"],
        default="error",
        help="how to treat categories missing from the class table",
    )
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_eval)

    p = commands.add_parser("fit-demo", help="gradient-descent fit of the loss stack")
    p.add_argument("--gt", required=True, help="annotation directory")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--trace-every", type=int, help="trace interval (default steps/10)")
    p.add_argument("--image-size", help="WxH (default: derived from the annotations)")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_fit_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    if not getattr(args, "handler", None):
        parser.print_help()
        return _USAGE_EXIT
    try:
        return args.handler(args)
    except (Diverged, NonFiniteScore, FloatingPointError, OverflowError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT
    except (
        ParseError,
        UnknownCategory,
        UnknownClass,
        DegenerateQuad,
        PointOutsideBox,
        ShapeMismatch,
        ObbkitError,
        FileNotFoundError,
        NotADirectoryError,
        IsADirectoryError,
        PermissionError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
