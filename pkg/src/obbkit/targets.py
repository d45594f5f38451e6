"""Per-pixel training-target generation for the anchor-free detector.

Feature-grid locations are mapped back to image coordinates, matched to
ground-truth objects by an inside-box test with center sampling, routed
to pyramid levels by their maximum regression distance, and labelled
with left/top/right/bottom offsets, orientation offsets and centerness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PointOutsideBox
from .geometry import HBB, Point2, Quad, encode


@dataclass(frozen=True)
class FeatureGridSpec:
    """One pyramid level's grid: width x height cells of `stride` pixels."""

    width: int
    height: int
    stride: int
    level: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.stride < 1:
            raise ValueError(f"grid dimensions and stride must be >= 1, got {self}")


@dataclass(frozen=True)
class GroundTruthObject:
    """Annotated object: canonical quad, 1-based class id, difficult flag."""

    quad: Quad
    class_id: int
    difficult: bool = False

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("class_id must be >= 1 (0 is reserved for background)")


@dataclass(frozen=True)
class RegressionTarget:
    """Training target for one grid location.

    Background locations carry class_id 0 and no regression values.
    object_index records which entry of the input object list a positive
    location was assigned to (bookkeeping for demos and reports).
    """

    x_s: int
    y_s: int
    point: Point2
    class_id: int
    ltrb: tuple[float, float, float, float] | None = None
    wh: tuple[float, float] | None = None
    centerness: float | None = None
    difficult: bool = False
    object_index: int | None = None

    @property
    def is_positive(self) -> bool:
        return self.class_id > 0


class LevelRanges:
    """Per-level (min_extent, max_extent] intervals routing objects to levels.

    The intervals must be contiguous, increasing, start at 0 and end at
    infinity; a location belongs to a level when its maximum ltrb offset
    falls in that level's interval.
    """

    def __init__(self, pairs: Sequence[tuple[float, float]]):
        pairs = tuple((float(lo), float(hi)) for lo, hi in pairs)
        if not pairs:
            raise ValueError("at least one level range required")
        if pairs[0][0] != 0.0:
            raise ValueError("first range must start at 0")
        if not math.isinf(pairs[-1][1]):
            raise ValueError("last range must extend to infinity")
        for (lo, hi), (nlo, _) in zip(pairs, pairs[1:]):
            if hi <= lo or nlo != hi:
                raise ValueError(f"ranges must be contiguous and increasing, got {pairs}")
        self.pairs = pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> tuple[float, float]:
        return self.pairs[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, LevelRanges) and self.pairs == other.pairs

    def __repr__(self) -> str:
        return f"LevelRanges({list(self.pairs)})"

    @classmethod
    def default_fpn(cls) -> "LevelRanges":
        """Five-level defaults: (0,64], (64,128], (128,256], (256,512], (512,inf)."""
        return cls([(0, 64), (64, 128), (128, 256), (256, 512), (512, math.inf)])


DEFAULT_CENTER_RADIUS_MULT = 1.5


def grid_specs(
    image_width: float, image_height: float, strides: Sequence[int]
) -> list[FeatureGridSpec]:
    """Grids covering an image, one per stride.

    Cell counts are rounded up so every pixel falls in some cell; power
    of two strides get the conventional pyramid level log2(stride),
    other strides are numbered by position.
    """
    specs = []
    for i, stride in enumerate(strides):
        level = int(math.log2(stride)) if stride & (stride - 1) == 0 else i
        specs.append(
            FeatureGridSpec(
                max(math.ceil(image_width / stride), 1),
                max(math.ceil(image_height / stride), 1),
                stride,
                level,
            )
        )
    return specs


def grid_to_image(
    spec: FeatureGridSpec, x_s: int, y_s: int, *, stride_scaled: bool = True
) -> Point2:
    """Map a grid location to its image-plane point.

    x = floor(s/2) + x_s * s (and likewise for y). With stride_scaled
    False the x_s * s term degrades to plain x_s, an auditing mode that
    collapses every level onto the image's top-left corner.
    """
    if not (0 <= x_s < spec.width and 0 <= y_s < spec.height):
        raise ValueError(
            f"grid index ({x_s}, {y_s}) outside {spec.width}x{spec.height} grid"
        )
    half = spec.stride // 2
    if stride_scaled:
        return Point2(half + x_s * spec.stride, half + y_s * spec.stride)
    return Point2(half + x_s, half + y_s)


def ltrb_targets(p: Point2, hbb: HBB) -> tuple[float, float, float, float]:
    """Distances from an interior point to the four box edges.

    Raises PointOutsideBox unless p is strictly inside hbb (all four
    offsets must be positive).
    """
    l = p.x - hbb.xmin
    t = p.y - hbb.ymin
    r = hbb.xmax - p.x
    b = hbb.ymax - p.y
    if l <= 0 or t <= 0 or r <= 0 or b <= 0:
        raise PointOutsideBox(f"point ({p.x}, {p.y}) not strictly inside {hbb}")
    return (l, t, r, b)


def centerness(ltrb: Sequence[float]) -> float:
    """sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))), in (0, 1]."""
    l, t, r, b = ltrb
    if l <= 0 or t <= 0 or r <= 0 or b <= 0:
        raise ValueError(f"centerness needs strictly positive offsets, got {ltrb}")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


def assign_targets(
    specs: Sequence[FeatureGridSpec],
    ranges: LevelRanges,
    objects: Sequence[GroundTruthObject],
    center_radius_mult: float = DEFAULT_CENTER_RADIUS_MULT,
    *,
    stride_scaled: bool = True,
) -> list[list[RegressionTarget]]:
    """Dense per-level training targets for a scene.

    A location is positive for an object when its image point is strictly
    inside the object's surrounding HBB, within center_radius_mult * stride
    of the HBB center on both axes, and the location's maximum ltrb offset
    falls in the level's range. When several objects claim a location the
    one with the smallest HBB area wins (first in the list on exact ties).

    Returns one row-major list (y_s outer, x_s inner) per level.
    """
    if len(specs) != len(ranges):
        raise ValueError(f"{len(specs)} grid specs but {len(ranges)} level ranges")

    encoded = [encode(obj.quad) for obj in objects]
    out: list[list[RegressionTarget]] = []
    for spec, (lo, hi) in zip(specs, ranges.pairs):
        px = np.array(
            [grid_to_image(spec, x, 0, stride_scaled=stride_scaled).x for x in range(spec.width)]
        )
        py = np.array(
            [grid_to_image(spec, 0, y, stride_scaled=stride_scaled).y for y in range(spec.height)]
        )
        gx = np.broadcast_to(px[None, :], (spec.height, spec.width))
        gy = np.broadcast_to(py[:, None], (spec.height, spec.width))

        radius = center_radius_mult * spec.stride
        best_area = np.full((spec.height, spec.width), np.inf)
        best_obj = np.full((spec.height, spec.width), -1, dtype=int)
        for j, enc in enumerate(encoded):
            hbb = enc.hbb
            inside = (gx > hbb.xmin) & (gx < hbb.xmax) & (gy > hbb.ymin) & (gy < hbb.ymax)
            c = hbb.center
            near = (np.abs(gx - c.x) <= radius) & (np.abs(gy - c.y) <= radius)
            max_off = np.maximum(
                np.maximum(gx - hbb.xmin, hbb.xmax - gx),
                np.maximum(gy - hbb.ymin, hbb.ymax - gy),
            )
            in_range = (max_off > lo) & (max_off <= hi)
            claim = inside & near & in_range & (hbb.area < best_area)
            best_area[claim] = hbb.area
            best_obj[claim] = j

        level_targets: list[RegressionTarget] = []
        for y_s in range(spec.height):
            for x_s in range(spec.width):
                point = Point2(float(gx[y_s, x_s]), float(gy[y_s, x_s]))
                j = int(best_obj[y_s, x_s])
                if j < 0:
                    level_targets.append(RegressionTarget(x_s, y_s, point, 0))
                    continue
                obj = objects[j]
                enc = encoded[j]
                offs = ltrb_targets(point, enc.hbb)
                level_targets.append(
                    RegressionTarget(
                        x_s,
                        y_s,
                        point,
                        obj.class_id,
                        ltrb=offs,
                        wh=(enc.w, enc.h),
                        centerness=centerness(offs),
                        difficult=obj.difficult,
                        object_index=j,
                    )
                )
        out.append(level_targets)
    return out
