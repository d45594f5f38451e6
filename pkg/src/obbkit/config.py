"""Run configuration: defaults, flat key=value config files, flag overrides.

Precedence is flags > config file > built-in defaults. The thread count
additionally falls back to the OBBKIT_THREADS environment variable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError
from .evaluation import MODE_11POINT, MODE_ALLPOINT
from .inference import InferenceConfig
from .losses import LossWeights
from .targets import DEFAULT_CENTER_RADIUS_MULT, LevelRanges

THREADS_ENV_VAR = "OBBKIT_THREADS"

DEFAULT_STRIDES = (8, 16, 32, 64, 128)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


@dataclass
class RunConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    strides: tuple[int, ...] = DEFAULT_STRIDES
    level_ranges: LevelRanges = field(default_factory=LevelRanges.default_fpn)
    center_radius_mult: float = DEFAULT_CENTER_RADIUS_MULT
    metric_mode: str = MODE_11POINT
    eval_iou_threshold: float = 0.5
    seed: int = 0
    threads: int = field(default_factory=_default_threads)

    def __post_init__(self):
        if len(self.strides) != len(self.level_ranges):
            raise ValueError(
                f"{len(self.strides)} strides but {len(self.level_ranges)} level ranges"
            )
        if self.metric_mode not in (MODE_11POINT, MODE_ALLPOINT):
            raise ValueError(f"unknown metric mode {self.metric_mode!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def parse_strides(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.replace(",", " ").split())


def parse_level_ranges(raw: str) -> LevelRanges:
    """Parse ranges like "0:64,64:128,128:inf"."""
    pairs = []
    for part in raw.replace(",", " ").split():
        lo, _, hi = part.partition(":")
        if not _:
            raise ValueError(f"expected lo:hi, got {part!r}")
        pairs.append((float(lo), math.inf if hi.strip() in ("inf", "") else float(hi)))
    return LevelRanges(pairs)


def parse_metric_mode(raw: str) -> str:
    low = raw.strip().lower()
    if low in ("07", "11", "11point", "11-point"):
        return MODE_11POINT
    if low in ("all", "allpoint", "all-point"):
        return MODE_ALLPOINT
    raise ValueError(f"unknown metric mode {raw!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments are skipped."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ParseError(path, line_no, f"expected key=value, got {stripped!r}")
        out[key.strip()] = value.strip()
    return out


def build_config(file_values: dict[str, str] | None = None, **overrides) -> RunConfig:
    """Merge defaults, config-file values and keyword overrides.

    Overrides use the same keys as the config file; None values are
    treated as absent. Unknown keys raise ValueError.
    """
    merged: dict[str, str] = dict(file_values or {})
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value if isinstance(value, str) else str(value)

    weights_kwargs = {}
    inference_kwargs = {}
    config_kwargs = {}
    weight_fields = {
        "reg_weight",
        "ori_weight",
        "reg_l1_weight",
        "ori_l1_weight",
        "focal_alpha",
        "focal_beta",
        "smooth_l1_delta",
    }
    for key, raw in merged.items():
        if key in weight_fields:
            weights_kwargs[key] = float(raw)
        elif key == "score_threshold":
            inference_kwargs[key] = float(raw)
        elif key == "nms_iou_threshold":
            inference_kwargs[key] = float(raw)
        elif key == "max_detections":
            inference_kwargs[key] = int(raw)
        elif key == "apply_nms":
            inference_kwargs[key] = _parse_bool(raw)
        elif key == "strides":
            config_kwargs["strides"] = parse_strides(raw)
        elif key == "level_ranges":
            config_kwargs["level_ranges"] = parse_level_ranges(raw)
        elif key == "center_radius_mult":
            config_kwargs["center_radius_mult"] = float(raw)
        elif key == "metric_mode":
            config_kwargs["metric_mode"] = parse_metric_mode(raw)
        elif key == "eval_iou_threshold":
            config_kwargs["eval_iou_threshold"] = float(raw)
        elif key == "seed":
            config_kwargs["seed"] = int(raw)
        elif key == "threads":
            config_kwargs["threads"] = max(int(raw), 1)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return RunConfig(
        weights=LossWeights(**weights_kwargs),
        inference=InferenceConfig(**inference_kwargs),
        **config_kwargs,
    )
