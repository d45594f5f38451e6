"""DOTA-format text file ingestion and emission.

Annotations: one file per image ({image_id}.txt), one object per line:

    x1 y1 x2 y2 x3 y3 x4 y4 category difficult

where difficult is a 0/1 flag (optional, default 0). The header lines
some releases carry ("imagesource:...", "gsd:...") are skipped.

Detection results: one file per class ({class}.txt, an optional
"Task1_" prefix is stripped), one detection per line:

    image_id score x1 y1 x2 y2 x3 y3 x4 y4
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ParseError, UnknownCategory
from .evaluation import ClassTable, GtIndex
from .geometry import canonicalize
from .inference import Detection
from .targets import GroundTruthObject

_HEADER_PREFIXES = ("imagesource", "gsd")


@dataclass(frozen=True)
class AnnotationRecord:
    """One parsed annotation line."""

    image_id: str
    coords: tuple[float, ...]
    category: str
    difficult: bool


def _parse_floats(tokens: Sequence[str], path, line_no: int) -> list[float]:
    values = []
    for tok in tokens:
        try:
            values.append(float(tok))
        except ValueError:
            raise ParseError(path, line_no, f"expected a number, got {tok!r}") from None
    return values


def iter_annotation_records(path) -> list[AnnotationRecord]:
    """Parse one per-image annotation file into records."""
    path = Path(path)
    records: list[AnnotationRecord] = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if any(stripped.lower().startswith(p) for p in _HEADER_PREFIXES):
            continue
        tokens = stripped.split()
        if len(tokens) not in (9, 10):
            raise ParseError(
                path, line_no, f"expected 8 coordinates, category and flag, got {len(tokens)} fields"
            )
        coords = _parse_floats(tokens[:8], path, line_no)
        category = tokens[8]
        difficult = False
        if len(tokens) == 10:
            if tokens[9] not in ("0", "1"):
                raise ParseError(path, line_no, f"difficult flag must be 0 or 1, got {tokens[9]!r}")
            difficult = tokens[9] == "1"
        records.append(AnnotationRecord(path.stem, tuple(coords), category, difficult))
    return records


def parse_dota_annotations(
    directory,
    classes: ClassTable | None = None,
    *,
    unknown_category: str = "error",
) -> GtIndex:
    """Read a directory of per-image annotation files into a GtIndex.

    Without an explicit class table, ids are assigned densely over the
    sorted category names found in the data. unknown_category chooses
    between raising and silently skipping records whose category is
    missing from an explicit table.
    """
    if unknown_category not in ("error", "skip"):
        raise ValueError("unknown_category must be 'error' or 'skip'")
    directory = Path(directory)
    files = sorted(directory.glob("*.txt"))
    per_file = {f: iter_annotation_records(f) for f in files}

    if classes is None:
        names = sorted({r.category for records in per_file.values() for r in records})
        classes = ClassTable(tuple(names))

    images: dict[str, list[GroundTruthObject]] = {}
    for f, records in per_file.items():
        objs = images.setdefault(f.stem, [])
        for r in records:
            try:
                class_id = classes.id_of(r.category)
            except UnknownCategory:
                if unknown_category == "skip":
                    continue
                raise
            quad = canonicalize(list(zip(r.coords[0::2], r.coords[1::2])))
            objs.append(GroundTruthObject(quad, class_id, r.difficult))
    return GtIndex(images, classes)


def _class_name_from_filename(path: Path) -> str:
    stem = path.stem
    return stem[len("Task1_"):] if stem.startswith("Task1_") else stem


def parse_dota_detections(
    directory,
    classes: ClassTable | None = None,
    *,
    unknown_category: str = "error",
) -> tuple[dict[str, list[Detection]], ClassTable]:
    """Read a directory of per-class detection files.

    Returns detections grouped by image id together with the class table
    (inferred from the filenames when not supplied). Duplicate lines are
    preserved; suppression is a separate step.
    """
    if unknown_category not in ("error", "skip"):
        raise ValueError("unknown_category must be 'error' or 'skip'")
    directory = Path(directory)
    files = sorted(directory.glob("*.txt"))
    if classes is None:
        classes = ClassTable(tuple(sorted({_class_name_from_filename(f) for f in files})))

    dets: dict[str, list[Detection]] = {}
    for f in files:
        name = _class_name_from_filename(f)
        try:
            class_id = classes.id_of(name)
        except UnknownCategory:
            if unknown_category == "skip":
                continue
            raise
        for line_no, line in enumerate(f.read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped:
                continue
            tokens = stripped.split()
            if len(tokens) != 10:
                raise ParseError(
                    f, line_no, f"expected image id, score and 8 coordinates, got {len(tokens)} fields"
                )
            image_id = tokens[0]
            values = _parse_floats(tokens[1:], f, line_no)
            score = values[0]
            if not 0.0 <= score <= 1.0:
                raise ParseError(f, line_no, f"score {score} outside [0, 1]")
            quad = canonicalize(list(zip(values[1::2], values[2::2])))
            dets.setdefault(image_id, []).append(Detection(quad, class_id, score))
    return dets, classes


def format_number(value: float) -> str:
    """Render a coordinate without trailing zeros (integers stay integers)."""
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def write_dota_annotations(gt: GtIndex, directory) -> None:
    """Serialize a GtIndex back to per-image annotation files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image_id in sorted(gt.images):
        lines = []
        for obj in gt.images[image_id]:
            coords = " ".join(format_number(v) for v in obj.quad.as_flat())
            name = gt.classes.name_of(obj.class_id)
            lines.append(f"{coords} {name} {int(obj.difficult)}")
        (directory / f"{image_id}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def write_dota_detections(
    dets_per_image: Mapping[str, Sequence[Detection]],
    classes: ClassTable,
    directory,
) -> None:
    """Serialize detections to per-class files (every class gets a file)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_class: dict[int, list[str]] = {c: [] for c in range(1, len(classes) + 1)}
    for image_id in sorted(dets_per_image):
        for det in dets_per_image[image_id]:
            coords = " ".join(format_number(v) for v in det.quad.as_flat())
            by_class[det.class_id].append(f"{image_id} {format_number(det.score)} {coords}")
    for class_id, lines in by_class.items():
        name = classes.name_of(class_id)
        (directory / f"{name}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
