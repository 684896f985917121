"""Dataset schema, validated loading, and deterministic stratified splits.

Metadata, ratings, split assignments, and batches are line-delimited JSON
(one object per line, UTF-8); feature matrices use the binary format in
:mod:`iconika.featio`. All loading is fail-fast: a schema violation raises
:class:`DatasetError` naming the offending file and record.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featio import FeatureFileError, FeatureMatrix, read_feature_file, write_feature_file

logger = logging.getLogger(__name__)

VALID_RATINGS = (0, 1, 2)
SPLIT_NAMES = ("train", "test")


class DatasetError(Exception):
    """A dataset file is missing, unparsable, or violates the schema."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner (x, y) plus extent (w, h), pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DatasetError(f"box extent must be positive, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def clamped(self, width: float, height: float) -> "BoundingBox":
        """Intersect with the image rectangle; empty intersection is an error."""
        x0 = min(max(self.x, 0.0), width)
        y0 = min(max(self.y, 0.0), height)
        x1 = min(max(self.x + self.w, 0.0), width)
        y1 = min(max(self.y + self.h, 0.0), height)
        if not (x1 > x0 and y1 > y0):
            raise DatasetError(
                f"box ({self.x}, {self.y}, {self.w}, {self.h}) lies outside a "
                f"{width}x{height} image"
            )
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(eq=False)
class ImageRecord:
    """One image's metadata: class label, geometry, annotations, provenance."""

    image_id: str
    class_id: int
    width: int
    height: int
    gt_box: BoundingBox | None = None
    det_box: BoundingBox | None = None
    det_confidence: float | None = None
    parts: np.ndarray | None = None  # boolean visibility flags, length P
    attributes: np.ndarray | None = None  # boolean presence flags, length M
    external_scores: dict[str, float] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.class_id == other.class_id
            and self.width == other.width
            and self.height == other.height
            and self.gt_box == other.gt_box
            and self.det_box == other.det_box
            and self.det_confidence == other.det_confidence
            and _optional_array_equal(self.parts, other.parts)
            and _optional_array_equal(self.attributes, other.attributes)
            and self.external_scores == other.external_scores
        )


def _optional_array_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True)
class RatingRecord:
    """One annotator's iconicity rating (0 bad / 1 fair / 2 good)."""

    annotator_id: str
    batch_id: str
    image_id: str
    rating: int
    timestamp: float


@dataclass(frozen=True)
class AnnotationBatch:
    """An ordered set of same-class images rated together by one annotator."""

    batch_id: str
    class_id: int
    image_ids: tuple[str, ...]
    assigned_annotator: str


@dataclass
class DatasetManifest:
    """Dataset-level constants plus the locations of the data files."""

    K: int
    P: int
    M: int
    B: int = 5
    metadata: str | None = None
    split: str | None = None
    ratings: str | None = None
    batches: str | None = None
    features: dict[str, str] = field(default_factory=dict)


@dataclass(eq=False)
class Dataset:
    """A fully validated, immutable-by-convention dataset.

    Construct through :func:`load_dataset`; nothing here mutates after load,
    so instances are safe to share across concurrent readers.
    """

    manifest: DatasetManifest
    records: dict[str, ImageRecord]
    features: dict[str, FeatureMatrix]
    ratings: list[RatingRecord]
    batches: list[AnnotationBatch]
    split: dict[str, str]  # image_id -> "train" | "test"

    def ids_in_split(self, name: str) -> list[str]:
        return sorted(i for i, s in self.split.items() if s == name)

    @property
    def train_ids(self) -> list[str]:
        return self.ids_in_split("train")

    @property
    def test_ids(self) -> list[str]:
        return self.ids_in_split("test")

    def rating_map(self, image_ids=None) -> dict[str, float]:
        """Consolidated rating per image (mean over annotators)."""
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        wanted = None if image_ids is None else set(image_ids)
        for rec in self.ratings:
            if wanted is not None and rec.image_id not in wanted:
                continue
            sums[rec.image_id] = sums.get(rec.image_id, 0.0) + rec.rating
            counts[rec.image_id] = counts.get(rec.image_id, 0) + 1
        return {i: sums[i] / counts[i] for i in sums}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.manifest.K == other.manifest.K
            and self.manifest.P == other.manifest.P
            and self.manifest.M == other.manifest.M
            and self.manifest.B == other.manifest.B
            and self.records == other.records
            and self.features == other.features
            and self.ratings == other.ratings
            and self.batches == other.batches
            and self.split == other.split
        )


def _read_jsonl(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def _parse_box(raw, where: str) -> BoundingBox | None:
    if raw is None:
        return None
    if not (isinstance(raw, (list, tuple)) and len(raw) == 4):
        raise DatasetError(f"{where}: box must be [x, y, w, h], got {raw!r}")
    try:
        return BoundingBox(*(float(v) for v in raw))
    except DatasetError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def _parse_bool_vector(raw, expected: int, what: str, where: str) -> np.ndarray | None:
    if raw is None:
        return None
    arr = np.asarray(raw)
    if arr.ndim != 1 or arr.size != expected:
        raise DatasetError(f"{where}: {what} vector has {arr.size} entries, expected {expected}")
    if not np.all((arr == 0) | (arr == 1)):
        raise DatasetError(f"{where}: {what} vector must be 0/1 valued")
    return arr.astype(bool)


def _clamp_record_boxes(rec: ImageRecord, where: str) -> None:
    for attr in ("gt_box", "det_box"):
        box = getattr(rec, attr)
        if box is None:
            continue
        inside = (
            box.x >= 0
            and box.y >= 0
            and box.x + box.w <= rec.width
            and box.y + box.h <= rec.height
        )
        if inside:
            continue
        try:
            clamped = box.clamped(rec.width, rec.height)
        except DatasetError as exc:
            raise DatasetError(f"{where}: {exc}") from None
        logger.warning("%s: %s clamped to image bounds", where, attr)
        setattr(rec, attr, clamped)


def _parse_record(obj: dict, manifest: DatasetManifest, where: str) -> ImageRecord:
    try:
        image_id = obj["image_id"]
        class_id = int(obj["class_id"])
        width = int(obj["width"])
        height = int(obj["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: bad or missing required field ({exc})") from None
    if not isinstance(image_id, str) or not image_id:
        raise DatasetError(f"{where}: image_id must be a non-empty string")
    if width <= 0 or height <= 0:
        raise DatasetError(f"{where}: image size must be positive, got {width}x{height}")
    if not 1 <= class_id <= manifest.K:
        raise DatasetError(f"{where}: class_id {class_id} outside [1..{manifest.K}]")
    external = obj.get("external_scores") or {}
    if not isinstance(external, dict):
        raise DatasetError(f"{where}: external_scores must be a mapping")
    for name, value in external.items():
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            raise DatasetError(f"{where}: external score {name!r} is not a finite number")
    det_conf = obj.get("det_confidence")
    rec = ImageRecord(
        image_id=image_id,
        class_id=class_id,
        width=width,
        height=height,
        gt_box=_parse_box(obj.get("gt_box"), where),
        det_box=_parse_box(obj.get("det_box"), where),
        det_confidence=None if det_conf is None else float(det_conf),
        parts=_parse_bool_vector(obj.get("parts"), manifest.P, "parts", where),
        attributes=_parse_bool_vector(obj.get("attributes"), manifest.M, "attributes", where),
        external_scores={str(k): float(v) for k, v in external.items()},
    )
    _clamp_record_boxes(rec, where)
    return rec


def _parse_rating(obj: dict, where: str) -> RatingRecord:
    try:
        rating = obj["rating"]
        rec = RatingRecord(
            annotator_id=str(obj["annotator_id"]),
            batch_id=str(obj["batch_id"]),
            image_id=str(obj["image_id"]),
            rating=int(rating),
            timestamp=float(obj.get("timestamp", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: bad or missing rating field ({exc})") from None
    if rec.rating not in VALID_RATINGS or rating != rec.rating:
        raise DatasetError(f"{where}: rating {rating!r} outside {{0, 1, 2}}")
    return rec


def load_manifest(manifest_path) -> tuple[DatasetManifest, Path]:
    path = Path(manifest_path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc.msg})") from None
    try:
        manifest = DatasetManifest(
            K=int(obj["K"]),
            P=int(obj["P"]),
            M=int(obj["M"]),
            B=int(obj.get("B", 5)),
            metadata=obj.get("metadata"),
            split=obj.get("split"),
            ratings=obj.get("ratings"),
            batches=obj.get("batches"),
            features=dict(obj.get("features") or {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: bad manifest field ({exc})") from None
    for const in ("K", "P", "M", "B"):
        if getattr(manifest, const) <= 0:
            raise DatasetError(f"{path}: {const} must be positive")
    if manifest.metadata is None or manifest.split is None:
        raise DatasetError(f"{path}: manifest must name metadata and split files")
    return manifest, path.parent


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset from its manifest.

    Fatal on: missing files, schema violations (vector length, rating scale,
    unknown image ids), non-finite feature values, split inconsistencies.
    """
    manifest, base = load_manifest(manifest_path)

    records: dict[str, ImageRecord] = {}
    meta_path = base / manifest.metadata
    for lineno, obj in _read_jsonl(meta_path):
        where = f"{meta_path}:{lineno}"
        rec = _parse_record(obj, manifest, where)
        if rec.image_id in records:
            raise DatasetError(f"{where}: duplicate image_id {rec.image_id!r}")
        records[rec.image_id] = rec

    split: dict[str, str] = {}
    split_path = base / manifest.split
    for lineno, obj in _read_jsonl(split_path):
        where = f"{split_path}:{lineno}"
        image_id, name = obj.get("image_id"), obj.get("split")
        if image_id not in records:
            raise DatasetError(f"{where}: unknown image_id {image_id!r}")
        if name not in SPLIT_NAMES:
            raise DatasetError(f"{where}: split must be one of {SPLIT_NAMES}, got {name!r}")
        if image_id in split:
            raise DatasetError(f"{where}: image {image_id!r} assigned to a split twice")
        split[image_id] = name
    unassigned = sorted(set(records) - set(split))
    if unassigned:
        raise DatasetError(f"{split_path}: image {unassigned[0]!r} has no split assignment")

    ratings: list[RatingRecord] = []
    if manifest.ratings is not None:
        seen: set[tuple[str, str]] = set()
        ratings_path = base / manifest.ratings
        for lineno, obj in _read_jsonl(ratings_path):
            where = f"{ratings_path}:{lineno}"
            rec = _parse_rating(obj, where)
            if rec.image_id not in records:
                raise DatasetError(f"{where}: rating for unknown image_id {rec.image_id!r}")
            key = (rec.annotator_id, rec.image_id)
            if key in seen:
                raise DatasetError(
                    f"{where}: duplicate rating by {rec.annotator_id!r} for {rec.image_id!r}"
                )
            seen.add(key)
            ratings.append(rec)

    batches: list[AnnotationBatch] = []
    if manifest.batches is not None:
        batches_path = base / manifest.batches
        seen_batch: set[str] = set()
        for lineno, obj in _read_jsonl(batches_path):
            where = f"{batches_path}:{lineno}"
            try:
                batch = AnnotationBatch(
                    batch_id=str(obj["batch_id"]),
                    class_id=int(obj["class_id"]),
                    image_ids=tuple(str(i) for i in obj["image_ids"]),
                    assigned_annotator=str(obj.get("assigned_annotator", "")),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{where}: bad batch field ({exc})") from None
            if batch.batch_id in seen_batch:
                raise DatasetError(f"{where}: duplicate batch_id {batch.batch_id!r}")
            seen_batch.add(batch.batch_id)
            for image_id in batch.image_ids:
                if image_id not in records:
                    raise DatasetError(f"{where}: batch names unknown image {image_id!r}")
                if records[image_id].class_id != batch.class_id:
                    raise DatasetError(
                        f"{where}: image {image_id!r} is class "
                        f"{records[image_id].class_id}, batch is class {batch.class_id}"
                    )
            batches.append(batch)

    features: dict[str, FeatureMatrix] = {}
    for name in sorted(manifest.features):
        feat_path = base / manifest.features[name]
        if not feat_path.exists():
            raise DatasetError(f"missing file: {feat_path}")
        try:
            matrix = read_feature_file(feat_path, feature_name=name)
        except FeatureFileError as exc:
            raise DatasetError(str(exc)) from None
        for image_id in matrix.rows:
            if image_id not in records:
                raise DatasetError(
                    f"{feat_path}: feature row for unknown image {image_id!r}"
                )
        features[name] = matrix

    return Dataset(manifest, records, features, ratings, batches, split)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write a dataset back out in the manifest formats; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metadata.jsonl", "w", encoding="utf-8") as fh:
        for image_id in sorted(dataset.records):
            rec = dataset.records[image_id]
            obj = {
                "image_id": rec.image_id,
                "class_id": rec.class_id,
                "width": rec.width,
                "height": rec.height,
                "gt_box": None if rec.gt_box is None else [rec.gt_box.x, rec.gt_box.y, rec.gt_box.w, rec.gt_box.h],
                "det_box": None if rec.det_box is None else [rec.det_box.x, rec.det_box.y, rec.det_box.w, rec.det_box.h],
                "det_confidence": rec.det_confidence,
                "parts": None if rec.parts is None else [int(v) for v in rec.parts],
                "attributes": None if rec.attributes is None else [int(v) for v in rec.attributes],
                "external_scores": dict(sorted(rec.external_scores.items())),
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    with open(out / "split.jsonl", "w", encoding="utf-8") as fh:
        for image_id in sorted(dataset.split):
            fh.write(json.dumps({"image_id": image_id, "split": dataset.split[image_id]}) + "\n")
    manifest_obj = {
        "K": dataset.manifest.K,
        "P": dataset.manifest.P,
        "M": dataset.manifest.M,
        "B": dataset.manifest.B,
        "metadata": "metadata.jsonl",
        "split": "split.jsonl",
        "features": {},
    }
    if dataset.ratings:
        write_ratings_log(out / "ratings.jsonl", dataset.ratings)
        manifest_obj["ratings"] = "ratings.jsonl"
    if dataset.batches:
        with open(out / "batches.jsonl", "w", encoding="utf-8") as fh:
            for batch in dataset.batches:
                fh.write(
                    json.dumps(
                        {
                            "batch_id": batch.batch_id,
                            "class_id": batch.class_id,
                            "image_ids": list(batch.image_ids),
                            "assigned_annotator": batch.assigned_annotator,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        manifest_obj["batches"] = "batches.jsonl"
    for name in sorted(dataset.features):
        filename = f"features_{name}.icfm"
        write_feature_file(out / filename, dataset.features[name])
        manifest_obj["features"][name] = filename
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest_obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def write_ratings_log(path, ratings: list[RatingRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in ratings:
            fh.write(rating_to_line(rec) + "\n")


def rating_to_line(rec: RatingRecord) -> str:
    return json.dumps(
        {
            "annotator_id": rec.annotator_id,
            "batch_id": rec.batch_id,
            "image_id": rec.image_id,
            "rating": rec.rating,
            "timestamp": rec.timestamp,
        },
        sort_keys=True,
    )


def split_half(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Partition the train split into two class-stratified halves.

    Per class, images are ordered lexicographically, shuffled by the seeded
    generator, and divided as evenly as possible with the first half taking
    the extra image on odd counts. Both returned datasets share the records,
    features, and ratings of the input; only the split maps differ (each
    half becomes that dataset's train split).
    """
    train = dataset.train_ids
    if not train:
        raise DatasetError("split_half needs a non-empty train split")
    by_class: dict[int, list[str]] = {}
    for image_id in train:
        by_class.setdefault(dataset.records[image_id].class_id, []).append(image_id)
    rng = np.random.default_rng(seed)
    first: list[str] = []
    second: list[str] = []
    for class_id in sorted(by_class):
        ids = sorted(by_class[class_id])
        if len(ids) < 2:
            logger.warning(
                "class %d has %d train image(s); assigning to first half", class_id, len(ids)
            )
            first.extend(ids)
            continue
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        cut = (len(ids) + 1) // 2
        first.extend(shuffled[:cut])
        second.extend(shuffled[cut:])

    def view(ids: list[str]) -> Dataset:
        return Dataset(
            manifest=dataset.manifest,
            records=dataset.records,
            features=dataset.features,
            ratings=dataset.ratings,
            batches=dataset.batches,
            split={i: "train" for i in ids},
        )

    return view(first), view(second)
