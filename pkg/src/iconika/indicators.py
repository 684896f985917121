"""Per-image iconicity indicators.

Every indicator maps an image to a scalar where higher always means more
iconic: scene-layout cues (box coverage, centeredness), part visibility,
external scores (aesthetics, memorability), similarity to the class
prototype, per-class classifier scores, and attribute-based class scores
(image-to-class distance and product-of-probabilities scoring).

Indicators that need an annotation the image lacks raise
:class:`AnnotationMissing`; the suite runner collects those per image
instead of aborting.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .datamodel import Dataset, ImageRecord
from .featio import FeatureMatrix
from .solvers import LinearModel, train_binary_svm

logger = logging.getLogger(__name__)

DAP_EPSILON = 1e-5

PROVENANCES = ("oracle", "predicted", "external")
ORIENTATION = "higher-is-more-iconic"


class AnnotationMissing(Exception):
    """The image lacks the annotation this indicator needs."""


class IndicatorError(Exception):
    """Bad indicator configuration or inputs."""


@dataclass(eq=False)
class IndicatorScores:
    """Scores of one named indicator over a set of images."""

    indicator_name: str
    scores: dict[str, float] = field(default_factory=dict)
    provenance: str = "oracle"
    orientation: str = ORIENTATION
    missing: list[str] = field(default_factory=list)  # ids with absent annotations


@dataclass(eq=False)
class ClassPrototype:
    """Per-class feature mean and attribute statistics from train images."""

    class_id: int
    mu: np.ndarray
    attr_mean: np.ndarray | None = None  # mean of boolean attribute vectors
    attr_signature: np.ndarray | None = None  # attr_mean thresholded at 0.5


def _box(record: ImageRecord, source: str):
    if source == "gt":
        box = record.gt_box
    elif source == "det":
        box = record.det_box
    else:
        raise IndicatorError(f"box source must be 'gt' or 'det', got {source!r}")
    if box is None:
        raise AnnotationMissing(f"image {record.image_id!r} has no {source} box")
    return box


def bb_size(record: ImageRecord, source: str = "gt") -> float:
    """Fraction of image pixels the box covers."""
    box = _box(record, source)
    return box.area / (record.width * record.height)


def bb_dist2center(record: ImageRecord, source: str = "gt") -> float:
    """Negated distance from box center to image center over the diagonal.

    Negation keeps the shared orientation: centered objects score highest
    (0), corner objects lowest (-0.5).
    """
    box = _box(record, source)
    cx, cy = box.center
    dx = cx - record.width / 2.0
    dy = cy - record.height / 2.0
    diag = math.hypot(record.width, record.height)
    return -math.hypot(dx, dy) / diag


def occlusion_score(record: ImageRecord) -> float:
    """Number of visible parts."""
    if record.parts is None:
        raise AnnotationMissing(f"image {record.image_id!r} has no parts annotation")
    return float(np.count_nonzero(record.parts))


def external_score(
    record: ImageRecord,
    name: str,
    model: LinearModel | None = None,
    x: np.ndarray | None = None,
) -> float:
    """A stored upstream score, or a linear model applied to a feature row."""
    if model is not None:
        if x is None:
            raise IndicatorError("external_score with a model needs a feature row")
        return float(np.asarray(x, dtype=np.float64) @ model.w + model.b)
    if name not in record.external_scores:
        available = ", ".join(sorted(record.external_scores)) or "none"
        raise IndicatorError(
            f"image {record.image_id!r} has no external score {name!r} (available: {available})"
        )
    return record.external_scores[name]


def build_prototypes(
    train: Dataset, features: FeatureMatrix
) -> dict[int, ClassPrototype]:
    """Class feature means plus attribute means/signatures from the train split.

    The attribute signature rounds the mean at 0.5, with exact ties rounding
    to present. Classes whose train images lack attribute vectors get a
    prototype without attribute fields (warning logged).
    """
    by_class: dict[int, list[str]] = {}
    classes_seen: set[int] = set()
    for image_id in train.train_ids:
        classes_seen.add(train.records[image_id].class_id)
        if image_id in features.rows:
            by_class.setdefault(train.records[image_id].class_id, []).append(image_id)
    empty = sorted(classes_seen - set(by_class))
    if empty:
        raise IndicatorError(f"class {empty[0]} has no train image with features")
    prototypes: dict[int, ClassPrototype] = {}
    for class_id in sorted(by_class):
        ids = sorted(by_class[class_id])
        mu = features.matrix(ids).mean(axis=0)
        attrs = [
            train.records[i].attributes
            for i in ids
            if train.records[i].attributes is not None
        ]
        if attrs:
            attr_mean = np.stack(attrs).astype(np.float64).mean(axis=0)
            signature = attr_mean >= 0.5
            prototypes[class_id] = ClassPrototype(class_id, mu, attr_mean, signature)
        else:
            logger.warning("class %d has no attribute vectors; prototype is feature-only", class_id)
            prototypes[class_id] = ClassPrototype(class_id, mu)
    if not prototypes:
        raise IndicatorError("no train images with features; cannot build prototypes")
    return prototypes


def cluster_score(x, proto: ClassPrototype) -> float:
    """Similarity to the class center: negated squared Euclidean distance."""
    diff = np.asarray(x, dtype=np.float64) - proto.mu
    return -float(diff @ diff)


def class_svm_score(x, model: LinearModel) -> float:
    """Decision value of the per-class classifier."""
    return float(np.asarray(x, dtype=np.float64) @ model.w + model.b)


def i2c_att_score(a, proto: ClassPrototype) -> float:
    """Image-to-class attribute similarity: negated Euclidean distance to
    the (un-thresholded) class attribute mean."""
    if proto.attr_mean is None:
        raise AnnotationMissing(f"class {proto.class_id} has no attribute prototype")
    diff = np.asarray(a, dtype=np.float64) - proto.attr_mean
    return -math.sqrt(float(diff @ diff))


def dap_score(attr_probs, proto: ClassPrototype, epsilon: float = DAP_EPSILON) -> float:
    """Log of the product of per-attribute match probabilities.

    For each attribute the matching probability is p_m when the class
    signature expects the attribute and 1-p_m otherwise, clamped to
    [epsilon, 1-epsilon]. The sum of logs is monotone in the product, so
    rank-based evaluation is unaffected by staying in the log domain.
    """
    if proto.attr_signature is None:
        raise AnnotationMissing(f"class {proto.class_id} has no attribute signature")
    if not 0.0 < epsilon < 0.5:
        raise IndicatorError(f"epsilon must lie in (0, 0.5), got {epsilon}")
    probs = np.asarray(attr_probs, dtype=np.float64)
    if probs.shape != proto.attr_signature.shape:
        raise IndicatorError(
            f"attribute probabilities have length {probs.size}, "
            f"expected {proto.attr_signature.size}"
        )
    q = np.where(proto.attr_signature, probs, 1.0 - probs)
    q = np.clip(q, epsilon, 1.0 - epsilon)
    return float(np.sum(np.log(q)))


def train_class_models(
    train: Dataset,
    features: FeatureMatrix,
    lam: float,
    epochs: int = 200,
    seed: int = 0,
) -> dict[int, LinearModel]:
    """One-vs-rest linear classifier per class on the train split."""
    ids = [i for i in train.train_ids if i in features.rows]
    if not ids:
        raise IndicatorError("no train images with features")
    X = features.matrix(ids)
    labels = np.array([train.records[i].class_id for i in ids])
    models: dict[int, LinearModel] = {}
    for class_id in sorted(set(labels.tolist())):
        y = labels == class_id
        if y.all() or not y.any():
            raise IndicatorError(f"class {class_id} cannot be trained one-vs-rest")
        models[class_id] = train_binary_svm(X, y, lam, epochs=epochs, seed=seed)
    return models


def train_attribute_models(
    train: Dataset,
    features: FeatureMatrix,
    lam: float,
    epochs: int = 200,
    seed: int = 0,
) -> list[LinearModel | None]:
    """One binary classifier per attribute; None where an attribute is
    constant on the train split."""
    ids = [
        i
        for i in train.train_ids
        if i in features.rows and train.records[i].attributes is not None
    ]
    if not ids:
        raise IndicatorError("no train images with both features and attributes")
    X = features.matrix(ids)
    A = np.stack([train.records[i].attributes for i in ids])
    models: list[LinearModel | None] = []
    for m in range(train.manifest.M):
        y = A[:, m]
        if y.all() or not y.any():
            models.append(None)
            continue
        models.append(train_binary_svm(X, y, lam, epochs=epochs, seed=seed))
    return models


def attribute_matrix(dataset: Dataset) -> FeatureMatrix:
    """Image-level attribute vectors exposed as a feature matrix."""
    fm = FeatureMatrix("attributes", dataset.manifest.M)
    for image_id, rec in dataset.records.items():
        if rec.attributes is not None:
            fm.add(image_id, rec.attributes.astype(np.float32))
    return fm


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-v))


@dataclass(frozen=True)
class IndicatorRequest:
    """One entry of the suite configuration.

    kind: bb_size | bb_dist2center | occlusion | external | cluster |
          svm_class | i2c_att | dap
    source: gt/det for box kinds; oracle/predicted for dap; the stored score
            name for external.
    feature: feature-matrix name for cluster/svm_class/dap-predicted
            ("attributes" selects image attribute vectors).
    """

    name: str
    kind: str
    source: str = "gt"
    feature: str | None = None

    @property
    def provenance(self) -> str:
        if self.kind == "external":
            return "external"
        if self.source == "det" or (self.kind == "dap" and self.source == "predicted"):
            return "predicted"
        return "oracle"


def load_suite_config(path) -> list[IndicatorRequest]:
    """Parse the suite configuration file (JSON list under "indicators")."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IndicatorError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise IndicatorError(f"{path}: invalid JSON ({exc.msg})") from None
    entries = obj["indicators"] if isinstance(obj, dict) else obj
    requests = []
    for i, entry in enumerate(entries):
        try:
            requests.append(
                IndicatorRequest(
                    name=entry["name"],
                    kind=entry["kind"],
                    source=entry.get("source", "gt"),
                    feature=entry.get("feature"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise IndicatorError(f"{path}: bad indicator entry {i} ({exc})") from None
    return requests


@dataclass
class SuiteModels:
    """Trained auxiliary models the class-dependent indicators draw on."""

    prototypes: dict[str, dict[int, ClassPrototype]] = field(default_factory=dict)
    class_models: dict[str, dict[int, LinearModel]] = field(default_factory=dict)
    attribute_models: dict[str, list[LinearModel | None]] = field(default_factory=dict)


def compute_indicator_suite(
    dataset: Dataset,
    requests: list[IndicatorRequest],
    models: SuiteModels | None = None,
    image_ids: list[str] | None = None,
    features: Mapping[str, FeatureMatrix] | None = None,
) -> list[IndicatorScores]:
    """Evaluate every requested indicator over the given image set.

    Class-dependent indicators use each image's own class label. Per-image
    annotation gaps land in the result's ``missing`` list; configuration
    problems (unknown kind, absent model or feature matrix) raise.
    """
    models = models or SuiteModels()
    if features is None:
        features = dict(dataset.features)
        if "attributes" not in features:
            features = {**features, "attributes": attribute_matrix(dataset)}
    ids = sorted(image_ids) if image_ids is not None else sorted(dataset.records)
    results: list[IndicatorScores] = []
    for req in requests:
        out = IndicatorScores(req.name, provenance=req.provenance)
        compute = _resolve(req, models, features, dataset)
        for image_id in ids:
            record = dataset.records[image_id]
            try:
                out.scores[image_id] = compute(record)
            except AnnotationMissing:
                out.missing.append(image_id)
        if out.missing:
            logger.warning(
                "indicator %s: %d image(s) lacked the required annotation",
                req.name,
                len(out.missing),
            )
        results.append(out)
    return results


def _feature_row(features, name: str | None, record: ImageRecord) -> np.ndarray:
    if name is None:
        raise IndicatorError("this indicator kind needs a 'feature' entry")
    if name not in features:
        raise IndicatorError(f"unknown feature matrix {name!r}")
    row = features[name].rows.get(record.image_id)
    if row is None:
        raise AnnotationMissing(f"image {record.image_id!r} has no {name!r} feature row")
    return row


def _resolve(req: IndicatorRequest, models: SuiteModels, features, dataset: Dataset):
    if req.kind == "bb_size":
        return lambda rec: bb_size(rec, req.source)
    if req.kind == "bb_dist2center":
        return lambda rec: bb_dist2center(rec, req.source)
    if req.kind == "occlusion":
        return occlusion_score
    if req.kind == "external":
        return lambda rec: _external(rec, req.source)
    if req.kind == "cluster":
        protos = _lookup(models.prototypes, req.feature, "prototypes")
        return lambda rec: cluster_score(
            _feature_row(features, req.feature, rec), _class_proto(protos, rec)
        )
    if req.kind == "svm_class":
        per_class = _lookup(models.class_models, req.feature, "class models")
        return lambda rec: _svm_class(rec, per_class, features, req.feature)
    if req.kind == "i2c_att":
        protos = _lookup(models.prototypes, req.feature or "attributes", "prototypes")
        return lambda rec: _i2c(rec, protos)
    if req.kind == "dap":
        protos = _lookup(models.prototypes, req.feature or "attributes", "prototypes")
        if req.source == "oracle":
            return lambda rec: _dap_oracle(rec, protos)
        if req.source == "predicted":
            attr_models = _lookup(models.attribute_models, req.feature, "attribute models")
            return lambda rec: _dap_predicted(rec, protos, attr_models, features, req.feature)
        raise IndicatorError(f"dap source must be oracle or predicted, got {req.source!r}")
    raise IndicatorError(f"unknown indicator kind {req.kind!r}")


def _lookup(table: dict, key: str | None, what: str):
    if key is None or key not in table:
        raise IndicatorError(f"no {what} available under key {key!r}")
    return table[key]


def _class_proto(protos: dict[int, ClassPrototype], record: ImageRecord) -> ClassPrototype:
    proto = protos.get(record.class_id)
    if proto is None:
        raise IndicatorError(f"no prototype for class {record.class_id}")
    return proto


def _external(record: ImageRecord, name: str) -> float:
    if name not in record.external_scores:
        raise AnnotationMissing(f"image {record.image_id!r} has no external score {name!r}")
    return record.external_scores[name]


def _svm_class(record, per_class: dict[int, LinearModel], features, feature_name) -> float:
    model = per_class.get(record.class_id)
    if model is None:
        raise IndicatorError(f"no class model for class {record.class_id}")
    return class_svm_score(_feature_row(features, feature_name, record), model)


def _i2c(record: ImageRecord, protos: dict[int, ClassPrototype]) -> float:
    if record.attributes is None:
        raise AnnotationMissing(f"image {record.image_id!r} has no attribute vector")
    return i2c_att_score(record.attributes.astype(np.float64), _class_proto(protos, record))


def _dap_oracle(record: ImageRecord, protos: dict[int, ClassPrototype]) -> float:
    if record.attributes is None:
        raise AnnotationMissing(f"image {record.image_id!r} has no attribute vector")
    return dap_score(record.attributes.astype(np.float64), _class_proto(protos, record))


def _dap_predicted(record, protos, attr_models, features, feature_name) -> float:
    x = _feature_row(features, feature_name, record)
    raw = np.array(
        [0.0 if m is None else class_svm_score(x, m) for m in attr_models],
        dtype=np.float64,
    )
    return dap_score(_sigmoid(raw), _class_proto(protos, record))
