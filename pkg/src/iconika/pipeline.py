"""Evaluation, fusion, agreement analysis, and the experiment driver.

Turns indicator scores plus human ratings into machine-readable report
tables: per-indicator rank correlation and average precision, the
indicator-vs-indicator correlation matrix, averaged and learned score
combinations, direct iconicity predictors on raw features, inter-annotator
agreement, and per-class contribution breakdowns. ``run_experiment`` wires
all of it behind one config and emits a byte-reproducible report bundle.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .datamodel import AnnotationBatch, Dataset, RatingRecord, load_dataset, split_half
from .indicators import (
    IndicatorRequest,
    IndicatorScores,
    SuiteModels,
    attribute_matrix,
    build_prototypes,
    compute_indicator_suite,
    train_attribute_models,
    train_class_models,
)
from .rankstats import average_precision, spearman
from .solvers import (
    ICONIC_THRESHOLD,
    LinearModel,
    Whitener,
    build_pairs,
    fit_whitener,
    predict,
    save_model,
    select_lambda,
    train_binary_svm,
    train_ranking_svm,
)

logger = logging.getLogger(__name__)

ALPHA = 1.5  # positivity threshold for average precision


class PipelineError(Exception):
    """Evaluation or fusion could not proceed on the given data."""


@dataclass(frozen=True)
class EvaluationRow:
    """One line of an indicator/combination comparison table."""

    name: str
    src: float
    p_value: float
    ap: float
    n: int

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "src": self.src,
            "p_value": self.p_value,
            "ap": self.ap,
            "n": self.n,
        }


def evaluate_indicator(
    scores: IndicatorScores, ratings: Mapping[str, float]
) -> EvaluationRow:
    """Rank correlation and average precision of one indicator against the
    ground-truth ratings, over their common images."""
    common = sorted(set(scores.scores) & set(ratings))
    if len(common) < 2:
        raise PipelineError(
            f"indicator {scores.indicator_name!r} shares only {len(common)} "
            "image(s) with the ratings"
        )
    s = np.array([scores.scores[i] for i in common])
    r = np.array([ratings[i] for i in common])
    corr = spearman(s, r)
    if not np.any(r > ALPHA):
        raise PipelineError(
            f"indicator {scores.indicator_name!r}: no rating above {ALPHA}, AP undefined"
        )
    ap = average_precision(s, r, alpha=ALPHA)
    return EvaluationRow(scores.indicator_name, corr.rho, corr.p_value, ap, len(common))


@dataclass
class CorrelationMatrix:
    """Pairwise rank correlations between indicators; None marks pairs with
    fewer than 2 common images."""

    names: list[str]
    values: list[list[float | None]]

    def to_json(self) -> dict:
        return {"names": self.names, "src": self.values}


def indicator_correlation_matrix(suite: list[IndicatorScores]) -> CorrelationMatrix:
    names = [s.indicator_name for s in suite]
    n = len(suite)
    values: list[list[float | None]] = [[None] * n for _ in range(n)]
    for i in range(n):
        values[i][i] = 1.0
        for j in range(i + 1, n):
            common = sorted(set(suite[i].scores) & set(suite[j].scores))
            if len(common) < 2:
                logger.warning(
                    "correlation %s/%s skipped: %d common image(s)",
                    names[i],
                    names[j],
                    len(common),
                )
                continue
            a = np.array([suite[i].scores[k] for k in common])
            b = np.array([suite[j].scores[k] for k in common])
            rho = spearman(a, b).rho
            values[i][j] = rho
            values[j][i] = rho
    return CorrelationMatrix(names, values)


def _common_ids(suite: list[IndicatorScores]) -> list[str]:
    if not suite:
        raise PipelineError("empty indicator suite")
    common = set(suite[0].scores)
    for s in suite[1:]:
        common &= set(s.scores)
    return sorted(common)


def _indicator_matrix(suite: list[IndicatorScores], ids: list[str]) -> np.ndarray:
    return np.array([[s.scores[i] for s in suite] for i in ids], dtype=np.float64)


def fit_indicator_whiteners(suite: list[IndicatorScores]) -> dict[str, Whitener]:
    """One single-column whitener per indicator, fitted on its own scores."""
    out: dict[str, Whitener] = {}
    for s in suite:
        column = np.array([v for _, v in sorted(s.scores.items())], dtype=np.float64)
        out[s.indicator_name] = fit_whitener(column.reshape(-1, 1))
    return out


def fuse_average(
    suite: list[IndicatorScores], whiteners: Mapping[str, Whitener]
) -> IndicatorScores:
    """Mean of whitened indicator values per image.

    Whiteners must come from training scores. Images missing any indicator
    are excluded (and listed in the result's ``missing``) rather than
    imputed.
    """
    common = set(_common_ids(suite))
    everyone = set()
    for s in suite:
        everyone |= set(s.scores)
    fused = IndicatorScores("Average", provenance="predicted")
    fused.missing = sorted(everyone - common)
    if fused.missing:
        logger.warning("average fusion excludes %d image(s) with missing indicators", len(fused.missing))
    for image_id in sorted(common):
        total = 0.0
        for s in suite:
            wh = whiteners[s.indicator_name]
            total += float(wh.apply(np.array([[s.scores[image_id]]]))[0, 0])
        fused.scores[image_id] = total / len(suite)
    return fused


def _consolidated(ratings: list[RatingRecord]) -> dict[str, float]:
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for rec in ratings:
        sums[rec.image_id] = sums.get(rec.image_id, 0.0) + rec.rating
        counts[rec.image_id] = counts.get(rec.image_id, 0) + 1
    return {k: sums[k] / counts[k] for k in sums}


def fuse_learned(
    suite: list[IndicatorScores],
    ratings: list[RatingRecord],
    batches: list[AnnotationBatch],
    objective: str,
    lambda_grid: list[float],
    seed: int,
    halves: tuple[list[str], list[str]] | None = None,
    epochs: int = 200,
) -> tuple[LinearModel, Whitener]:
    """Learn a linear weighting of whitened indicator columns.

    The regularization weight comes from a half/half validation sweep
    (whitener fitted on the training half only), then the model is retrained
    on the full training data with a whitener fitted on all of it. The
    returned (model, whitener) applies to unseen images and classes.
    """
    ids = _common_ids(suite)
    mean_rating = _consolidated(ratings)
    train_ids = [i for i in ids if i in mean_rating]
    if len(train_ids) < 2:
        raise PipelineError("learned fusion needs at least 2 rated, fully-scored images")
    if halves is None:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(train_ids))
        cut = (len(train_ids) + 1) // 2
        half_a = sorted(train_ids[i] for i in perm[:cut])
        half_b = sorted(train_ids[i] for i in perm[cut:])
    else:
        usable = set(train_ids)
        half_a = [i for i in halves[0] if i in usable]
        half_b = [i for i in halves[1] if i in usable]
    X_all = _indicator_matrix(suite, train_ids)
    rows_raw = {i: X_all[k] for k, i in enumerate(train_ids)}
    if len(half_a) >= 2:
        val_whitener = fit_whitener(np.stack([rows_raw[i] for i in half_a]))
        rows_val = {i: val_whitener.apply(v.reshape(1, -1))[0] for i, v in rows_raw.items()}
        relevant = [r for r in ratings if r.image_id in rows_raw]
        lam = select_lambda(
            rows_val,
            relevant,
            batches,
            objective,
            lambda_grid,
            seed,
            halves=(half_a, half_b),
            epochs=epochs,
        )
    else:
        lam = sorted(lambda_grid)[(len(lambda_grid) - 1) // 2]
        logger.warning("fuse_learned: training half too small; using grid median %g", lam)

    whitener = fit_whitener(X_all)
    rows = {i: whitener.apply(v.reshape(1, -1))[0] for i, v in rows_raw.items()}
    if objective == "ranking":
        relevant = [r for r in ratings if r.image_id in rows]
        pairs = build_pairs(relevant, batches)
        if not pairs:
            raise PipelineError("no rating pairs available for learned fusion")
        model = train_ranking_svm(rows, pairs, lam, epochs=epochs, seed=seed)
    elif objective == "binary":
        y = np.array([mean_rating[i] > ICONIC_THRESHOLD for i in train_ids])
        model = train_binary_svm(
            np.stack([rows[i] for i in train_ids]), y, lam, epochs=epochs, seed=seed
        )
    else:
        raise PipelineError(f"unknown objective {objective!r}")
    return model, whitener


def apply_fusion(
    model: LinearModel,
    whitener: Whitener,
    suite: list[IndicatorScores],
    name: str = "fused",
) -> IndicatorScores:
    """Score every image covered by all indicators with a fusion model."""
    ids = _common_ids(suite)
    out = IndicatorScores(name, provenance="predicted")
    everyone = set()
    for s in suite:
        everyone |= set(s.scores)
    out.missing = sorted(everyone - set(ids))
    if ids:
        Z = whitener.apply(_indicator_matrix(suite, ids))
        scores = Z @ model.w + model.b
        out.scores = {i: float(v) for i, v in zip(ids, scores)}
    return out


@dataclass(frozen=True)
class PairAgreement:
    annotator_a: str
    annotator_b: str
    rho: float
    p_value: float
    n: int
    degenerate: bool


@dataclass
class AgreementReport:
    """Inter-annotator consistency: one mean-of-pairwise-SRCs statistic per
    redundancy group plus the per-pair detail."""

    group_stats: dict[str, float | None]
    pairs: dict[str, list[PairAgreement]]
    aggregation: str = "mean-of-pairwise-srcs"

    def to_json(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "group_stats": self.group_stats,
            "pairs": {
                g: [
                    {
                        "annotator_a": p.annotator_a,
                        "annotator_b": p.annotator_b,
                        "rho": p.rho,
                        "p_value": p.p_value,
                        "n": p.n,
                        "degenerate": p.degenerate,
                    }
                    for p in plist
                ]
                for g, plist in self.pairs.items()
            },
        }


def annotator_agreement(
    ratings: list[RatingRecord], groups: Mapping[str, list[str]]
) -> AgreementReport:
    """Pairwise rank correlation over shared images, per redundancy group.

    The group statistic is the arithmetic mean of its pairwise correlations;
    pairs with constant ratings (or fewer than 2 shared images) are flagged
    degenerate and excluded from the mean. That aggregation choice is
    recorded in the report.
    """
    by_annotator: dict[str, dict[str, float]] = {}
    for rec in ratings:
        by_annotator.setdefault(rec.annotator_id, {})[rec.image_id] = rec.rating
    group_stats: dict[str, float | None] = {}
    pair_lists: dict[str, list[PairAgreement]] = {}
    for group in sorted(groups):
        members = sorted(groups[group])
        pairs: list[PairAgreement] = []
        for ai in range(len(members)):
            for bi in range(ai + 1, len(members)):
                a, b = members[ai], members[bi]
                ra = by_annotator.get(a, {})
                rb = by_annotator.get(b, {})
                shared = sorted(set(ra) & set(rb))
                if len(shared) < 2:
                    pairs.append(PairAgreement(a, b, 0.0, 1.0, len(shared), True))
                    continue
                corr = spearman(
                    np.array([ra[i] for i in shared]), np.array([rb[i] for i in shared])
                )
                pairs.append(
                    PairAgreement(a, b, corr.rho, corr.p_value, corr.n, corr.degenerate)
                )
        valid = [p.rho for p in pairs if not p.degenerate]
        group_stats[group] = sum(valid) / len(valid) if valid else None
        if not valid:
            logger.warning("agreement group %s has no non-degenerate pairs", group)
        pair_lists[group] = pairs
    return AgreementReport(group_stats, pair_lists)


@dataclass
class ContributionReport:
    """Per-indicator contributions to the fused score of a class's best and
    worst images; each contribution map sums (with the bias) to that image's
    fused score."""

    class_id: int
    best_image_id: str
    worst_image_id: str
    best_contributions: dict[str, float]
    worst_contributions: dict[str, float]
    bias: float

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "best_image_id": self.best_image_id,
            "worst_image_id": self.worst_image_id,
            "best_contributions": self.best_contributions,
            "worst_contributions": self.worst_contributions,
            "bias": self.bias,
        }


def contribution_report(
    model: LinearModel,
    whitener: Whitener,
    suite: list[IndicatorScores],
    dataset: Dataset,
    class_id: int,
) -> ContributionReport:
    names = [s.indicator_name for s in suite]
    ids = [
        i for i in _common_ids(suite) if dataset.records[i].class_id == class_id
    ]
    if not ids:
        raise PipelineError(f"class {class_id} has no fully-scored images")
    Z = whitener.apply(_indicator_matrix(suite, ids))
    scores = Z @ model.w + model.b
    best_k = min(range(len(ids)), key=lambda k: (-scores[k], ids[k]))
    worst_k = min(range(len(ids)), key=lambda k: (scores[k], ids[k]))

    def contributions(k: int) -> dict[str, float]:
        return {name: float(model.w[j] * Z[k, j]) for j, name in enumerate(names)}

    return ContributionReport(
        class_id=class_id,
        best_image_id=ids[best_k],
        worst_image_id=ids[worst_k],
        best_contributions=contributions(best_k),
        worst_contributions=contributions(worst_k),
        bias=model.b,
    )


def derive_seed(base: int, label: str) -> int:
    """Stable per-purpose seed derivation from the experiment seed."""
    digest = hashlib.sha256(f"{base}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class ExperimentConfig:
    """Everything `run_experiment` needs beyond the dataset manifest."""

    seed: int = 0
    lambda_grid: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    epochs: int = 200
    aux_lambda: float = 0.1  # per-class / per-attribute auxiliary models
    indicators: list[IndicatorRequest] = field(default_factory=list)
    combinations: list[str] = field(default_factory=lambda: ["average", "binary", "ranking"])
    dip_feature: str | None = None
    dip_objectives: list[str] = field(default_factory=list)
    combine_dip: bool = False
    agreement_groups: dict[str, list[str]] | None = None
    contributions: bool = False

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        known = {
            "seed",
            "lambda_grid",
            "epochs",
            "aux_lambda",
            "indicators",
            "combinations",
            "dip_feature",
            "dip_objectives",
            "combine_dip",
            "agreement_groups",
            "contributions",
        }
        unknown = set(obj) - known
        if unknown:
            raise PipelineError(f"unknown experiment config key(s): {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in obj.items() if k != "indicators"})
        cfg.indicators = [
            IndicatorRequest(
                name=e["name"],
                kind=e["kind"],
                source=e.get("source", "gt"),
                feature=e.get("feature"),
            )
            for e in obj.get("indicators", [])
        ]
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise PipelineError(f"missing file: {path}") from None
        except json.JSONDecodeError as exc:
            raise PipelineError(f"{path}: invalid JSON ({exc.msg})") from None

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "lambda_grid": self.lambda_grid,
            "epochs": self.epochs,
            "aux_lambda": self.aux_lambda,
            "indicators": [
                {"name": r.name, "kind": r.kind, "source": r.source, "feature": r.feature}
                for r in self.indicators
            ],
            "combinations": self.combinations,
            "dip_feature": self.dip_feature,
            "dip_objectives": self.dip_objectives,
            "combine_dip": self.combine_dip,
            "agreement_groups": self.agreement_groups,
            "contributions": self.contributions,
        }


@dataclass
class ReportBundle:
    out_dir: Path
    indicator_rows: list[EvaluationRow]
    combination_rows: list[EvaluationRow]
    correlation: CorrelationMatrix | None
    agreement: AgreementReport | None
    contributions: list[ContributionReport]
    errors: list[str]
    manifest: dict


def _train_suite_models(dataset: Dataset, config: ExperimentConfig) -> SuiteModels:
    models = SuiteModels()
    feats = dict(dataset.features)
    feats["attributes"] = attribute_matrix(dataset)
    for req in config.indicators:
        if req.kind in ("cluster",):
            key = req.feature
        elif req.kind in ("i2c_att", "dap"):
            key = req.feature or "attributes"
        else:
            key = None
        if req.kind in ("cluster", "i2c_att", "dap") and key not in models.prototypes:
            models.prototypes[key] = build_prototypes(dataset, feats[key])
        if req.kind == "svm_class" and req.feature not in models.class_models:
            models.class_models[req.feature] = train_class_models(
                dataset,
                feats[req.feature],
                config.aux_lambda,
                epochs=config.epochs,
                seed=derive_seed(config.seed, f"class-models:{req.feature}"),
            )
        if req.kind == "dap" and req.source == "predicted":
            if req.feature not in models.attribute_models:
                models.attribute_models[req.feature] = train_attribute_models(
                    dataset,
                    feats[req.feature],
                    config.aux_lambda,
                    epochs=config.epochs,
                    seed=derive_seed(config.seed, f"attribute-models:{req.feature}"),
                )
    return models


def _dip_scores(
    dataset: Dataset,
    config: ExperimentConfig,
    objective: str,
    halves: tuple[list[str], list[str]],
) -> tuple[IndicatorScores, IndicatorScores, LinearModel]:
    """Train a direct predictor on raw features; score train and test ids."""
    features = dataset.features[config.dip_feature]
    mean_rating = _consolidated(dataset.ratings)
    train_rated = [i for i in dataset.train_ids if i in mean_rating and i in features.rows]
    if len(train_rated) < 2:
        raise PipelineError("direct prediction needs rated train images with features")
    rows = {i: features.rows[i].astype(np.float64) for i in train_rated}
    seed = derive_seed(config.seed, f"dip:{objective}")
    lam = select_lambda(
        rows,
        [r for r in dataset.ratings if r.image_id in rows],
        dataset.batches,
        objective,
        config.lambda_grid,
        seed,
        halves=halves,
        epochs=config.epochs,
    )
    if objective == "ranking":
        pairs = build_pairs([r for r in dataset.ratings if r.image_id in rows], dataset.batches)
        model = train_ranking_svm(rows, pairs, lam, epochs=config.epochs, seed=seed)
    else:
        y = np.array([mean_rating[i] > ICONIC_THRESHOLD for i in train_rated])
        model = train_binary_svm(
            np.stack([rows[i] for i in train_rated]), y, lam, epochs=config.epochs, seed=seed
        )
    tag = "bin" if objective == "binary" else "rank"
    name = f"DIP-{tag}"
    train_scores = IndicatorScores(name, predict(model, rows), provenance="predicted")
    test_rows = {
        i: features.rows[i].astype(np.float64)
        for i in dataset.test_ids
        if i in features.rows
    }
    test_scores = IndicatorScores(name, predict(model, test_rows), provenance="predicted")
    return train_scores, test_scores, model


def run_experiment(manifest_path, config: ExperimentConfig, out_dir) -> ReportBundle:
    """Execute the full evaluation pipeline and write the report bundle.

    Stage failures are collected (with partial results preserved) rather
    than aborting the run; the bundle is bit-reproducible given the same
    data, config, and seed.
    """
    out = Path(out_dir)
    dataset = load_dataset(manifest_path)
    errors: list[str] = []
    test_ratings = {
        k: v for k, v in _consolidated(dataset.ratings).items() if dataset.split.get(k) == "test"
    }
    halves_ds = split_half(dataset, derive_seed(config.seed, "halves"))
    halves = (halves_ds[0].train_ids, halves_ds[1].train_ids)

    suite_train: list[IndicatorScores] = []
    suite_test: list[IndicatorScores] = []
    indicator_rows: list[EvaluationRow] = []
    correlation = None
    models_out: dict[str, tuple[LinearModel, Whitener | None]] = {}

    try:
        suite_models = _train_suite_models(dataset, config)
        train_rated = sorted(i for i in dataset.train_ids if i in _consolidated(dataset.ratings))
        suite_train = compute_indicator_suite(
            dataset, config.indicators, suite_models, image_ids=train_rated
        )
        suite_test = compute_indicator_suite(
            dataset, config.indicators, suite_models, image_ids=dataset.test_ids
        )
        for scores in suite_test:
            try:
                indicator_rows.append(evaluate_indicator(scores, test_ratings))
            except PipelineError as exc:
                errors.append(str(exc))
        correlation = indicator_correlation_matrix(suite_test)
    except Exception as exc:  # aggregated per spec; partial results kept
        errors.append(f"indicator stage: {exc}")

    combination_rows: list[EvaluationRow] = []
    train_ratings_records = [
        r for r in dataset.ratings if dataset.split.get(r.image_id) == "train"
    ]
    fusion_suites = {"train": list(suite_train), "test": list(suite_test)}

    dip_models: dict[str, LinearModel] = {}
    if config.dip_feature:
        for objective in config.dip_objectives:
            try:
                tr, te, model = _dip_scores(dataset, config, objective, halves)
                combination_rows.append(evaluate_indicator(te, test_ratings))
                dip_models[te.indicator_name] = model
                models_out[te.indicator_name] = (model, None)
                if config.combine_dip:
                    fusion_suites["train"].append(tr)
                    fusion_suites["test"].append(te)
            except Exception as exc:
                errors.append(f"direct prediction ({objective}): {exc}")

    learned_fusions: dict[str, tuple[LinearModel, Whitener]] = {}
    if suite_train and suite_test:
        if "average" in config.combinations:
            try:
                whiteners = fit_indicator_whiteners(suite_train)
                fused = fuse_average(suite_test, whiteners)
                fused.indicator_name = "Average"
                row = evaluate_indicator(fused, test_ratings)
                combination_rows.append(row)
            except Exception as exc:
                errors.append(f"average fusion: {exc}")
        for objective in ("binary", "ranking"):
            if objective not in config.combinations:
                continue
            tag = "bin" if objective == "binary" else "rank"
            label = f"SVM-{tag}" + ("+DIP" if config.combine_dip and dip_models else "")
            try:
                model, whitener = fuse_learned(
                    fusion_suites["train"],
                    train_ratings_records,
                    dataset.batches,
                    objective,
                    config.lambda_grid,
                    derive_seed(config.seed, f"fusion:{objective}"),
                    halves=halves,
                    epochs=config.epochs,
                )
                fused = apply_fusion(model, whitener, fusion_suites["test"], name=label)
                combination_rows.append(evaluate_indicator(fused, test_ratings))
                learned_fusions[objective] = (model, whitener)
                models_out[label] = (model, whitener)
            except Exception as exc:
                errors.append(f"learned fusion ({objective}): {exc}")

    agreement = None
    if config.agreement_groups:
        try:
            agreement = annotator_agreement(dataset.ratings, config.agreement_groups)
        except Exception as exc:
            errors.append(f"agreement: {exc}")

    contributions: list[ContributionReport] = []
    if config.contributions and learned_fusions:
        objective = "ranking" if "ranking" in learned_fusions else "binary"
        model, whitener = learned_fusions[objective]
        class_ids = sorted(
            {dataset.records[i].class_id for i in _common_ids(fusion_suites["test"])}
        )
        for class_id in class_ids:
            try:
                contributions.append(
                    contribution_report(
                        model, whitener, fusion_suites["test"], dataset, class_id
                    )
                )
            except PipelineError as exc:
                errors.append(f"contributions class {class_id}: {exc}")

    manifest = _write_bundle(
        out,
        config,
        indicator_rows,
        combination_rows,
        correlation,
        agreement,
        contributions,
        models_out,
        errors,
    )
    return ReportBundle(
        out, indicator_rows, combination_rows, correlation, agreement, contributions, errors, manifest
    )


def _dump_json(path: Path, obj) -> None:
    path.write_text(
        json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8"
    )


def _dump_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, allow_nan=False) + "\n")


def _write_bundle(
    out: Path,
    config: ExperimentConfig,
    indicator_rows,
    combination_rows,
    correlation,
    agreement,
    contributions,
    models_out,
    errors,
) -> dict:
    tables = out / "tables"
    models_dir = out / "models"
    tables.mkdir(parents=True, exist_ok=True)
    _dump_jsonl(tables / "indicators.jsonl", [r.to_json() for r in indicator_rows])
    _dump_jsonl(tables / "combinations.jsonl", [r.to_json() for r in combination_rows])
    if correlation is not None:
        _dump_json(tables / "correlation.json", correlation.to_json())
    if agreement is not None:
        _dump_json(tables / "agreement.json", agreement.to_json())
    if contributions:
        _dump_jsonl(out / "contributions.jsonl", [c.to_json() for c in contributions])
    hashes: dict[str, str] = {}
    if models_out:
        models_dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(models_out):
            model, whitener = models_out[name]
            safe = name.replace("/", "_").replace("+", "_plus_")
            path = models_dir / f"{safe}.model"
            save_model(model, path, whitener)
            hashes[name] = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "config": config.to_json(),
        "seed": config.seed,
        "model_hashes": hashes,
        "package_version": __version__,
        "errors": sorted(errors),
    }
    _dump_json(out / "manifest.json", manifest)
    _dump_json(
        out / "summary.json",
        {
            "indicators_evaluated": len(indicator_rows),
            "combinations_evaluated": len(combination_rows),
            "contribution_reports": len(contributions),
            "error_count": len(errors),
        },
    )
    return manifest
