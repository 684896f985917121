"""Linear predictors trained by seeded stochastic subgradient descent.

Covers the L2-regularized binary hinge classifier, the pairwise ranking
objective over same-batch rating pairs, feature whitening, half/half
validation for the regularization weight, and bit-exact model persistence.

Both objectives are normalized by the number of terms:

    binary   (1/N) sum_i max(0, 1 - y_i (w.x_i + b)) + (lam/2) ||w||^2
    ranking  (1/P) sum_p max(0, 1 - w.(x+_p - x-_p)) + (lam/2) ||w||^2

so duplicating the training set leaves the objective unchanged. Steps are
1/(lam*t); the returned weights are the best suffix-averaged iterate seen,
which keeps the recorded objective trace non-increasing.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .datamodel import AnnotationBatch, RatingRecord
from .rankstats import average_precision, spearman

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = 200
EARLY_STOP_TOL = 1e-8
EARLY_STOP_WINDOW = 10
STD_FLOOR = 1e-12
ICONIC_THRESHOLD = 1.5  # rating above this counts as iconic for binary labels

MODEL_FORMAT = "iconika-model"
MODEL_VERSION = 1


class SolverError(Exception):
    """Invalid training input (labels, pairs, or feature rows)."""


@dataclass(eq=False)
class Whitener:
    """Per-column standardization fitted on training data.

    ``std`` holds the population standard deviation with near-constant
    columns (std below ``floor``) replaced by 1, so applying the whitener
    maps such a column to all zeros.
    """

    mean: np.ndarray
    std: np.ndarray
    floor: float = STD_FLOOR

    def apply(self, X) -> np.ndarray:
        arr = np.asarray(X, dtype=np.float64)
        return (arr - self.mean) / self.std


def fit_whitener(columns) -> Whitener:
    X = np.asarray(columns, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise SolverError(f"whitener needs a 2-d input with >= 2 rows, got shape {X.shape}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)  # population convention (divide by n)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return Whitener(mean=mean, std=std)


@dataclass(frozen=True)
class RankPair:
    """An ordered preference: pos was rated strictly above neg by one
    annotator within one batch."""

    pos_id: str
    neg_id: str
    annotator_id: str
    batch_id: str


def build_pairs(
    ratings: list[RatingRecord], batches: list[AnnotationBatch]
) -> list[RankPair]:
    """All strictly-ordered rating pairs within one (annotator, batch) group.

    Cross-batch and cross-annotator pairs are never formed; the output is
    sorted by (batch_id, annotator_id, pos_id, neg_id).
    """
    by_id = {batch.batch_id: batch for batch in batches}
    groups: dict[tuple[str, str], dict[str, int]] = {}
    for rec in ratings:
        batch = by_id.get(rec.batch_id)
        if batch is None:
            raise SolverError(f"rating references unknown batch {rec.batch_id!r}")
        if rec.image_id not in batch.image_ids:
            raise SolverError(
                f"rating for image {rec.image_id!r} not in batch {rec.batch_id!r}"
            )
        groups.setdefault((rec.batch_id, rec.annotator_id), {})[rec.image_id] = rec.rating
    pairs: list[RankPair] = []
    for (batch_id, annotator_id) in sorted(groups):
        rated = groups[(batch_id, annotator_id)]
        ids = sorted(rated)
        for pos in ids:
            for neg in ids:
                if rated[pos] > rated[neg]:
                    pairs.append(RankPair(pos, neg, annotator_id, batch_id))
    return pairs


@dataclass(eq=False)
class LinearModel:
    """Weights plus training metadata; ranking models have bias fixed to 0."""

    w: np.ndarray
    b: float
    lam: float
    objective: str  # "binary" | "ranking"
    seed: int
    epochs: int  # epochs actually run
    training_log: list[float] = field(default_factory=list)

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


def binary_objective(w, b: float, X, y, lam: float) -> float:
    """Mean hinge loss plus L2 penalty (bias unregularized)."""
    w = np.asarray(w, dtype=np.float64)
    margins = 1.0 - np.asarray(y, dtype=np.float64) * (np.asarray(X) @ w + b)
    return float(np.mean(np.maximum(0.0, margins)) + 0.5 * lam * (w @ w))


def ranking_objective(w, diffs, lam: float) -> float:
    """Mean hinge loss over difference vectors, no bias."""
    d = np.asarray(diffs)
    return binary_objective(w, 0.0, d, np.ones(d.shape[0]), lam)


def _optimal_bias(scores: np.ndarray, y: np.ndarray) -> float:
    """Exact minimizer of the mean hinge loss over the bias, weights fixed.

    The loss is convex piecewise linear in b with breakpoints y_i - s_i, so
    the minimum sits on a breakpoint (both classes present keeps it finite).
    """
    breakpoints = y - scores
    margins = 1.0 - y[None, :] * (scores[None, :] + breakpoints[:, None])
    losses = np.mean(np.maximum(0.0, margins), axis=1)
    return float(breakpoints[int(np.argmin(losses))])


def _sgd_hinge(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    epochs: int,
    seed: int,
    use_bias: bool,
) -> tuple[np.ndarray, float, list[float], int]:
    """Seeded stochastic subgradient with 1/(lam*t) steps.

    After each epoch the candidate is the average of the per-epoch mean
    iterates over the most recent half of the epochs run so far, with the
    bias (unregularized, so not covered by the strongly-convex step rule)
    re-solved exactly for the candidate weights. The best candidate by full
    objective is kept, which makes the returned log non-increasing by
    construction. Stops early once the raw candidate objective stops
    moving: relative spread below EARLY_STOP_TOL across the last
    EARLY_STOP_WINDOW epochs (a plateau of the best-so-far alone is not
    enough, since the averaged iterate may still be drifting closer).
    """
    n, dim = X.shape
    rng = np.random.default_rng(seed)
    w = np.zeros(dim)
    b = 0.0
    t = 0
    epoch_means: list[tuple[np.ndarray, float]] = []
    suffix_sum_w = np.zeros(dim)
    suffix_sum_b = 0.0
    suffix_start = 0  # index into epoch_means of the first entry in the suffix
    best: tuple[float, np.ndarray, float] | None = None
    log: list[float] = []
    raw: list[float] = []  # candidate objective before best-keeping, for the stop rule
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        sum_w = np.zeros(dim)
        sum_b = 0.0
        for i in order:
            t += 1
            margin = y[i] * (X[i] @ w + b)
            w *= 1.0 - 1.0 / t  # the lam*w subgradient under eta = 1/(lam*t)
            if margin < 1.0:
                w += (y[i] / (lam * t)) * X[i]
                if use_bias:
                    # same 1/(lam*t) schedule asymptotically, but bounded at
                    # the start: the bias is unregularized, and a raw 1/lam
                    # first step would kick it far off for small lam
                    b += y[i] / (1.0 + lam * t)
            sum_w += w
            sum_b += b
        epoch_means.append((sum_w / n, sum_b / n))
        suffix_sum_w += epoch_means[-1][0]
        suffix_sum_b += epoch_means[-1][1]
        while len(epoch_means) - suffix_start > (epoch + 1) // 2:
            suffix_sum_w -= epoch_means[suffix_start][0]
            suffix_sum_b -= epoch_means[suffix_start][1]
            suffix_start += 1
        count = len(epoch_means) - suffix_start
        cand_w = suffix_sum_w / count
        cand_b = _optimal_bias(X @ cand_w, y) if use_bias else 0.0
        obj = binary_objective(cand_w, cand_b, X, y, lam)
        if best is None or obj < best[0]:
            best = (obj, cand_w.copy(), cand_b)
        log.append(best[0])
        raw.append(obj)
        if epoch > EARLY_STOP_WINDOW:
            window = raw[-EARLY_STOP_WINDOW - 1 :]
            spread = max(window) - min(window)
            if spread < EARLY_STOP_TOL * max(abs(window[0]), 1e-30):
                break
    assert best is not None
    # quantize to the persisted precision so a saved/loaded model scores
    # identically to the freshly trained one
    w_final = best[1].astype(np.float32).astype(np.float64)
    return w_final, best[2], log, len(log)


def train_binary_svm(
    X, y, lam: float, epochs: int = DEFAULT_EPOCHS, seed: int = 0
) -> LinearModel:
    """L2-regularized hinge-loss classifier; deterministic given the seed.

    ``y`` may be boolean, {0, 1}, or {-1, +1}; both classes must appear.
    """
    Xa = np.asarray(X, dtype=np.float64)
    if Xa.ndim != 2 or Xa.shape[0] == 0:
        raise SolverError(f"X must be a non-empty 2-d array, got shape {Xa.shape}")
    ya = np.asarray(y)
    if set(np.unique(ya).tolist()) <= {0, 1, False, True}:
        ya = np.where(ya.astype(bool), 1.0, -1.0)
    ya = np.asarray(ya, dtype=np.float64)
    if ya.shape != (Xa.shape[0],):
        raise SolverError(f"y must align with X rows: {ya.shape} vs {Xa.shape}")
    if not set(np.unique(ya).tolist()) <= {-1.0, 1.0}:
        raise SolverError("labels must be binary")
    if np.unique(ya).size < 2:
        raise SolverError("training data contains a single class")
    if not lam > 0:
        raise SolverError(f"lambda must be positive, got {lam}")
    w, b, log, ran = _sgd_hinge(Xa, ya, lam, epochs, seed, use_bias=True)
    return LinearModel(w, b, lam, "binary", seed, ran, log)


def train_ranking_svm(
    rows: Mapping[str, np.ndarray],
    pairs: list[RankPair],
    lam: float,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = 0,
) -> LinearModel:
    """Pairwise ranking model on difference vectors x+ - x-, no bias."""
    if not pairs:
        raise SolverError("cannot train a ranking model from zero pairs")
    if not lam > 0:
        raise SolverError(f"lambda must be positive, got {lam}")
    diffs = []
    for pair in pairs:
        for image_id in (pair.pos_id, pair.neg_id):
            if image_id not in rows:
                raise SolverError(f"no feature row for image {image_id!r}")
        diffs.append(
            np.asarray(rows[pair.pos_id], dtype=np.float64)
            - np.asarray(rows[pair.neg_id], dtype=np.float64)
        )
    D = np.stack(diffs)
    w, _, log, ran = _sgd_hinge(D, np.ones(D.shape[0]), lam, epochs, seed, use_bias=False)
    return LinearModel(w, 0.0, lam, "ranking", seed, ran, log)


def predict(model: LinearModel, rows: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Score feature rows; key order does not affect the result."""
    return {
        image_id: float(np.asarray(rows[image_id], dtype=np.float64) @ model.w + model.b)
        for image_id in sorted(rows)
    }


def _grid_median(grid: list[float]) -> float:
    ordered = sorted(grid)
    return ordered[(len(ordered) - 1) // 2]


def select_lambda(
    rows: Mapping[str, np.ndarray],
    ratings: list[RatingRecord],
    batches: list[AnnotationBatch],
    objective: str,
    grid: list[float],
    seed: int,
    halves: tuple[list[str], list[str]] | None = None,
    epochs: int = DEFAULT_EPOCHS,
) -> float:
    """Half/half validation sweep over the regularization grid.

    Trains on the first half for every grid value and picks the one
    maximizing validation rank correlation (ranking) or average precision
    (binary); ties go to the smaller value. ``halves`` may carry an explicit
    (train_ids, validation_ids) partition (e.g. from a class-stratified
    split); otherwise rated images are halved by a seeded shuffle.
    Degenerate validation data falls back to the grid median.
    """
    if not grid:
        raise SolverError("lambda grid must be non-empty")
    rated_ids = sorted({r.image_id for r in ratings} & set(rows))
    if halves is None:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(rated_ids))
        cut = (len(rated_ids) + 1) // 2
        half_a = [rated_ids[i] for i in perm[:cut]]
        half_b = [rated_ids[i] for i in perm[cut:]]
    else:
        half_a = [i for i in halves[0] if i in rows]
        half_b = [i for i in halves[1] if i in rows]
    mean_rating: dict[str, float] = {}
    counts: dict[str, int] = {}
    for rec in ratings:
        mean_rating[rec.image_id] = mean_rating.get(rec.image_id, 0.0) + rec.rating
        counts[rec.image_id] = counts.get(rec.image_id, 0) + 1
    mean_rating = {k: v / counts[k] for k, v in mean_rating.items()}
    val_ids = sorted(i for i in half_b if i in mean_rating)
    val_ratings = np.array([mean_rating[i] for i in val_ids])

    def fallback(reason: str) -> float:
        choice = _grid_median(grid)
        logger.warning("select_lambda: %s; falling back to grid median %g", reason, choice)
        return choice

    if len(val_ids) < 2:
        return fallback("fewer than 2 rated validation images")
    if np.all(val_ratings == val_ratings[0]):
        return fallback("constant validation ratings")

    if objective == "ranking":
        in_a = set(half_a)
        train_ratings = [r for r in ratings if r.image_id in in_a]
        pairs = build_pairs(train_ratings, batches)
        if not pairs:
            return fallback("no training pairs in the first half")
    elif objective == "binary":
        train_ids = sorted(i for i in half_a if i in mean_rating)
        y = np.array([mean_rating[i] > ICONIC_THRESHOLD for i in train_ids])
        if len(train_ids) < 2 or y.all() or not y.any():
            return fallback("single-class training half")
        X_train = np.stack([np.asarray(rows[i], dtype=np.float64) for i in train_ids])
        if not np.any(val_ratings > ICONIC_THRESHOLD):
            return fallback("no validation positives for AP")
    else:
        raise SolverError(f"unknown objective {objective!r}")

    best_lam = None
    best_score = -math.inf
    for lam in sorted(grid):
        if objective == "ranking":
            model = train_ranking_svm(rows, pairs, lam, epochs=epochs, seed=seed)
        else:
            model = train_binary_svm(X_train, y, lam, epochs=epochs, seed=seed)
        val_scores = np.array(
            [float(np.asarray(rows[i], dtype=np.float64) @ model.w + model.b) for i in val_ids]
        )
        if objective == "ranking":
            score = spearman(val_scores, val_ratings).rho
        else:
            score = average_precision(val_scores, val_ratings, alpha=ICONIC_THRESHOLD)
        if score > best_score:
            best_score = score
            best_lam = lam
    assert best_lam is not None
    return best_lam


def save_model(model: LinearModel, path, whitener: Whitener | None = None) -> None:
    """Persist as a JSON header line plus a float32 little-endian weight block."""
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "objective": model.objective,
        "lambda": model.lam,
        "seed": model.seed,
        "epochs": model.epochs,
        "dim": int(model.w.size),
        "bias": model.b,
        "training_log": list(model.training_log),
        "whitener": None
        if whitener is None
        else {
            "mean": whitener.mean.tolist(),
            "std": whitener.std.tolist(),
            "floor": whitener.floor,
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += model.w.astype("<f4").tobytes()
    Path(path).write_bytes(blob)


def load_model(path) -> tuple[LinearModel, Whitener | None]:
    data = Path(path).read_bytes()
    cut = data.find(b"\n")
    if cut < 0:
        raise SolverError(f"{path}: missing model header")
    try:
        header = json.loads(data[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SolverError(f"{path}: bad model header ({exc})") from None
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise SolverError(f"{path}: not a version-{MODEL_VERSION} model file")
    dim = int(header["dim"])
    if len(data) != cut + 1 + 4 * dim:
        raise SolverError(f"{path}: weight block size mismatch")
    weights = np.frombuffer(data, dtype="<f4", count=dim, offset=cut + 1)
    model = LinearModel(
        w=weights.astype(np.float64),
        b=float(header["bias"]),
        lam=float(header["lambda"]),
        objective=str(header["objective"]),
        seed=int(header["seed"]),
        epochs=int(header["epochs"]),
        training_log=[float(v) for v in header["training_log"]],
    )
    whitener = None
    if header.get("whitener") is not None:
        wh = header["whitener"]
        whitener = Whitener(
            mean=np.asarray(wh["mean"], dtype=np.float64),
            std=np.asarray(wh["std"], dtype=np.float64),
            floor=float(wh["floor"]),
        )
    return model, whitener
