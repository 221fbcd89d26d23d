"""Instance-based explanations built on GAP weights.

Two kinds of explanation come out of a GAP row. The first is attribution:
the prediction is the sum of ``k_j * y_j`` over training rows, so the top
weighted neighbors and their labels say why the forest predicted what it
did. The second is a confidence signal: the GAP-weighted mean absolute
training error of the neighbors estimates how noisy the target is near the
query, before its label is known.

Training errors are out-of-bag by default (``train_error="oob"``); in-bag
residuals of the full forest are available for comparison.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .forest import CLASSIFICATION, Forest
from .proximity import ProximityRow, gap_matrix, gap_proximity_rows

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.8, 0.9, 0.95, 0.99, 1.0)
CUMSUM_SLACK = 1e-12


def _abs_errors(labels, pred, task, n_classes):
    labels = np.asarray(labels, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if task == CLASSIFICATION:
        # one minus the probability given to the true class
        rows = np.arange(len(labels))
        return 1.0 - pred[rows, labels.astype(np.intp)]
    return np.abs(labels - pred)


def train_errors(forest: Forest, mode: str = "oob", X_train=None) -> np.ndarray:
    """Absolute training error per training row; NaN where undefined.

    ``mode="oob"`` uses out-of-bag predictions (NaN for never-OOB rows).
    ``mode="inbag"`` uses the full forest on the training features, which
    must then be passed as ``X_train``.
    """
    if mode == "oob":
        pred, valid = forest.predict_oob_all()
        err = np.full(forest.n_train, np.nan)
        err[valid] = _abs_errors(forest.y_train[valid], pred[valid], forest.task, forest.n_classes)
        return err
    if mode == "inbag":
        if X_train is None:
            raise ValueError("in-bag errors need the training features")
        pred = forest.predict(X_train)
        return _abs_errors(forest.y_train, pred, forest.task, forest.n_classes)
    raise ValueError(f"unknown train error mode {mode!r}")


@dataclass
class NeighborAttribution:
    train_index: int
    weight: float
    label: float
    contribution: float
    train_abs_error: Optional[float]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CumulativeWeightCurve:
    weights: np.ndarray
    cumulative: np.ndarray
    n_for_threshold: dict

    @classmethod
    def from_weights(cls, weights, thresholds=DEFAULT_THRESHOLDS) -> "CumulativeWeightCurve":
        w = np.sort(np.asarray(weights, dtype=np.float64))[::-1]
        cum = np.cumsum(w)
        return cls(w, cum, {float(t): count_for_threshold(cum, t) for t in thresholds})

    def to_rows(self):
        return [(k + 1, float(w), float(c)) for k, (w, c) in enumerate(zip(self.weights, self.cumulative))]


def count_for_threshold(cumulative: np.ndarray, threshold: float) -> int:
    """Length of the shortest prefix whose cumulative weight reaches ``threshold``.

    A slack of 1e-12 absorbs rounding in the running sum, so a threshold of 1
    is reached by the full row.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    hit = np.flatnonzero(cumulative >= threshold - CUMSUM_SLACK)
    return int(hit[0]) + 1 if hit.size else len(cumulative)


@dataclass
class ConfidenceScore:
    weighted_mae: float
    trainset_mae: float
    ratio: Optional[float]
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def confidence_score(row: ProximityRow, errors: np.ndarray) -> ConfidenceScore:
    """GAP-weighted mean neighbor error, relative to the training-set MAE.

    Neighbors without a defined error (never OOB) are dropped and the rest of
    the weights renormalised.
    """
    finite = np.isfinite(errors)
    trainset_mae = float(np.mean(errors[finite])) if finite.any() else math.nan
    e = errors[row.indices]
    ok = np.isfinite(e)
    w = row.weights[ok]
    weighted = float(w @ e[ok] / w.sum()) if w.sum() > 0 else math.nan
    ratio = weighted / trainset_mae if trainset_mae > 0 else None
    return ConfidenceScore(weighted, trainset_mae, ratio, int((~ok).sum()))


def weighted_quantile(values, weights, q: float) -> float:
    """Smallest value whose cumulative weight share reaches ``q``."""
    order = np.argsort(values, kind="stable")
    v = np.asarray(values, dtype=np.float64)[order]
    cw = np.cumsum(np.asarray(weights, dtype=np.float64)[order])
    cw /= cw[-1]
    return float(v[min(np.searchsorted(cw, q - CUMSUM_SLACK), len(v) - 1)])


def histogram_edges(train_labels) -> np.ndarray:
    """Freedman-Diaconis bin edges on the training labels."""
    return np.histogram_bin_edges(np.asarray(train_labels, dtype=np.float64), bins="fd")


@dataclass
class ExplanationReport:
    query_id: object
    prediction: object
    realized_label: Optional[float]
    neighbors: list
    curve: CumulativeWeightCurve
    threshold: float
    bin_edges: np.ndarray
    neighbor_hist_weighted: np.ndarray
    neighbor_hist_count: np.ndarray
    train_hist: np.ndarray
    confidence: ConfidenceScore
    attribution_sum: object
    neighbor_interval: tuple = (math.nan, math.nan)
    task: str = "regression"
    extra: dict = field(default_factory=dict)

    @property
    def realized_in_central_mass(self) -> Optional[bool]:
        if self.realized_label is None:
            return None
        lo, hi = self.neighbor_interval
        return bool(lo <= self.realized_label <= hi)

    def to_dict(self) -> dict:
        def num(x):
            a = np.asarray(x, dtype=np.float64)
            return a.tolist() if a.ndim else float(a)

        return {
            "query_id": self.query_id,
            "task": self.task,
            "prediction": num(self.prediction),
            "attribution_sum": num(self.attribution_sum),
            "realized_label": self.realized_label,
            "threshold": self.threshold,
            "n_neighbors_total": int(len(self.curve.weights)),
            "n_neighbors_kept": len(self.neighbors),
            "neighbors": [n.to_dict() for n in self.neighbors],
            "n_for_threshold": {str(k): v for k, v in self.curve.n_for_threshold.items()},
            "neighbor_label_interval_95": list(self.neighbor_interval),
            "realized_in_central_mass": self.realized_in_central_mass,
            "histogram": {
                "bin_edges": self.bin_edges.tolist(),
                "neighbor_weighted": self.neighbor_hist_weighted.tolist(),
                "neighbor_count": self.neighbor_hist_count.tolist(),
                "train_count": self.train_hist.tolist(),
            },
            "confidence": self.confidence.to_dict(),
            **self.extra,
        }


class Explainer:
    """Explanations for one forest; training errors are computed once."""

    def __init__(self, forest: Forest, train_error: str = "oob", X_train=None):
        self.forest = forest
        self.train_error_mode = train_error
        self.errors = train_errors(forest, train_error, X_train)
        self.bin_edges = histogram_edges(forest.y_train)
        self.train_hist = np.histogram(forest.y_train, bins=self.bin_edges)[0]
        n_bad = int((~np.isfinite(self.errors)).sum())
        if n_bad:
            log.warning("%d training rows have no out-of-bag error and are excluded", n_bad)

    def explain_row(self, row: ProximityRow, prediction, realized_label=None,
                    threshold: float = 0.95) -> ExplanationReport:
        if not 0.0 < threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        f = self.forest
        labels = f.y_train[row.indices]
        # descending weight, ties by ascending index (row.indices is ascending)
        order = np.lexsort((row.indices, -row.weights))
        idx, w, lab = row.indices[order], row.weights[order], labels[order]
        curve = CumulativeWeightCurve.from_weights(w, sorted({*DEFAULT_THRESHOLDS, threshold}))
        keep = count_for_threshold(curve.cumulative, threshold)

        neighbors = [
            NeighborAttribution(
                train_index=int(j),
                weight=float(k),
                label=float(y),
                contribution=float(k * y),
                train_abs_error=float(self.errors[j]) if np.isfinite(self.errors[j]) else None,
            )
            for j, k, y in zip(idx[:keep], w[:keep], lab[:keep])
        ]
        if f.task == CLASSIFICATION:
            attribution_sum = w @ np.eye(f.n_classes)[lab.astype(np.intp)]
        else:
            attribution_sum = float(np.sum(w * lab))

        interval = (weighted_quantile(lab, w, 0.025), weighted_quantile(lab, w, 0.975))
        nw = np.histogram(lab[:keep], bins=self.bin_edges, weights=w[:keep])[0]
        nc = np.histogram(lab[:keep], bins=self.bin_edges)[0]
        return ExplanationReport(
            query_id=row.query_id,
            prediction=prediction,
            realized_label=None if realized_label is None else float(realized_label),
            neighbors=neighbors,
            curve=curve,
            threshold=threshold,
            bin_edges=self.bin_edges,
            neighbor_hist_weighted=nw,
            neighbor_hist_count=nc,
            train_hist=self.train_hist,
            confidence=confidence_score(row, self.errors),
            attribution_sum=attribution_sum,
            neighbor_interval=interval,
            task=f.task,
        )

    def explain(self, X, realized_labels=None, threshold: float = 0.95, ids=None) -> list:
        X = self.forest._check(X)
        rows = gap_proximity_rows(self.forest, X, ids)
        preds = self.forest.predict(X)
        labels = [None] * len(rows) if realized_labels is None else list(realized_labels)
        return [self.explain_row(r, p, lab, threshold) for r, p, lab in zip(rows, preds, labels)]

    def weighted_mae(self, X) -> np.ndarray:
        """GAP-weighted neighbor training error for many queries at once."""
        K = gap_matrix(self.forest, X)
        ok = np.isfinite(self.errors)
        e = np.where(ok, self.errors, 0.0)
        num = K @ e
        den = K @ ok.astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return num / den


def explain(forest: Forest, query_row, realized_label=None, threshold: float = 0.95,
            train_error: str = "oob", query_id="external") -> ExplanationReport:
    """Explain a single query row (see :class:`Explainer` for batches)."""
    ex = Explainer(forest, train_error)
    return ex.explain(np.atleast_2d(query_row),
                      None if realized_label is None else [realized_label],
                      threshold, [query_id])[0]


@dataclass
class NeighborsNeeded:
    thresholds: tuple
    counts: np.ndarray  # (n_queries, n_thresholds)
    curves: list
    n_train: int

    @property
    def mean(self) -> np.ndarray:
        return self.counts.mean(axis=0)

    @property
    def median(self) -> np.ndarray:
        return np.median(self.counts, axis=0)

    def table(self) -> list:
        return [
            {"threshold": t, "mean": float(m), "median": float(md),
             "min": int(lo), "max": int(hi), "n_train": self.n_train}
            for t, m, md, lo, hi in zip(self.thresholds, self.mean, self.median,
                                        self.counts.min(axis=0), self.counts.max(axis=0))
        ]


def neighbors_needed_from_weights(weight_rows: Sequence, n_train: int,
                                  thresholds=DEFAULT_THRESHOLDS) -> NeighborsNeeded:
    if not len(weight_rows):
        raise ValueError("need at least one query")
    thresholds = tuple(float(t) for t in thresholds)
    curves = [CumulativeWeightCurve.from_weights(w, thresholds) for w in weight_rows]
    counts = np.array([[c.n_for_threshold[t] for t in thresholds] for c in curves])
    return NeighborsNeeded(thresholds, counts, curves, n_train)


def neighbors_needed(forest: Forest, X, thresholds=DEFAULT_THRESHOLDS) -> NeighborsNeeded:
    """How many top-weighted neighbors each query needs to reach each threshold."""
    rows = gap_proximity_rows(forest, X)
    return neighbors_needed_from_weights([r.weights for r in rows], forest.n_train, thresholds)


def pearson(a, b) -> Optional[float]:
    """Pearson correlation, or None when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(da @ da), math.sqrt(db @ db)
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


@dataclass
class ConfidenceTable:
    weighted_mae: np.ndarray
    abs_error: np.ndarray
    decile: np.ndarray  # decile id per test point
    decile_weighted_mae: np.ndarray
    decile_abs_error: np.ndarray
    decile_size: np.ndarray
    pearson_per_point: Optional[float]
    pearson_decile_means: Optional[float]

    @property
    def top_bottom_ratio(self) -> float:
        bottom = self.decile_abs_error[0]
        return float(self.decile_abs_error[-1] / bottom) if bottom > 0 else math.inf

    def summary(self) -> dict:
        return {
            "n_points": int(len(self.abs_error)),
            "n_deciles": int(len(self.decile_size)),
            "pearson_per_point": self.pearson_per_point,
            "pearson_decile_means": self.pearson_decile_means,
            "per_point_undefined": self.pearson_per_point is None,
            "decile_means_undefined": self.pearson_decile_means is None,
            "top_bottom_error_ratio": self.top_bottom_ratio,
        }

    def decile_rows(self) -> list:
        return [
            {"decile": k + 1, "n": int(n), "mean_weighted_train_mae": float(w),
             "mean_abs_test_error": float(e)}
            for k, (n, w, e) in enumerate(zip(self.decile_size, self.decile_weighted_mae,
                                              self.decile_abs_error))
        ]


def decile_table(weighted_mae, abs_error, n_deciles: int = 10) -> ConfidenceTable:
    """Bin points into equal-count groups ranked by ``weighted_mae``.

    Ties in ``weighted_mae`` keep query order; leftover points go to the
    leading groups.
    """
    w = np.asarray(weighted_mae, dtype=np.float64)
    e = np.asarray(abs_error, dtype=np.float64)
    if len(w) != len(e):
        raise ValueError("length mismatch")
    if len(w) < n_deciles or n_deciles < 1:
        raise ValueError(f"need at least {n_deciles} points for {n_deciles} bins")
    order = np.argsort(w, kind="stable")
    groups = np.array_split(order, n_deciles)
    decile = np.empty(len(w), dtype=np.intp)
    for k, g in enumerate(groups):
        decile[g] = k
    dw = np.array([w[g].mean() for g in groups])
    de = np.array([e[g].mean() for g in groups])
    return ConfidenceTable(
        weighted_mae=w,
        abs_error=e,
        decile=decile,
        decile_weighted_mae=dw,
        decile_abs_error=de,
        decile_size=np.array([len(g) for g in groups]),
        pearson_per_point=pearson(w, e),
        pearson_decile_means=pearson(dw, de),
    )


def confidence_vs_error(forest: Forest, test_rows, test_labels, n_deciles: int = 10,
                        explainer: Optional[Explainer] = None) -> ConfidenceTable:
    """Weighted neighbor training error against realized test error."""
    explainer = explainer or Explainer(forest)
    X = forest._check(test_rows)
    wmae = explainer.weighted_mae(X)
    err = _abs_errors(test_labels, forest.predict(X), forest.task, forest.n_classes)
    return decile_table(wmae, err, n_deciles)
