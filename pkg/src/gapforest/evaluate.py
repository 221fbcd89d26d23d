"""Metrics, walk-forward cross-validation and randomized hyperparameter search."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Dataset
from .forest import REGRESSION, Hyperparams, fit


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float


def metrics(predictions, labels) -> Metrics:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("metrics of an empty sample")
    err = p - y
    return Metrics(rmse=float(np.sqrt(np.mean(err * err))), mae=float(np.mean(np.abs(err))))


def improvement_pct(baseline_rmse: float, model_rmse: float) -> float:
    """Relative RMSE reduction of the model over the baseline, in percent."""
    if baseline_rmse <= 0:
        raise ValueError("baseline RMSE must be positive")
    return 100.0 * (baseline_rmse - model_rmse) / baseline_rmse


@dataclass
class EvalSummary:
    model: dict  # split name -> Metrics
    baseline: dict = field(default_factory=dict)
    improvement_pct: dict = field(default_factory=dict)
    folds: list = field(default_factory=list)

    @classmethod
    def build(cls, preds: Mapping, labels: Mapping, baseline: Optional[Mapping] = None):
        model = {k: metrics(preds[k], labels[k]) for k in preds}
        out = cls(model=model)
        for k, b in (baseline or {}).items():
            out.baseline[k] = metrics(b, labels[k])
            if out.baseline[k].rmse > 0:
                out.improvement_pct[k] = improvement_pct(out.baseline[k].rmse, model[k].rmse)
        return out

    def to_dict(self) -> dict:
        return {
            "model": {k: asdict(v) for k, v in self.model.items()},
            "baseline": {k: asdict(v) for k, v in self.baseline.items()},
            "improvement_pct": dict(self.improvement_pct),
            "folds": list(self.folds),
        }


@dataclass(frozen=True)
class CVPlan:
    n_folds: int
    folds: tuple  # ((train_range, validation_range), ...)

    def __iter__(self):
        return iter(self.folds)


def walk_forward_splits(n_rows: int, n_folds: int) -> CVPlan:
    """Expanding-window folds over ``n_folds + 1`` contiguous row blocks.

    Fold ``k`` (1-based) trains on blocks ``0..k-1`` and validates on block
    ``k``. Blocks are as equal as possible; extra rows go to the earliest
    blocks.
    """
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if n_rows < n_folds + 1:
        raise ValueError(f"{n_rows} rows is too few for {n_folds} walk-forward folds")
    n_blocks = n_folds + 1
    base, extra = divmod(n_rows, n_blocks)
    sizes = [base + (1 if b < extra else 0) for b in range(n_blocks)]
    bounds = np.concatenate([[0], np.cumsum(sizes)]).tolist()
    folds = tuple(
        (range(0, bounds[k]), range(bounds[k], bounds[k + 1]))
        for k in range(1, n_blocks)
    )
    return CVPlan(n_folds, folds)


def sample_candidates(param_distributions: Mapping[str, Sequence], n_samples: int, seed: int):
    """Draw distinct grid points uniformly at random, without replacement.

    When the grid has no more than ``n_samples`` points every point is
    returned, in random order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not param_distributions:
        raise ValueError("no parameters to search")
    names = sorted(param_distributions)
    for n in names:
        if n not in Hyperparams.__dataclass_fields__:
            raise ValueError(f"unknown hyperparameter {n!r}")
        if isinstance(param_distributions[n], (str, bytes)) or not len(param_distributions[n]):
            raise ValueError(f"parameter {n!r} needs a nonempty list of values")
    grid = list(itertools.product(*(list(param_distributions[n]) for n in names)))
    rng = np.random.default_rng(seed)
    picks = rng.permutation(len(grid))[: min(n_samples, len(grid))]
    return [dict(zip(names, grid[p])) for p in picks]


@dataclass
class SearchResult:
    best_params: Hyperparams
    best_index: int
    table: list  # one dict per candidate

    def to_dict(self) -> dict:
        return {"best_params": asdict(self.best_params), "best_index": self.best_index,
                "candidates": self.table}


def cross_validate(ds: Dataset, params: Hyperparams, plan: CVPlan, seed: int = 0,
                   task: str = REGRESSION) -> list:
    """Validation RMSE per fold. Only rows inside each fold's ranges are touched."""
    out = []
    for train_r, val_r in plan:
        train = ds.take(np.arange(train_r.start, train_r.stop))
        val = ds.take(np.arange(val_r.start, val_r.stop))
        forest = fit(train, params, seed=seed, task=task)
        pred = forest.predict(val.features)
        if pred.ndim == 2:
            pred = np.argmax(pred, axis=1)
        out.append(metrics(pred, val.target).rmse)
    return out


def randomized_search(ds: Dataset, param_distributions: Mapping[str, Sequence], n_samples: int,
                      n_folds: int = 5, seed: int = 0, task: str = REGRESSION,
                      base: Optional[Hyperparams] = None) -> SearchResult:
    """Pick the candidate with the lowest mean walk-forward validation RMSE.

    Ties go to the earlier sampled candidate.
    """
    base = base or Hyperparams()
    plan = walk_forward_splits(ds.n_rows, n_folds)
    table, best, best_score = [], 0, math.inf
    for k, cand in enumerate(sample_candidates(param_distributions, n_samples, seed)):
        params = Hyperparams(**{**asdict(base), **cand})
        fold_rmse = cross_validate(ds, params, plan, seed=seed, task=task)
        score = float(np.mean(fold_rmse))
        table.append({"candidate": k, **cand, "mean_val_rmse": score,
                      "fold_rmse": [float(r) for r in fold_rmse]})
        if score < best_score:
            best, best_score = k, score
    best_params = Hyperparams(**{**asdict(base), **{n: table[best][n] for n in param_distributions}})
    return SearchResult(best_params, best, table)


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_table_csv(rows: Sequence[Mapping], path) -> None:
    if not rows:
        open(path, "w").close()
        return
    header = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
