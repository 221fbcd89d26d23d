"""GAP and Breiman proximities as sparse weight rows.

For a query ``i`` and tree ``t`` let ``M_i(t)`` be the multiset of bagged
training rows sharing the query's leaf and ``c_j(t)`` the bag count of row
``j``. The GAP weight of ``j`` is the average, over the trees the query is
out of bag for, of ``c_j(t) / |M_i(t)|`` (zero when ``j`` is not in the leaf).
An external query is out of bag for every tree. With these weights
``k_i . y_train`` equals the forest prediction exactly.

Breiman's weights instead give ``1 / N_i(t)`` to each distinct bagged row of
the leaf, ignoring multiplicity, and average over all trees. By default
``N_i(t)`` counts every training row routed to the leaf, in-bag or not, so
rows need not sum to one; ``count="inbag"`` counts only the distinct bagged
rows, which makes the rows stochastic.

Both are computed as ``A @ W`` where ``W`` (total leaves x N) holds each
leaf's weights over training rows and ``A`` (queries x total leaves) selects
and averages the query's leaves. Nothing dense of size N x N is built unless
asked for.
"""

from __future__ import annotations

import csv
import json
import weakref
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .forest import Forest, NeverOOBError

GAP_TEST = "GAP-test"
GAP_TRAIN_OOB = "GAP-train-OOB"
BREIMAN = "Breiman"

DENSE_LIMIT = 20_000


@dataclass
class ProximityRow:
    query_id: Union[int, str]
    indices: np.ndarray
    weights: np.ndarray
    kind: str = GAP_TEST

    def __post_init__(self):
        order = np.argsort(self.indices, kind="stable")
        self.indices = np.asarray(self.indices, dtype=np.intp)[order]
        self.weights = np.asarray(self.weights, dtype=np.float64)[order]

    def __len__(self):
        return len(self.indices)

    def to_dense(self, n_train: int) -> np.ndarray:
        out = np.zeros(n_train)
        out[self.indices] = self.weights
        return out

    def weight_of(self, j: int) -> float:
        pos = np.searchsorted(self.indices, j)
        if pos < len(self.indices) and self.indices[pos] == j:
            return float(self.weights[pos])
        return 0.0

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "kind": self.kind,
            "train_index": self.indices.tolist(),
            "weight": self.weights.tolist(),
        }


@dataclass
class ProximityMatrixSummary:
    n_queries: int
    mean_nonzero: float
    max_nonzero: int
    max_row_sum_deviation: float

    @classmethod
    def from_matrix(cls, K: sp.csr_matrix) -> "ProximityMatrixSummary":
        nnz = np.diff(K.indptr)
        sums = np.asarray(K.sum(axis=1)).ravel()
        return cls(
            n_queries=K.shape[0],
            mean_nonzero=float(nnz.mean()) if len(nnz) else 0.0,
            max_nonzero=int(nnz.max()) if len(nnz) else 0,
            max_row_sum_deviation=float(np.abs(sums - 1.0).max()) if len(sums) else 0.0,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class LeafIndex:
    """Per-forest cache: leaf offsets and the stacked leaf-to-train weight matrices."""

    def __init__(self, forest: Forest):
        M, N = forest.n_trees, forest.n_train
        sizes = np.array([t.n_leaves for t in forest.trees])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        n_total = int(self.offsets[-1])

        rows, cols, gap_vals, brm_vals, brm_inbag_vals = [], [], [], [], []
        for t in range(M):
            counts = forest.bags[t]
            inbag = np.flatnonzero(counts)
            leaves = forest.train_leaves[inbag, t]
            c = counts[inbag].astype(np.float64)
            multiset = np.bincount(leaves, weights=c, minlength=sizes[t])
            distinct = np.bincount(leaves, minlength=sizes[t]).astype(np.float64)
            everyone = np.bincount(forest.train_leaves[:, t], minlength=sizes[t]).astype(np.float64)
            rows.append(self.offsets[t] + leaves)
            cols.append(inbag)
            gap_vals.append(c / multiset[leaves])
            brm_vals.append(1.0 / everyone[leaves])
            brm_inbag_vals.append(1.0 / distinct[leaves])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        shape = (n_total, N)
        self.gap = sp.csr_matrix((np.concatenate(gap_vals), (rows, cols)), shape=shape)
        self.breiman = {
            "leaf": sp.csr_matrix((np.concatenate(brm_vals), (rows, cols)), shape=shape),
            "inbag": sp.csr_matrix((np.concatenate(brm_inbag_vals), (rows, cols)), shape=shape),
        }
        self.n_total = n_total

    def selector(self, leaves: np.ndarray, use: Optional[np.ndarray] = None) -> sp.csr_matrix:
        """Row-averaging selector over the given (n, M) leaf table.

        ``use`` (n, M) restricts each row to a subset of trees.
        """
        n, M = leaves.shape
        if use is None:
            use = np.ones((n, M), dtype=bool)
        n_used = use.sum(axis=1)
        q, t = np.nonzero(use)
        cols = self.offsets[t] + leaves[q, t]
        with np.errstate(divide="ignore"):
            vals = 1.0 / n_used[q]
        return sp.csr_matrix((vals, (q, cols)), shape=(n, self.n_total))


_cache: "weakref.WeakKeyDictionary[Forest, LeafIndex]" = weakref.WeakKeyDictionary()


def leaf_index(forest: Forest) -> LeafIndex:
    idx = _cache.get(forest)
    if idx is None:
        idx = _cache[forest] = LeafIndex(forest)
    return idx


def _rows_from(K: sp.csr_matrix, ids, kind) -> list:
    K = K.tocsr()
    K.sort_indices()
    out = []
    for r, qid in enumerate(ids):
        lo, hi = K.indptr[r], K.indptr[r + 1]
        w = K.data[lo:hi]
        keep = w != 0
        out.append(ProximityRow(qid, K.indices[lo:hi][keep], w[keep], kind))
    return out


def gap_matrix(forest: Forest, X) -> sp.csr_matrix:
    """Sparse (n_queries, N) GAP weights for external query rows."""
    idx = leaf_index(forest)
    return (idx.selector(forest.apply(X)) @ idx.gap).tocsr()


def breiman_matrix(forest: Forest, X, count: str = "leaf") -> sp.csr_matrix:
    idx = leaf_index(forest)
    return (idx.selector(forest.apply(X)) @ idx.breiman[count]).tocsr()


def gap_train_matrix(forest: Forest, indices=None):
    """GAP-train-OOB weights for training rows.

    Returns ``(K, valid)``; rows that are in-bag for every tree are left
    empty and flagged False in ``valid``.
    """
    idx = leaf_index(forest)
    rows = np.arange(forest.n_train) if indices is None else np.asarray(indices, dtype=np.intp)
    use = forest.oob_mask[rows]
    valid = use.any(axis=1)
    A = idx.selector(forest.train_leaves[rows], use)
    return (A @ idx.gap).tocsr(), valid


def gap_proximity_rows(forest: Forest, X, ids=None) -> list:
    X = forest._check(X)
    ids = range(X.shape[0]) if ids is None else ids
    return _rows_from(gap_matrix(forest, X), ids, GAP_TEST)


def gap_proximity_row(forest: Forest, query_row, query_id="external") -> ProximityRow:
    return gap_proximity_rows(forest, np.atleast_2d(query_row), [query_id])[0]


def gap_proximity_train_row(forest: Forest, i: int) -> ProximityRow:
    i = int(i)
    if not 0 <= i < forest.n_train:
        raise IndexError(f"training index {i} out of range")
    K, valid = gap_train_matrix(forest, [i])
    if not valid[0]:
        raise NeverOOBError(i)
    return _rows_from(K, [i], GAP_TRAIN_OOB)[0]


def breiman_proximity_rows(forest: Forest, X, ids=None, count: str = "leaf") -> list:
    X = forest._check(X)
    ids = range(X.shape[0]) if ids is None else ids
    return _rows_from(breiman_matrix(forest, X, count), ids, BREIMAN)


def breiman_proximity_row(forest: Forest, query_row, query_id="external",
                          count: str = "leaf") -> ProximityRow:
    return breiman_proximity_rows(forest, np.atleast_2d(query_row), [query_id], count)[0]


def breiman_proximity_train_row(forest: Forest, i: int, count: str = "leaf") -> ProximityRow:
    """Breiman row for a training point: all M trees, no OOB restriction."""
    idx = leaf_index(forest)
    K = idx.selector(forest.train_leaves[[int(i)]]) @ idx.breiman[count]
    return _rows_from(K, [int(i)], BREIMAN)[0]


def proximity_matrix(forest: Forest, X, dense: bool = False, kind: str = GAP_TEST):
    """GAP (or Breiman) weights for many queries; dense output only on request."""
    K = breiman_matrix(forest, X) if kind == BREIMAN else gap_matrix(forest, X)
    if not dense:
        return K
    if forest.n_train > DENSE_LIMIT:
        raise ValueError(f"dense output refused for N={forest.n_train} > {DENSE_LIMIT}")
    return K.toarray()


def reconstruct_from(row: ProximityRow, targets, n_classes: Optional[int] = None):
    """Weighted label average ``sum_j k_j y_j``.

    ``targets`` is the (N,) label vector. With ``n_classes`` the labels are
    one-hot encoded and a probability vector is returned. A 2-d ``targets``
    is used as given.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if len(row.indices) and (row.indices.min() < 0 or row.indices.max() >= len(targets)):
        raise IndexError("proximity row refers to a training index out of range")
    if n_classes is not None and targets.ndim == 1:
        targets = np.eye(n_classes)[targets.astype(np.intp)]
    return row.weights @ targets[row.indices]


def reconstruct_matrix(K: sp.csr_matrix, forest: Forest) -> np.ndarray:
    return K @ forest.targets_matrix()


@dataclass
class ReconstructionReport:
    max_abs_gap_error: float
    max_abs_breiman_error: float
    gap_deltas: np.ndarray = field(repr=False)
    breiman_deltas: np.ndarray = field(repr=False)
    tolerance: float = 1e-9

    @property
    def exact(self) -> bool:
        return self.max_abs_gap_error <= self.tolerance

    def to_dict(self, per_row: bool = True) -> dict:
        d = {
            "n_queries": int(len(self.gap_deltas)),
            "tolerance": self.tolerance,
            "max_abs_gap_error": self.max_abs_gap_error,
            "max_abs_breiman_error": self.max_abs_breiman_error,
            "gap_exact": self.exact,
        }
        if per_row:
            d["gap_deltas"] = self.gap_deltas.tolist()
            d["breiman_deltas"] = self.breiman_deltas.tolist()
        return d


def verify_reconstruction(forest: Forest, X, tolerance: float = 1e-9,
                          breiman_count: str = "leaf") -> ReconstructionReport:
    """Compare weight-based reconstructions to the forest's own predictions.

    Per-row deltas are the largest absolute difference (over classes for a
    classifier).
    """
    X = forest._check(X)
    direct = forest.predict(X)
    gap = reconstruct_matrix(gap_matrix(forest, X), forest)
    brm = reconstruct_matrix(breiman_matrix(forest, X, breiman_count), forest)

    def delta(a):
        d = np.abs(np.asarray(a) - direct)
        return d.max(axis=1) if d.ndim == 2 else d

    gd, bd = delta(gap), delta(brm)
    return ReconstructionReport(
        max_abs_gap_error=float(gd.max()) if len(gd) else 0.0,
        max_abs_breiman_error=float(bd.max()) if len(bd) else 0.0,
        gap_deltas=gd,
        breiman_deltas=bd,
        tolerance=tolerance,
    )


def write_rows_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "train_index", "weight"])
        for row in rows:
            for j, k in zip(row.indices, row.weights):
                w.writerow([row.query_id, int(j), repr(float(k))])


def write_rows_json(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in rows], fh)
