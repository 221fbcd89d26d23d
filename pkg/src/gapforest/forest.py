"""Bagged CART forests with explicit bootstrap multiplicities.

Every tree keeps the number of times each training row was drawn into its
bootstrap sample (its bag counts), and the forest keeps the leaf that every
training row falls into in every tree. Those two tables are all the proximity
code needs.

Trees are stored as flat arrays (``feature``, ``threshold``, ``left``,
``right``, ``leaf_id``) in the manner of scikit-learn. A node is a leaf iff
``feature == -1``. Rows with ``x[feature] <= threshold`` go left.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional, Union

import numpy as np

from .data import ColumnSpec, Dataset

REGRESSION = "regression"
CLASSIFICATION = "classification"

FORMAT_MAGIC = b"GAPFOREST\n"
FORMAT_VERSION = 1


class ForestError(ValueError):
    pass


class NeverOOBError(ForestError):
    """A training row was drawn into the bootstrap sample of every tree."""

    def __init__(self, index):
        self.index = int(index)
        super().__init__(f"training row {self.index} is in-bag for every tree (never OOB)")


@dataclass(frozen=True)
class Hyperparams:
    n_estimators: int = 100
    max_depth: Optional[int] = None
    max_features: Union[str, float] = "all"
    min_samples_leaf: int = 1
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ForestError("n_estimators must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ForestError("max_depth must be >= 0 or None")
        if self.min_samples_leaf < 1:
            raise ForestError("min_samples_leaf must be >= 1")
        mf = self.max_features
        if isinstance(mf, str):
            if mf not in ("all", "sqrt"):
                raise ForestError(f"max_features must be 'all', 'sqrt' or a fraction, got {mf!r}")
        elif not 0.0 < float(mf) <= 1.0:
            raise ForestError("fractional max_features must lie in (0, 1]")

    def n_split_features(self, n_features: int) -> int:
        mf = self.max_features
        if mf == "all":
            return n_features
        if mf == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        return max(1, int(float(mf) * n_features))


@dataclass(eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray
    value: Optional[np.ndarray] = None  # (n_leaves,) or (n_leaves, n_classes)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.intp)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    @classmethod
    def from_splits(cls, splits):
        """Build a tree from nested tuples, for hand-made forests.

        ``splits`` is either ``None`` (a leaf) or
        ``(feature, threshold, left_splits, right_splits)``.
        """
        builder = _TreeBuilder()

        def rec(node):
            if node is None:
                return builder.add_leaf()
            f, thr, lo, hi = node
            k = builder.add_split(f, thr)
            builder.left[k] = rec(lo)
            builder.right[k] = rec(hi)
            return k

        rec(splits)
        return builder.finish()

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id of every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return self.leaf_id[node]


class _TreeBuilder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.leaf_id = [], [], [], [], []
        self.n_leaves = 0

    def add_split(self, f, thr):
        self.feature.append(int(f))
        self.threshold.append(float(thr))
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_id.append(-1)
        return len(self.feature) - 1

    def add_leaf(self):
        k = self.add_split(-1, np.nan)
        self.leaf_id[k] = self.n_leaves
        self.n_leaves += 1
        return k

    def finish(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            leaf_id=np.asarray(self.leaf_id, dtype=np.int32),
        )


def _split_scores(xs, ws, stats, min_leaf):
    """Score every split position for every candidate feature.

    ``xs`` (n, k) sorted feature values, ``ws`` (n, k) bag weights in the same
    order, ``stats`` (n, k, s) weighted sufficient statistics in the same
    order. The score is the quantity whose maximisation minimises the
    weighted child impurity: sum_s S_L^2 / W_L + sum_s S_R^2 / W_R.
    Invalid positions score -inf. Position p splits after row p.
    """
    n = xs.shape[0]
    cw = np.cumsum(ws, axis=0)[:-1]
    cs = np.cumsum(stats, axis=0)[:-1]
    tot_w = ws.sum(axis=0)
    tot_s = stats.sum(axis=0)
    wl, wr = cw, tot_w - cw
    sl, sr = cs, tot_s - cs
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (sl * sl).sum(axis=2) / wl + (sr * sr).sum(axis=2) / wr
    n_left = np.arange(1, n)[:, None]
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    return np.where(valid, score, -np.inf)


def _grow_tree(X, stats, weights, params: Hyperparams, rng) -> tuple:
    """Grow one tree on the bagged rows.

    ``X`` and ``stats`` hold only the distinct in-bag rows; ``weights`` are
    their bag counts. Returns the tree and the leaf of every bagged row.
    """
    n_features = X.shape[1]
    k_feat = params.n_split_features(n_features)
    max_depth = np.inf if params.max_depth is None else params.max_depth
    min_leaf = params.min_samples_leaf
    builder = _TreeBuilder()
    leaf_of = np.empty(X.shape[0], dtype=np.intp)

    # (row indices, depth, parent node, is_left)
    stack = [(np.arange(X.shape[0]), 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        split = None
        if depth < max_depth and idx.size >= 2 * min_leaf:
            split = _best_split(X, stats, weights, idx, k_feat, min_leaf, rng)
        if split is None:
            k = builder.add_leaf()
            leaf_of[idx] = builder.leaf_id[k]
        else:
            f, thr = split
            k = builder.add_split(f, thr)
            go_left = X[idx, f] <= thr
            # right pushed first so the left subtree is numbered first
            stack.append((idx[~go_left], depth + 1, k, False))
            stack.append((idx[go_left], depth + 1, k, True))
        if parent >= 0:
            if is_left:
                builder.left[parent] = k
            else:
                builder.right[parent] = k
    return builder.finish(), leaf_of


def _best_split(X, stats, weights, idx, k_feat, min_leaf, rng):
    sub = X[idx]
    w = weights[idx]
    s = stats[idx]
    if np.all(s == s[0]):
        return None  # pure node
    nonconst = np.flatnonzero(sub.max(axis=0) > sub.min(axis=0))
    if nonconst.size == 0:
        return None
    if k_feat < X.shape[1]:
        # draw features in random order, skipping constant ones
        order = rng.permutation(X.shape[1])
        order = order[np.isin(order, nonconst)]
        feats = np.sort(order[:k_feat])
    else:
        feats = nonconst

    cols = sub[:, feats]
    perm = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, perm, axis=0)
    ws = w[perm]
    st = (w[:, None] * s)[perm]
    scores = _split_scores(xs, ws, st, min_leaf)
    flat = scores.T.ravel()  # feature-major: ties -> lowest feature, then lowest threshold
    best = int(np.argmax(flat))
    if not np.isfinite(flat[best]):
        return None
    kf, p = divmod(best, scores.shape[0])
    lo, hi = xs[p, kf], xs[p + 1, kf]
    thr = lo + (hi - lo) / 2.0
    if thr >= hi or thr < lo:
        thr = lo
    return int(feats[kf]), float(thr)


@dataclass(eq=False)
class Forest:
    """A trained forest together with everything needed to rebuild its weights.

    ``bags`` is an (M, N) integer array of bootstrap multiplicities and
    ``train_leaves`` an (N, M) array with the leaf of every training row in
    every tree, in-bag or not.
    """

    trees: list
    bags: np.ndarray
    train_leaves: np.ndarray
    y_train: np.ndarray
    task: str = REGRESSION
    n_classes: int = 0
    params: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    n_features: int = 0
    columns: tuple = ()
    target_name: Optional[str] = None
    target_encoding: tuple = ()
    timestamp_name: Optional[str] = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def oob_mask(self) -> np.ndarray:
        """(N, M) boolean, True where row i is out of bag for tree t."""
        return self.bags.T == 0

    def targets_matrix(self) -> np.ndarray:
        """Training targets as (N,) for regression or one-hot (N, C)."""
        if self.task == REGRESSION:
            return self.y_train
        return np.eye(self.n_classes)[self.y_train.astype(np.intp)]

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ForestError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def apply(self, X) -> np.ndarray:
        """(n, M) leaf ids."""
        X = self._check(X)
        if not self.trees:
            raise ForestError("forest has no trees")
        return np.stack([t.apply(X) for t in self.trees], axis=1).astype(np.int32)

    def tree_values(self, leaves: np.ndarray) -> np.ndarray:
        """Per-tree leaf values for a leaf table: (n, M) or (n, M, C)."""
        return np.stack([t.value[leaves[:, k]] for k, t in enumerate(self.trees)], axis=1)

    def predict_proba(self, X) -> np.ndarray:
        if self.task != CLASSIFICATION:
            raise ForestError("predict_proba needs a classification forest")
        return self.tree_values(self.apply(X)).mean(axis=1)

    def predict(self, X) -> np.ndarray:
        """Regression: mean of tree outputs. Classification: soft-vote vectors."""
        return self.tree_values(self.apply(X)).mean(axis=1)

    def predict_class(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. the smaller class id
        return np.argmax(self.predict_proba(X), axis=1)

    def predict_oob(self, i: int):
        """OOB prediction of training row ``i`` (average over its OOB trees)."""
        i = int(i)
        if not 0 <= i < self.n_train:
            raise IndexError(f"training index {i} out of range")
        trees = np.flatnonzero(self.bags[:, i] == 0)
        if trees.size == 0:
            raise NeverOOBError(i)
        vals = [self.trees[t].value[self.train_leaves[i, t]] for t in trees]
        return np.mean(vals, axis=0)

    def predict_oob_all(self):
        """OOB predictions of all training rows; NaN where a row is never OOB.

        Returns ``(predictions, valid_mask)``.
        """
        vals = self.tree_values(self.train_leaves)
        mask = self.oob_mask
        n_oob = mask.sum(axis=1)
        if vals.ndim == 3:
            mask_v = mask[:, :, None]
            n_v = n_oob[:, None]
        else:
            mask_v, n_v = mask, n_oob
        with np.errstate(invalid="ignore", divide="ignore"):
            pred = np.where(mask_v, vals, 0.0).sum(axis=1) / n_v
        return pred, n_oob > 0

    def describe(self) -> dict:
        return {
            "task": self.task,
            "n_trees": self.n_trees,
            "n_train": self.n_train,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "params": asdict(self.params),
            "seed": self.seed,
            "mean_leaves": float(np.mean([t.n_leaves for t in self.trees])),
            "never_oob_rows": int((~self.oob_mask.any(axis=1)).sum()),
        }


def leaf_values(leaves: np.ndarray, counts: np.ndarray, targets: np.ndarray, n_leaves: int):
    """Bag-weighted mean target per leaf (with multiplicity)."""
    w = np.bincount(leaves, weights=counts, minlength=n_leaves)
    if np.any(w == 0):
        raise ForestError("a leaf holds no bagged training rows")
    if targets.ndim == 1:
        return np.bincount(leaves, weights=counts * targets, minlength=n_leaves) / w
    cols = [np.bincount(leaves, weights=counts * targets[:, c], minlength=n_leaves)
            for c in range(targets.shape[1])]
    return np.stack(cols, axis=1) / w[:, None]


def assemble(trees, bags, X_train, y_train, task=REGRESSION, n_classes=None,
             params: Optional[Hyperparams] = None, seed=0, **meta) -> Forest:
    """Attach bag counts and training data to tree structures.

    Leaf values are (re)computed from the bags, so this also builds
    hand-made forests for tests.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    bags = np.asarray(bags, dtype=np.int32)
    if bags.shape != (len(trees), len(y_train)):
        raise ForestError("bags must have shape (n_trees, n_train)")
    if task == CLASSIFICATION:
        if n_classes is None:
            n_classes = int(y_train.max()) + 1
        targets = np.eye(n_classes)[y_train.astype(np.intp)]
    else:
        n_classes = 0
        targets = y_train
    train_leaves = np.empty((len(y_train), len(trees)), dtype=np.int32)
    for t, tree in enumerate(trees):
        leaves = tree.apply(X_train)
        train_leaves[:, t] = leaves
        tree.value = leaf_values(leaves, bags[t].astype(np.float64), targets, tree.n_leaves)
    if params is None:
        params = Hyperparams(n_estimators=len(trees))
    return Forest(trees=list(trees), bags=bags, train_leaves=train_leaves, y_train=y_train,
                  task=task, n_classes=n_classes, params=params, seed=seed,
                  n_features=X_train.shape[1], **meta)


def draw_bag(n: int, rng, bootstrap: bool = True) -> np.ndarray:
    if not bootstrap:
        return np.ones(n, dtype=np.int32)
    return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.int32)


def fit(ds: Dataset, params: Optional[Hyperparams] = None, seed: int = 0,
        task: str = REGRESSION) -> Forest:
    """Grow ``params.n_estimators`` trees on bootstrap resamples of ``ds``.

    Tree ``t`` uses its own generator seeded from ``(seed, t)``, so results do
    not depend on the order trees are grown in.
    """
    params = params or Hyperparams()
    if ds.target is None:
        raise ForestError("training data has no target")
    X, y = ds.features, ds.target
    n = X.shape[0]
    if n < 2:
        raise ForestError(f"need at least 2 training rows, got {n}")
    if params.min_samples_leaf >= n:
        raise ForestError("min_samples_leaf must be smaller than the number of rows")
    if task == CLASSIFICATION:
        if np.any(y != np.round(y)) or y.min() < 0:
            raise ForestError("classification targets must be nonnegative class ids")
        n_classes = max(int(y.max()) + 1, len(ds.target_encoding))
        stats = np.eye(n_classes)[y.astype(np.intp)]
    elif task == REGRESSION:
        n_classes = None
        stats = y[:, None]
    else:
        raise ForestError(f"unknown task {task!r}")

    trees, bags = [], []
    for t in range(params.n_estimators):
        rng = np.random.default_rng([seed, t])
        counts = draw_bag(n, rng, params.bootstrap)
        inbag = np.flatnonzero(counts)
        tree, _ = _grow_tree(X[inbag], stats[inbag], counts[inbag].astype(np.float64), params, rng)
        trees.append(tree)
        bags.append(counts)
    return assemble(
        trees, np.stack(bags), X, y, task=task, n_classes=n_classes, params=params, seed=seed,
        columns=ds.columns, target_name=ds.target_name, target_encoding=ds.target_encoding,
    )


# --- persistence -----------------------------------------------------------
#
# Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header,
# then raw little-endian array buffers in header order. No timestamps, so the
# same forest always serializes to the same bytes.


def _pack(arrays):
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        buf = arr.astype(dtype, copy=False).tobytes()
        manifest.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    return manifest, b"".join(chunks)


def dumps(forest: Forest) -> bytes:
    arrays = [("bags", forest.bags), ("train_leaves", forest.train_leaves),
              ("y_train", forest.y_train)]
    for k, t in enumerate(forest.trees):
        for name in ("feature", "threshold", "left", "right", "leaf_id", "value"):
            arrays.append((f"tree{k}.{name}", getattr(t, name)))
    manifest, blob = _pack(arrays)
    header = {
        "format": "gapforest",
        "version": FORMAT_VERSION,
        "task": forest.task,
        "n_classes": forest.n_classes,
        "n_trees": forest.n_trees,
        "n_features": forest.n_features,
        "seed": forest.seed,
        "params": asdict(forest.params),
        "columns": [c.to_dict() for c in forest.columns],
        "target_name": forest.target_name,
        "target_encoding": list(forest.target_encoding),
        "timestamp_name": forest.timestamp_name,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return FORMAT_MAGIC + struct.pack("<Q", len(head)) + head + blob


def loads(data: bytes) -> Forest:
    try:
        return _loads(data)
    except (ValueError, KeyError, TypeError, struct.error) as exc:
        if isinstance(exc, ForestError):
            raise
        raise ForestError(f"corrupt model data: {exc}") from None


def _loads(data: bytes) -> Forest:
    if not data.startswith(FORMAT_MAGIC):
        raise ForestError("not a gapforest model file")
    pos = len(FORMAT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise ForestError(f"unsupported model version {header.get('version')}")
    base = pos + hlen
    arrays = {}
    for a in header["arrays"]:
        start = base + a["offset"]
        arr = np.frombuffer(data[start:start + a["nbytes"]], dtype=np.dtype(a["dtype"]))
        arrays[a["name"]] = arr.reshape(a["shape"]).copy()
    trees = []
    for k in range(header["n_trees"]):
        parts = {n: arrays[f"tree{k}.{n}"]
                 for n in ("feature", "threshold", "left", "right", "leaf_id", "value")}
        trees.append(Tree(**parts))
    return Forest(
        trees=trees,
        bags=arrays["bags"],
        train_leaves=arrays["train_leaves"],
        y_train=arrays["y_train"],
        task=header["task"],
        n_classes=header["n_classes"],
        params=Hyperparams(**header["params"]),
        seed=header["seed"],
        n_features=header["n_features"],
        columns=tuple(ColumnSpec.from_dict(c) for c in header["columns"]),
        target_name=header["target_name"],
        target_encoding=tuple(header["target_encoding"]),
        timestamp_name=header["timestamp_name"],
    )


def save(forest: Forest, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(forest))


def load(path) -> Forest:
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except (OSError, ValueError, KeyError, struct.error) as exc:
        raise ForestError(f"cannot read model {path}: {exc}") from None
