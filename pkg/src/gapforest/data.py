"""Tabular data loading, label encoding, time-ordered splits and synthetic data.

Categorical vocabularies are always built from training data. Rows with a
missing or non-finite cell are dropped (never imputed) and the number of
dropped rows is kept on the resulting :class:`Dataset`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"
UNSEEN_CODE = -1


class DataError(ValueError):
    """Raised for unusable input data (missing columns, empty files, ...)."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = NUMERIC
    encoding: tuple = ()

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"unknown column kind {self.kind!r}")
        if len(set(self.encoding)) != len(self.encoding):
            raise DataError(f"duplicate category in encoding of {self.name!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def code(self, label: str) -> int:
        try:
            return self.encoding.index(label)
        except ValueError:
            return UNSEEN_CODE

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "encoding": list(self.encoding)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSpec":
        return cls(d["name"], d["kind"], tuple(d.get("encoding", ())))


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, optional target and column metadata.

    ``target`` is ``None`` for unlabeled query files. When ``row_order_key`` is
    present the rows are sorted ascending by it.
    """

    features: np.ndarray
    target: Optional[np.ndarray]
    columns: tuple
    row_order_key: Optional[np.ndarray] = None
    target_name: Optional[str] = None
    target_encoding: tuple = ()
    n_dropped: int = 0

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        if X.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        if X.shape[1] != len(self.columns):
            raise DataError(f"{X.shape[1]} feature columns but {len(self.columns)} specs")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        X.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.target is not None:
            y = np.array(self.target, dtype=np.float64, copy=True)
            if y.shape != (X.shape[0],):
                raise DataError("target length does not match feature rows")
            if not np.all(np.isfinite(y)):
                raise DataError("target contains non-finite values")
            y.flags.writeable = False
            object.__setattr__(self, "target", y)
        if self.row_order_key is not None:
            key = np.array(self.row_order_key, copy=True)
            if key.shape != (X.shape[0],):
                raise DataError("row_order_key length does not match feature rows")
            if np.any(key[1:] < key[:-1]):
                raise DataError("rows are not sorted by row_order_key")
            key.flags.writeable = False
            object.__setattr__(self, "row_order_key", key)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def feature_names(self) -> list:
        return [c.name for c in self.columns]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            target=None if self.target is None else self.target[rows],
            row_order_key=None if self.row_order_key is None else self.row_order_key[rows],
            n_dropped=0,
        )


def _parse_float(cell: str) -> Optional[float]:
    try:
        return float(cell)
    except ValueError:
        return None


def _is_missing(cell: Optional[str]) -> bool:
    if cell is None or cell.strip() == "":
        return True
    v = _parse_float(cell)
    return v is not None and not math.isfinite(v)


def _parse_timestamps(cells: Sequence[str]) -> np.ndarray:
    values = [_parse_float(c) for c in cells]
    if all(v is not None for v in values):
        return np.asarray(values, dtype=np.float64)
    try:
        return np.asarray(cells, dtype="datetime64[ns]").astype(np.int64)
    except ValueError as exc:
        raise DataError(f"timestamp column is neither numeric nor ISO dates: {exc}") from None


def _read_records(path: Union[str, Path]):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    records = []
    for r in rows:
        rec = {h: (r[k].strip() if k < len(r) else None) for k, h in enumerate(header)}
        records.append(rec)
    return header, records


def _build(specs, records, target_column, timestamp_column, target_encoding=None):
    """Turn string records into a Dataset given fixed column specs."""
    needed = [s.name for s in specs]
    if target_column:
        needed.append(target_column)
    if timestamp_column:
        needed.append(timestamp_column)

    kept, dropped = [], 0
    for rec in records:
        if any(_is_missing(rec.get(name)) for name in needed):
            dropped += 1
            continue
        kept.append(rec)
    if not kept:
        raise DataError(f"no usable rows ({dropped} dropped for missing values)")

    X = np.empty((len(kept), len(specs)), dtype=np.float64)
    for k, spec in enumerate(specs):
        cells = [rec[spec.name] for rec in kept]
        if spec.is_categorical:
            lookup = {label: code for code, label in enumerate(spec.encoding)}
            X[:, k] = [lookup.get(c, UNSEEN_CODE) for c in cells]
        else:
            vals = [_parse_float(c) for c in cells]
            bad = [c for c, v in zip(cells, vals) if v is None]
            if bad:
                raise DataError(f"non-numeric value {bad[0]!r} in numeric column {spec.name!r}")
            X[:, k] = vals

    y, t_enc = None, tuple(target_encoding or ())
    if target_column and all(target_column in rec for rec in kept):
        cells = [rec[target_column] for rec in kept]
        vals = [_parse_float(c) for c in cells]
        if t_enc or any(v is None for v in vals):
            if not t_enc:
                t_enc = tuple(dict.fromkeys(cells))
            lookup = {label: code for code, label in enumerate(t_enc)}
            missing = [c for c in cells if c not in lookup]
            if missing:
                raise DataError(f"target class {missing[0]!r} not seen in training")
            y = np.array([lookup[c] for c in cells], dtype=np.float64)
        else:
            y = np.asarray(vals, dtype=np.float64)

    key = None
    if timestamp_column:
        key = _parse_timestamps([rec[timestamp_column] for rec in kept])
        order = np.argsort(key, kind="stable")
        key, X = key[order], X[order]
        if y is not None:
            y = y[order]

    return Dataset(
        features=X,
        target=y,
        columns=tuple(specs),
        row_order_key=key,
        target_name=target_column,
        target_encoding=t_enc,
        n_dropped=dropped,
    )


def load_csv(path, target_column: str, timestamp_column: Optional[str] = None) -> Dataset:
    """Load a training CSV and infer the column kinds.

    A column is categorical iff any of its non-missing cells fails to parse as
    a number. Category codes follow first appearance among the kept rows. A
    timestamp column, when given, is used to sort the rows (stable) and is
    not a feature.
    """
    header, records = _read_records(path)
    if target_column not in header:
        raise DataError(f"target column {target_column!r} not found in {path}")
    if timestamp_column is not None and timestamp_column not in header:
        raise DataError(f"timestamp column {timestamp_column!r} not found in {path}")

    feature_names = [h for h in header if h not in (target_column, timestamp_column)]
    complete = [
        rec for rec in records
        if not any(_is_missing(rec.get(h)) for h in header)
    ]
    specs = []
    for name in feature_names:
        cells = [rec[name] for rec in complete]
        if any(_parse_float(c) is None for c in cells):
            specs.append(ColumnSpec(name, CATEGORICAL, tuple(dict.fromkeys(cells))))
        else:
            specs.append(ColumnSpec(name, NUMERIC))
    return _build(specs, records, target_column, timestamp_column)


def encode_with(
    train_specs: Sequence[ColumnSpec],
    records: Iterable[Mapping[str, str]],
    target_column: Optional[str] = None,
    timestamp_column: Optional[str] = None,
    target_encoding: Sequence[str] = (),
) -> Dataset:
    """Encode raw string records with vocabularies fixed at training time.

    Categories never seen in training get the code ``-1``. The target column
    is optional here: when it is absent from every record the returned
    Dataset has ``target=None``.
    """
    records = list(records)
    allowed = {s.name for s in train_specs} | {target_column, timestamp_column} - {None}
    for rec in records:
        missing = [s.name for s in train_specs if s.name not in rec]
        extra = [k for k in rec if k not in allowed]
        if missing or extra:
            raise DataError(f"column mismatch: missing {missing}, unexpected {extra}")
    if target_column and not any(target_column in rec for rec in records):
        target_column_used = None
    else:
        target_column_used = target_column
    ds = _build(train_specs, records, target_column_used, timestamp_column, target_encoding)
    if target_column_used is None and target_column:
        ds = replace(ds, target_name=target_column, target_encoding=tuple(target_encoding))
    return ds


def load_csv_with(path, train_specs, target_column=None, timestamp_column=None,
                  target_encoding=()) -> Dataset:
    header, records = _read_records(path)
    if timestamp_column is not None and timestamp_column not in header:
        timestamp_column = None
    return encode_with(train_specs, records, target_column, timestamp_column, target_encoding)


def to_records(ds: Dataset) -> list:
    """Decode a Dataset back to string records (inverse of the encoding)."""
    out = []
    for i in range(ds.n_rows):
        rec = {}
        for k, spec in enumerate(ds.columns):
            v = ds.features[i, k]
            if spec.is_categorical:
                code = int(v)
                rec[spec.name] = spec.encoding[code] if code >= 0 else "<unseen>"
            else:
                rec[spec.name] = repr(float(v))
        if ds.target is not None and ds.target_name:
            if ds.target_encoding:
                rec[ds.target_name] = ds.target_encoding[int(ds.target[i])]
            else:
                rec[ds.target_name] = repr(float(ds.target[i]))
        out.append(rec)
    return out


def write_csv(ds: Dataset, path, timestamp_column: Optional[str] = "timestamp") -> None:
    records = to_records(ds)
    header = ds.feature_names
    if ds.target is not None and ds.target_name:
        header = header + [ds.target_name]
    if ds.row_order_key is not None and timestamp_column:
        header = [timestamp_column] + header
        for rec, t in zip(records, ds.row_order_key):
            rec[timestamp_column] = repr(t.item())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)


def time_split(ds: Dataset, train_fraction: float):
    """Split into (train, test) at ``floor(N * train_fraction)`` without shuffling."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie in (0, 1)")
    n_train = math.floor(ds.n_rows * train_fraction)
    if n_train == 0 or n_train == ds.n_rows:
        raise DataError(
            f"train_fraction={train_fraction} on {ds.n_rows} rows gives an empty split"
        )
    idx = np.arange(ds.n_rows)
    return ds.take(idx[:n_train]), ds.take(idx[n_train:])


# --- synthetic data -------------------------------------------------------


@dataclass(frozen=True)
class Homoscedastic:
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise DataError("sigma must be nonnegative")

    def scale(self, x0):
        return np.full_like(x0, self.sigma)


@dataclass(frozen=True)
class Heteroscedastic:
    """Noise std rising linearly from ``sigma_low`` to ``sigma_high`` along feature 0."""

    sigma_low: float
    sigma_high: float

    def __post_init__(self):
        if self.sigma_low < 0 or self.sigma_high < 0:
            raise DataError("sigma values must be nonnegative")
        if not self.sigma_low < self.sigma_high:
            raise DataError("heteroscedastic noise requires sigma_low < sigma_high")

    def scale(self, x0):
        return self.sigma_low + (self.sigma_high - self.sigma_low) * x0


@dataclass(frozen=True)
class SyntheticConfig:
    n_rows: int = 1000
    n_numeric: int = 4
    n_categorical: int = 1
    noise: Union[Homoscedastic, Heteroscedastic] = field(default_factory=Homoscedastic)
    seed: int = 0
    n_levels: int = 4

    def __post_init__(self):
        if self.n_rows < 1 or self.n_numeric < 1:
            raise DataError("n_rows and n_numeric must be positive")
        if self.n_categorical < 0 or self.n_levels < 1:
            raise DataError("n_categorical must be >= 0 and n_levels >= 1")

    @classmethod
    def from_mapping(cls, m: Mapping[str, str]) -> "SyntheticConfig":
        m = {k.strip().lower().replace("-", "_"): str(v).strip() for k, v in m.items()}
        known = {"n_rows", "n_numeric", "n_categorical", "n_levels", "seed",
                 "noise", "sigma", "sigma_low", "sigma_high"}
        unknown = set(m) - known
        if unknown:
            raise DataError(f"unknown synthetic config keys: {sorted(unknown)}")
        kind = m.get("noise", "homoscedastic")
        if kind == "homoscedastic":
            noise = Homoscedastic(float(m.get("sigma", 0.0)))
        elif kind == "heteroscedastic":
            noise = Heteroscedastic(float(m.get("sigma_low", 0.1)), float(m.get("sigma_high", 2.0)))
        else:
            raise DataError(f"unknown noise profile {kind!r}")
        ints = {k: int(m[k]) for k in ("n_rows", "n_numeric", "n_categorical", "n_levels", "seed") if k in m}
        return cls(noise=noise, **ints)

    @classmethod
    def from_file(cls, path) -> "SyntheticConfig":
        """Read ``key=value`` lines; ``#`` starts a comment."""
        m = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"malformed config line {line!r}")
            k, v = line.split("=", 1)
            m[k] = v
        return cls.from_mapping(m)

    def to_dict(self) -> dict:
        d = {"n_rows": self.n_rows, "n_numeric": self.n_numeric,
             "n_categorical": self.n_categorical, "n_levels": self.n_levels, "seed": self.seed}
        if isinstance(self.noise, Heteroscedastic):
            d.update(noise="heteroscedastic", sigma_low=self.noise.sigma_low,
                     sigma_high=self.noise.sigma_high)
        else:
            d.update(noise="homoscedastic", sigma=self.noise.sigma)
        return d


_CAT_OFFSET_SEED = 7919


def category_offsets(cfg: SyntheticConfig) -> np.ndarray:
    """Per-level target offsets, shape (n_categorical, n_levels)."""
    rng = np.random.default_rng([cfg.seed, _CAT_OFFSET_SEED])
    return rng.normal(0.0, 1.0, size=(cfg.n_categorical, cfg.n_levels))


def synthetic_signal(features: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    """Noiseless target for synthetic features (numeric columns first, in [0, 1])."""
    X = np.asarray(features, dtype=np.float64)
    num = X[:, : cfg.n_numeric]
    shapes = (
        lambda u: 2.0 * np.sin(np.pi * u),
        lambda u: 3.0 * (u - 0.5) ** 2,
        lambda u: 1.5 * u,
        lambda u: np.cos(3.0 * u),
    )
    f = np.zeros(X.shape[0])
    for k in range(cfg.n_numeric):
        f += shapes[k % len(shapes)](num[:, k])
    if cfg.n_numeric >= 2:
        f += 2.0 * num[:, 0] * num[:, 1]
    offsets = category_offsets(cfg)
    for k in range(cfg.n_categorical):
        codes = X[:, cfg.n_numeric + k].astype(np.intp)
        f += offsets[k, codes]
    return f


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a time-ordered synthetic regression dataset.

    Numeric features are uniform on [0, 1]; categorical features are uniform
    over ``n_levels`` labels. The noise scale depends only on feature 0, so a
    heteroscedastic profile makes some regions of feature space noisier than
    others.
    """
    rng = np.random.default_rng(cfg.seed)
    num = rng.uniform(0.0, 1.0, size=(cfg.n_rows, cfg.n_numeric))
    cat = rng.integers(0, cfg.n_levels, size=(cfg.n_rows, cfg.n_categorical))
    X = np.hstack([num, cat.astype(np.float64)])
    eps = rng.standard_normal(cfg.n_rows)
    y = synthetic_signal(X, cfg) + cfg.noise.scale(num[:, 0]) * eps

    labels = tuple(f"L{k}" for k in range(cfg.n_levels))
    columns = [ColumnSpec(f"x{k}") for k in range(cfg.n_numeric)]
    columns += [ColumnSpec(f"c{k}", CATEGORICAL, labels) for k in range(cfg.n_categorical)]
    return Dataset(
        features=X,
        target=y,
        columns=tuple(columns),
        row_order_key=np.arange(cfg.n_rows, dtype=np.float64),
        target_name="y",
    )
