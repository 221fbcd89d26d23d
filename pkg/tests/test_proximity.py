import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapforest.data import ColumnSpec, Dataset
from gapforest.forest import CLASSIFICATION, Hyperparams, NeverOOBError, Tree, assemble, fit
from gapforest.proximity import (
    BREIMAN,
    GAP_TRAIN_OOB,
    ProximityMatrixSummary,
    ProximityRow,
    breiman_proximity_row,
    breiman_proximity_rows,
    breiman_proximity_train_row,
    gap_matrix,
    gap_proximity_row,
    gap_proximity_rows,
    gap_proximity_train_row,
    gap_train_matrix,
    proximity_matrix,
    reconstruct_from,
    verify_reconstruction,
    write_rows_csv,
    write_rows_json,
)

from conftest import HAND_QUERY, HAND_X, HAND_Y, make_hand_forest
from test_forest import traverse


def brute_gap(forest, X_train, x, trees=None):
    """Direct loop over trees and training rows, one leaf lookup at a time."""
    N = len(X_train)
    trees = range(forest.n_trees) if trees is None else trees
    k = np.zeros(N)
    for t in trees:
        tree, c = forest.trees[t], forest.bags[t]
        leaf = traverse(tree, x)
        members = [j for j in range(N) if c[j] > 0 and traverse(tree, X_train[j]) == leaf]
        size = sum(c[j] for j in members)
        for j in members:
            k[j] += c[j] / size
    return k / len(trees)


def brute_breiman(forest, X_train, x, count="leaf"):
    N = len(X_train)
    k = np.zeros(N)
    for t, tree in enumerate(forest.trees):
        leaf = traverse(tree, x)
        in_leaf = [j for j in range(N) if traverse(tree, X_train[j]) == leaf]
        bagged = [j for j in in_leaf if forest.bags[t][j] > 0]
        denom = len(in_leaf) if count == "leaf" else len(bagged)
        for j in bagged:
            k[j] += 1.0 / denom
    return k / forest.n_trees


# --- hand-computed forest -------------------------------------------------


def test_hand_gap_row(hand_forest):
    row = gap_proximity_row(hand_forest, HAND_QUERY[0])
    np.testing.assert_allclose(row.to_dense(4), [1 / 3, 1 / 2, 1 / 6, 0], rtol=0, atol=1e-15)
    assert list(row.indices) == [0, 1, 2]  # zero weights omitted


def test_hand_gap_train_row(hand_forest):
    row = gap_proximity_train_row(hand_forest, 3)
    assert row.kind == GAP_TRAIN_OOB
    np.testing.assert_array_equal(row.to_dense(4), [0, 0, 1, 0])


def test_hand_reconstruction(hand_forest):
    row = gap_proximity_row(hand_forest, HAND_QUERY[0])
    y1, y2, y3, _ = HAND_Y
    direct = 0.5 * ((2 * y1 + y2) / 3 + (2 * y2 + y3) / 3)
    assert reconstruct_from(row, HAND_Y) == pytest.approx(y1 / 3 + y2 / 2 + y3 / 6, abs=1e-15)
    assert reconstruct_from(row, HAND_Y) == pytest.approx(direct, abs=1e-15)
    assert hand_forest.predict(HAND_QUERY)[0] == pytest.approx(11 / 6, abs=1e-15)


def test_hand_breiman_row(hand_forest):
    # tree 2's query leaf holds rows {0,1,2} (row 0 out of bag): 1/3 each to 1 and 2
    row = breiman_proximity_row(hand_forest, HAND_QUERY[0])
    np.testing.assert_allclose(row.to_dense(4), [1 / 4, 5 / 12, 1 / 6, 0], atol=1e-15)
    assert reconstruct_from(row, HAND_Y) == pytest.approx(19 / 12, abs=1e-15)
    inbag = breiman_proximity_row(hand_forest, HAND_QUERY[0], count="inbag")
    np.testing.assert_allclose(inbag.to_dense(4), [1 / 4, 1 / 2, 1 / 4, 0], atol=1e-15)
    assert reconstruct_from(inbag, HAND_Y) == pytest.approx(2.0, abs=1e-15)


def test_hand_verify(hand_forest):
    rep = verify_reconstruction(hand_forest, HAND_QUERY)
    assert rep.max_abs_gap_error <= 1e-15
    assert rep.max_abs_breiman_error == pytest.approx(11 / 6 - 19 / 12, abs=1e-15)
    assert rep.exact


def test_uniform_bag():
    f = assemble([Tree.from_splits(None)], [[1, 1, 1]], [[0.0], [1.0], [2.0]], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(gap_proximity_row(f, [5.0]).to_dense(3), [1 / 3] * 3, atol=1e-15)


def test_breiman_one_tree_two_members():
    f = assemble([Tree.from_splits((0, 1.5, None, None))], [[2, 1, 1, 0]], HAND_X, HAND_Y)
    np.testing.assert_array_equal(breiman_proximity_row(f, [1.0]).to_dense(4), [0.5, 0.5, 0, 0])


# --- reconstruct_from ---------------------------------------------------


def test_reconstruct_single_point():
    row = ProximityRow(0, np.array([2]), np.array([1.0]))
    assert reconstruct_from(row, [5.0, 6.0, 7.25]) == 7.25


def test_reconstruct_classification():
    row = ProximityRow(0, np.array([0, 1]), np.array([0.25, 0.75]))
    np.testing.assert_allclose(reconstruct_from(row, [0, 1], n_classes=2), [0.25, 0.75])


def test_reconstruct_index_out_of_range():
    with pytest.raises(IndexError):
        reconstruct_from(ProximityRow(0, np.array([4]), np.array([1.0])), [1.0, 2.0])


# --- against the brute-force oracle --------------------------------------


def test_gap_matches_brute_force(small_forest, small_data, queries):
    X = small_data.features
    for x, row in zip(queries[:8], gap_proximity_rows(small_forest, queries[:8])):
        np.testing.assert_allclose(row.to_dense(len(X)), brute_gap(small_forest, X, x), atol=1e-14)


def test_gap_train_matches_brute_force(small_forest, small_data):
    X = small_data.features
    oob = small_forest.oob_mask
    for i in range(0, 300, 37):
        trees = np.flatnonzero(oob[i])
        row = gap_proximity_train_row(small_forest, i)
        np.testing.assert_allclose(row.to_dense(len(X)), brute_gap(small_forest, X, X[i], trees),
                                   atol=1e-14)


@pytest.mark.parametrize("count", ["leaf", "inbag"])
def test_breiman_matches_brute_force(small_forest, small_data, queries, count):
    X = small_data.features
    for x, row in zip(queries[:5], breiman_proximity_rows(small_forest, queries[:5], count=count)):
        np.testing.assert_allclose(row.to_dense(len(X)), brute_breiman(small_forest, X, x, count),
                                   atol=1e-14)


def test_breiman_train_row_uses_all_trees(small_forest, small_data):
    X = small_data.features
    row = breiman_proximity_train_row(small_forest, 7)
    assert row.kind == BREIMAN
    np.testing.assert_allclose(row.to_dense(len(X)), brute_breiman(small_forest, X, X[7]), atol=1e-14)


# --- exactness and structure --------------------------------------------


def test_exact_reconstruction(small_forest, queries):
    rep = verify_reconstruction(small_forest, queries)
    assert rep.max_abs_gap_error <= 1e-9
    assert rep.max_abs_breiman_error > 1e-6


def test_exact_reconstruction_classifier(small_classifier, queries):
    K = gap_matrix(small_classifier, queries)
    probs = K @ small_classifier.targets_matrix()
    np.testing.assert_allclose(probs, small_classifier.predict_proba(queries), rtol=0, atol=1e-12)
    assert verify_reconstruction(small_classifier, queries).max_abs_gap_error <= 1e-9


def test_oob_reconstruction(small_forest):
    K, valid = gap_train_matrix(small_forest)
    rec = K @ small_forest.y_train
    pred, pvalid = small_forest.predict_oob_all()
    np.testing.assert_array_equal(valid, pvalid)
    np.testing.assert_allclose(rec[valid], pred[valid], rtol=0, atol=1e-9)
    # self-exclusion
    assert np.all(K.diagonal()[valid] == 0)


def test_never_oob_row_raises():
    f = assemble([Tree.from_splits(None)], [[1, 1, 1, 0]], np.zeros((4, 1)), [1.0, 2.0, 3.0, 9.0])
    with pytest.raises(NeverOOBError, match="training row 1"):
        gap_proximity_train_row(f, 1)
    K, valid = gap_train_matrix(f)
    np.testing.assert_array_equal(valid, [False, False, False, True])


def test_no_bootstrap_gap_equals_breiman(small_data, queries):
    f = fit(small_data, Hyperparams(n_estimators=10, min_samples_leaf=3, bootstrap=False), seed=0)
    G = proximity_matrix(f, queries, dense=True)
    B = proximity_matrix(f, queries, dense=True, kind=BREIMAN)
    np.testing.assert_allclose(G, B, atol=1e-15)
    rep = verify_reconstruction(f, queries)
    assert rep.max_abs_gap_error <= 1e-9 and rep.max_abs_breiman_error <= 1e-9


def test_dense_guard(small_forest, queries, monkeypatch):
    import gapforest.proximity as px

    monkeypatch.setattr(px, "DENSE_LIMIT", 10)
    with pytest.raises(ValueError, match="dense output refused"):
        proximity_matrix(small_forest, queries, dense=True)
    assert proximity_matrix(small_forest, queries).shape == (len(queries), small_forest.n_train)


def test_sparsity_bound(small_forest, queries):
    K = gap_matrix(small_forest, queries)
    bound = 0
    for t, tree in enumerate(small_forest.trees):
        inbag = small_forest.bags[t] > 0
        bound += np.bincount(small_forest.train_leaves[inbag, t], minlength=tree.n_leaves).max()
    assert np.diff(K.indptr).max() <= bound
    s = ProximityMatrixSummary.from_matrix(K)
    assert s.n_queries == len(queries) and s.max_row_sum_deviation <= 1e-12
    assert s.max_nonzero == np.diff(K.indptr).max()


def test_export(tmp_path, hand_forest):
    rows = [gap_proximity_row(hand_forest, HAND_QUERY[0], query_id=0)]
    write_rows_csv(rows, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "query_id,train_index,weight"
    assert len(lines) == 4 and float(lines[2].split(",")[2]) == 0.5
    write_rows_json(rows, tmp_path / "p.json")
    data = json.loads((tmp_path / "p.json").read_text())
    assert data[0]["train_index"] == [0, 1, 2]


# --- random forests (property based) -------------------------------------


@st.composite
def random_forests(draw):
    n = draw(st.integers(20, 60))
    p = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p)).round(draw(st.integers(1, 3)))  # rounding creates ties
    y = rng.normal(size=n)
    params = Hyperparams(
        n_estimators=draw(st.integers(3, 12)),
        max_depth=draw(st.sampled_from([None, 2, 5])),
        max_features=draw(st.sampled_from(["all", "sqrt", 0.5])),
        min_samples_leaf=draw(st.integers(1, 4)),
    )
    ds = Dataset(X, y, tuple(ColumnSpec(f"x{k}") for k in range(p)))
    task = draw(st.sampled_from(["regression", CLASSIFICATION]))
    if task == CLASSIFICATION:
        ds = Dataset(X, (y > 0).astype(float) + (y > 1), ds.columns)
    return fit(ds, params, seed=seed, task=task), rng.uniform(-0.2, 1.2, size=(15, p))


@settings(max_examples=30, deadline=None)
@given(random_forests())
def test_property_row_stochastic_and_exact(case):
    forest, Q = case
    K = gap_matrix(forest, Q)
    np.testing.assert_allclose(np.asarray(K.sum(axis=1)).ravel(), 1.0, rtol=0, atol=1e-12)
    assert K.data.min() >= 0 and K.data.max() <= 1
    assert verify_reconstruction(forest, Q).max_abs_gap_error <= 1e-9

    Kt, valid = gap_train_matrix(forest)
    assert np.all(Kt.diagonal() == 0)
    sums = np.asarray(Kt.sum(axis=1)).ravel()
    np.testing.assert_allclose(sums[valid], 1.0, atol=1e-12)
    pred, _ = forest.predict_oob_all()
    np.testing.assert_allclose(Kt[valid] @ forest.targets_matrix(), pred[valid], atol=1e-9)
