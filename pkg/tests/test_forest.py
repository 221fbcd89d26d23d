from dataclasses import replace

import numpy as np
import pytest

from gapforest.data import ColumnSpec, Dataset, Homoscedastic, SyntheticConfig, generate_synthetic
from gapforest.forest import (
    CLASSIFICATION,
    ForestError,
    Hyperparams,
    NeverOOBError,
    Tree,
    assemble,
    dumps,
    fit,
    leaf_values,
    load,
    loads,
    save,
)


def traverse(tree, x):
    """Walk one row down one tree, node by node."""
    k = 0
    while tree.feature[k] >= 0:
        k = tree.left[k] if x[tree.feature[k]] <= tree.threshold[k] else tree.right[k]
    return tree.leaf_id[k]


def ds_from(X, y):
    X = np.asarray(X, dtype=float)
    return Dataset(X, np.asarray(y, dtype=float), tuple(ColumnSpec(f"x{k}") for k in range(X.shape[1])))


def test_single_row_rejected():
    with pytest.raises(ForestError):
        fit(ds_from([[1.0]], [1.0]))


def test_min_samples_leaf_too_large():
    with pytest.raises(ForestError):
        fit(ds_from([[1.0], [2.0]], [1.0, 2.0]), Hyperparams(min_samples_leaf=2))


@pytest.mark.parametrize("kwargs", [
    dict(n_estimators=0), dict(max_depth=-1), dict(min_samples_leaf=0),
    dict(max_features="log2"), dict(max_features=0.0), dict(max_features=1.5),
])
def test_bad_hyperparams(kwargs):
    with pytest.raises(ForestError):
        Hyperparams(**kwargs)


def test_depth_zero_is_bag_mean(small_data):
    f = fit(small_data, Hyperparams(n_estimators=5, max_depth=0), seed=1)
    for t, tree in enumerate(f.trees):
        assert tree.n_nodes == 1 and tree.n_leaves == 1
        c = f.bags[t]
        assert tree.value[0] == pytest.approx(c @ small_data.target / c.sum(), rel=1e-12)


def test_deterministic(small_data, queries):
    p = Hyperparams(n_estimators=8, max_features="sqrt", min_samples_leaf=2)
    a, b = fit(small_data, p, seed=3), fit(small_data, p, seed=3)
    assert dumps(a) == dumps(b)
    np.testing.assert_array_equal(a.predict(queries), b.predict(queries))
    c = fit(small_data, p, seed=4)
    assert not np.array_equal(a.predict(queries), c.predict(queries))


def test_single_leaf_apply():
    f = assemble([Tree.from_splits(None)], [[1, 1, 1]], [[0.0], [5.0], [9.0]], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(f.apply([[-100.0], [3.0], [1e9]]), [[0], [0], [0]])
    np.testing.assert_allclose(f.predict([[0.0], [7.0]]), [2.0, 2.0])


def test_tie_goes_left(hand_forest):
    # tree 1 splits at 1.5, tree 2 at 3.5
    np.testing.assert_array_equal(hand_forest.apply([[1.5], [3.5]]), [[0, 0], [1, 0]])
    np.testing.assert_array_equal(hand_forest.apply([[1.5000001], [3.5000001]]), [[1, 0], [1, 1]])


def test_apply_matches_scalar_traversal(small_forest, queries):
    leaves = small_forest.apply(queries)
    for i, x in enumerate(queries):
        for t, tree in enumerate(small_forest.trees):
            assert leaves[i, t] == traverse(tree, x)


def test_apply_feature_mismatch(small_forest):
    with pytest.raises(ForestError, match="expected 4 features"):
        small_forest.apply(np.zeros((2, 3)))


def test_tree_average():
    f = assemble([Tree.from_splits(None), Tree.from_splits(None)], [[2, 0], [0, 2]],
                 [[0.0], [1.0]], [1.0, 3.0])
    assert f.predict([[0.5]])[0] == 2.0


def test_soft_vote():
    f = assemble([Tree.from_splits(None), Tree.from_splits(None)],
                 [[2, 2, 0, 0], [1, 1, 1, 1]], np.zeros((4, 1)), [0, 1, 1, 1], task=CLASSIFICATION)
    np.testing.assert_allclose(f.predict_proba([[0.0]]), [[0.375, 0.625]])
    assert f.predict_class([[0.0]])[0] == 1


def test_class_tie_goes_to_smaller_id():
    f = assemble([Tree.from_splits(None)], [[2, 2, 0, 0]], np.zeros((4, 1)), [0, 1, 1, 1],
                 task=CLASSIFICATION)
    assert f.predict_class([[0.0]])[0] == 0


def test_predict_oob_singleton_leaf():
    f = assemble([Tree.from_splits(None)], [[1, 1, 1, 0]], np.zeros((4, 1)), [1.0, 2.0, 3.0, 9.0])
    # bag mean over rows 0..2 is 2.0; row 3 is OOB in the only tree
    assert f.predict_oob(3) == 2.0
    with pytest.raises(NeverOOBError, match="training row 0"):
        f.predict_oob(0)


def test_predict_oob_single_tree_subset(hand_forest):
    # row 0 is OOB only in tree 2 (leaf x<=3.5, multiset {1,1,2} -> (2*2+3)/3)
    assert hand_forest.predict_oob(0) == pytest.approx(7 / 3)
    # row 3 is OOB only in tree 1 (right leaf, bag {2} -> 3)
    assert hand_forest.predict_oob(3) == 3.0


def test_predict_oob_all_agrees(small_forest):
    pred, valid = small_forest.predict_oob_all()
    for i in np.flatnonzero(valid)[:50]:
        assert pred[i] == pytest.approx(small_forest.predict_oob(i), abs=1e-12)


def test_bag_sizes(small_forest):
    assert small_forest.bags.shape == (25, small_forest.n_train)
    np.testing.assert_array_equal(small_forest.bags.sum(axis=1), small_forest.n_train)
    assert len(small_forest.trees) == small_forest.params.n_estimators


def test_leaf_values_recomputed(small_forest, small_classifier):
    for f in (small_forest, small_classifier):
        targets = f.targets_matrix()
        for t, tree in enumerate(f.trees):
            leaves = f.train_leaves[:, t]
            again = leaf_values(leaves, f.bags[t].astype(float), targets, tree.n_leaves)
            np.testing.assert_array_equal(again, tree.value)
            # leaf ids are dense
            assert sorted(set(tree.leaf_id[tree.leaf_id >= 0])) == list(range(tree.n_leaves))


def test_leaf_values_by_hand(small_forest, small_data):
    tree, counts = small_forest.trees[0], small_forest.bags[0]
    leaves = small_forest.train_leaves[:, 0]
    for leaf in range(tree.n_leaves):
        members = np.flatnonzero((leaves == leaf) & (counts > 0))
        multiset = np.repeat(members, counts[members])
        assert tree.value[leaf] == pytest.approx(small_data.target[multiset].mean(), rel=1e-12)
        assert (counts[members] > 0).sum() >= small_forest.params.min_samples_leaf


def test_noiseless_trees_interpolate():
    cfg = SyntheticConfig(n_rows=200, n_numeric=3, n_categorical=0, noise=Homoscedastic(0.0), seed=4)
    ds = generate_synthetic(cfg)
    f = fit(ds, Hyperparams(n_estimators=5, max_features="all", min_samples_leaf=1), seed=0)
    for t, tree in enumerate(f.trees):
        inbag = f.bags[t] > 0
        pred = tree.value[f.train_leaves[inbag, t]]
        assert np.sqrt(np.mean((pred - ds.target[inbag]) ** 2)) < 1e-12


def test_max_depth_respected(small_data):
    f = fit(small_data, Hyperparams(n_estimators=4, max_depth=3), seed=0)
    assert max(t.depth for t in f.trees) <= 3


def test_no_bootstrap_uses_everything(small_data):
    f = fit(small_data, Hyperparams(n_estimators=3, bootstrap=False), seed=0)
    assert np.all(f.bags == 1)


def test_classification_targets_validated(small_data):
    with pytest.raises(ForestError):
        fit(replace(small_data, target=small_data.target), task=CLASSIFICATION)


def test_persistence_roundtrip(tmp_path, small_forest, small_classifier, queries):
    for f in (small_forest, small_classifier):
        path = tmp_path / "m.gf"
        save(f, path)
        g = load(path)
        assert dumps(g) == path.read_bytes() == dumps(f)
        np.testing.assert_array_equal(g.predict(queries), f.predict(queries))
        assert g.columns == f.columns and g.params == f.params


def test_load_garbage(tmp_path):
    p = tmp_path / "bad.gf"
    p.write_bytes(b"not a model")
    with pytest.raises(ForestError):
        load(p)
    with pytest.raises(ForestError):
        loads(b"GAPFOREST\n" + b"\x00" * 3)
