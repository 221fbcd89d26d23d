import sys

import numpy as np
import pytest

from gapforest.data import Heteroscedastic, SyntheticConfig, generate_synthetic
from gapforest.forest import CLASSIFICATION, Hyperparams, Tree, assemble, fit

# The 4-point, 2-tree forest worked out by hand. One feature, points at
# x = 0, 1, 3, 4 (rows 0..3). Tree 1 splits at 1.5 with bag counts (2,1,1,0);
# tree 2 splits at 3.5 with bag counts (0,2,1,1). A query at x = 1 lands in
# the left leaf of both trees: bagged multiset {0,0,1} in tree 1 and {1,1,2}
# in tree 2.
HAND_X = np.array([[0.0], [1.0], [3.0], [4.0]])
HAND_Y = np.array([1.0, 2.0, 3.0, 4.0])
HAND_BAGS = np.array([[2, 1, 1, 0], [0, 2, 1, 1]])
HAND_QUERY = np.array([[1.0]])


def make_hand_forest(y=HAND_Y, task="regression"):
    trees = [Tree.from_splits((0, 1.5, None, None)), Tree.from_splits((0, 3.5, None, None))]
    return assemble(trees, HAND_BAGS, HAND_X, y, task=task)


@pytest.fixture
def hand_forest():
    return make_hand_forest()


@pytest.fixture(scope="session")
def small_data():
    cfg = SyntheticConfig(n_rows=300, n_numeric=3, n_categorical=1,
                          noise=Heteroscedastic(0.1, 1.0), seed=11)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def small_forest(small_data):
    return fit(small_data, Hyperparams(n_estimators=25, min_samples_leaf=2, max_features="sqrt"),
               seed=5)


@pytest.fixture(scope="session")
def small_classifier(small_data):
    from dataclasses import replace

    y = np.digitize(small_data.target, np.quantile(small_data.target, [1 / 3, 2 / 3]))
    ds = replace(small_data, target=y.astype(float))
    return fit(ds, Hyperparams(n_estimators=20, min_samples_leaf=3), seed=2, task=CLASSIFICATION)


@pytest.fixture(scope="session")
def queries():
    rng = np.random.default_rng(99)
    X = rng.uniform(0, 1, size=(40, 4))
    X[:, 3] = rng.integers(-1, 4, size=40)
    return X


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
