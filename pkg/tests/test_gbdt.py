import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from customsgnn.gbdt import (
    DecisionTree,
    GradientBoostedTrees,
    TreeEnsemble,
    encode_multihot,
    fit_gbdt,
    gbdt_margin,
    gbdt_score,
    leaf_indices,
    transaction_features,
)

from .oracles import nested_tree, oracle_gbdt, oracle_predict_tree, oracle_split, trees_match


def random_fixture(rng, n_max=64, f_max=6):
    n = int(rng.integers(8, n_max + 1))
    f = int(rng.integers(1, f_max + 1))
    X = np.empty((n, f))
    for j in range(f):
        kind = rng.integers(3)
        if kind == 0:
            X[:, j] = rng.normal(size=n)
        elif kind == 1:
            X[:, j] = rng.integers(0, 4, size=n)  # many ties
        else:
            X[:, j] = rng.normal(size=n)
            X[rng.random(n) < 0.2, j] = np.nan
    y = (rng.random(n) < 0.35).astype(float)
    y[0], y[1] = 0.0, 1.0
    return X, y


def stub(value=0.5, leaf=0):
    return DecisionTree(
        feature=np.array([-1]),
        threshold=np.array([np.nan]),
        left=np.array([-1]),
        right=np.array([-1]),
        value=np.array([value]),
        leaf_index=np.array([leaf]),
    )


def two_level():
    # root: gross_weight (f0) < 100 ? leaf0 : (quantity (f1) < 5 ? leaf1 : leaf2)
    return DecisionTree(
        feature=np.array([0, -1, 1, -1, -1]),
        threshold=np.array([100.0, np.nan, 5.0, np.nan, np.nan]),
        left=np.array([1, -1, 3, -1, -1]),
        right=np.array([2, -1, 4, -1, -1]),
        value=np.array([0.0, -1.0, 0.0, 2.0, 0.5]),
        leaf_index=np.array([-1, 0, -1, 1, 2]),
    )


def test_gbdt_matches_stagewise_oracle_on_random_fixtures():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        X, y = random_fixture(rng)
        n_trees = int(rng.integers(1, 4))
        depth = int(rng.integers(1, 4))
        e = fit_gbdt(X, y, n_trees=n_trees, max_depth=depth, learning_rate=0.3)
        base, trees, margin = oracle_gbdt(X, list(y), n_trees, depth, 0.3)
        assert e.base_score == pytest.approx(base, abs=1e-12)
        for got, want in zip(e.trees, trees):
            assert trees_match(nested_tree(got), want), (nested_tree(got), want)
        assert np.allclose(gbdt_margin(e, X), margin, atol=1e-9, rtol=0)


def _binary_split(X, y):
    e = fit_gbdt(X, y, n_trees=1, max_depth=1)
    p = np.full(len(y), y.mean())
    want = oracle_split(X, list(p - y), list(p * (1 - p)), list(range(len(y))))
    t = e.trees[0]
    got = None if t.feature[0] < 0 else (int(t.feature[0]), float(t.threshold[0]))
    return got, want


def test_depth_one_binary_fixture():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1], [0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    y = np.array([0, 0, 1, 1, 0, 1, 1, 1], dtype=float)
    # eight rows leave every child below min_child_weight: both agree on a stub
    got, want = _binary_split(X, y)
    assert got == want is None
    got, want = _binary_split(np.vstack([X, X]), np.concatenate([y, y]))
    assert got == want == (0, 0.5)


def test_two_trees_depth_two_sixteen_rows():
    rng = np.random.default_rng(16)
    X = rng.normal(size=(16, 3))
    y = (X[:, 0] + 0.5 * rng.normal(size=16) > 0).astype(float)
    e = fit_gbdt(X, y, n_trees=2, max_depth=2)
    _, trees, margin = oracle_gbdt(X, list(y), 2, 2, 0.3)
    assert all(trees_match(nested_tree(a), b) for a, b in zip(e.trees, trees))
    assert np.allclose(gbdt_margin(e, X), margin, atol=1e-9, rtol=0)
    M = encode_multihot(e, X)
    for i in range(16):
        assert set(np.flatnonzero(M.to_dense()[i])) == set(leaf_indices(e, X[i]))


def test_single_class_and_empty_rejected():
    with pytest.raises(ValueError, match="single class"):
        fit_gbdt(np.ones((4, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        fit_gbdt(np.empty((0, 2)), np.empty(0))


def test_perfect_separator_chosen():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 4))
    y = (X[:, 2] > 0.1).astype(float)
    e = fit_gbdt(X, y, n_trees=1, max_depth=1)
    assert e.trees[0].feature[0] == 2


def test_stub_tree_routing():
    e = TreeEnsemble((stub(leaf=0),), 0.3, 0.0, 3)
    assert list(leaf_indices(e, np.array([1.0, -5.0, np.nan]))) == [0]


def test_decision_rule_routing():
    e = TreeEnsemble((two_level(),), 1.0, 0.0, 2)
    assert leaf_indices(e, np.array([150.0, 3.0]))[0] == 1  # weight > 100 and quantity < 5
    assert leaf_indices(e, np.array([150.0, 7.0]))[0] == 2
    assert leaf_indices(e, np.array([50.0, 3.0]))[0] == 0
    assert leaf_indices(e, np.array([100.0, 5.0]))[0] == 2  # equality routes right
    assert leaf_indices(e, np.array([np.nan, 5.0]))[0] == 0  # missing routes left
    rules = two_level().rules(["gross_weight", "quantity"])
    assert rules[1] == "gross_weight >= 100 AND quantity < 5"
    with pytest.raises(ValueError):
        leaf_indices(e, np.array([1.0, 2.0, 3.0]))


def test_multihot_index_arithmetic():
    def four_leaf(offset):
        return DecisionTree(
            feature=np.array([0, 0, -1, -1, 0, -1, -1]),
            threshold=np.array([0.0, -1.0, np.nan, np.nan, 1.0, np.nan, np.nan]),
            left=np.array([1, 2, -1, -1, 5, -1, -1]),
            right=np.array([4, 3, -1, -1, 6, -1, -1]),
            value=np.zeros(7),
            leaf_index=np.array([-1, -1, offset, offset + 1, -1, offset + 2, offset + 3]),
        )

    e = TreeEnsemble((four_leaf(0), four_leaf(4), four_leaf(8)), 0.3, 0.0, 1)
    assert e.total_leaves == 12
    # activations (0, 2, 3): x=-2 -> leaf 0; x=0.5 -> leaf 2; x=2 -> leaf 3
    X = np.array([[-2.0], [0.5], [2.0]])
    idx = leaf_indices(e, X)
    assert list(idx[:, 0]) == [0, 2, 3]
    # mixed row reaching local leaves 0, 2, 3 in trees 1..3
    custom = np.array([idx[0, 0], idx[1, 1], idx[2, 2]])
    assert list(custom) == [0, 6, 11]
    M = encode_multihot(e, X)
    assert M.width == 12
    assert (M.to_dense().sum(axis=1) == 3).all()


def test_zero_trees_and_zero_leaves():
    e = TreeEnsemble((), 0.3, 0.7, 2)
    assert gbdt_score(e, np.array([1.0, 2.0])) == pytest.approx(expit(0.7))
    e = TreeEnsemble((stub(0.0),), 0.3, 0.0, 2)
    assert gbdt_score(e, np.array([1.0, 2.0])) == 0.5


def test_score_matches_direct_summation():
    rng = np.random.default_rng(5)
    X, y = random_fixture(rng)
    e = fit_gbdt(X, y, n_trees=3, max_depth=3)
    for x in X[:10]:
        total = e.base_score + sum(e.learning_rate * t.value[t.route(x[None])[0]] for t in e.trees)
        assert gbdt_score(e, x) == pytest.approx(1 / (1 + np.exp(-total)), abs=1e-12)


def test_appending_tree_keeps_indices():
    rng = np.random.default_rng(9)
    X, y = random_fixture(rng)
    a = fit_gbdt(X, y, n_trees=2, max_depth=2)
    b = fit_gbdt(X, y, n_trees=3, max_depth=2)
    assert np.array_equal(leaf_indices(a, X), leaf_indices(b, X)[:, :2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_score_monotone_in_leaf_value(seed, delta):
    rng = np.random.default_rng(seed)
    X, y = random_fixture(rng, n_max=20, f_max=3)
    e = fit_gbdt(X, y, n_trees=2, max_depth=2)
    t = e.trees[0]
    leaf_node = int(np.flatnonzero(t.feature < 0)[0])
    value = t.value.copy()
    value[leaf_node] += delta
    t2 = DecisionTree(t.feature, t.threshold, t.left, t.right, value, t.leaf_index)
    e2 = TreeEnsemble((t2,) + e.trees[1:], e.learning_rate, e.base_score, e.n_features)
    hit = t.route(X) == leaf_node
    before, after = gbdt_score(e, X), gbdt_score(e2, X)
    if delta >= 0:
        assert (after[hit] >= before[hit]).all()
    else:
        assert (after[hit] <= before[hit]).all()
    assert np.array_equal(after[~hit], before[~hit])


def test_multihot_popcount_on_synthetic(small_synth):
    X = transaction_features(small_synth)
    e = fit_gbdt(X, small_synth.illicit, n_trees=10, max_depth=4)
    M = encode_multihot(e, small_synth)
    assert (np.asarray(M.to_csr().sum(axis=1)).ravel() == 10).all()
    assert M.indices.max() < M.width


def test_json_round_trip_bit_exact():
    rng = np.random.default_rng(3)
    X, y = random_fixture(rng)
    e = fit_gbdt(X, y, n_trees=3, max_depth=3)
    back = TreeEnsemble.from_json(e.to_json())
    assert np.array_equal(gbdt_margin(back, X), gbdt_margin(e, X))
    with pytest.raises(ValueError):
        TreeEnsemble.from_json(json.dumps({"format": "other"}))


def test_estimator_interface():
    from sklearn.base import clone

    rng = np.random.default_rng(1)
    X, y = random_fixture(rng)
    est = GradientBoostedTrees(n_trees=3, max_depth=2).fit(X, y)
    assert est.predict_proba(X).shape == (len(X), 2)
    assert est.transform(X).shape == (len(X), est.ensemble_.total_leaves)
    assert np.array_equal(est.apply(X), leaf_indices(est.ensemble_, X))
    assert clone(est).get_params() == est.get_params()
