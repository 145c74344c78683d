import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atdfuse.metrics import accuracy_f1, mae, mse, recall_at_k
from atdfuse.tensor import ContractError, DimensionError
from oracles import oracle_mae, oracle_mse, oracle_recall, run_metric_oracles


# -- regression ----------------------------------------------------------------------------
def test_regression_examples():
    assert mae([1.5, 2.0], [1.5, 2.0]) == 0.0
    assert mse([1.5, 2.0], [1.5, 2.0]) == 0.0
    assert mae([0.0, 2.0], [1.0, 1.0]) == 1.0
    assert mse([0.0, 2.0], [1.0, 1.0]) == 1.0


def test_mse_outlier_quadruples():
    y = np.zeros(4)
    base = np.array([0.5, 0.1, -0.2, 0.3])
    doubled = base.copy()
    doubled[0] *= 2
    delta = (mse(y, doubled) - mse(y, base)) * 4
    assert delta == pytest.approx(3 * base[0] ** 2, abs=1e-15)


def test_regression_errors():
    with pytest.raises(DimensionError):
        mae([1.0, 2.0], [1.0])
    with pytest.raises(ContractError):
        mse([], [])


def test_regression_oracle_random():
    rng = np.random.default_rng(0)
    y, p = rng.normal(size=100), rng.normal(size=100)
    assert abs(mae(y, p) - oracle_mae(y.tolist(), p.tolist())) <= 1e-12
    assert abs(mse(y, p) - oracle_mse(y.tolist(), p.tolist())) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_mae_le_root_mse(pairs):
    y, p = zip(*pairs)
    assert mae(y, p) <= math.sqrt(mse(y, p)) * (1 + 1e-12) + 1e-12


# -- classification ------------------------------------------------------------------------
def test_perfect_predictions():
    r = accuracy_f1([0, 1, 2, 1], [0, 1, 2, 1])
    assert (r.accuracy, r.macro_f1) == (1.0, 1.0)


def test_binary_example_against_hand_count():
    r = accuracy_f1([1, 1, 0, 0], [1, 0, 0, 0])
    assert r.accuracy == 0.75
    # class 0: tp 2, fp 1, fn 0 -> p 2/3, r 1 -> f1 0.8; class 1: p 1, r 1/2 -> f1 2/3
    assert r.per_class_f1 == pytest.approx([0.8, 2 / 3], abs=1e-15)
    assert r.macro_f1 == pytest.approx((0.8 + 2 / 3) / 2, abs=1e-15)
    assert r.degenerate_classes == []


def test_absent_class_is_zero_and_flagged():
    r = accuracy_f1([0, 1, 0], [0, 1, 0], n_classes=3)
    assert r.per_class_f1[2] == 0.0
    assert r.degenerate_classes == [2]
    assert r.macro_f1 == pytest.approx(2 / 3)


def test_classification_errors():
    with pytest.raises(ContractError):
        accuracy_f1([], [])
    with pytest.raises(DimensionError):
        accuracy_f1([0, 1], [0])
    with pytest.raises(ContractError):
        accuracy_f1([0, 3], [0, 1], n_classes=2)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1,
                         max_size=25))),
       st.randoms())
def test_relabel_invariance(case, rnd):
    c, pairs = case
    y, p = map(np.array, zip(*pairs))
    perm = np.array(rnd.sample(range(c), c))
    a = accuracy_f1(y, p, n_classes=c)
    b = accuracy_f1(perm[y], perm[p], n_classes=c)
    assert a.accuracy == b.accuracy
    assert abs(a.macro_f1 - b.macro_f1) <= 1e-12


# -- retrieval -----------------------------------------------------------------------------
def test_identity_similarity():
    assert recall_at_k(np.eye(6), np.arange(6), 1) == 100.0


def test_reversed_ranking():
    n = 10
    sim = np.tile(np.arange(n, 0, -1, dtype=float), (n, 1))  # item 0 always best
    truth = np.arange(n)
    assert recall_at_k(sim, truth, 1) == 100.0 / n
    sim = np.tile(np.arange(n, dtype=float), (n, 1))  # item n-1 always best
    hits_not_last = [recall_at_k(sim[i:i + 1], truth[i:i + 1], 1) for i in range(n - 1)]
    assert hits_not_last == [0.0] * (n - 1)


def test_ties_prefer_lower_index():
    sim = np.zeros((2, 4))
    assert recall_at_k(sim, [0, 3], 1) == 50.0
    assert recall_at_k(sim, [0, 3], 3) == 50.0
    assert recall_at_k(sim, [0, 3], 4) == 100.0


def test_random_against_full_sort():
    rng = np.random.default_rng(1)
    sim = rng.normal(size=(20, 50))
    truth = rng.integers(0, 50, 20)
    for k in (1, 5, 10):
        hits, n = oracle_recall(sim.tolist(), truth.tolist(), k)
        assert recall_at_k(sim, truth, k) == 100.0 * hits / n


def test_recall_errors():
    with pytest.raises(ContractError):
        recall_at_k(np.eye(4), np.arange(4), 5)
    with pytest.raises(DimensionError):
        recall_at_k(np.eye(4), np.arange(3), 1)


# -- 1000 random small instances ----------------------------------------------------------------
def test_metric_oracles_on_random_instances():
    worst, mismatches, violations = run_metric_oracles()
    assert mismatches == 0 and violations == 0
    assert worst <= 1e-12
