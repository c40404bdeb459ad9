"""Metrics against sort-based and two-pass oracles."""

import numpy as np
import pytest

from fernet import data, evaluation, nn
from fernet.errors import ConfigError, DataError, LabelError, RangeError


def top_k_oracle(probs, labels, k):
    """Per-row sort with explicit tie handling: lower index ranks first."""
    hits = 0
    for row, label in zip(probs, labels):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        if label in order[:k]:
            hits += 1
    return 100.0 * hits / len(labels)


def test_top_k_matches_sort_oracle():
    rng = np.random.default_rng(0)
    probs = rng.random((40, 7))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 7, size=40)
    for k in (1, 2, 3, 7):
        assert evaluation.top_k_accuracy(probs, labels, k) == pytest.approx(
            top_k_oracle(probs, labels, k))


def test_top_k_tie_goes_to_lower_class_index():
    probs = np.array([[0.4, 0.4, 0.2]])
    # class 0 wins the tie, so label 1 misses at k=1 but hits at k=2
    assert evaluation.top_k_accuracy(probs, np.array([1]), 1) == 0.0
    assert evaluation.top_k_accuracy(probs, np.array([0]), 1) == 100.0
    assert evaluation.top_k_accuracy(probs, np.array([1]), 2) == 100.0


def test_top_k_validation():
    probs = np.full((2, 7), 1 / 7)
    labels = np.array([0, 1])
    with pytest.raises(RangeError):
        evaluation.top_k_accuracy(probs, labels, 0)
    with pytest.raises(RangeError):
        evaluation.top_k_accuracy(probs, labels, 8)
    with pytest.raises(LabelError):
        evaluation.top_k_accuracy(probs, np.array([0, 9]), 1)
    bad = probs.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        evaluation.top_k_accuracy(bad, labels, 1)


def test_top2_never_below_top1_property():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        probs = rng.random((n, 7))
        labels = rng.integers(0, 7, size=n)
        top1 = evaluation.top_k_accuracy(probs, labels, 1)
        top2 = evaluation.top_k_accuracy(probs, labels, 2)
        assert top2 >= top1


def test_predict_tie_break():
    probs = np.array([[0.3, 0.3, 0.4], [0.5, 0.5, 0.0]])
    assert list(evaluation.predict(probs)) == [2, 0]


def test_confusion_matrix_hand_example():
    labels = np.array([0, 0, 0, 1, 1, 2])
    preds = np.array([0, 0, 1, 1, 1, 0])
    cm = evaluation.confusion_matrix(preds, labels, num_classes=3)
    expected = np.array([
        [200 / 3, 100 / 3, 0.0],
        [0.0, 100.0, 0.0],
        [100.0, 0.0, 0.0],
    ])
    assert np.allclose(cm, expected, atol=1e-12)
    # occupied rows sum to exactly 100
    assert np.allclose(cm.sum(axis=1), [100.0, 100.0, 100.0], atol=1e-9)


def test_confusion_matrix_absent_class_row_is_zero():
    labels = np.array([0, 0])
    preds = np.array([0, 1])
    cm = evaluation.confusion_matrix(preds, labels, num_classes=3)
    assert cm[1].sum() == 0.0 and cm[2].sum() == 0.0
    assert cm[0, 0] == 50.0 and cm[0, 1] == 50.0


def test_confusion_matrix_validation():
    with pytest.raises(DataError):
        evaluation.confusion_matrix(np.array([0]), np.array([0, 1]))
    with pytest.raises(LabelError):
        evaluation.confusion_matrix(np.array([9]), np.array([0]))


def test_evaluate_on_small_network():
    bars = data.make_synthetic_bars(21, 7, seed=0)
    net = nn.build_network(nn.default_config(width_divisor=16), seed=0)
    metrics = evaluation.evaluate(net, bars, views=1, batch_size=8)
    assert 0.0 <= metrics.top1 <= metrics.top2 <= 100.0
    assert metrics.confusion.shape == (7, 7)
    occupied = metrics.confusion.sum(axis=1) > 0
    assert np.allclose(metrics.confusion[occupied].sum(axis=1), 100.0,
                       atol=0.1)
    assert metrics.top1_sd is None

    multi = evaluation.evaluate(net, bars, views=11, batch_size=8)
    assert 0.0 <= multi.top1 <= multi.top2 <= 100.0

    with pytest.raises(ConfigError):
        evaluation.evaluate(net, bars, views=5)
    with pytest.raises(DataError):
        evaluation.evaluate(net, bars.subset([]), views=1)


def test_evaluate_batching_is_seamless():
    bars = data.make_synthetic_bars(10, 5, seed=1)
    net = nn.build_network(nn.default_config(width_divisor=16), seed=1)
    a = evaluation.evaluate(net, bars, views=1, batch_size=3)
    b = evaluation.evaluate(net, bars, views=1, batch_size=10)
    assert a.top1 == b.top1 and a.top2 == b.top2
    assert np.array_equal(a.confusion, b.confusion)


def two_pass_mean_sd(values):
    """Mean then explicit second pass for the population deviation."""
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, var ** 0.5


def test_aggregate_folds_mean_and_population_sd():
    folds = [evaluation.Metrics(top1=t1, top2=t2,
                                confusion=np.full((7, 7), 100 / 7))
             for t1, t2 in ((90.0, 95.0), (94.0, 99.0))]
    agg = evaluation.aggregate_folds(folds)
    exp_mean, exp_sd = two_pass_mean_sd([90.0, 94.0])
    assert agg.top1 == pytest.approx(exp_mean)   # 92
    assert agg.top1_sd == pytest.approx(exp_sd)  # 2
    assert agg.top2 == pytest.approx(97.0)
    assert agg.fold_top1 == (90.0, 94.0)
    # averaged confusion rows renormalize to 100
    assert np.allclose(agg.confusion.sum(axis=1), 100.0, atol=1e-9)


def test_aggregate_folds_random_sets_match_two_pass_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        vals = rng.uniform(0, 100, size=5)
        folds = [evaluation.Metrics(top1=float(v), top2=float(v),
                                    confusion=np.zeros((7, 7)))
                 for v in vals]
        agg = evaluation.aggregate_folds(folds)
        exp_mean, exp_sd = two_pass_mean_sd(list(vals))
        assert agg.top1 == pytest.approx(exp_mean, abs=1e-9)
        assert agg.top1_sd == pytest.approx(exp_sd, abs=1e-9)


def test_aggregate_folds_requires_input():
    with pytest.raises(DataError):
        evaluation.aggregate_folds([])


def test_format_and_flat_reports():
    metrics = evaluation.Metrics(top1=75.0, top2=90.0,
                                 confusion=np.full((7, 7), 100 / 7))
    text = evaluation.format_report(metrics, title="Check")
    assert "Check" in text
    assert "Top-1: 75.0%" in text
    assert "AN" in text and "SU" in text

    flat = evaluation.flat_report(metrics)
    lines = dict(line.split(",") for line in flat.strip().splitlines())
    assert float(lines["top1"]) == 75.0
    assert float(lines["confusion_AN_DI"]) == pytest.approx(100 / 7, abs=1e-4)

    agg = evaluation.aggregate_folds([metrics, metrics])
    agg_text = evaluation.format_report(agg)
    assert "±" in agg_text
    assert "Per-fold" in agg_text
    flat_agg = evaluation.flat_report(agg)
    assert "top1_sd,0.000000" in flat_agg
    assert "fold0_top1,75.000000" in flat_agg
