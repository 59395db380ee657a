import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snnbayes.core_math import RngStream, softmax
from snnbayes.metrics import (PredictiveBatch, brier, calibration_bins, ece, evaluate, expected_entropy,
                              mutual_information, mutual_information_raw, nll, predictive_entropy)

import oracles


def random_batch(seed, with_samples=True):
    """Random Bayesian batch; sharpness varies so every calibration regime appears."""
    rng = RngStream(seed)
    C = 2 + int(rng.uniform() * 6)
    B = 1 + int(rng.uniform() * 40)
    S = 1 + int(rng.uniform() * 8)
    scale = 10 ** (2 * rng.uniform() - 0.5)
    per = softmax(scale * rng.normal((S, B, C)), axis=-1)
    labels = np.minimum((rng.uniform(B) * C).astype(int), C - 1)
    if with_samples:
        return PredictiveBatch(per.mean(axis=0), labels, per)
    return PredictiveBatch(per[0], labels)


def test_nll_examples():
    assert nll(PredictiveBatch(np.full((3, 4), 0.25), [0, 1, 3])) == pytest.approx(math.log(4), abs=1e-12)
    assert nll(PredictiveBatch(np.eye(3), [0, 1, 2])) <= 1e-11
    probs = np.array([[0.5, 0.5, 0.0], [0.25, 0.5, 0.25]])
    assert nll(PredictiveBatch(probs, [0, 2])) == pytest.approx(1.5 * math.log(2), abs=1e-12)
    assert nll(PredictiveBatch(np.array([[1.0, 0.0]]), [1])) == pytest.approx(-math.log(1e-12))


def test_brier_examples():
    assert brier(PredictiveBatch(np.eye(3), [0, 1, 2])) == 0.0
    assert brier(PredictiveBatch(np.full((2, 2), 0.5), [0, 1])) == pytest.approx(0.5, abs=1e-15)
    assert brier(PredictiveBatch(np.full((1, 5), 0.2), [3])) == pytest.approx(0.8, abs=1e-15)


def test_entropy_examples():
    assert predictive_entropy(np.array([0.0, 1.0, 0.0])) == 0.0
    assert predictive_entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-15)
    assert predictive_entropy(np.array([0.5, 0.25, 0.25])) == pytest.approx(1.5 * math.log(2), abs=1e-15)


def test_expected_entropy_examples():
    p = np.array([[0.3, 0.7]] * 3)
    assert expected_entropy(p) == pytest.approx(predictive_entropy(p[0]), abs=1e-15)
    assert expected_entropy(np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.0
    assert expected_entropy(np.array([[0.5, 0.5], [1.0, 0.0]])) == pytest.approx(math.log(2) / 2, abs=1e-15)


def test_mutual_information_examples():
    assert mutual_information(np.array([[0.2, 0.8]] * 4)) == 0.0
    assert mutual_information(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(math.log(2), abs=1e-15)
    expected = math.log(2) - (-0.8 * math.log(0.8) - 0.2 * math.log(0.2))
    assert mutual_information(np.array([[0.8, 0.2], [0.2, 0.8]])) == pytest.approx(expected, abs=1e-12)


def test_ece_examples():
    assert ece(PredictiveBatch(np.eye(3), [0, 1, 2]), 10) == 0.0
    probs = np.array([[0.75, 0.25]] * 4)
    assert ece(PredictiveBatch(probs, [0, 0, 0, 1]), 10) == pytest.approx(0.0, abs=1e-15)
    probs = np.array([[0.9, 0.1], [0.6, 0.4]])
    assert ece(PredictiveBatch(probs, [1, 0]), 10) == pytest.approx(0.65, abs=1e-12)


def test_ece_bin_edges_are_upper_closed():
    # 0.5 lies in (0.4, 0.5] and 0.0 in the first bin
    bins = calibration_bins(PredictiveBatch(np.array([[0.5, 0.5], [0.6, 0.4]]), [0, 0]), 10)
    assert bins[4]["count"] == 1 and bins[5]["count"] == 1
    from snnbayes.metrics import _bin_index
    assert _bin_index(np.array([0.0, 1e-9, 0.1, 1.0]), 10).tolist() == [0, 0, 0, 9]


def test_argmax_ties_go_to_lowest_index():
    b = PredictiveBatch(np.array([[0.5, 0.5]]), [0])
    assert evaluate(b).accuracy == 1.0


def test_evaluate_deterministic_omits_mi():
    rep = evaluate(random_batch(1, with_samples=False))
    d = rep.to_dict()
    assert "mean_mutual_information" not in d and "mean_expected_entropy" not in d
    assert set(d) == {"accuracy", "nll", "brier", "ece", "mean_entropy", "num_bins"}


def test_evaluate_identical_samples():
    p = softmax(RngStream(2).normal((6, 3)), axis=1)
    labels = np.argmax(p, axis=1)
    bayes = evaluate(PredictiveBatch(p, labels, np.stack([p, p, p])))
    det = evaluate(PredictiveBatch(p, labels))
    assert bayes.mean_mutual_information == 0.0
    assert bayes.accuracy == det.accuracy == 1.0
    for k in ("nll", "brier", "ece", "mean_entropy"):
        assert getattr(bayes, k) == getattr(det, k)


def test_batch_validation():
    with pytest.raises(ValueError):
        PredictiveBatch(np.full((2, 2), 0.5), [0, 2])
    with pytest.raises(ValueError):
        PredictiveBatch(np.full((2, 2), 0.5), [0, 1], np.full((3, 2, 3), 1 / 3))


def test_against_naive_oracle_on_random_batches():
    for seed in range(1000):
        b = random_batch(seed)
        probs, labels, per = b.probs.tolist(), b.labels.tolist(), b.per_sample_probs
        assert abs(nll(b) - oracles.nll(probs, labels)) <= 1e-9
        assert abs(brier(b) - oracles.brier(probs, labels)) <= 1e-9
        assert abs(ece(b, 15) - oracles.ece(probs, labels, 15)) <= 1e-9
        for i in range(len(labels)):
            samples = per[:, i].tolist()
            assert abs(predictive_entropy(b.probs[i]) - oracles.entropy(probs[i])) <= 1e-9
            assert abs(expected_entropy(per[:, i]) - oracles.expected_entropy(samples)) <= 1e-9
            assert abs(mutual_information(per[:, i]) - max(oracles.mutual_information(samples), 0)) <= 1e-9


@given(st.integers(0, 10**6))
def test_metric_ranges(seed):
    b = random_batch(seed)
    C = b.probs.shape[1]
    rep = evaluate(b)
    assert 0 <= rep.brier <= 2 and 0 <= rep.ece <= 1
    h = predictive_entropy(b.probs)
    assert np.all(h >= 0) and np.all(h <= math.log(C) + 1e-12)
    mi_raw = mutual_information_raw(b.per_sample_probs)
    assert np.all(mi_raw >= -1e-12)
    assert np.all(mutual_information(b.per_sample_probs) >= 0)
    assert np.all(h >= expected_entropy(b.per_sample_probs) - 1e-12)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_metrics_permutation_invariant(seed, pseed):
    b = random_batch(seed)
    perm = RngStream(pseed).permutation(len(b.labels))
    a, c = evaluate(b).to_dict(), evaluate(b.take(perm)).to_dict()
    for k in a:
        assert a[k] == pytest.approx(c[k], abs=1e-12)
