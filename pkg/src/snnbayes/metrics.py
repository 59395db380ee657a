"""Predictive-quality and uncertainty metrics on (MC-averaged) class probabilities.

All logarithms are natural. Probabilities are floored at ``PROB_FLOOR``
before taking logs. Ties in argmax resolve to the lowest class index.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PROB_FLOOR = 1e-12
DEFAULT_BINS = 15


@dataclass(frozen=True, eq=False)
class PredictiveBatch:
    """Per-example probabilities ``probs`` (B, C) with optional samples (S, B, C)."""

    probs: np.ndarray
    labels: np.ndarray
    per_sample_probs: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise ValueError("probs must be (B, C) with one label per row")
        if probs.shape[1] < 2:
            raise ValueError("need at least two classes")
        if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise ValueError("label out of range")
        if self.per_sample_probs is not None:
            ps = np.asarray(self.per_sample_probs, dtype=np.float64)
            if ps.ndim != 3 or ps.shape[1:] != probs.shape:
                raise ValueError("per_sample_probs must be (S, B, C)")
            object.__setattr__(self, "per_sample_probs", ps)

    def take(self, idx) -> "PredictiveBatch":
        ps = None if self.per_sample_probs is None else self.per_sample_probs[:, idx]
        return PredictiveBatch(self.probs[idx], self.labels[idx], ps)


def _entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def predictive_entropy(probs) -> np.ndarray:
    """``-sum_k p_k log p_k`` over the last axis, with ``0 log 0 = 0``."""
    return _entropy(probs)


def expected_entropy(per_sample_probs) -> np.ndarray:
    """Mean over the leading (sample) axis of per-sample entropies."""
    return _entropy(per_sample_probs).mean(axis=0)


def mutual_information_raw(per_sample_probs) -> np.ndarray:
    ps = np.asarray(per_sample_probs, dtype=np.float64)
    return _entropy(ps.mean(axis=0)) - expected_entropy(ps)


def mutual_information(per_sample_probs) -> np.ndarray:
    """Entropy of the mean prediction minus mean entropy, clamped at zero."""
    return np.maximum(mutual_information_raw(per_sample_probs), 0.0)


def true_class_probs(batch: PredictiveBatch) -> np.ndarray:
    return batch.probs[np.arange(len(batch.labels)), batch.labels]


def nll(batch: PredictiveBatch) -> float:
    return float(-np.mean(np.log(np.maximum(true_class_probs(batch), PROB_FLOOR))))


def brier(batch: PredictiveBatch) -> float:
    onehot = np.zeros_like(batch.probs)
    onehot[np.arange(len(batch.labels)), batch.labels] = 1.0
    return float(np.mean(np.sum((batch.probs - onehot) ** 2, axis=1)))


def accuracy(batch: PredictiveBatch) -> float:
    return float(np.mean(np.argmax(batch.probs, axis=1) == batch.labels))


def _bin_index(confidence: np.ndarray, num_bins: int) -> np.ndarray:
    # Half-open bins (lo, hi]; confidence exactly 0 goes to the first bin.
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    return np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, num_bins - 1)


def calibration_bins(batch: PredictiveBatch, num_bins: int = DEFAULT_BINS) -> list[dict]:
    """Per-bin count, accuracy and mean confidence (empty bins report zeros)."""
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    conf = batch.probs.max(axis=1)
    correct = np.argmax(batch.probs, axis=1) == batch.labels
    idx = _bin_index(conf, num_bins)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    rows = []
    for b in range(num_bins):
        sel = idx == b
        n = int(sel.sum())
        rows.append({
            "bin_lower": float(edges[b]), "bin_upper": float(edges[b + 1]), "count": n,
            "accuracy": float(correct[sel].mean()) if n else 0.0,
            "confidence": float(conf[sel].mean()) if n else 0.0,
        })
    return rows


def ece(batch: PredictiveBatch, num_bins: int = DEFAULT_BINS) -> float:
    n = len(batch.labels)
    return float(sum(r["count"] / n * abs(r["accuracy"] - r["confidence"])
                     for r in calibration_bins(batch, num_bins) if r["count"]))


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    nll: float
    brier: float
    ece: float
    mean_entropy: float
    num_bins: int
    mean_expected_entropy: float | None = None
    mean_mutual_information: float | None = None

    def to_dict(self) -> dict:
        """Flat snake_case mapping; the optional Bayesian fields are omitted when absent."""
        return {k: v for k, v in asdict(self).items() if v is not None}


def evaluate(batch: PredictiveBatch, num_bins: int = DEFAULT_BINS) -> MetricsReport:
    bayes = batch.per_sample_probs is not None
    return MetricsReport(
        accuracy=accuracy(batch),
        nll=nll(batch),
        brier=brier(batch),
        ece=ece(batch, num_bins),
        mean_entropy=float(predictive_entropy(batch.probs).mean()),
        num_bins=num_bins,
        mean_expected_entropy=float(expected_entropy(batch.per_sample_probs).mean()) if bayes else None,
        mean_mutual_information=float(mutual_information(batch.per_sample_probs).mean()) if bayes else None,
    )
