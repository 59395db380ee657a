"""Synthetic sequence data, the SNNFEAT feature-file format and minibatching.

Feature-file format, version 1 (plain text, one record per line)::

    SNNFEAT v1 N T F C [splits]
    [split] label v_1 v_2 ... v_{T*F}

Values are frame-major (all F channels of frame 1, then frame 2, ...).
When the optional ``splits`` token is present every record starts with a
split tag (``train``, ``val`` or ``test``). Untagged files get a stratified
80/20 train/test split drawn with ``split_seed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core_math import RngStream

SPLITS = ("train", "val", "test")
_HEADER_MAGIC = "SNNFEAT"
_FORMAT_VERSION = "v1"


class ParseError(ValueError):
    """A feature file does not conform to the SNNFEAT format."""


class FeatureSequence(NamedTuple):
    features: np.ndarray  # (T, F)
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Fixed-shape sequence dataset.

    ``features`` has shape (N, T, F); ``split`` holds one tag per example,
    indexing into :data:`SPLITS`.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ValueError("features must have shape (N, T, F)")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValueError("labels/split length does not match features")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> FeatureSequence:
        return FeatureSequence(self.features[i], int(self.labels[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split, other.split)
        )

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]

    @property
    def num_features(self) -> int:
        return self.features.shape[2]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split))

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]

    def has_split(self, split: str) -> bool:
        return bool(np.any(self.split == SPLITS.index(split)))


def class_templates(num_classes: int, T: int, F: int, amplitude: float = 0.2,
                    offset: float = 0.05) -> np.ndarray:
    """Noise-free class templates, shape (C, T, F).

    Class ``k`` is a sum of two sinusoids with ``k+1`` and ``k+1+C`` whole
    cycles over the window, with class- and channel-dependent phases, plus a
    constant level on its channel group (channels ``c`` with ``c % C == k``)
    and a small class ramp. Whole cycles average to zero over the window, so
    the time-averaged signature of class ``k`` is its level pattern, which is
    pairwise distinct across classes.
    """
    t = np.arange(T, dtype=np.float64)[:, None]
    c = np.arange(F, dtype=np.float64)[None, :]
    out = np.empty((num_classes, T, F))
    for k in range(num_classes):
        f1 = (k + 1) / T
        f2 = (k + 1 + num_classes) / T
        phase = 2.0 * np.pi * k / num_classes + np.pi * c / F
        wave = np.sin(2.0 * np.pi * f1 * t + phase) + 0.5 * np.sin(2.0 * np.pi * f2 * t + 2.0 * phase)
        level = offset * ((np.arange(F) % num_classes) == k) + 0.25 * offset * k / (num_classes - 1)
        out[k] = amplitude * wave + level[None, :]
    return out


def _stratified_counts(n: int) -> tuple[int, int, int]:
    n_val = max(1, math.floor(0.1 * n + 0.5))
    n_test = max(1, math.floor(0.2 * n + 0.5))
    return n - n_val - n_test, n_val, n_test


def gen_synthetic(num_classes: int = 5, per_class: int = 200, T: int = 100, F: int = 20,
                  noise_std: float = 0.5, seed: RngStream | int = 0,
                  amplitude: float = 0.2, offset: float = 0.05) -> Dataset:
    """Template-plus-Gaussian-noise dataset with a stratified 70/10/20 split."""
    if num_classes < 2 or T < 4 or F < 2 or noise_std < 0:
        raise ValueError("need num_classes >= 2, T >= 4, F >= 2, noise_std >= 0")
    if per_class < 5:
        raise ValueError("per_class must be at least 5 so every split is non-empty")
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    templates = class_templates(num_classes, T, F, amplitude, offset)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.split("noise").normal((n, T, F))
    features = templates[labels] + noise_std * noise

    split = np.empty(n, dtype=np.int8)
    n_train, n_val, _ = _stratified_counts(per_class)
    split_rng = rng.split("split")
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)[split_rng.permutation(per_class)]
        split[idx[:n_train]] = 0
        split[idx[n_train:n_train + n_val]] = 1
        split[idx[n_train + n_val:]] = 2
    return Dataset(features, labels, num_classes, split)


def normalize(dataset: Dataset) -> Dataset:
    """Per-channel z-scoring with statistics from the train split only."""
    train = dataset.features[dataset.indices("train")]
    mean = train.mean(axis=(0, 1))
    std = train.std(axis=(0, 1))
    std = np.where(std > 0, std, 1.0)
    return Dataset((dataset.features - mean) / std, dataset.labels, dataset.num_classes, dataset.split)


def save_features(dataset: Dataset, path, with_splits: bool = True) -> None:
    n, T, F = dataset.features.shape
    header = f"{_HEADER_MAGIC} {_FORMAT_VERSION} {n} {T} {F} {dataset.num_classes}"
    lines = [header + (" splits" if with_splits else "")]
    flat = dataset.features.reshape(n, T * F)
    for i in range(n):
        prefix = f"{SPLITS[dataset.split[i]]} " if with_splits else ""
        lines.append(prefix + str(int(dataset.labels[i])) + " " + " ".join(map(repr, flat[i].tolist())))
    Path(path).write_text("\n".join(lines) + "\n")


def load_features(path, split_seed: int = 0) -> Dataset:
    """Parse an SNNFEAT v1 file; errors name the offending line."""
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text file ({exc})") from None
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: line 1: empty file")
    head = lines[0].split()
    if len(head) not in (6, 7) or head[0] != _HEADER_MAGIC or head[1] != _FORMAT_VERSION:
        raise ParseError(f"{path}: line 1: expected '{_HEADER_MAGIC} {_FORMAT_VERSION} N T F C [splits]'")
    if len(head) == 7 and head[6] != "splits":
        raise ParseError(f"{path}: line 1: unknown header flag {head[6]!r}")
    try:
        n, T, F, C = (int(v) for v in head[2:6])
    except ValueError:
        raise ParseError(f"{path}: line 1: non-integer dimension in header") from None
    if n < 1 or T < 1 or F < 1 or C < 2:
        raise ParseError(f"{path}: line 1: invalid dimensions N={n} T={T} F={F} C={C}")
    tagged = len(head) == 7
    records = [ln for ln in lines[1:]]
    while records and not records[-1].strip():
        records.pop()
    if len(records) != n:
        raise ParseError(f"{path}: line {len(records) + 2}: expected {n} records, found {len(records)}")

    width = T * F + 1 + int(tagged)
    features = np.empty((n, T * F))
    labels = np.empty(n, dtype=np.int64)
    split = np.zeros(n, dtype=np.int8)
    for i, line in enumerate(records):
        lineno = i + 2
        tokens = line.split()
        if len(tokens) != width:
            raise ParseError(f"{path}: line {lineno}: expected {width} fields, found {len(tokens)}")
        if tagged:
            tag = tokens.pop(0)
            if tag not in SPLITS:
                raise ParseError(f"{path}: line {lineno}: unknown split tag {tag!r}")
            split[i] = SPLITS.index(tag)
        try:
            label = int(tokens[0])
            values = np.array(tokens[1:], dtype=np.float64)
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: malformed number") from None
        if not 0 <= label < C:
            raise ParseError(f"{path}: line {lineno}: label {label} outside [0, {C})")
        if not np.isfinite(values).all():
            raise ParseError(f"{path}: line {lineno}: non-finite feature value")
        labels[i] = label
        features[i] = values

    if not tagged:
        split_rng = RngStream(split_seed).split("file-split")
        for k in range(C):
            idx = np.flatnonzero(labels == k)
            if idx.size == 0:
                continue
            idx = idx[split_rng.permutation(idx.size)]
            n_test = math.floor(0.2 * idx.size + 0.5) if idx.size > 1 else 0
            split[idx[:idx.size - n_test]] = 0
            split[idx[idx.size - n_test:]] = 2
    return Dataset(features.reshape(n, T, F), labels, C, split)


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int
    epoch: int = 0


def batches(dataset: Dataset, plan: BatchPlan, split: str = "train") -> list[np.ndarray]:
    """Shuffle a split with a permutation keyed by ``(seed, epoch)`` and chunk it."""
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    if not 1 <= plan.batch_size <= idx.size:
        raise ValueError(f"batch size {plan.batch_size} must be in [1, {idx.size}]")
    order = idx[RngStream(plan.seed).split("batches", split, plan.epoch).permutation(idx.size)]
    return [order[i:i + plan.batch_size] for i in range(0, idx.size, plan.batch_size)]
