"""Seeded random streams and numerically stable probability helpers.

Every random quantity in the package is drawn from an :class:`RngStream`,
a Philox4x64 counter-based generator keyed by ``(seed, stream_id)``.
Child streams are derived with :meth:`RngStream.split`, so the draws used
for a given epoch, minibatch or Monte Carlo sample depend only on their
address and never on evaluation order.

Draw accounting (fixed, so runs are bit-reproducible):

* one uniform variate consumes one raw 64-bit word;
* one Gaussian variate consumes exactly two raw words (Box-Muller, cosine
  branch only; the sine branch is discarded).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def _key_word(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    if isinstance(key, str):
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


class RngStream:
    """A reproducible random stream addressed by ``(seed, stream_id)``.

    The address is immutable; drawing advances the internal counter.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def split(self, *keys) -> "RngStream":
        """Derive an independent child stream from this address and ``keys``.

        The child does not depend on how many draws this stream has made.
        """
        entropy = [self.seed, self.stream_id] + [_key_word(k) for k in keys]
        child = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
        return RngStream(self.seed, int(child))

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n))

    def uniform(self, size=()) -> np.ndarray:
        """Uniform variates on (0, 1], 53-bit resolution."""
        n = int(np.prod(size, dtype=np.int64))
        words = self.raw(n)
        u = ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        return u.reshape(size)

    def normal(self, size=()) -> np.ndarray:
        """Standard normal variates via Box-Muller, two raw words each."""
        n = int(np.prod(size, dtype=np.int64))
        words = self.raw(2 * n)
        u = ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        z = np.sqrt(-2.0 * np.log(u[0::2])) * np.cos(2.0 * np.pi * u[1::2])
        return z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def gaussian_sample(rng: RngStream, mean: float, std: float) -> float:
    """Return ``mean + std * eps`` with ``eps`` standard normal (two raw draws)."""
    if not std >= 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return float(mean + std * rng.normal())


def _check_finite_input(values: np.ndarray) -> None:
    if np.isnan(values).any():
        raise ValueError("input contains NaN")


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    _check_finite_input(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    _check_finite_input(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_mean_exp(values, axis: int = -1) -> np.ndarray:
    """``log(mean(exp(values)))`` along ``axis``, shifted by the maximum."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_mean_exp of an empty vector")
    _check_finite_input(v)
    m = v.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.mean(np.exp(v - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)
