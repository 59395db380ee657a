"""One-dimensional weight-space slices of the loss and a roughness statistic.

A slice evaluates the loss at ``theta + alpha * d`` on a uniform grid of
``alpha`` for a fixed unit direction ``d`` and a fixed set of examples.
All evaluations run in eval mode: no dropout, batch norm on running
statistics.

For the Bayesian slice the posterior mean is translated and the variances
are held fixed. Its Monte Carlo noise comes from one of two schemes:

``common`` (default)
    sample ``s`` uses ``eps_s`` drawn from ``(seed, s)`` at every grid point
    (common random numbers), so ``theta_s(alpha) = mu + alpha d + sigma eps_s``.
``independent``
    fresh noise per grid point, drawn from ``(seed, alpha index, s)``.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core_math import RngStream, log_mean_exp, log_softmax
from .optim import IvonPosterior
from .snn import Architecture, BatchNormState, cross_entropy, eval_logits_multi, network_forward, unflatten

NOISE_SCHEMES = ("common", "independent")


@dataclass(frozen=True)
class SliceSpec:
    direction_seed: int = 0
    alpha_min: float = -1.0
    alpha_max: float = 1.0
    num_points: int = 201
    batch_ids: tuple[int, ...] = (0,)
    mc_samples: int = 20
    noise: str = "common"

    def __post_init__(self):
        object.__setattr__(self, "batch_ids", tuple(int(b) for b in self.batch_ids))
        if not self.alpha_min < 0 < self.alpha_max:
            raise ValueError("need alpha_min < 0 < alpha_max")
        if self.num_points < 3 or self.num_points % 2 == 0:
            raise ValueError("num_points must be odd and at least 3")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if self.noise not in NOISE_SCHEMES:
            raise ValueError(f"noise must be one of {NOISE_SCHEMES}")

    def grid(self) -> np.ndarray:
        """Uniform grid; a symmetric range gives an exactly mirrored grid with 0 at the centre."""
        alphas = np.linspace(self.alpha_min, self.alpha_max, self.num_points)
        if self.alpha_min == -self.alpha_max:
            mid = self.num_points // 2
            alphas[mid] = 0.0
            alphas[:mid] = -alphas[:mid:-1]
        return alphas


@dataclass(frozen=True, eq=False)
class SliceResult:
    alphas: np.ndarray
    losses: np.ndarray
    kind: str
    roughness: float
    direction_norm: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("alpha,loss\n")
        for a, l in zip(self.alphas, self.losses):
            buf.write(f"{a:.17g},{l:.17g}\n")
        return buf.getvalue()


def make_direction(dim: int, rng: RngStream) -> np.ndarray:
    """Gaussian direction normalised to unit Euclidean norm."""
    if dim < 1:
        raise ValueError("dim must be at least 1")
    d = rng.normal(dim)
    return d / np.linalg.norm(d)


def roughness(losses, alphas=None) -> float:
    """Mean absolute second difference divided by the squared grid step.

    Accepts a :class:`SliceResult` or a loss array plus its uniform grid.
    """
    if isinstance(losses, SliceResult):
        losses, alphas = losses.losses, losses.alphas
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 3:
        raise ValueError("roughness needs at least three points")
    step = 1.0 if alphas is None else (alphas[-1] - alphas[0]) / (len(alphas) - 1)
    second = losses[2:] - 2.0 * losses[1:-1] + losses[:-2]
    return float(np.mean(np.abs(second)) / step ** 2)


def _map(fn, items, n_jobs: int):
    if n_jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def _check_direction(direction, dim: int) -> np.ndarray:
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (dim,):
        raise ValueError(f"direction must have length {dim}")
    return direction


def _sample_log_probs(arch, thetas, bn_states, x, y):
    """True-class log-probabilities, shape (S, B), for parameter rows ``thetas``."""
    logp = log_softmax(eval_logits_multi(arch, thetas, bn_states, x), axis=-1)
    return logp[:, np.arange(len(y)), y]


def deterministic_slice(theta_hat, spec: SliceSpec, x, y, arch: Architecture,
                        bn_states: list[BatchNormState], direction=None, n_jobs: int = 1) -> SliceResult:
    """Mean cross-entropy on ``(x, y)`` along ``theta_hat + alpha * d``.

    ``direction`` defaults to ``make_direction`` seeded by ``spec.direction_seed``.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    if theta_hat.shape != (arch.num_params,):
        raise ValueError(f"theta_hat must have length {arch.num_params}")
    d = default_direction(spec, arch) if direction is None else _check_direction(direction, arch.num_params)
    alphas = spec.grid()
    y = np.asarray(y)

    def point(i):
        logits, _ = network_forward(arch, unflatten(theta_hat + alphas[i] * d, arch), bn_states, x, "eval")
        return float(cross_entropy(logits, y).mean())

    losses = np.array(_map(point, range(len(alphas)), n_jobs))
    return SliceResult(alphas, losses, "deterministic", roughness(losses, alphas), float(np.linalg.norm(d)))


def default_direction(spec: SliceSpec, arch: Architecture) -> np.ndarray:
    return make_direction(arch.num_params, RngStream(spec.direction_seed).split("direction"))


def slice_noise(spec: SliceSpec, dim: int, alpha_index: int, sample: int) -> np.ndarray:
    root = RngStream(spec.direction_seed).split("slice-noise")
    if spec.noise == "common":
        return root.split(sample).normal(dim)
    return root.split(alpha_index, sample).normal(dim)


def bayesian_slice(post: IvonPosterior, spec: SliceSpec, x, y, arch: Architecture,
                   bn_states: list[BatchNormState], direction=None, n_jobs: int = 1,
                   eps=None) -> SliceResult:
    """Bayesian predictive loss ``-log mean_s p(y | x, theta_s(alpha))`` along the slice.

    ``eps`` optionally injects fixed standard-normal noise of shape
    ``(mc_samples, D)`` in place of the seeded draws (used by tests).
    """
    D = arch.num_params
    d = default_direction(spec, arch) if direction is None else _check_direction(direction, D)
    alphas = spec.grid()
    y = np.asarray(y)
    S = spec.mc_samples
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (S, D):
            raise ValueError(f"eps must have shape ({S}, {D})")
    sigma = post.sigma
    if eps is None and spec.noise == "common":
        eps = np.stack([slice_noise(spec, D, 0, s) for s in range(S)])

    def point(i):
        noise = eps if eps is not None else np.stack([slice_noise(spec, D, i, s) for s in range(S)])
        logp = _sample_log_probs(arch, post.mu + alphas[i] * d + sigma * noise, bn_states, x, y)
        return float(-np.mean(log_mean_exp(logp, axis=0)))

    losses = np.array(_map(point, range(len(alphas)), n_jobs))
    return SliceResult(alphas, losses, "bayesian", roughness(losses, alphas), float(np.linalg.norm(d)))


def bayesian_slice_stderr(post: IvonPosterior, spec: SliceSpec, x, y, arch: Architecture,
                          bn_states: list[BatchNormState], direction=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-point Bayesian loss with a delta-method Monte Carlo standard error.

    Returns ``(losses, stderr)``; the error of ``-log pbar`` for each example
    is approximated by ``std_s(p_s) / (sqrt(S) * pbar)`` and the per-example
    errors are combined as independent.
    """
    D = arch.num_params
    d = default_direction(spec, arch) if direction is None else _check_direction(direction, D)
    y = np.asarray(y)
    S = spec.mc_samples
    losses, errs = [], []
    for i, a in enumerate(spec.grid()):
        noise = np.stack([slice_noise(spec, D, i, s) for s in range(S)])
        p = np.exp(_sample_log_probs(arch, post.mu + a * d + post.sigma * noise, bn_states, x, y))
        pbar = p.mean(axis=0)
        per_example = p.std(axis=0, ddof=1) / (np.sqrt(S) * pbar) if S > 1 else np.zeros(len(y))
        losses.append(float(-np.mean(np.log(pbar))))
        errs.append(float(np.sqrt(np.sum(per_example ** 2)) / len(y)))
    return np.array(losses), np.array(errs)


def write_slice(result: SliceResult, csv_path, sidecar: dict) -> None:
    """Write the ``alpha,loss`` CSV and a JSON sidecar next to it."""
    csv_path = Path(csv_path)
    csv_path.write_text(result.to_csv())
    meta = dict(sidecar, kind=result.kind, roughness=result.roughness,
                direction_norm=result.direction_norm)
    csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_slice_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["alpha", "loss"]:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    data = np.array(rows[1:], dtype=np.float64)
    return data[:, 0], data[:, 1]


def spec_dict(spec: SliceSpec) -> dict:
    d = asdict(spec)
    d["batch_ids"] = list(spec.batch_ids)
    return d
