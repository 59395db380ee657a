"""Adam, the IVON variational optimizer, mean-field KL/ELBO and model averaging.

IVON keeps a diagonal Gaussian ``N(mu, diag(sigma^2))`` with
``sigma_j = 1 / sqrt(ess * (h_j + wd))``. One step, given the minibatch
mean gradient ``g`` at a sample ``theta = mu + sigma * eps``::

    h_hat = g * (theta - mu) * ess * (h + wd)
    g_mom = beta1 * g_mom + (1 - beta1) * g
    h     = max(0, beta2 * h + (1 - beta2) * h_hat
                   + 0.5 * (1 - beta2)**2 * (h - h_hat)**2 / (h + wd))
    t     = t + 1
    mu    = mu - lr * (g_mom / (1 - beta1**t) + wd * mu) / (h + wd)
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .core_math import NumericalError, RngStream, softmax
from .metrics import PredictiveBatch
from .snn import Architecture, BatchNormState, eval_logits_multi


def _check_dims(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale ``grad`` to global norm ``max_norm`` if larger; ``max_norm <= 0`` disables."""
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(dim: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(dim), np.zeros(dim), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam step; returns ``(new_state, new_params)``."""
    _check_dims(state.m, params, grad)
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), new_params


# ---------------------------------------------------------------------------
# IVON
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IvonPosterior:
    mu: np.ndarray
    h: np.ndarray
    g_mom: np.ndarray
    ess: float
    wd: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99999
    lr: float = 0.1
    t: int = 0

    @property
    def sigma(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.ess * (self.h + self.wd))

    @property
    def prior_precision(self) -> float:
        return self.ess * self.wd


def ivon_init(mu0: np.ndarray, ess: float, wd: float = 1e-5, h0: float = 1.0, lr: float = 0.1,
              beta1: float = 0.9, beta2: float = 0.99999) -> IvonPosterior:
    if ess <= 0:
        raise ValueError("ess must be positive")
    if h0 < 0 or h0 + wd <= 0:
        raise ValueError("need h0 >= 0 and h0 + wd > 0")
    mu0 = np.asarray(mu0, dtype=np.float64).copy()
    return IvonPosterior(mu0, np.full_like(mu0, h0), np.zeros_like(mu0), float(ess), wd, beta1, beta2, lr)


def ivon_sample(post: IvonPosterior, rng: RngStream):
    """Draw ``theta = mu + sigma * eps``; returns ``(theta, eps)``."""
    eps = rng.normal(post.mu.shape)
    return post.mu + post.sigma * eps, eps


def ivon_step(post: IvonPosterior, grad: np.ndarray, theta: np.ndarray) -> IvonPosterior:
    """Update mean, curvature and momentum from gradient(s) at posterior sample(s).

    ``grad`` and ``theta`` are (D,) for one sample or (S, D) for several; with
    several samples the gradient and curvature estimates are averaged.
    """
    grad = np.asarray(grad, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    _check_dims(grad, theta)
    if grad.shape[-1:] != post.mu.shape:
        raise ValueError(f"dimension mismatch: grad {grad.shape} vs posterior {post.mu.shape}")
    if not np.isfinite(grad).all():
        raise NumericalError("non-finite gradient passed to ivon_step")
    grad2 = grad.reshape(-1, post.mu.size)
    theta2 = theta.reshape(-1, post.mu.size)
    g = grad2.mean(axis=0)
    h_hat = np.mean(grad2 * (theta2 - post.mu), axis=0) * post.ess * (post.h + post.wd)

    b1, b2 = post.beta1, post.beta2
    g_mom = b1 * post.g_mom + (1 - b1) * g
    h = b2 * post.h + (1 - b2) * h_hat + 0.5 * (1 - b2) ** 2 * (post.h - h_hat) ** 2 / (post.h + post.wd)
    h = np.maximum(h, 0.0)
    t = post.t + 1
    g_bar = g_mom / (1 - b1 ** t)
    mu = post.mu - post.lr * (g_bar + post.wd * post.mu) / (h + post.wd)
    if not (np.isfinite(mu).all() and np.isfinite(h).all()):
        raise NumericalError("ivon_step produced non-finite state")
    return replace(post, mu=mu, h=h, g_mom=g_mom, t=t)


# ---------------------------------------------------------------------------
# Mean-field Gaussian: KL and ELBO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MfviPosterior:
    """Plain reparameterised mean-field Gaussian with an isotropic prior."""

    mu: np.ndarray
    log_sigma: np.ndarray
    prior_precision: float = 1.0

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


def mfvi_sample(post: MfviPosterior, rng: RngStream):
    eps = rng.normal(post.mu.shape)
    return post.mu + post.sigma * eps, eps


def kl_diag_gaussian(mu, sigma2, lam: float) -> float:
    """``KL(N(mu, diag(sigma2)) || N(0, I/lam))`` in closed form."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    _check_dims(mu, sigma2)
    if not lam > 0:
        raise ValueError("prior precision must be positive")
    if not np.all(sigma2 > 0):
        raise ValueError("variances must be positive")
    return float(0.5 * np.sum(lam * (mu * mu + sigma2) - np.log(lam * sigma2) - 1.0))


def elbo_estimate(post, log_likelihood: Callable[[np.ndarray], float], batch_size: int, S: int,
                  N: int, rng: RngStream) -> float:
    """Monte Carlo ELBO with the minibatch log-likelihood scaled to ``N`` examples.

    ``log_likelihood(theta)`` returns the summed log-likelihood of the
    ``batch_size`` examples of the minibatch at parameters ``theta``.
    """
    if S < 1:
        raise ValueError("need at least one Monte Carlo sample")
    mu, sigma, lam = post.mu, post.sigma, post.prior_precision
    total = 0.0
    for s in range(S):
        theta = mu + sigma * rng.split("elbo", s).normal(mu.shape)
        total += log_likelihood(theta)
    return (N / batch_size) * total / S - kl_diag_gaussian(mu, sigma ** 2, lam)


def mfvi_elbo_grad(post: MfviPosterior, grad_log_likelihood: Callable[[np.ndarray], np.ndarray],
                   batch_size: int, N: int, rng: RngStream):
    """Single-sample reparameterised ELBO gradient w.r.t. ``(mu, log_sigma)``."""
    theta, eps = mfvi_sample(post, rng)
    g = (N / batch_size) * grad_log_likelihood(theta)
    lam = post.prior_precision
    sigma = post.sigma
    d_mu = g - lam * post.mu
    d_log_sigma = g * eps * sigma - (lam * sigma ** 2 - 1.0)
    return d_mu, d_log_sigma


# ---------------------------------------------------------------------------
# Bayesian model averaging
# ---------------------------------------------------------------------------


def bayesian_model_average(post: IvonPosterior, arch: Architecture, bn_states: list[BatchNormState],
                           x, S: int, rng: RngStream, labels=None, chunk: int = 64) -> PredictiveBatch:
    """Average eval-mode softmax outputs over ``S`` posterior samples.

    Sample ``s`` is drawn from ``rng.split("bma", s)``.
    """
    if S < 1:
        raise ValueError("need at least one posterior sample")
    x = np.asarray(x, dtype=np.float64)
    thetas = np.stack([ivon_sample(post, rng.split("bma", s))[0] for s in range(S)])
    per_sample = np.empty((S, x.shape[0], arch.num_classes))
    for i in range(0, x.shape[0], chunk):
        per_sample[:, i:i + chunk] = softmax(eval_logits_multi(arch, thetas, bn_states, x[i:i + chunk]), axis=-1)
    labels = np.zeros(x.shape[0], dtype=np.int64) if labels is None else np.asarray(labels)
    return PredictiveBatch(per_sample.mean(axis=0), labels, per_sample)
