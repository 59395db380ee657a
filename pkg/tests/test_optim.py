import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snnbayes.core_math import NumericalError, RngStream, log_softmax
from snnbayes.optim import (MfviPosterior, adam_init, adam_step, bayesian_model_average, clip_grad_norm,
                            elbo_estimate, ivon_init, ivon_sample, ivon_step, kl_diag_gaussian,
                            mfvi_elbo_grad)
from snnbayes.snn import Architecture, flatten, init_bn_states, init_params, network_forward, unflatten

import oracles


def run_ivon_quadratic(a=2.0, ess=1000.0, wd=1e-3, lr=0.05, steps=5000, beta2=0.999, samples=4, seed=0):
    """IVON on the per-example NLL a*theta^2/2 from mu=1, h0=1."""
    post = ivon_init(np.array([1.0]), ess=ess, wd=wd, h0=1.0, lr=lr, beta2=beta2)
    rng = RngStream(seed)
    for k in range(steps):
        theta = post.mu + post.sigma * rng.split("quadratic", k).normal((samples, 1))
        post = ivon_step(post, a * theta, theta)
    return post


# Adam -------------------------------------------------------------------


def test_adam_zero_grad_first_step():
    state = adam_init(3)
    params = np.array([1.0, -2.0, 3.0])
    state, new = adam_step(state, params, np.zeros(3))
    assert np.array_equal(new, params) and state.t == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -4.0])
    state = adam_init(2, lr=0.01)
    _, new = adam_step(state, np.zeros(2), g)
    np.testing.assert_allclose(new, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_quadratic():
    state, theta = adam_init(1, lr=0.1), np.array([1.0])
    for _ in range(2000):
        state, theta = adam_step(state, theta, theta)
    assert abs(theta[0]) < 1e-3


def test_adam_matches_reference_recurrence():
    rng = RngStream(1)
    state, theta = adam_init(4, lr=0.05), rng.normal(4)
    m = v = np.zeros(4)
    ref = theta.copy()
    for t in range(1, 30):
        g = rng.normal(4)
        state, theta = adam_step(state, theta, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(theta, ref, rtol=1e-12)
    assert state.t == 29 and np.all(state.v >= 0)


def test_adam_dim_mismatch():
    with pytest.raises(ValueError):
        adam_step(adam_init(3), np.zeros(3), np.zeros(2))


def test_clip_grad_norm():
    g = np.array([3.0, 4.0])
    np.testing.assert_allclose(clip_grad_norm(g, 1.0), [0.6, 0.8])
    assert clip_grad_norm(g, 0.0) is g


# IVON -------------------------------------------------------------------


def test_ivon_sigma_example():
    post = ivon_init(np.zeros(1), ess=100, wd=1e-2, h0=0.0)
    assert post.sigma[0] == pytest.approx(1.0)


def test_ivon_sample_large_h_collapses_to_mean():
    post = ivon_init(np.ones(5), ess=10, h0=1e20)
    theta, _ = ivon_sample(post, RngStream(0))
    np.testing.assert_allclose(theta, post.mu, atol=1e-9)


def test_ivon_sample_reproducible_and_variance():
    post = ivon_init(np.zeros(3), ess=10.0, wd=0.0, h0=1.0)
    post = ivon_init(np.zeros(3), ess=10.0, wd=1e-3)
    post = type(post)(post.mu, np.array([0.5, 2.0, 8.0]), post.g_mom, post.ess, post.wd)
    a, eps = ivon_sample(post, RngStream(4))
    b, _ = ivon_sample(post, RngStream(4))
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, post.mu + post.sigma * eps)
    draws = np.stack([ivon_sample(post, RngStream(1).split(i))[0] for i in range(10**5)])
    np.testing.assert_allclose(draws.var(axis=0), post.sigma ** 2, rtol=0.03)


def test_ivon_zero_gradient_contracts_mean():
    post = ivon_init(np.array([2.0, -1.0]), ess=50.0, wd=1e-3, h0=0.4, lr=0.1)
    new = ivon_step(post, np.zeros(2), post.mu)  # theta = mu gives h_hat = 0
    expected_h = 0.99999 * 0.4 + 0.5 * (1 - 0.99999) ** 2 * 0.4 ** 2 / (0.4 + 1e-3)
    np.testing.assert_allclose(new.h, expected_h, rtol=1e-12)
    np.testing.assert_allclose(new.mu, post.mu * (1 - 0.1 * 1e-3 / (new.h + 1e-3)), rtol=1e-12)
    assert new.t == 1


def test_ivon_step_matches_written_update():
    rng = RngStream(2)
    post = ivon_init(rng.normal(6), ess=30.0, wd=1e-2, h0=0.7, lr=0.2, beta1=0.8, beta2=0.95)
    for k in range(5):
        theta, eps = ivon_sample(post, rng.split(k))
        g = rng.split("g", k).normal(6)
        h_hat = g * eps / post.sigma
        g_mom = 0.8 * post.g_mom + 0.2 * g
        h = 0.95 * post.h + 0.05 * h_hat + 0.5 * 0.05 ** 2 * (post.h - h_hat) ** 2 / (post.h + 1e-2)
        h = np.maximum(h, 0)
        mu = post.mu - 0.2 * (g_mom / (1 - 0.8 ** (k + 1)) + 1e-2 * post.mu) / (h + 1e-2)
        post = ivon_step(post, g, theta)
        np.testing.assert_allclose(post.h, h, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(post.mu, mu, rtol=1e-10)


@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_ivon_adversarial_curvature_clamped(seed, scale):
    rng = RngStream(seed)
    post = ivon_init(np.zeros(4), ess=1.0, wd=1e-4, h0=1e-3, beta2=0.5)
    theta = post.mu + post.sigma * rng.normal(4)
    grad = -scale * np.sign(theta - post.mu) * rng.uniform(4)
    new = ivon_step(post, grad, theta)
    assert np.all(new.h >= 0) and np.all(np.isfinite(new.sigma)) and np.all(new.sigma > 0)


def test_ivon_rejects_non_finite_gradient():
    post = ivon_init(np.zeros(2), ess=1.0)
    with pytest.raises(NumericalError):
        ivon_step(post, np.array([np.nan, 0.0]), post.mu)
    with pytest.raises(ValueError):
        ivon_step(post, np.zeros(3), np.zeros(3))


def test_ivon_quadratic_oracle():
    a, ess, wd = 2.0, 1000.0, 1e-3
    post = run_ivon_quadratic(a, ess, wd)
    assert abs(post.mu[0]) < 1e-2
    assert abs(post.h[0] - a) < 0.2
    assert abs(post.sigma[0] / (1 / math.sqrt(ess * (a + wd))) - 1) < 0.1


def test_ivon_is_deterministic():
    a = run_ivon_quadratic(steps=50)
    b = run_ivon_quadratic(steps=50)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.h, b.h)


# KL / ELBO ---------------------------------------------------------------


def test_kl_examples():
    assert kl_diag_gaussian(np.zeros(4), np.full(4, 0.5), 2.0) == pytest.approx(0.0, abs=1e-12)
    assert kl_diag_gaussian(np.ones(1), np.ones(1), 1.0) == pytest.approx(0.5, abs=1e-15)
    expected = 0.5 * (2 - math.log(2) - 1)
    assert kl_diag_gaussian(np.zeros(1), np.ones(1), 2.0) == pytest.approx(expected, abs=1e-12)
    assert oracles.kl_quadrature_1d(0.0, 1.0, 2.0) == pytest.approx(0.153426, abs=1e-6)


@given(st.floats(-3, 3), st.floats(0.01, 10), st.floats(0.01, 10))
def test_kl_matches_quadrature(mu, sigma2, lam):
    assert kl_diag_gaussian([mu], [sigma2], lam) == pytest.approx(oracles.kl_quadrature_1d(mu, sigma2, lam),
                                                                  abs=1e-6)


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.01, 10)), min_size=1, max_size=6),
       st.floats(0.01, 10))
def test_kl_non_negative_and_zero_only_at_prior(pairs, lam):
    mu, s2 = map(np.array, zip(*pairs))
    kl = kl_diag_gaussian(mu, s2, lam)
    assert kl >= 0
    at_prior = np.allclose(mu, 0, atol=1e-6) and np.allclose(s2 * lam, 1, atol=1e-6)
    assert (kl < 1e-10) == at_prior or (kl < 1e-9 and at_prior)


def test_kl_rejects_invalid():
    with pytest.raises(ValueError):
        kl_diag_gaussian([0.0], [0.0], 1.0)
    with pytest.raises(ValueError):
        kl_diag_gaussian([0.0], [1.0], 0.0)


def _logistic_problem():
    rng = RngStream(3)
    x = rng.normal((8, 2))
    y = (x[:, 0] > 0).astype(int)

    def loglik(theta):
        z = np.stack([np.zeros(8), x @ theta], axis=1)
        return float(log_softmax(z, axis=1)[np.arange(8), y].sum())

    return loglik


def test_elbo_converges_with_samples():
    loglik = _logistic_problem()
    post = MfviPosterior(np.array([1.0, -0.5]), np.log(np.array([0.3, 0.2])), 1.0)
    spread = {}
    for S in (1, 16, 256):
        vals = [elbo_estimate(post, loglik, 8, S, 100, RngStream(r)) for r in range(40)]
        spread[S] = np.std(vals)
    assert spread[16] < spread[1] / 2 and spread[256] < spread[16] / 2
    # the S=256 estimates cluster around a common value
    assert spread[256] / np.sqrt(40) < 0.05 * spread[1]


def test_elbo_point_limit_diverges():
    loglik = _logistic_problem()
    mu = np.array([0.8, 0.1])
    prev = None
    for sigma in (1e-1, 1e-2, 1e-3, 1e-4):
        post = MfviPosterior(mu, np.log(np.full(2, sigma)), 1.0)
        value = elbo_estimate(post, loglik, 8, 4, 8, RngStream(0))
        kl = kl_diag_gaussian(mu, np.full(2, sigma ** 2), 1.0)
        if sigma <= 1e-3:
            assert value == pytest.approx(loglik(mu) - kl, abs=1e-2)
        if prev is not None:
            assert value < prev
        prev = value


def test_mfvi_gradient_is_unbiased_on_quadratic():
    # the per-draw standard errors are about 0.006, so 0.03 is five of them
    post = MfviPosterior(np.array([0.5]), np.log(np.array([0.4])), 2.0)
    d_mu, d_ls = [], []
    for r in range(4000):
        g_mu, g_ls = mfvi_elbo_grad(post, lambda th: -th, 1, 1, RngStream(r))
        d_mu.append(g_mu[0])
        d_ls.append(g_ls[0])
    # ELBO = -(mu^2 + s^2)/2 - KL; d/dmu = -mu - lam mu, d/dlog s = -s^2 - (lam s^2 - 1)
    s2 = 0.16
    assert np.mean(d_mu) == pytest.approx(-0.5 - 2 * 0.5, abs=0.03)
    assert np.mean(d_ls) == pytest.approx(-s2 - (2 * s2 - 1), abs=0.03)


# model averaging ---------------------------------------------------------


@pytest.fixture(scope="module")
def net():
    arch = Architecture(3, 4, hidden=(6, 5))
    params = init_params(arch, RngStream(5))
    x = RngStream(6).normal((7, 9, 3)) * 1.5
    return arch, params, init_bn_states(arch, frozen=True), x


def test_bma_single_sample_is_one_forward(net):
    arch, params, bn, x = net
    post = ivon_init(flatten(params), ess=50.0)
    batch = bayesian_model_average(post, arch, bn, x, 1, RngStream(2))
    theta, _ = ivon_sample(post, RngStream(2).split("bma", 0))
    logits, _ = network_forward(arch, unflatten(theta, arch), bn, x, "eval")
    np.testing.assert_allclose(batch.probs, np.exp(log_softmax(logits, axis=1)), atol=1e-12)


def test_bma_degenerate_posterior_equals_mean_prediction(net):
    arch, params, bn, x = net
    post = ivon_init(flatten(params), ess=50.0, h0=1e30)
    logits, _ = network_forward(arch, params, bn, x, "eval")
    for S in (1, 5):
        batch = bayesian_model_average(post, arch, bn, x, S, RngStream(0))
        np.testing.assert_allclose(batch.probs, np.exp(log_softmax(logits, axis=1)), atol=1e-12)


def test_bma_outputs_valid_probabilities(net):
    arch, params, bn, x = net
    post = ivon_init(flatten(params), ess=5.0)
    batch = bayesian_model_average(post, arch, bn, x, 6, RngStream(1), chunk=3)
    np.testing.assert_allclose(batch.probs.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(batch.probs, batch.per_sample_probs.mean(axis=0), atol=1e-12)
    assert batch.per_sample_probs.shape == (6, 7, 4)
