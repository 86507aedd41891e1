import numpy as np
import pytest

from bayesperf.mcmc import laplace, rw_metropolis


def gauss_logp(mean, cov):
    prec = np.linalg.inv(cov)

    def logp(x):
        d = x - mean
        return -0.5 * np.einsum("ni,ij,nj->n", d, prec, d)
    return logp


def test_laplace_recovers_gaussian():
    mean = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.6], [0.6, 0.5]])
    x, c = laplace(gauss_logp(mean, cov), np.zeros(2), np.array([3.0, 3.0]))
    assert np.allclose(x, mean, atol=1e-4)
    assert np.allclose(c, cov, rtol=1e-3)


def test_laplace_caps_flat_directions():
    # flat in the second coordinate: variance is capped at max(scale)^2
    def logp(x):
        return -0.5 * x[:, 0] ** 2
    _, c = laplace(logp, np.zeros(2), np.array([1.0, 2.0]))
    assert c[1, 1] == pytest.approx(4.0)


def test_rw_metropolis_moments_and_determinism():
    mean = np.array([3.0, 0.0])
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    logp = gauss_logp(mean, cov)
    res = rw_metropolis(logp, mean, np.random.default_rng(0), 20000, 64, np.eye(2), n_chains=64)
    flat = res.draws.reshape(-1, 2)
    assert np.allclose(flat.mean(axis=0), mean, atol=0.1)
    assert np.allclose(np.cov(flat, rowvar=False), cov, atol=0.15)
    assert 0.1 <= res.acceptance <= 0.6
    again = rw_metropolis(logp, mean, np.random.default_rng(0), 20000, 64, np.eye(2), n_chains=64)
    assert np.array_equal(res.draws, again.draws)


def test_warm_start_keeps_chain_count():
    logp = gauss_logp(np.zeros(1), np.eye(1))
    states = np.random.default_rng(1).normal(size=(10, 1))
    res = rw_metropolis(logp, states, np.random.default_rng(2), 100, 8, np.eye(1))
    assert res.draws.shape[1] == 10 and res.n_samples == 100
