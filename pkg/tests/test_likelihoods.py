"""Likelihood derivative identities.

Each likelihood exposes log_lik, its gradient in the residual, and the
negative Hessian in the noise matrix. The gradient and Hessian claims are
checked against finite differences of log_lik, which keeps the three
methods consistent with each other by construction.
"""

import numpy as np
import pytest

from linlaplace import (
    BernoulliLikelihood,
    CategoricalLikelihood,
    GaussianLikelihood,
    likelihood_for,
)


def _fd_residual(lik, Y, F, h=1e-6):
    """Central difference of log_lik in each output coordinate."""
    out = np.zeros_like(F, dtype=np.float64)
    for c in range(F.shape[1]):
        Fp = F.copy()
        Fp[:, c] += h
        Fm = F.copy()
        Fm[:, c] -= h
        out[:, c] = (lik.log_lik(Y, Fp) - lik.log_lik(Y, Fm)) / (2 * h)
    return out


def _fd_noise(lik, Y, F, h=1e-5):
    """Noise is minus the Hessian of log_lik in f, via FD of the residual."""
    n, c = F.shape
    out = np.zeros((n, c, c))
    for j in range(c):
        Fp = F.copy()
        Fp[:, j] += h
        Fm = F.copy()
        Fm[:, j] -= h
        out[:, :, j] = -(lik.residual(Y, Fp) - lik.residual(Y, Fm)) / (2 * h)
    return out


def _cases():
    rng = np.random.default_rng(0)
    gauss = GaussianLikelihood(noise_var=0.7)
    yg = rng.standard_normal((12, 1))
    fg = rng.standard_normal((12, 1))
    bern = BernoulliLikelihood()
    yb = rng.integers(0, 2, size=12)
    fb = rng.standard_normal((12, 1))
    cat = CategoricalLikelihood(num_classes=4)
    yc = rng.integers(0, 4, size=12)
    fc = rng.standard_normal((12, 4))
    return [(gauss, yg, fg), (bern, yb, fb), (cat, yc, fc)]


def test_residual_is_gradient_of_log_lik():
    for lik, Y, F in _cases():
        np.testing.assert_allclose(
            lik.residual(Y, F), _fd_residual(lik, Y, F), atol=1e-6
        )


def test_noise_is_negative_hessian_of_log_lik():
    for lik, Y, F in _cases():
        np.testing.assert_allclose(lik.noise(F), _fd_noise(lik, Y, F), atol=1e-5)


def test_noise_positive_semidefinite():
    for lik, _, F in _cases():
        lam = lik.noise(F)
        eig = np.linalg.eigvalsh(lam)
        assert np.all(eig > -1e-12)


def test_gaussian_closed_forms():
    lik = GaussianLikelihood(noise_var=2.0)
    y = np.array([[1.0], [0.0]])
    f = np.array([[0.5], [1.5]])
    np.testing.assert_allclose(lik.residual(y, f), (y - f) / 2.0, rtol=1e-12)
    np.testing.assert_allclose(lik.noise(f), np.full((2, 1, 1), 0.5), rtol=1e-12)


def test_bernoulli_closed_forms():
    lik = BernoulliLikelihood()
    y = np.array([1, 0])
    f = np.array([[0.3], [-1.2]])
    p = 1.0 / (1.0 + np.exp(-f[:, 0]))
    np.testing.assert_allclose(lik.residual(y, f)[:, 0], y - p, rtol=1e-12)
    np.testing.assert_allclose(lik.noise(f)[:, 0, 0], p * (1 - p), rtol=1e-12)


def test_categorical_closed_forms():
    lik = CategoricalLikelihood(num_classes=3)
    y = np.array([2, 0])
    f = np.array([[0.1, -0.4, 0.7], [1.0, 1.0, 1.0]])
    e = np.exp(f - f.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.eye(3)[y]
    np.testing.assert_allclose(lik.residual(y, f), onehot - p, rtol=1e-12)
    lam = lik.noise(f)
    expected = np.einsum("nc,cd->ncd", p, np.eye(3)) - np.einsum("nc,nd->ncd", p, p)
    np.testing.assert_allclose(lam, expected, rtol=1e-12)
    # softmax noise is singular along the all-ones direction
    np.testing.assert_allclose(lam @ np.ones(3), 0.0, atol=1e-12)


def test_predictive_mix_normalized():
    rng = np.random.default_rng(5)
    bern = BernoulliLikelihood()
    probs = bern.predictive_mix(rng.standard_normal((64, 10, 1)))
    assert probs.shape == (10, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    cat = CategoricalLikelihood(num_classes=5)
    probs = cat.predictive_mix(rng.standard_normal((64, 10, 5)))
    assert probs.shape == (10, 5)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs >= 0.0)


def test_gaussian_predictive_mix_moments():
    rng = np.random.default_rng(6)
    lik = GaussianLikelihood(noise_var=0.25)
    F = rng.standard_normal((2000, 4, 1))
    mean, var = lik.predictive_mix(F)
    np.testing.assert_allclose(mean, F.mean(axis=0), rtol=1e-12)
    # law of total variance: sample variance of the mean plus noise
    np.testing.assert_allclose(var, F.var(axis=0) + 0.25, rtol=1e-10)


def test_latent_dim_rules():
    assert BernoulliLikelihood().latent_dim(2) == 1
    assert CategoricalLikelihood(num_classes=4).latent_dim(4) == 4
    assert GaussianLikelihood().latent_dim(3) == 3
    with pytest.raises(ValueError):
        BernoulliLikelihood().latent_dim(3)
    with pytest.raises(ValueError):
        CategoricalLikelihood(num_classes=4).latent_dim(3)


def test_likelihood_for_dispatch():
    assert isinstance(likelihood_for("gaussian"), GaussianLikelihood)
    assert isinstance(likelihood_for("bernoulli", num_classes=2), BernoulliLikelihood)
    lik = likelihood_for("categorical", num_classes=6)
    assert isinstance(lik, CategoricalLikelihood)
    assert lik.latent_dim(6) == 6
    # auto picks by class count
    assert isinstance(likelihood_for("auto", num_classes=2), BernoulliLikelihood)
    assert isinstance(likelihood_for("auto", num_classes=3), CategoricalLikelihood)
    assert isinstance(likelihood_for("auto", num_classes=None), GaussianLikelihood)
    with pytest.raises(ValueError):
        likelihood_for("poisson")
