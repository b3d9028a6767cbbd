"""MAP training checks: gradient correctness, convergence, determinism."""

import numpy as np
import pytest

from linlaplace import (
    GaussianLikelihood,
    MapConfig,
    MlpNetwork,
    likelihood_for,
    log_joint,
    log_joint_grad,
    map_train,
)


def _fd_grad(net, theta, X, Y, lik, delta, h=1e-6):
    g = np.empty_like(theta)
    for p in range(theta.shape[0]):
        tp = theta.copy()
        tp[p] += h
        up = log_joint(net, tp, X, Y, lik, delta)
        tp[p] -= 2 * h
        um = log_joint(net, tp, X, Y, lik, delta)
        g[p] = (up - um) / (2 * h)
    return g


def test_log_joint_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = MlpNetwork([2, 4, 2])
    theta = net.init_params(seed=1)
    X = rng.standard_normal((10, 2))
    Y = rng.integers(0, 2, size=10)
    lik = likelihood_for("bernoulli", num_classes=2)
    # bernoulli has one latent output
    net1 = MlpNetwork([2, 4, 1])
    theta1 = net1.init_params(seed=1)
    grad = log_joint_grad(net1, theta1, X, Y, lik, 0.5)
    fd = _fd_grad(net1, theta1, X, Y, lik, 0.5)
    np.testing.assert_allclose(grad, fd, atol=1e-5)


def test_log_joint_includes_prior_normalizer():
    net = MlpNetwork([1, 1])
    theta = np.zeros(net.num_params)
    X = np.zeros((0, 1))
    Y = np.zeros((0,))
    lik = GaussianLikelihood()
    # with no data the log joint is the prior density at theta
    p = net.num_params
    for delta in (0.5, 2.0):
        expected = 0.5 * p * (np.log(delta) - np.log(2 * np.pi))
        assert log_joint(net, theta, X, Y, lik, delta) == pytest.approx(expected)


def test_linear_gaussian_map_matches_ridge_solution():
    """A linear model with Gaussian likelihood has a closed-form MAP."""
    rng = np.random.default_rng(2)
    n, d = 40, 3
    X = rng.standard_normal((n, d))
    w_true = np.array([1.0, -2.0, 0.5])
    y = X @ w_true + 0.1 * rng.standard_normal(n)
    delta, noise = 2.0, 0.04
    net = MlpNetwork([d, 1])  # single affine layer
    lik = GaussianLikelihood(noise_var=noise)
    cfg = MapConfig(learning_rate=0.05, num_steps=4000, seed=0)
    theta, trace = map_train(net, lik, X, y, delta, cfg)
    Xa = np.column_stack([X, np.ones(n)])
    closed = np.linalg.solve(Xa.T @ Xa / noise + delta * np.eye(d + 1), Xa.T @ y / noise)
    np.testing.assert_allclose(theta, closed, atol=1e-4)
    assert trace[-1][1] >= trace[0][1]


def test_map_train_deterministic():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((30, 2))
    Y = rng.integers(0, 2, size=30)
    net = MlpNetwork([2, 6, 1])
    lik = likelihood_for("bernoulli", num_classes=2)
    cfg = MapConfig(num_steps=300, seed=7, batch_size=8)
    t1, tr1 = map_train(net, lik, X, Y, 1.0, cfg)
    t2, tr2 = map_train(net, lik, X, Y, 1.0, cfg)
    np.testing.assert_array_equal(t1, t2)
    assert tr1 == tr2


def test_converge_tol_stops_early_and_matches_full_run():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((50, 2))
    Y = (X[:, 0] > 0).astype(np.int64)
    net = MlpNetwork([2, 8, 1])
    lik = likelihood_for("bernoulli", num_classes=2)
    full = MapConfig(num_steps=6000, seed=0)
    early = MapConfig(num_steps=6000, seed=0, converge_tol=1e-6)
    theta_full, trace_full = map_train(net, lik, X, Y, 5.0, full)
    theta_early, trace_early = map_train(net, lik, X, Y, 5.0, early)
    assert trace_early[-1][0] < trace_full[-1][0]
    lj_full = log_joint(net, theta_full, X, Y, lik, 5.0)
    lj_early = log_joint(net, theta_early, X, Y, lik, 5.0)
    assert abs(lj_full - lj_early) <= 1e-3 * (1.0 + abs(lj_full))


def test_learning_rate_decay_applied():
    """After a decay to a tiny rate the parameters stop moving."""
    rng = np.random.default_rng(5)
    X = rng.standard_normal((20, 2))
    Y = rng.integers(0, 2, size=20)
    net = MlpNetwork([2, 4, 1])
    lik = likelihood_for("bernoulli", num_classes=2)
    base = MapConfig(num_steps=200, seed=0)
    theta_base, _ = map_train(net, lik, X, Y, 1.0, base)
    decayed = MapConfig(num_steps=200, seed=0, decay_steps=(100,), decay_factor=1e-12)
    theta_dec, _ = map_train(net, lik, X, Y, 1.0, decayed)
    ref = MapConfig(num_steps=100, seed=0)
    theta_ref, _ = map_train(net, lik, X, Y, 1.0, ref)
    assert not np.allclose(theta_base, theta_dec)
    np.testing.assert_allclose(theta_dec, theta_ref, atol=1e-6)


def test_minibatch_resolution_rules():
    cfg = MapConfig()
    assert cfg.resolved_batch_size(150) == 150
    assert cfg.resolved_batch_size(5000) == 512
    assert MapConfig(batch_size=64).resolved_batch_size(150) == 64
    assert MapConfig(batch_size=400).resolved_batch_size(150) == 150


def test_invalid_delta_raises():
    net = MlpNetwork([1, 1])
    lik = GaussianLikelihood()
    with pytest.raises(ValueError):
        map_train(net, lik, np.zeros((2, 1)), np.zeros(2), 0.0)


def test_init_theta_override_used():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((10, 1))
    y = X[:, 0]
    net = MlpNetwork([1, 1])
    lik = GaussianLikelihood()
    start = np.array([5.0, -5.0])
    cfg = MapConfig(num_steps=1, learning_rate=0.0)
    theta, _ = map_train(net, lik, X, y, 1.0, cfg, init_theta=start)
    np.testing.assert_allclose(theta, start, atol=1e-12)
