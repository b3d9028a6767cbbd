"""Network forward, Jacobian, and vector-Jacobian product checks.

The per-example Jacobian is the backbone of every curvature and predictive
computation, so it is verified against central finite differences, and the
vjp against an explicit contraction with the dense Jacobian.
"""

import numpy as np
import pytest

from linlaplace import MlpNetwork, load_params, save_params


def _fd_jacobian(net, theta, X, h=1e-6):
    """Central-difference Jacobian dF/dtheta, shape (N, C, P)."""
    f0 = net.forward(theta, X)
    n, c = f0.shape
    jac = np.empty((n, c, theta.shape[0]))
    for p in range(theta.shape[0]):
        tp = theta.copy()
        tp[p] += h
        fp = net.forward(tp, X)
        tp[p] -= 2 * h
        fm = net.forward(tp, X)
        jac[:, :, p] = (fp - fm) / (2 * h)
    return jac


def test_forward_shape_and_affine_output():
    net = MlpNetwork([3, 5, 2], activation="tanh")
    theta = net.init_params(seed=0)
    X = np.random.default_rng(0).standard_normal((7, 3))
    f = net.forward(theta, X)
    assert f.shape == (7, 2)
    # output layer is affine: doubling the last-layer weights and bias
    # doubles the output
    layers = net.unflatten(theta)
    w, b = layers[-1]
    scaled = net.flatten(layers[:-1] + [(2.0 * w, 2.0 * b)])
    np.testing.assert_allclose(net.forward(scaled, X), 2.0 * f, rtol=1e-12)


def test_forward_single_point_promotes_to_2d():
    net = MlpNetwork([2, 4, 1])
    theta = net.init_params(seed=1)
    x = np.array([0.3, -0.7])
    f = net.forward(theta, x)
    assert f.shape == (1, 1)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    for sizes in ([2, 4, 3], [1, 3, 3, 2], [4, 2, 1]):
        net = MlpNetwork(sizes, activation="tanh")
        theta = net.init_params(seed=5) + 0.1 * rng.standard_normal(net.num_params)
        X = rng.standard_normal((6, sizes[0]))
        jac = net.jacobian(theta, X)
        fd = _fd_jacobian(net, theta, X)
        np.testing.assert_allclose(jac, fd, atol=1e-7)


def test_jacobian_matches_finite_differences_relu():
    rng = np.random.default_rng(4)
    net = MlpNetwork([3, 6, 2], activation="relu")
    theta = net.init_params(seed=2)
    # keep preactivations away from the relu kink so FD is valid
    X = rng.standard_normal((5, 3)) + 0.5
    jac = net.jacobian(theta, X)
    fd = _fd_jacobian(net, theta, X)
    np.testing.assert_allclose(jac, fd, atol=1e-6)


def test_jacobian_with_output_scale():
    rng = np.random.default_rng(7)
    net = MlpNetwork([1, 1], activation="tanh", output_scale=5.0)
    theta = np.array([0.4, 0.1])
    X = rng.uniform(-3, 3, size=(9, 1))
    np.testing.assert_allclose(
        net.forward(theta, X), 5.0 * np.tanh(0.4 * X + 0.1), rtol=1e-12
    )
    fd = _fd_jacobian(net, theta, X)
    np.testing.assert_allclose(net.jacobian(theta, X), fd, atol=1e-7)


def test_vjp_contracts_the_jacobian():
    rng = np.random.default_rng(11)
    net = MlpNetwork([3, 5, 2])
    theta = net.init_params(seed=0)
    X = rng.standard_normal((8, 3))
    R = rng.standard_normal((8, 2))
    jac = net.jacobian(theta, X)
    expected = np.einsum("ncp,nc->p", jac, R)
    np.testing.assert_allclose(net.vjp(theta, X, R), expected, rtol=1e-10, atol=1e-12)


def test_vjp_accepts_precomputed_cache():
    rng = np.random.default_rng(12)
    net = MlpNetwork([2, 4, 2])
    theta = net.init_params(seed=3)
    X = rng.standard_normal((5, 2))
    R = rng.standard_normal((5, 2))
    cache = net.hidden_states(theta, X)
    np.testing.assert_array_equal(net.vjp(theta, X, R, cache=cache), net.vjp(theta, X, R))


def test_forward_samples_matches_looped_forward():
    rng = np.random.default_rng(13)
    net = MlpNetwork([2, 3, 2])
    thetas = np.stack([net.init_params(seed=s) for s in range(5)])
    X = rng.standard_normal((4, 2))
    batched = net.forward_samples(thetas, X, chunk=2)
    looped = np.stack([net.forward(t, X) for t in thetas])
    np.testing.assert_allclose(batched, looped, rtol=1e-12)


def test_init_params_deterministic_and_biases_zero():
    net = MlpNetwork([4, 5, 2])
    a = net.init_params(seed=9)
    b = net.init_params(seed=9)
    np.testing.assert_array_equal(a, b)
    for w, bias in net.unflatten(a):
        assert np.all(bias == 0.0)
        assert np.any(w != 0.0)


def test_flatten_unflatten_roundtrip():
    net = MlpNetwork([3, 4, 2])
    theta = net.init_params(seed=1)
    np.testing.assert_array_equal(net.flatten(net.unflatten(theta)), theta)


def test_layer_slices_partition_the_parameter_vector():
    net = MlpNetwork([3, 4, 2])
    slices = net.layer_slices()
    assert slices[0].start == 0
    assert slices[-1].stop == net.num_params
    for left, right in zip(slices, slices[1:]):
        assert left.stop == right.start


def test_bad_theta_shape_raises():
    net = MlpNetwork([2, 2])
    with pytest.raises(ValueError):
        net.forward(np.zeros(net.num_params + 1), np.zeros((1, 2)))


def test_bad_architecture_raises():
    with pytest.raises(ValueError):
        MlpNetwork([3])
    with pytest.raises(ValueError):
        MlpNetwork([3, 0, 2])
    with pytest.raises(ValueError):
        MlpNetwork([3, 2], activation="sigmoid")


def test_save_load_roundtrip(tmp_path):
    net = MlpNetwork([3, 4, 2], activation="relu")
    theta = net.init_params(seed=21)
    path = tmp_path / "theta.bin"
    save_params(path, net, theta)
    net2, theta2 = load_params(path)
    np.testing.assert_array_equal(theta2, theta)
    assert net2.layer_sizes == net.layer_sizes
    assert net2.activation == net.activation
    X = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(net2.forward(theta2, X), net.forward(theta, X))


def test_save_rejects_wrong_length(tmp_path):
    net = MlpNetwork([2, 2])
    with pytest.raises(ValueError):
        save_params(tmp_path / "theta.bin", net, np.zeros(3))
