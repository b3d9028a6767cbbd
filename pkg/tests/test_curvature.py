"""Curvature structure checks.

The sharp edge here is the Kronecker factorization: for one data point the
factor pair reproduces the exact layer block of the Gauss-Newton matrix, and
the undampened precision built from the shared eigenbasis must match
Q (x) W + delta I without the extra diagonal the dampened variant adds.
"""

import numpy as np
import pytest

import scipy.linalg

from linlaplace import (
    DiagCurvature,
    FullCurvature,
    KfacCurvature,
    ggn,
    kfac,
    likelihood_for,
    load_curvature,
    save_curvature,
    MlpNetwork,
)
from linlaplace.curvature import kfac_precision, kron_to_flat


def _random_model(rng):
    sizes = [int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(1, 4))]
    kind = rng.choice(["gaussian", "bernoulli", "categorical"])
    if kind == "bernoulli":
        sizes[-1] = 1
        lik = likelihood_for("bernoulli", num_classes=2)
    elif kind == "categorical":
        sizes[-1] = max(2, sizes[-1])
        lik = likelihood_for("categorical", num_classes=sizes[-1])
    else:
        lik = likelihood_for("gaussian", noise_var=float(rng.uniform(0.3, 2.0)))
    net = MlpNetwork(sizes, activation="tanh")
    theta = net.init_params(seed=int(rng.integers(1 << 30)))
    theta = theta + 0.3 * rng.standard_normal(theta.shape)
    return net, lik, theta


def _dense_kfac_block(layer, d_in_aug, d_out):
    """Kronecker product mapped into the flat parameter basis of the layer."""
    idx = kron_to_flat(d_in_aug - 1, d_out)
    dense = np.kron(layer.q, layer.w)
    out = np.empty_like(dense)
    out[np.ix_(idx, idx)] = dense
    return out


def test_kfac_single_point_blocks_exact():
    """Per data point the factor pair equals the dense GGN layer block.

    One hundred random architectures, activations offsets, and likelihoods;
    tolerance 1e-10 relative to the block scale.
    """
    rng = np.random.default_rng(0)
    for _ in range(100):
        net, lik, theta = _random_model(rng)
        x = rng.standard_normal((1, net.num_inputs))
        full = ggn(net, theta, x, lik, mode="full").matrix
        curv = kfac(net, theta, x, lik)
        for sl, layer in zip(net.layer_slices(), curv.layers):
            block = full[sl, sl]
            dense = _dense_kfac_block(layer, layer.d_in_aug, layer.d_out)
            scale = max(1.0, np.abs(block).max())
            assert np.abs(dense - block).max() <= 1e-10 * scale


def test_kfac_factors_are_sums_over_points():
    """On N points each factor is the sum of the per-point factors."""
    rng = np.random.default_rng(1)
    net, lik, theta = _random_model(rng)
    X = rng.standard_normal((6, net.num_inputs))
    curv = kfac(net, theta, X, lik)
    qs = [np.zeros_like(l.q) for l in curv.layers]
    ws = [np.zeros_like(l.w) for l in curv.layers]
    for i in range(X.shape[0]):
        ci = kfac(net, theta, X[i : i + 1], lik)
        for k, layer in enumerate(ci.layers):
            qs[k] += layer.q
            ws[k] += layer.w
    for k, layer in enumerate(curv.layers):
        np.testing.assert_allclose(layer.q, qs[k], atol=1e-10)
        np.testing.assert_allclose(layer.w, ws[k], atol=1e-10)


def test_undampened_precision_reconstruction():
    """Eigenbasis form of the precision equals kron(Q, W) + delta I to 1e-9."""
    rng = np.random.default_rng(2)
    for _ in range(20):
        net, lik, theta = _random_model(rng)
        X = rng.standard_normal((5, net.num_inputs))
        curv = kfac(net, theta, X, lik)
        prec = kfac_precision(curv, delta=0.37)
        for layer, pl in zip(curv.layers, prec.layers):
            target = np.kron(layer.q, layer.w) + 0.37 * np.eye(layer.d_in_aug * layer.d_out)
            # reconstruct the dense precision through the covariance action
            dim = layer.d_in_aug * layer.d_out
            cov = np.empty((dim, dim))
            for j in range(dim):
                e = np.zeros(dim)
                e[j] = 1.0
                cov[:, j] = pl.cov_apply(e.reshape(layer.d_out, layer.d_in_aug, order="F")).ravel(order="F")
            np.testing.assert_allclose(np.linalg.inv(cov), target, atol=1e-9 * max(1.0, np.abs(target).max()))
            np.testing.assert_allclose(pl.densify(), target, atol=1e-9)


def test_dampened_minus_undampened_psd():
    """Dampening only adds curvature: the precision difference is PSD."""
    rng = np.random.default_rng(3)
    for _ in range(20):
        net, lik, theta = _random_model(rng)
        X = rng.standard_normal((4, net.num_inputs))
        curv = kfac(net, theta, X, lik)
        delta = float(rng.uniform(0.05, 2.0))
        plain = kfac_precision(curv, delta, dampened=False)
        damp = kfac_precision(curv, delta, dampened=True)
        for pl, dl in zip(plain.layers, damp.layers):
            diff = dl.densify() - pl.densify()
            eig = np.linalg.eigvalsh(0.5 * (diff + diff.T))
            assert eig.min() >= -1e-9


def test_dampened_logdet_matches_dense():
    rng = np.random.default_rng(4)
    net, lik, theta = _random_model(rng)
    X = rng.standard_normal((5, net.num_inputs))
    curv = kfac(net, theta, X, lik)
    for dampened in (False, True):
        prec = kfac_precision(curv, 0.8, dampened=dampened)
        for pl in prec.layers:
            dense = pl.densify()
            expected = np.linalg.slogdet(dense)[1]
            assert pl.logdet_precision() == pytest.approx(expected, rel=1e-10)


def test_kfac_sample_covariance():
    """sample() is linear in eps and its implied covariance is precision^-1.

    Extracting the map column by column makes the check exact: the draw is
    A eps, so A A^T must invert densify() without Monte Carlo noise.
    """
    rng = np.random.default_rng(5)
    net = MlpNetwork([2, 3, 1])
    lik = likelihood_for("bernoulli", num_classes=2)
    theta = net.init_params(seed=0)
    X = rng.standard_normal((6, 2))
    curv = kfac(net, theta, X, lik)
    for dampened in (False, True):
        prec = kfac_precision(curv, 0.5, dampened=dampened)
        for pl in prec.layers:
            d_out, d_in_aug = pl.layer.d_out, pl.layer.d_in_aug
            dim = d_out * d_in_aug
            amat = np.empty((dim, dim))
            for j in range(dim):
                eps = np.zeros(dim)
                eps[j] = 1.0
                amat[:, j] = pl.sample(eps.reshape((d_out, d_in_aug), order="F")).ravel(order="F")
            cov = amat @ amat.T
            np.testing.assert_allclose(cov @ pl.densify(), np.eye(dim), atol=1e-9)


def test_ggn_full_is_sum_of_outer_products():
    rng = np.random.default_rng(6)
    net, lik, theta = _random_model(rng)
    X = rng.standard_normal((7, net.num_inputs))
    full = ggn(net, theta, X, lik, mode="full").matrix
    jac = net.jacobian(theta, X)
    lam = lik.noise(net.forward(theta, X))
    expected = np.einsum("ncp,ncd,ndq->pq", jac, lam, jac)
    np.testing.assert_allclose(full, expected, atol=1e-10)
    eig = np.linalg.eigvalsh(full)
    assert eig.min() >= -1e-12


def test_ggn_diag_matches_full_diagonal():
    rng = np.random.default_rng(7)
    net, lik, theta = _random_model(rng)
    X = rng.standard_normal((9, net.num_inputs))
    full = ggn(net, theta, X, lik, mode="full").matrix
    diag = ggn(net, theta, X, lik, mode="diag").diag
    np.testing.assert_allclose(diag, np.diag(full), atol=1e-10)


def test_ggn_chunking_invariant():
    rng = np.random.default_rng(8)
    net, lik, theta = _random_model(rng)
    X = rng.standard_normal((11, net.num_inputs))
    a = ggn(net, theta, X, lik, mode="full", chunk=3).matrix
    b = ggn(net, theta, X, lik, mode="full", chunk=256).matrix
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_full_mode_cap_enforced():
    net = MlpNetwork([10, 50, 10])
    lik = likelihood_for("categorical", num_classes=10)
    theta = net.init_params(seed=0)
    X = np.zeros((2, 10))
    with pytest.raises(ValueError):
        ggn(net, theta, X, lik, mode="full", max_full_params=100)


def test_ggn_rejects_empty_and_unknown_mode():
    net = MlpNetwork([2, 1])
    lik = likelihood_for("gaussian")
    theta = net.init_params(seed=0)
    with pytest.raises(ValueError):
        ggn(net, theta, np.zeros((0, 2)), lik)
    with pytest.raises(ValueError):
        ggn(net, theta, np.zeros((1, 2)), lik, mode="banded")


def test_curvature_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    net = MlpNetwork([2, 3, 2])
    lik = likelihood_for("categorical", num_classes=2)
    theta = net.init_params(seed=1)
    X = rng.standard_normal((5, 2))

    full = ggn(net, theta, X, lik, mode="full")
    save_curvature(tmp_path / "full.bin", full)
    full2 = load_curvature(tmp_path / "full.bin")
    assert isinstance(full2, FullCurvature)
    np.testing.assert_allclose(full2.matrix, full.matrix, atol=1e-12)

    diag = ggn(net, theta, X, lik, mode="diag")
    save_curvature(tmp_path / "diag.bin", diag)
    diag2 = load_curvature(tmp_path / "diag.bin")
    assert isinstance(diag2, DiagCurvature)
    np.testing.assert_allclose(diag2.diag, diag.diag, atol=1e-12)

    kf = kfac(net, theta, X, lik)
    save_curvature(tmp_path / "kfac.bin", kf)
    kf2 = load_curvature(tmp_path / "kfac.bin")
    assert isinstance(kf2, KfacCurvature)
    assert list(kf2.layer_sizes) == list(net.layer_sizes)
    for a, b in zip(kf.layers, kf2.layers):
        np.testing.assert_allclose(a.q, b.q, atol=1e-12)
        np.testing.assert_allclose(a.w, b.w, atol=1e-12)


def test_negative_eigenvalues_clipped():
    m = np.array([[1.0, 0.0], [0.0, -0.5]])
    curv = FullCurvature(m)
    assert curv.eigvals.min() >= 0.0
    eig = np.linalg.eigvalsh(curv.matrix)
    assert eig.min() >= -1e-12
    d = DiagCurvature(np.array([1.0, -2.0]))
    assert d.diag.min() >= 0.0
