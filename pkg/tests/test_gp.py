"""GP predictive checks.

The load-bearing identity: with every training point kept and scale 1 the
GP latent covariance equals the pushforward J Sigma J^T of the full-GGN
Laplace posterior (matrix inversion lemma), so the GP route is the GLM
predictive computed in function space.
"""

import numpy as np
import pytest

import scipy.linalg

from linlaplace import (
    KernelConfig,
    MlpNetwork,
    ggn,
    glm_output_distribution,
    gp_fit_sod,
    gp_latent_distribution,
    gp_predictive,
    kernel,
    laplace_posterior,
    likelihood_for,
    linearize,
)
from linlaplace.glm import _block_diag_like


def _setup(kind="bernoulli", seed=0, n=40, hidden=(8,)):
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        lik = likelihood_for("gaussian", noise_var=0.5)
        c = 1
    elif kind == "bernoulli":
        lik = likelihood_for("bernoulli", num_classes=2)
        c = 1
    else:
        lik = likelihood_for("categorical", num_classes=3)
        c = 3
    net = MlpNetwork([2, *hidden, c])
    theta = net.init_params(seed=seed) + 0.25 * rng.standard_normal(net.num_params)
    X = rng.standard_normal((n, 2))
    Xq = rng.standard_normal((20, 2))
    return net, lik, theta, X, Xq


def test_full_subset_matches_parameter_space_pushforward():
    """GP latent covariance equals J Sigma_GGN J^T at 20 query points, 1e-6."""
    for kind in ("bernoulli", "categorical", "gaussian"):
        net, lik, theta, X, Xq = _setup(kind, seed=1)
        delta = 0.8
        lin = linearize(net, theta)
        gp = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=delta, num_inducing=None, scale=1.0))
        latent = gp_latent_distribution(gp, Xq)
        post = laplace_posterior(theta, ggn(net, theta, X, lik, mode="full"), delta)
        pushed = glm_output_distribution(lin, post, Xq, diag=False)
        np.testing.assert_allclose(latent.mean, pushed.mean, atol=1e-9)
        np.testing.assert_allclose(latent.cov, pushed.cov, atol=1e-6)


def test_solve_apply_inverts_kernel_plus_noise_inverse():
    net, lik, theta, X, Xq = _setup("bernoulli", seed=2, n=15)
    lin = linearize(net, theta)
    gp = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.2, scale=1.0))
    lam = _block_diag_like(gp.lam_blocks)
    target = np.linalg.inv(gp.k_mm + np.linalg.inv(lam))
    dim = gp.k_mm.shape[0]
    applied = gp.solve_apply(np.eye(dim))
    np.testing.assert_allclose(applied, target, atol=1e-9)


def test_kernel_blocks_symmetric_and_psd():
    net, lik, theta, X, Xq = _setup("categorical", seed=3, n=8)
    lin = linearize(net, theta)
    k = kernel(lin, 0.7, X, X)
    np.testing.assert_allclose(k, np.transpose(k, (1, 0, 3, 2)), atol=1e-12)
    n, _, c, _ = k.shape
    dense = k.transpose(0, 2, 1, 3).reshape(n * c, n * c)
    eig = np.linalg.eigvalsh(0.5 * (dense + dense.T))
    assert eig.min() >= -1e-10
    jac = net.jacobian(theta, X)
    expected = np.einsum("acp,bdp->abcd", jac, jac) / 0.7
    np.testing.assert_allclose(k, expected, atol=1e-12)


def test_scale_auto_compensates_subset_size():
    cfg = KernelConfig(delta=0.5, num_inducing=10, scale="auto")
    m, delta_eff = cfg.resolve(40)
    assert m == 10
    assert delta_eff == pytest.approx(0.5 * 4.0)
    m, delta_eff = KernelConfig(delta=0.5, num_inducing=None, scale="auto").resolve(40)
    assert m == 40
    assert delta_eff == pytest.approx(0.5)
    m, delta_eff = KernelConfig(delta=0.5, num_inducing=10, scale=2.0).resolve(40)
    assert delta_eff == pytest.approx(1.0)


def test_latent_mean_is_map_output():
    net, lik, theta, X, Xq = _setup("bernoulli", seed=4)
    lin = linearize(net, theta)
    gp = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.0, num_inducing=12))
    latent = gp_latent_distribution(gp, Xq)
    np.testing.assert_allclose(latent.mean, net.forward(theta, Xq), atol=1e-12)


def test_observed_point_variance_below_prior():
    net, lik, theta, X, Xq = _setup("bernoulli", seed=5, n=30)
    lin = linearize(net, theta)
    gp = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.0, num_inducing=1, scale=1.0))
    x_sub = gp.X_sub
    prior = kernel(lin, 1.0, x_sub, x_sub)[0, 0]
    post_cov = gp_latent_distribution(gp, x_sub).cov[0]
    assert post_cov[0, 0] < prior[0, 0]


def test_nested_subsets_shrink_covariance_monotonically():
    """Adding observed points never widens the GP posterior.

    With nested subsets and a fixed scale the covariances are PSD ordered,
    so the gap to the full-data GP closes monotonically.
    """
    from linlaplace import GpSodPosterior

    net, lik, theta, X, Xq = _setup("bernoulli", seed=6, n=60)
    lin = linearize(net, theta)
    order = np.random.default_rng(13).permutation(60)
    covs = []
    for m in (5, 15, 30, 60):
        idx = np.sort(order[:m])
        sod = GpSodPosterior(lin, lik, X[idx], idx, delta_eff=1.0)
        covs.append(gp_latent_distribution(sod, Xq).cov)
    for prev, nxt in zip(covs, covs[1:]):
        for q in range(prev.shape[0]):
            gap = prev[q] - nxt[q]
            assert np.linalg.eigvalsh(0.5 * (gap + gap.T)).min() >= -1e-9
    errs = [float(np.abs(c - covs[-1]).mean()) for c in covs]
    assert errs[0] > errs[1] > errs[2] > errs[3] == 0.0


def test_subset_choice_deterministic_per_seed():
    net, lik, theta, X, Xq = _setup("bernoulli", seed=7)
    lin = linearize(net, theta)
    a = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.0, num_inducing=9, seed=4))
    b = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.0, num_inducing=9, seed=4))
    c = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.0, num_inducing=9, seed=5))
    np.testing.assert_array_equal(a.subset_indices, b.subset_indices)
    assert a.subset_indices.shape == (9,)
    assert np.all(np.diff(a.subset_indices) > 0)
    assert not np.array_equal(a.subset_indices, c.subset_indices)


def test_gp_predictive_normalizes_and_gaussian_closed_form():
    net, lik, theta, X, Xq = _setup("categorical", seed=8)
    lin = linearize(net, theta)
    gp = gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.0, num_inducing=15))
    probs = gp_predictive(gp, lik, Xq, num_samples=64, seed=0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    net, glik, theta, X, Xq = _setup("gaussian", seed=9)
    lin = linearize(net, theta)
    gp = gp_fit_sod(lin, glik, X, None, KernelConfig(delta=1.0, scale=1.0))
    mean, var = gp_predictive(gp, glik, Xq)
    np.testing.assert_allclose(mean, net.forward(theta, Xq), atol=1e-12)
    assert var.min() >= glik.noise_var


def test_config_validation_errors():
    net, lik, theta, X, Xq = _setup("bernoulli", seed=10, n=10)
    lin = linearize(net, theta)
    with pytest.raises(ValueError):
        kernel(lin, 0.0, X, X)
    with pytest.raises(ValueError):
        KernelConfig(delta=1.0, num_inducing=11).resolve(10)
    with pytest.raises(ValueError):
        KernelConfig(delta=1.0, num_inducing=0).resolve(10)
    with pytest.raises(ValueError):
        KernelConfig(delta=1.0, scale=-1.0).resolve(10)
    with pytest.raises(ValueError):
        gp_predictive(gp_fit_sod(lin, lik, X, None, KernelConfig(delta=1.0)), lik, X, num_samples=0)
