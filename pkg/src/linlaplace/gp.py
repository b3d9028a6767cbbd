"""GP predictive induced by the linearized network.

The linearization defines a degenerate kernel k(x, x') = J(x) J(x')^T /
delta_eff whose GP posterior at the full training set reproduces the GLM
predictive exactly. Subset-of-data inference keeps M uniformly chosen
training points and rescales the prior precision, trading accuracy for
an M x M solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from linlaplace.glm import LinearizedModel, OutputGaussian, _block_diag_like, _block_sqrt
from linlaplace.likelihoods import GaussianLikelihood

FloatArray = NDArray[np.float64]

__all__ = [
    "KernelConfig",
    "GpSodPosterior",
    "kernel",
    "gp_fit_sod",
    "gp_latent_distribution",
    "gp_predictive",
]


def kernel(linmodel: LinearizedModel, delta_eff: float, X1, X2) -> FloatArray:
    """Kernel blocks k(x, x') = J(x) J(x')^T / delta_eff, shape (N1, N2, C, C)."""
    if delta_eff <= 0.0:
        raise ValueError("delta_eff must be positive")
    j1 = linmodel.jac(X1)
    j2 = linmodel.jac(X2)
    return np.einsum("acp,bdp->abcd", j1, j2) / delta_eff


@dataclass
class KernelConfig:
    """Subset-of-data settings.

    num_inducing None keeps every training point. scale "auto" resolves to
    N / M, compensating the likelihood terms dropped with the subset; an
    explicit float overrides it. delta_eff = delta * scale.
    """

    delta: float
    num_inducing: int | None = None
    scale: float | str = "auto"
    seed: int = 0

    def resolve(self, num_train: int) -> tuple[int, float]:
        m = self.num_inducing if self.num_inducing is not None else num_train
        if not 1 <= m <= num_train:
            raise ValueError(f"num_inducing must be in [1, {num_train}], got {m}")
        if self.scale == "auto":
            scale = num_train / m
        else:
            scale = float(self.scale)
            if scale <= 0.0:
                raise ValueError("scale must be positive")
        return m, self.delta * scale


class GpSodPosterior:
    """GP posterior on an M-point subset with cross-output kernel blocks.

    Stores the subset Gram K_MM, the per-point noise blocks Lambda at the
    MAP outputs, and a Cholesky of S = I + L^{1/2} K_MM L^{1/2}; the solve
    L^{1/2} S^{-1} L^{1/2} equals (K_MM + L_MM^{-1})^{-1} whenever Lambda is
    invertible and stays defined when it is singular.
    """

    def __init__(self, linmodel: LinearizedModel, lik, X_sub, subset_indices, delta_eff: float):
        self.linmodel = linmodel
        self.lik = lik
        self.X_sub = np.atleast_2d(np.asarray(X_sub, dtype=np.float64))
        self.subset_indices = np.asarray(subset_indices, dtype=np.int64)
        self.delta_eff = float(delta_eff)
        self.jac_sub = linmodel.jac(self.X_sub)  # (M, C, P)
        m, c, p = self.jac_sub.shape
        self.num_subset = m
        self.num_outputs = c
        jflat = self.jac_sub.reshape(m * c, p)
        self.k_mm = (jflat @ jflat.T) / self.delta_eff
        f_sub = linmodel.f0(self.X_sub)
        self.lam_blocks = lik.noise(f_sub)
        self._lh_flat = _block_diag_like(_block_sqrt(self.lam_blocks))
        s = np.eye(m * c) + self._lh_flat @ self.k_mm @ self._lh_flat
        self._s_chol = scipy.linalg.cho_factor(s)

    def solve_apply(self, v: FloatArray) -> FloatArray:
        """Apply L^{1/2} S^{-1} L^{1/2}, the (K_MM + L_MM^{-1})^{-1} action."""
        out = self._lh_flat @ v
        out = scipy.linalg.cho_solve(self._s_chol, out)
        return self._lh_flat @ out


def gp_fit_sod(linmodel: LinearizedModel, lik, X, Y, config: KernelConfig) -> GpSodPosterior:
    """Fit the subset-of-data GP posterior on a uniform random subset."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    m, delta_eff = config.resolve(n)
    if m == n:
        idx = np.arange(n)
    else:
        rng = np.random.default_rng(config.seed)
        idx = np.sort(rng.choice(n, size=m, replace=False))
    return GpSodPosterior(linmodel, lik, X[idx], idx, delta_eff)


def gp_latent_distribution(post: GpSodPosterior, X, chunk: int = 256) -> OutputGaussian:
    """Latent GP posterior at query points.

    The latent mean is pinned to the MAP network output f(x, theta*); the
    covariance is K** - K*M L^{1/2} S^{-1} L^{1/2} K_M* per query point.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    nq = X.shape[0]
    c = post.num_outputs
    m = post.num_subset
    jsub_flat = post.jac_sub.reshape(m * c, -1)
    mean = np.empty((nq, c))
    cov = np.empty((nq, c, c))
    for start in range(0, nq, chunk):
        xb = X[start : start + chunk]
        nb = xb.shape[0]
        jq = post.linmodel.jac(xb)  # (nb, C, P)
        mean[start : start + nb] = post.linmodel.f0(xb)
        k_qq = np.einsum("ncp,ndp->ncd", jq, jq) / post.delta_eff
        k_qm = (jq.reshape(nb * c, -1) @ jsub_flat.T) / post.delta_eff  # (nbC, MC)
        solved = post.solve_apply(k_qm.T).T  # (nbC, MC)
        reduced = np.einsum(
            "ncq,ndq->ncd", k_qm.reshape(nb, c, m * c), solved.reshape(nb, c, m * c)
        )
        cov[start : start + nb] = k_qq - reduced
    return OutputGaussian(mean, cov, diag=False)


def gp_predictive(
    post: GpSodPosterior,
    lik,
    X,
    num_samples: int = 1000,
    seed: int = 0,
):
    """GP predictive: sample the latent Gaussian and mix through the likelihood."""
    dist = gp_latent_distribution(post, X)
    if isinstance(lik, GaussianLikelihood):
        return dist.mean, dist.variances() + lik.noise_var
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    f_samples = dist.sample(num_samples, seed=seed)
    return lik.predictive_mix(f_samples)
