"""Linearized-network predictives and GLM posterior refinement.

The network is linearized at theta*: f_lin(x, theta) = f(x, theta*) +
J(x)(theta - theta*). Pushing a Gaussian parameter posterior through f_lin
gives a Gaussian over outputs (local reparameterization); the GLM predictive
samples that output Gaussian, while the BNN predictive samples parameters
and runs the full nonlinear network.

Refinement treats the linearized model as a Bayesian GLM whose log joint is
concave: a damped-Newton ascent (Laplace route) or natural-gradient VI
(NGVI route), both with Jacobians fixed at theta*.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from linlaplace.curvature import DiagCurvature, FullCurvature
from linlaplace.likelihoods import GaussianLikelihood
from linlaplace.network import MlpNetwork
from linlaplace.posterior import GaussianPosterior, NumericalError

FloatArray = NDArray[np.float64]

__all__ = [
    "LinearizedModel",
    "OutputGaussian",
    "RefineConfig",
    "NgviConfig",
    "linearize",
    "glm_output_distribution",
    "glm_predictive",
    "bnn_predictive",
    "map_predictive",
    "glm_log_joint",
    "glm_refine_laplace",
    "glm_refine_ngvi",
]

FULL_OUTPUT_COV_MAX_C = 16


@dataclass
class LinearizedModel:
    """Network frozen at its linearization point theta*."""

    net: MlpNetwork
    theta_star: FloatArray

    def __post_init__(self):
        self.theta_star = np.array(self.theta_star, dtype=np.float64)
        if self.theta_star.shape != (self.net.num_params,):
            raise ValueError("theta_star length does not match the network")

    def f0(self, X) -> FloatArray:
        """f(x, theta*), shape (N, C)."""
        return self.net.forward(self.theta_star, X)

    def jac(self, X) -> FloatArray:
        """J_theta*(x), shape (N, C, P)."""
        return self.net.jacobian(self.theta_star, X)

    def predict(self, theta: FloatArray, X) -> FloatArray:
        """f_lin(x, theta) = f(x, theta*) + J(x)(theta - theta*)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        shift = np.asarray(theta, dtype=np.float64) - self.theta_star
        return self.f0(X) + self.jac(X) @ shift


def linearize(net: MlpNetwork, theta_star: FloatArray) -> LinearizedModel:
    return LinearizedModel(net, theta_star)


@dataclass
class OutputGaussian:
    """Gaussian over network outputs per input point."""

    mean: FloatArray  # (N, C)
    cov: FloatArray  # (N, C, C) when full, (N, C) when diagonal
    diag: bool = False

    def variances(self) -> FloatArray:
        """Per-output marginal variances, shape (N, C)."""
        if self.diag:
            return self.cov
        return np.einsum("ncc->nc", self.cov)

    def sample(self, num_samples: int, seed: int = 0) -> FloatArray:
        """Output draws of shape (S, N, C)."""
        rng = np.random.default_rng(seed)
        n, c = self.mean.shape
        eps = rng.standard_normal((num_samples, n, c))
        if self.diag:
            return self.mean + np.sqrt(np.maximum(self.cov, 0.0)) * eps
        chol = _stacked_cholesky(self.cov)
        return self.mean + np.einsum("ncd,snd->snc", chol, eps)


def _stacked_cholesky(cov: FloatArray) -> FloatArray:
    """Cholesky of stacked C x C PSD matrices with a clip fallback."""
    if cov.shape[-1] == 1:
        return np.sqrt(np.maximum(cov, 0.0))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        vals = np.maximum(vals, 0.0)
        fixed = np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)
        jitter = 1e-12 * max(1.0, float(np.abs(cov).max()))
        fixed += jitter * np.eye(cov.shape[-1])
        return np.linalg.cholesky(fixed)


def glm_output_distribution(
    linmodel: LinearizedModel,
    post: GaussianPosterior,
    X,
    diag: bool | None = None,
) -> OutputGaussian:
    """Push the parameter posterior through the linearized network.

    mean = f(x, theta*) + J(x)(mu - theta*); cov = J Sigma J^T. Full C x C
    covariance for C <= 16, diagonal otherwise unless overridden.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    jac = linmodel.jac(X)
    c = jac.shape[1]
    if diag is None:
        diag = c > FULL_OUTPUT_COV_MAX_C
    mean = linmodel.f0(X) + jac @ (post.mean - linmodel.theta_star)
    if diag:
        sigma_j = post.cov_apply(jac)
        var = np.einsum("ncp,ncp->nc", jac, sigma_j)
        return OutputGaussian(mean, var, diag=True)
    cov = post.quadform(jac)
    return OutputGaussian(mean, cov, diag=False)


def glm_predictive(
    linmodel: LinearizedModel,
    post: GaussianPosterior,
    X,
    lik,
    num_samples: int = 1000,
    seed: int = 0,
    diag: bool | None = None,
):
    """GLM predictive: sample the output Gaussian and mix through the likelihood.

    Gaussian likelihood is closed form (mean f + J(mu - theta*), variance
    sigma^2 + J Sigma J^T) with no sampling.
    """
    dist = glm_output_distribution(linmodel, post, X, diag=diag)
    if isinstance(lik, GaussianLikelihood):
        return dist.mean, dist.variances() + lik.noise_var
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    f_samples = dist.sample(num_samples, seed=seed)
    return lik.predictive_mix(f_samples)


def predictive_from_samples(net: MlpNetwork, thetas: FloatArray, X, lik, chunk: int = 256):
    """Likelihood mixture over given parameter draws, accumulated in chunks."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    num_samples = thetas.shape[0]
    gaussian = isinstance(lik, GaussianLikelihood)
    acc = None
    m1 = m2 = None
    for start in range(0, num_samples, chunk):
        f = net.forward_samples(thetas[start : start + chunk], X, chunk=chunk)
        if gaussian:
            m1 = f.sum(axis=0) if m1 is None else m1 + f.sum(axis=0)
            m2 = (f * f).sum(axis=0) if m2 is None else m2 + (f * f).sum(axis=0)
        else:
            probs = lik.predictive_mix(f) * f.shape[0]
            acc = probs if acc is None else acc + probs
    if gaussian:
        mean = m1 / num_samples
        var = m2 / num_samples - mean * mean + lik.noise_var
        return mean, var
    return acc / num_samples


def bnn_predictive(
    net: MlpNetwork,
    post: GaussianPosterior,
    X,
    lik,
    num_samples: int = 1000,
    seed: int = 0,
    chunk: int = 256,
):
    """BNN predictive: average the likelihood over full-network parameter draws."""
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    thetas = post.sample(num_samples, seed=seed)
    return predictive_from_samples(net, thetas, X, lik, chunk=chunk)


def map_predictive(net: MlpNetwork, theta_star: FloatArray, X, lik):
    """Plug-in predictive at the MAP estimate."""
    f = net.forward(theta_star, X)
    return lik.predictive_mix(f[None])


def glm_log_joint(linmodel: LinearizedModel, theta, X, Y, lik, delta: float) -> float:
    """Log joint of the linearized model; concave in theta for these likelihoods."""
    theta = np.asarray(theta, dtype=np.float64)
    f = linmodel.predict(theta, X)
    p = theta.shape[0]
    logprior = 0.5 * p * (np.log(delta) - np.log(2.0 * np.pi)) - 0.5 * delta * float(
        theta @ theta
    )
    return float(lik.log_lik(Y, f).sum()) + logprior


@dataclass
class RefineConfig:
    """Damped-Newton settings for the Laplace refinement route.

    num_steps caps the Newton iterations; step_scale is the initial step
    along the Newton direction (backtracked by halving until the concave
    objective does not decrease). grad_tol stops early.
    """

    num_steps: int = 1000
    step_scale: float = 1.0
    grad_tol: float = 1e-10
    max_backtracks: int = 30


def _solve_glm_newton(jst, lam_blocks, delta, grad):
    """(J^T Lambda J + delta I)^{-1} grad through the smaller of the two spaces."""
    nc, p = jst.shape
    if p <= nc:
        lam_flat = _block_diag_like(lam_blocks)
        prec = jst.T @ (lam_flat @ jst) + delta * np.eye(p)
        c, low = scipy.linalg.cho_factor(prec)
        return scipy.linalg.cho_solve((c, low), grad)
    # identity form with Lambda^{1/2} tolerates singular noise blocks
    bh = _block_sqrt(lam_blocks)
    bh_flat = _block_diag_like(bh)
    a = bh_flat @ jst
    s = np.eye(nc) + (a @ a.T) / delta
    c, low = scipy.linalg.cho_factor(s)
    tmp = a @ grad
    tmp = scipy.linalg.cho_solve((c, low), tmp)
    return grad / delta - (a.T @ tmp) / delta**2


def _block_sqrt(blocks: FloatArray) -> FloatArray:
    """PSD square roots of stacked C x C blocks."""
    if blocks.shape[-1] == 1:
        return np.sqrt(np.maximum(blocks, 0.0))
    vals, vecs = np.linalg.eigh(blocks)
    vals = np.maximum(vals, 0.0)
    return np.einsum("nij,nj,nkj->nik", vecs, np.sqrt(vals), vecs)


def _block_diag_like(blocks: FloatArray):
    """Dense (N*C, N*C) block-diagonal matrix from (N, C, C) blocks."""
    n, c, _ = blocks.shape
    out = np.zeros((n * c, n * c))
    for i in range(n):
        out[i * c : (i + 1) * c, i * c : (i + 1) * c] = blocks[i]
    return out


def glm_refine_laplace(
    linmodel: LinearizedModel,
    X,
    Y,
    lik,
    delta: float,
    cfg: RefineConfig | None = None,
) -> GaussianPosterior:
    """Mode of the GLM log joint with a Laplace covariance around it.

    Newton ascent with backtracking on the concave objective; the Jacobians
    stay fixed at theta* (the GLM design matrix), and the final precision is
    sum_n J_n^T Lambda(f_lin(x_n, theta_hat)) J_n + delta I.
    """
    cfg = cfg or RefineConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    jac = linmodel.jac(X)  # (N, C, P)
    f0 = linmodel.f0(X)
    n, c, p = jac.shape
    jst = jac.reshape(n * c, p)
    theta = linmodel.theta_star.copy()

    def f_lin(th):
        return f0 + (jst @ (th - linmodel.theta_star)).reshape(n, c)

    def objective(th):
        logprior = 0.5 * p * (np.log(delta) - np.log(2.0 * np.pi)) - 0.5 * delta * float(th @ th)
        return float(lik.log_lik(Y, f_lin(th)).sum()) + logprior

    obj = objective(theta)
    if not np.isfinite(obj):
        raise NumericalError("GLM objective is not finite at theta*")
    for _ in range(cfg.num_steps):
        f = f_lin(theta)
        r = lik.residual(Y, f)
        grad = jst.T @ r.reshape(n * c) - delta * theta
        if np.linalg.norm(grad) < cfg.grad_tol:
            break
        lam = lik.noise(f)
        direction = _solve_glm_newton(jst, lam, delta, grad)
        step = cfg.step_scale
        for _ in range(cfg.max_backtracks):
            cand = theta + step * direction
            cand_obj = objective(cand)
            if np.isfinite(cand_obj) and cand_obj >= obj - 1e-12:
                break
            step *= 0.5
        else:
            break  # no acceptable step along the Newton direction
        if cand_obj <= obj and np.linalg.norm(step * direction) < 1e-14:
            break
        theta, obj = cand, cand_obj
    lam_hat = lik.noise(f_lin(theta))
    half = np.matmul(_block_sqrt(lam_hat), jac)
    flat = half.reshape(-1, p)
    curv = FullCurvature(flat.T @ flat)
    return GaussianPosterior(theta, curv, float(delta))


@dataclass
class NgviConfig:
    """Natural-gradient VI settings for GLM refinement.

    learning_rate None picks 1e-3 for full structure and 1e-2 for diagonal.
    mc_samples are drawn as antithetic pairs in output space.
    """

    num_steps: int = 250
    learning_rate: float | None = None
    mc_samples: int = 8
    seed: int = 0

    def resolved_rate(self, structure: str) -> float:
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return 1e-3 if structure == "full" else 1e-2


class NgviState:
    """Output-space state of the NGVI iterate.

    The precision is represented implicitly as J^T B J + delta I with B a
    per-point block-diagonal PSD matrix; mu is explicit. This form is closed
    under the NGVI precision update because the update mixes B with the
    expected noise blocks and leaves the delta I term fixed.
    """

    def __init__(self, jst, f0_flat, theta_star, mu, b_blocks, delta):
        self.jst = jst  # (NC, P)
        self.f0_flat = f0_flat  # (NC,)
        self.theta_star = theta_star
        self.mu = mu
        self.b_blocks = b_blocks  # (N, C, C)
        self.delta = float(delta)
        self.gram = (jst @ jst.T) / self.delta  # K = J J^T / delta
        self._refresh()

    def _refresh(self):
        """Refactor after a B update."""
        n, c, _ = self.b_blocks.shape
        bh = _block_sqrt(self.b_blocks)
        self.bh_flat = _block_diag_like(bh)
        s = np.eye(n * c) + self.bh_flat @ self.gram @ self.bh_flat
        try:
            self.s_chol = scipy.linalg.cho_factor(s)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(f"NGVI precision factorization failed: {exc}")
        self.num_points = n
        self.block_size = c

    def cov_apply(self, v: FloatArray) -> FloatArray:
        """Sigma v for the implicit precision."""
        jv = self.jst @ v
        tmp = self.bh_flat @ jv
        tmp = scipy.linalg.cho_solve(self.s_chol, tmp)
        return v / self.delta - (self.jst.T @ (self.bh_flat @ tmp)) / self.delta**2

    def train_marginals(self):
        """Mean and per-point covariance blocks of f_lin at the training inputs."""
        n, c = self.num_points, self.block_size
        mean = self.f0_flat + self.jst @ (self.mu - self.theta_star)
        bk = self.bh_flat @ self.gram
        t = scipy.linalg.cho_solve(self.s_chol, bk)
        reduction = self.gram @ self.bh_flat @ t  # K Bh S^-1 Bh K
        cov_flat = self.gram - reduction
        blocks = np.empty((n, c, c))
        for i in range(n):
            blocks[i] = cov_flat[i * c : (i + 1) * c, i * c : (i + 1) * c]
        return mean.reshape(n, c), blocks

    def query_covariance(self, jac_query: FloatArray) -> FloatArray:
        """J* Sigma J*^T blocks for query Jacobians (Nq, C, P)."""
        nq, c, p = jac_query.shape
        qflat = jac_query.reshape(nq * c, p)
        kq = (qflat @ self.jst.T) / self.delta  # (NqC, NC)
        kqq = (qflat @ qflat.T) / self.delta
        a = kq @ self.bh_flat
        t = scipy.linalg.cho_solve(self.s_chol, a.T)
        cov_flat = kqq - a @ t
        out = np.empty((nq, c, c))
        for i in range(nq):
            out[i] = cov_flat[i * c : (i + 1) * c, i * c : (i + 1) * c]
        return out

    def query_mean(self, f0_query: FloatArray, jac_query: FloatArray) -> FloatArray:
        return f0_query + jac_query @ (self.mu - self.theta_star)

    def param_samples(self, num_samples: int, seed: int = 0) -> FloatArray:
        """Parameter draws from N(mu, (J^T B J + delta I)^{-1}), shape (S, P).

        Built from the eigendecomposition of the NC x NC matrix A A^T with
        A = B^{1/2} J, so the cost never touches a P x P factorization.
        """
        nc, p = self.jst.shape
        a = self.bh_flat @ self.jst
        vals, vecs = np.linalg.eigh(a @ a.T)
        vals = np.maximum(vals, 0.0)
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((num_samples, p))
        out = eps
        if vals.max() > 0.0:
            keep = vals > vals.max() * 1e-12
            s = vals[keep]
            basis = a.T @ (vecs[:, keep] / np.sqrt(s))  # (P, k), orthonormal
            coef = np.sqrt(self.delta / (self.delta + s)) - 1.0
            out = eps + ((eps @ basis) * coef) @ basis.T
        return self.mu + out / np.sqrt(self.delta)

    def trace_cov(self) -> float:
        n, c = self.num_points, self.block_size
        p = self.jst.shape[1]
        s_inv_trace = float(np.trace(scipy.linalg.cho_solve(self.s_chol, np.eye(n * c))))
        return (p - n * c + s_inv_trace) / self.delta

    def logdet_precision(self) -> float:
        p = self.jst.shape[1]
        diag = np.diag(self.s_chol[0])
        return p * np.log(self.delta) + 2.0 * float(np.log(np.abs(diag)).sum())

    def densify(self) -> tuple[FloatArray, FloatArray]:
        """Mean and dense curvature (precision minus delta I)."""
        b_flat = _block_diag_like(self.b_blocks)
        curv = self.jst.T @ (b_flat @ self.jst)
        return self.mu, curv


def _antithetic_normals(rng, half: int, shape) -> FloatArray:
    eps = rng.standard_normal((half,) + shape)
    return np.concatenate([eps, -eps], axis=0)


def ngvi_refine_state(
    linmodel: LinearizedModel,
    X,
    Y,
    lik,
    delta: float,
    cfg: NgviConfig | None = None,
) -> tuple[NgviState, list[float]]:
    """Full-structure NGVI in output space; returns the state and ELBO trace."""
    cfg = cfg or NgviConfig()
    beta = cfg.resolved_rate("full")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    jac = linmodel.jac(X)
    n, c, p = jac.shape
    jst = jac.reshape(n * c, p)
    f0 = linmodel.f0(X)
    lam0 = lik.noise(f0)
    state = NgviState(jst, f0.ravel(), linmodel.theta_star, linmodel.theta_star.copy(), lam0, delta)
    rng = np.random.default_rng(cfg.seed)
    half = max(1, cfg.mc_samples // 2)
    elbo_trace: list[float] = []
    for it in range(cfg.num_steps):
        mean, blocks = state.train_marginals()
        chol = _stacked_cholesky(blocks)
        eps = _antithetic_normals(rng, half, (n, c))
        f_samples = mean + np.einsum("ncd,snd->snc", chol, eps)
        resid = np.stack([lik.residual(Y, f) for f in f_samples])
        noise = np.stack([lik.noise(f) for f in f_samples])
        e_r = resid.mean(axis=0)
        e_lam = noise.mean(axis=0)
        loglik_mc = float(np.mean([lik.log_lik(Y, f).sum() for f in f_samples]))
        elbo_trace.append(_elbo(state, loglik_mc, p))
        # precision update, then preconditioned mean step with the new precision
        state.b_blocks = (1.0 - beta) * state.b_blocks + beta * e_lam
        try:
            state._refresh()
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}")
        grad = jst.T @ e_r.ravel() - delta * state.mu
        state.mu = state.mu + beta * state.cov_apply(grad)
        if not np.all(np.isfinite(state.mu)) or np.abs(state.mu).max() > 1e50:
            raise NumericalError(
                f"iteration {it}: NGVI mean diverged; reduce the learning rate"
            )
    mean, blocks = state.train_marginals()
    chol = _stacked_cholesky(blocks)
    eps = _antithetic_normals(rng, half, (n, c))
    f_samples = mean + np.einsum("ncd,snd->snc", chol, eps)
    loglik_mc = float(np.mean([lik.log_lik(Y, f).sum() for f in f_samples]))
    elbo_trace.append(_elbo(state, loglik_mc, p))
    return state, elbo_trace


def _elbo(state: NgviState, loglik_mc: float, p: int) -> float:
    delta = state.delta
    mu = state.mu
    tr_sigma = state.trace_cov()
    e_logprior = 0.5 * p * (np.log(delta) - np.log(2.0 * np.pi)) - 0.5 * delta * (
        float(mu @ mu) + tr_sigma
    )
    entropy = 0.5 * (p * np.log(2.0 * np.pi * np.e) - state.logdet_precision())
    return loglik_mc + e_logprior + entropy


def _ngvi_refine_diag(linmodel, X, Y, lik, delta, cfg):
    """Diagonal-structure NGVI with an explicit precision vector."""
    cfg = cfg or NgviConfig()
    beta = cfg.resolved_rate("diag")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    jac = linmodel.jac(X)
    n, c, p = jac.shape
    f0 = linmodel.f0(X)
    lam0 = lik.noise(f0)
    d = np.einsum("ncp,ncd,ndp->p", jac, lam0, jac) + delta
    mu = linmodel.theta_star.copy()
    rng = np.random.default_rng(cfg.seed)
    half = max(1, cfg.mc_samples // 2)
    elbo_trace: list[float] = []

    def marginals():
        mean = f0 + jac @ (mu - linmodel.theta_star)
        var = np.einsum("ncp,ndp,p->ncd", jac, jac, 1.0 / d)
        return mean, var

    def elbo(loglik_mc):
        tr_sigma = float((1.0 / d).sum())
        e_logprior = 0.5 * p * (np.log(delta) - np.log(2.0 * np.pi)) - 0.5 * delta * (
            float(mu @ mu) + tr_sigma
        )
        entropy = 0.5 * (p * np.log(2.0 * np.pi * np.e) - float(np.log(d).sum()))
        return loglik_mc + e_logprior + entropy

    for it in range(cfg.num_steps):
        mean, blocks = marginals()
        chol = _stacked_cholesky(blocks)
        eps = _antithetic_normals(rng, half, (n, c))
        f_samples = mean + np.einsum("ncd,snd->snc", chol, eps)
        e_r = np.stack([lik.residual(Y, f) for f in f_samples]).mean(axis=0)
        e_lam = np.stack([lik.noise(f) for f in f_samples]).mean(axis=0)
        loglik_mc = float(np.mean([lik.log_lik(Y, f).sum() for f in f_samples]))
        elbo_trace.append(elbo(loglik_mc))
        d = (1.0 - beta) * d + beta * (
            np.einsum("ncp,ncd,ndp->p", jac, e_lam, jac) + delta
        )
        if d.min() <= 0.0:
            raise NumericalError(f"iteration {it}: diagonal precision lost positivity")
        grad = np.einsum("ncp,nc->p", jac, e_r) - delta * mu
        mu = mu + beta * grad / d
        if not np.all(np.isfinite(mu)) or np.abs(mu).max() > 1e50:
            raise NumericalError(
                f"iteration {it}: NGVI mean diverged; reduce the learning rate"
            )
    mean, blocks = marginals()
    chol = _stacked_cholesky(blocks)
    eps = _antithetic_normals(rng, half, (n, c))
    f_samples = mean + np.einsum("ncd,snd->snc", chol, eps)
    loglik_mc = float(np.mean([lik.log_lik(Y, f).sum() for f in f_samples]))
    elbo_trace.append(elbo(loglik_mc))
    post = GaussianPosterior(mu, DiagCurvature(d - delta), float(delta))
    return post, elbo_trace


def glm_refine_ngvi(
    linmodel: LinearizedModel,
    X,
    Y,
    lik,
    delta: float,
    cfg: NgviConfig | None = None,
    structure: str = "full",
) -> tuple[GaussianPosterior, list[float]]:
    """Natural-gradient VI on the GLM; returns the posterior and the ELBO trace."""
    if structure not in ("full", "diag"):
        raise ValueError(f"unknown NGVI structure {structure!r}")
    if structure == "diag":
        return _ngvi_refine_diag(linmodel, X, Y, lik, delta, cfg)
    state, trace = ngvi_refine_state(linmodel, X, Y, lik, delta, cfg)
    mu, curv = state.densify()
    post = GaussianPosterior(mu, FullCurvature(curv), float(delta))
    return post, trace
