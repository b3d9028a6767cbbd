"""Ground-truth oracles for small models.

Dense grid quadrature and HMC target the same unnormalized log joint from
two independent directions; the exact-Hessian Laplace keeps the network
curvature term that the GGN drops. All three only scale to tiny networks
and exist to calibrate the scalable approximations against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from linlaplace.curvature import FullCurvature
from linlaplace.posterior import GaussianPosterior, NumericalError

FloatArray = NDArray[np.float64]

__all__ = [
    "GridPosterior",
    "grid_posterior",
    "HmcConfig",
    "HmcResult",
    "hmc_sample",
    "exact_hessian_laplace",
]

MAX_GRID_DIM = 3
MAX_GRID_RESOLUTION = 500
MAX_EXACT_HESSIAN_PARAMS = 50


@dataclass
class GridPosterior:
    """Normalized posterior on a dense rectangular grid.

    log_density is normalized so that exp(log_density) integrates to 1
    under the trapezoid rule on the stored axes.
    """

    axes: tuple[FloatArray, ...]
    log_density: FloatArray

    def __post_init__(self):
        self._weights = [_trapezoid_weights(ax) for ax in self.axes]

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def grid_points(self) -> FloatArray:
        """All grid nodes, shape (K, d)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def _node_masses(self) -> FloatArray:
        """Per-node quadrature mass w_k p_k, same shape as the table."""
        out = np.exp(self.log_density)
        for ax, w in enumerate(self._weights):
            shape = [1] * self.ndim
            shape[ax] = -1
            out = out * w.reshape(shape)
        return out

    def integral(self) -> float:
        return float(self._node_masses().sum())

    def expectation(self, fn) -> FloatArray:
        """Quadrature of fn against the posterior; fn maps (K, d) -> (K, ...)."""
        masses = self._node_masses().ravel()
        values = np.asarray(fn(self.grid_points()), dtype=np.float64)
        return np.tensordot(masses, values, axes=(0, 0))

    def mean(self) -> FloatArray:
        return self.expectation(lambda pts: pts)

    def covariance(self) -> FloatArray:
        mu = self.mean()
        second = self.expectation(lambda pts: pts[:, :, None] * pts[:, None, :])
        return second - np.outer(mu, mu)

    def mass(self, indicator) -> float:
        """Posterior probability of {theta : indicator(theta)}."""
        return float(self.expectation(lambda pts: np.asarray(indicator(pts), dtype=np.float64)))

    def argmax(self) -> FloatArray:
        flat = int(np.argmax(self.log_density))
        idx = np.unravel_index(flat, self.log_density.shape)
        return np.array([self.axes[d][idx[d]] for d in range(self.ndim)])

    def bin_masses(self, edges: list[FloatArray]) -> FloatArray:
        """Aggregate node masses into rectangular bins (for TV comparisons)."""
        if len(edges) != self.ndim:
            raise ValueError("one edge array per grid dimension required")
        masses = self._node_masses().ravel()
        pts = self.grid_points()
        shape = tuple(len(e) - 1 for e in edges)
        flat_idx = np.zeros(pts.shape[0], dtype=np.int64)
        keep = np.ones(pts.shape[0], dtype=bool)
        for d, e in enumerate(edges):
            bi = np.searchsorted(e, pts[:, d], side="right") - 1
            bi = np.minimum(bi, shape[d] - 1)  # top edge closed
            keep &= (pts[:, d] >= e[0]) & (pts[:, d] <= e[-1])
            flat_idx = flat_idx * shape[d] + np.maximum(bi, 0)
        out = np.zeros(int(np.prod(shape)))
        np.add.at(out, flat_idx[keep], masses[keep])
        return out.reshape(shape)


def _trapezoid_weights(axis: FloatArray) -> FloatArray:
    if axis.size < 2:
        raise ValueError("each grid axis needs at least 2 points")
    w = np.empty(axis.size)
    diffs = np.diff(axis)
    w[0] = diffs[0] / 2.0
    w[-1] = diffs[-1] / 2.0
    w[1:-1] = (diffs[:-1] + diffs[1:]) / 2.0
    return w


def grid_posterior(log_joint_fn, ranges, resolution) -> GridPosterior:
    """Tabulate and normalize an unnormalized log density on a dense grid.

    ranges is a sequence of (lo, hi) per dimension; resolution an int or one
    per dimension. log_joint_fn must be vectorized over rows of (K, d).
    """
    ranges = [tuple(map(float, r)) for r in ranges]
    d = len(ranges)
    if not 1 <= d <= MAX_GRID_DIM:
        raise ValueError(f"grid supports 1..{MAX_GRID_DIM} dimensions, got {d}")
    if np.isscalar(resolution):
        resolution = [int(resolution)] * d
    if len(resolution) != d:
        raise ValueError("one resolution per dimension required")
    for res in resolution:
        if not 2 <= res <= MAX_GRID_RESOLUTION:
            raise ValueError(f"resolution must be in [2, {MAX_GRID_RESOLUTION}], got {res}")
    axes = []
    for (lo, hi), res in zip(ranges, resolution):
        if not hi > lo:
            raise ValueError("each range needs hi > lo")
        axes.append(np.linspace(lo, hi, res))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    table = np.empty(pts.shape[0])
    chunk = 1 << 16
    for start in range(0, pts.shape[0], chunk):
        table[start : start + chunk] = np.asarray(
            log_joint_fn(pts[start : start + chunk]), dtype=np.float64
        )
    if np.all(np.isinf(table) & (table < 0)):
        raise NumericalError("log density is -inf everywhere on the grid")
    table = table.reshape([ax.size for ax in axes])
    log_w = np.zeros_like(table)
    for ax_i, ax in enumerate(axes):
        shape = [1] * d
        shape[ax_i] = -1
        log_w = log_w + np.log(_trapezoid_weights(ax)).reshape(shape)
    log_z = float(logsumexp(table + log_w))
    if not np.isfinite(log_z):
        raise NumericalError("grid normalization constant is not finite")
    return GridPosterior(tuple(axes), table - log_z)


@dataclass
class HmcConfig:
    """Leapfrog HMC settings; samples are pooled across parallel chains."""

    step_size: float = 0.05
    num_leapfrog: int = 20
    num_samples: int = 100_000
    burn_in: int = 10_000
    seed: int = 0
    num_chains: int = 16


@dataclass
class HmcResult:
    samples: FloatArray  # (num_samples, d)
    acceptance_rate: float
    mean_energy_error: float  # mean |H(end) - H(start)| per trajectory


def hmc_sample(log_prob_fn, grad_fn, theta_init, cfg: HmcConfig | None = None) -> HmcResult:
    """Hamiltonian Monte Carlo with a fixed-step leapfrog integrator.

    log_prob_fn and grad_fn must be vectorized over rows of (K, d); chains
    run in lockstep and their post-burn-in draws are concatenated. Fails if
    the acceptance rate drops below 0.1.
    """
    cfg = cfg or HmcConfig()
    theta_init = np.atleast_1d(np.asarray(theta_init, dtype=np.float64))
    d = theta_init.shape[0]
    b = max(1, cfg.num_chains)
    rng = np.random.default_rng(cfg.seed)
    q = np.tile(theta_init, (b, 1))
    logp = np.asarray(log_prob_fn(q), dtype=np.float64)
    keep_per_chain = -(-cfg.num_samples // b)  # ceil
    total_steps = cfg.burn_in + keep_per_chain
    kept = np.empty((b, keep_per_chain, d))
    accepts = 0.0
    proposals = 0
    energy_err_sum = 0.0
    eps = cfg.step_size
    for step in range(total_steps):
        p0 = rng.standard_normal((b, d))
        h0 = -logp + 0.5 * (p0 * p0).sum(axis=1)
        qn = q.copy()
        p = p0 + 0.5 * eps * grad_fn(qn)
        for _ in range(cfg.num_leapfrog - 1):
            qn = qn + eps * p
            p = p + eps * grad_fn(qn)
        qn = qn + eps * p
        p = p + 0.5 * eps * grad_fn(qn)
        logp_n = np.asarray(log_prob_fn(qn), dtype=np.float64)
        h1 = -logp_n + 0.5 * (p * p).sum(axis=1)
        dh = h1 - h0
        accept = np.log(rng.uniform(size=b)) < np.where(np.isfinite(dh), -dh, -np.inf)
        q = np.where(accept[:, None], qn, q)
        logp = np.where(accept, logp_n, logp)
        if step >= cfg.burn_in:
            accepts += float(accept.sum())
            proposals += b
            energy_err_sum += float(np.abs(dh[np.isfinite(dh)]).sum())
            kept[:, step - cfg.burn_in] = q
    rate = accepts / proposals
    if rate < 0.1:
        raise NumericalError(
            f"HMC acceptance rate {rate:.3f} < 0.1; reduce step_size (currently {eps})"
        )
    samples = kept.reshape(b * keep_per_chain, d)[: cfg.num_samples]
    return HmcResult(samples, rate, energy_err_sum / proposals)


def exact_hessian_laplace(
    net,
    lik,
    X,
    Y,
    delta: float,
    theta_star: FloatArray,
    fd_step: float = 1e-4,
) -> GaussianPosterior:
    """Laplace approximation with the exact (finite-difference) log-joint Hessian.

    Central differences of the gradient at theta*, symmetrized; keeps the
    network-curvature term the GGN drops, so the result can be indefinite.
    Eigenvalues of the precision are floored at 1e-8; if more than P/2 need
    the floor, theta* is not near a mode and an error is raised.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    p = theta_star.shape[0]
    if p > MAX_EXACT_HESSIAN_PARAMS:
        raise ValueError(
            f"exact Hessian supports at most {MAX_EXACT_HESSIAN_PARAMS} parameters, got {p}"
        )
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))

    def grad_log_joint(th):
        f = net.forward(th, X)
        return net.vjp(th, X, lik.residual(Y, f)) - delta * th

    hess = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = fd_step
        hess[:, j] = (grad_log_joint(theta_star + e) - grad_log_joint(theta_star - e)) / (
            2.0 * fd_step
        )
    precision = -0.5 * (hess + hess.T)
    vals, vecs = np.linalg.eigh(precision)
    floored = np.maximum(vals, 1e-8)
    num_floored = int((vals < 1e-8).sum())
    if num_floored > p // 2:
        raise NumericalError(
            f"{num_floored} of {p} precision eigenvalues needed flooring; "
            "theta_star does not look like a mode"
        )
    precision = (vecs * floored) @ vecs.T
    curv = FullCurvature(precision - delta * np.eye(p), clip=False)
    return GaussianPosterior(theta_star, curv, float(delta))
