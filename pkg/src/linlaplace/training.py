"""MAP training: log joint and adaptive-moment gradient ascent.

The optimizer descends on the negative log joint scaled by 1/N, so the
isotropic Gaussian prior with precision delta enters as weight decay
delta / N. Runs are deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from linlaplace.network import MlpNetwork

FloatArray = NDArray[np.float64]

__all__ = ["MapConfig", "log_joint", "log_joint_grad", "map_train"]


@dataclass
class MapConfig:
    """Optimizer settings for MAP estimation.

    num_steps counts parameter updates. batch_size None picks the full batch
    for N <= 2000 and 512 otherwise. decay_steps lists step indices at which
    the learning rate is multiplied by decay_factor. converge_tol, when set,
    stops early once the full-batch log joint changes by less than
    tol * (1 + |log joint|) between two consecutive trace checkpoints, twice
    in a row; num_steps stays the hard cap.
    """

    learning_rate: float = 1e-3
    num_steps: int = 10000
    batch_size: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: tuple[int, ...] = ()
    decay_factor: float = 0.1
    trace_every: int = 0  # 0 means num_steps // 100
    converge_tol: float | None = None

    def resolved_batch_size(self, n: int) -> int:
        if self.batch_size is not None:
            return min(int(self.batch_size), n)
        return n if n <= 2000 else 512


def log_joint(net: MlpNetwork, theta, X, Y, lik, delta: float) -> float:
    """Unnormalized log posterior: data log likelihood plus Gaussian prior."""
    theta = np.asarray(theta, dtype=np.float64)
    f = net.forward(theta, X)
    loglik = float(lik.log_lik(Y, f).sum())
    p = theta.shape[0]
    logprior = 0.5 * p * (np.log(delta) - np.log(2.0 * np.pi)) - 0.5 * delta * float(
        theta @ theta
    )
    return loglik + logprior


def log_joint_grad(net: MlpNetwork, theta, X, Y, lik, delta: float) -> FloatArray:
    """Gradient of the log joint: sum_n J_n^T r_n - delta * theta."""
    theta = np.asarray(theta, dtype=np.float64)
    cache = net.hidden_states(theta, X)
    r = lik.residual(Y, cache[0][-1])
    return net.vjp(theta, X, r, cache=cache) - delta * theta


def map_train(
    net: MlpNetwork,
    lik,
    X,
    Y,
    delta: float,
    cfg: MapConfig | None = None,
    init_theta: FloatArray | None = None,
) -> tuple[FloatArray, list[tuple[int, float]]]:
    """Adam ascent on the log joint; returns theta_star and a (step, log_joint) trace."""
    cfg = cfg or MapConfig()
    if delta <= 0:
        raise ValueError("prior precision delta must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y)
    n = X.shape[0]
    rng = np.random.default_rng(cfg.seed)
    theta = net.init_params(cfg.seed) if init_theta is None else np.array(init_theta, dtype=np.float64)

    batch = cfg.resolved_batch_size(n)
    full_batch = batch >= n
    lr = cfg.learning_rate
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trace_every = cfg.trace_every or max(1, cfg.num_steps // 100)
    trace: list[tuple[int, float]] = []
    decay_at = set(int(s) for s in cfg.decay_steps)

    order = rng.permutation(n)
    cursor = 0
    flat_streak = 0
    for step in range(1, cfg.num_steps + 1):
        if full_batch:
            xb, yb = X, Y
        else:
            if cursor + batch > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor : cursor + batch]
            cursor += batch
            xb, yb = X[idx], Y[idx]
        cache = net.hidden_states(theta, xb)
        r = lik.residual(yb, cache[0][-1])
        # descent direction on -(mean log lik) + (delta / N) * ||theta||^2 / 2
        grad = -net.vjp(theta, xb, r, cache=cache) / xb.shape[0] + (delta / n) * theta
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        mhat = m / (1.0 - cfg.beta1**step)
        vhat = v / (1.0 - cfg.beta2**step)
        theta = theta - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        if step in decay_at:
            # the decayed rate takes effect from the next update on
            lr *= cfg.decay_factor
        if step % trace_every == 0 or step == cfg.num_steps:
            trace.append((step, log_joint(net, theta, X, Y, lik, delta)))
            if cfg.converge_tol is not None and len(trace) >= 2:
                prev, curr = trace[-2][1], trace[-1][1]
                if abs(curr - prev) <= cfg.converge_tol * (1.0 + abs(curr)):
                    flat_streak += 1
                    if flat_streak >= 2:
                        break
                else:
                    flat_streak = 0
    return theta, trace
