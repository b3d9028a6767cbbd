"""Likelihood families: per-example log density, residual, and noise precision.

The residual is the gradient of the log density in the network output f and
the noise matrix is its negative Hessian; both feed the Gauss-Newton
curvature. Noise matrices are symmetric PSD for all three families.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

__all__ = [
    "GaussianLikelihood",
    "BernoulliLikelihood",
    "CategoricalLikelihood",
    "likelihood_for",
]


def _sigmoid(f: FloatArray) -> FloatArray:
    # split by sign to stay finite for large |f|
    out = np.empty_like(f, dtype=np.float64)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    ef = np.exp(f[~pos])
    out[~pos] = ef / (1.0 + ef)
    return out


def _log_sigmoid(f: FloatArray) -> FloatArray:
    return -np.logaddexp(0.0, -f)


def _softmax(f: FloatArray) -> FloatArray:
    z = f - f.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_2d(arr, width: int | None = None):
    """1-d input means a stack of scalar outputs; 2-d passes through."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if width is not None and arr.shape[1] != width:
        raise ValueError(f"expected {width} output columns, got {arr.shape[1]}")
    return arr


class GaussianLikelihood:
    """Homoscedastic Gaussian observation model with fixed noise variance."""

    name = "gaussian"
    num_classes = None

    def __init__(self, noise_var: float = 1.0):
        if noise_var <= 0:
            raise ValueError("noise_var must be positive")
        self.noise_var = float(noise_var)

    def latent_dim(self, num_outputs: int) -> int:
        return num_outputs

    def log_lik(self, Y: FloatArray, F: FloatArray) -> FloatArray:
        """Per-example log density, shape (N,)."""
        F = _as_2d(F)
        Y = _as_2d(Y).reshape(F.shape)
        c = F.shape[1]
        quad = ((Y - F) ** 2).sum(axis=1) / (2.0 * self.noise_var)
        return -0.5 * c * np.log(2.0 * np.pi * self.noise_var) - quad

    def residual(self, Y: FloatArray, F: FloatArray) -> FloatArray:
        F = _as_2d(F)
        Y = _as_2d(Y).reshape(F.shape)
        return (Y - F) / self.noise_var

    def noise(self, F: FloatArray) -> FloatArray:
        """Negative log-density Hessian in f, shape (N, C, C)."""
        F = _as_2d(F)
        n, c = F.shape
        return np.broadcast_to(np.eye(c) / self.noise_var, (n, c, c)).copy()

    def predictive_mix(self, F_samples: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Moment-matched mixture: mean and total variance per output."""
        F_samples = np.asarray(F_samples, dtype=np.float64)
        mean = F_samples.mean(axis=0)
        var = F_samples.var(axis=0) + self.noise_var
        return mean, var


class BernoulliLikelihood:
    """Binary labels through a single logit."""

    name = "bernoulli"
    num_classes = 2

    def latent_dim(self, num_classes: int) -> int:
        if num_classes != 2:
            raise ValueError("bernoulli handles exactly 2 classes")
        return 1

    def log_lik(self, Y, F):
        F = _as_2d(F, width=1)
        y = np.asarray(Y, dtype=np.float64).reshape(F.shape[0])
        f = F[:, 0]
        return y * _log_sigmoid(f) + (1.0 - y) * _log_sigmoid(-f)

    def residual(self, Y, F):
        F = _as_2d(F, width=1)
        y = np.asarray(Y, dtype=np.float64).reshape(F.shape[0])
        return (y - _sigmoid(F[:, 0]))[:, None]

    def noise(self, F):
        F = _as_2d(F, width=1)
        p = _sigmoid(F[:, 0])
        return (p * (1.0 - p))[:, None, None]

    def predictive_mix(self, F_samples) -> FloatArray:
        """Mean class probabilities over output samples, shape (N, 2)."""
        F_samples = np.asarray(F_samples, dtype=np.float64)
        if F_samples.ndim == 2:
            F_samples = F_samples[:, :, None]
        p = _sigmoid(F_samples[:, :, 0]).mean(axis=0)
        return np.column_stack([1.0 - p, p])


class CategoricalLikelihood:
    """Integer labels through softmax logits."""

    name = "categorical"

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError("categorical needs at least two classes")
        self.num_classes = int(num_classes)

    def latent_dim(self, num_classes: int) -> int:
        if num_classes != self.num_classes:
            raise ValueError(
                f"categorical likelihood was built for {self.num_classes} classes"
            )
        return self.num_classes

    def log_lik(self, Y, F):
        F = _as_2d(F, width=self.num_classes)
        y = np.asarray(Y).astype(int).reshape(F.shape[0])
        logz = np.logaddexp.reduce(F, axis=1)
        return F[np.arange(F.shape[0]), y] - logz

    def residual(self, Y, F):
        F = _as_2d(F, width=self.num_classes)
        y = np.asarray(Y).astype(int).reshape(F.shape[0])
        onehot = np.zeros_like(F)
        onehot[np.arange(F.shape[0]), y] = 1.0
        return onehot - _softmax(F)

    def noise(self, F):
        F = _as_2d(F, width=self.num_classes)
        p = _softmax(F)
        lam = -np.einsum("ni,nj->nij", p, p)
        idx = np.arange(F.shape[1])
        lam[:, idx, idx] += p
        return lam

    def predictive_mix(self, F_samples) -> FloatArray:
        F_samples = np.asarray(F_samples, dtype=np.float64)
        return _softmax(F_samples).mean(axis=0)


def likelihood_for(name: str, num_classes: int | None = None, noise_var: float = 1.0):
    """Build a likelihood by name; 2-class problems default to bernoulli."""
    if name == "gaussian":
        return GaussianLikelihood(noise_var)
    if name == "bernoulli":
        return BernoulliLikelihood()
    if name == "categorical":
        if num_classes is None:
            raise ValueError("categorical needs num_classes")
        return CategoricalLikelihood(num_classes)
    if name == "auto":
        if num_classes is None:
            return GaussianLikelihood(noise_var)
        return BernoulliLikelihood() if num_classes == 2 else CategoricalLikelihood(num_classes)
    raise ValueError(f"unknown likelihood {name!r}")
