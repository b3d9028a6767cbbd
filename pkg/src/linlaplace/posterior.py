"""Gaussian posteriors N(theta*, (curvature + delta I)^-1) over flat parameters.

The covariance is never materialized unless asked for; sampling, covariance
action, and output-space quadratic forms go through the structure-specific
factorizations (eigenbasis for full, elementwise for diagonal, per-layer
factor pairs for KFAC).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from linlaplace import _serialize
from linlaplace.curvature import (
    DiagCurvature,
    FullCurvature,
    KfacCurvature,
    KfacLayer,
    KfacPrecision,
    kfac_precision,
    kron_to_flat,
)

FloatArray = NDArray[np.float64]

__all__ = [
    "NumericalError",
    "GaussianPosterior",
    "laplace_posterior",
    "save_posterior",
    "load_posterior",
]


class NumericalError(RuntimeError):
    """Raised when a factorization fails beyond one jitter retry."""


@dataclass
class GaussianPosterior:
    """Gaussian over flat parameters with structured precision curvature + delta I."""

    mean: FloatArray
    curvature: FullCurvature | DiagCurvature | KfacCurvature
    delta: float
    dampened: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.mean.shape != (self.curvature.num_params,):
            raise ValueError("mean length does not match the curvature size")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.dampened and self.curvature.mode != "kfac":
            raise ValueError("dampening applies to kfac curvature only")
        if self.curvature.mode == "full":
            prec = self.curvature.eigvals + self.delta
            if prec.min() <= 0.0:
                # one jitter retry, then give up
                jitter = 1e-10 * max(1.0, float(np.abs(self.curvature.eigvals).max()))
                prec = self.curvature.eigvals + self.delta + jitter
                if prec.min() <= 0.0:
                    raise NumericalError(
                        "posterior precision is not positive definite"
                    )
            self._prec_eigs = prec
        elif self.curvature.mode == "kfac":
            self._kfac_prec = kfac_precision(self.curvature, self.delta, self.dampened)

    @property
    def num_params(self) -> int:
        return self.mean.shape[0]

    # ----- covariance action -----

    def _layer_views(self, vecs: FloatArray):
        """Split (..., P) into per-layer matrix views (..., D_out, D_in+1)."""
        sizes = self.curvature.layer_sizes
        out = []
        start = 0
        for lidx in range(len(sizes) - 1):
            din, dout = sizes[lidx], sizes[lidx + 1]
            size = dout * (din + 1)
            block = vecs[..., start : start + size]
            w = block[..., : dout * din].reshape(block.shape[:-1] + (dout, din))
            b = block[..., dout * din :].reshape(block.shape[:-1] + (dout, 1))
            out.append(np.concatenate([w, b], axis=-1))
            start += size
        return out

    def _views_to_flat(self, views):
        parts = []
        for v in views:
            w = v[..., :-1]
            b = v[..., -1]
            parts.append(
                np.concatenate(
                    [w.reshape(w.shape[:-2] + (-1,)), b], axis=-1
                )
            )
        return np.concatenate(parts, axis=-1)

    def cov_apply(self, vecs: FloatArray) -> FloatArray:
        """Sigma v for one vector (P,) or a stack (..., P)."""
        vecs = np.asarray(vecs, dtype=np.float64)
        if self.curvature.mode == "full":
            v = self.curvature.eigvecs
            return ((vecs @ v) / self._prec_eigs) @ v.T
        if self.curvature.mode == "diag":
            return vecs / (self.curvature.diag + self.delta)
        views = self._layer_views(vecs)
        out = [
            _batched_cov_apply(pl, view)
            for pl, view in zip(self._kfac_prec.layers, views)
        ]
        return self._views_to_flat(out)

    def quadform(self, jac: FloatArray) -> FloatArray:
        """J Sigma J^T for jac of shape (N, C, P) -> (N, C, C)."""
        jac = np.asarray(jac, dtype=np.float64)
        sigma_j = self.cov_apply(jac)
        return np.einsum("...cp,...dp->...cd", jac, sigma_j)

    # ----- sampling -----

    def sample(self, num_samples: int, seed: int = 0) -> FloatArray:
        """Draws of shape (S, P); deterministic per seed."""
        rng = np.random.default_rng(seed)
        p = self.num_params
        eps = rng.standard_normal((num_samples, p))
        if self.curvature.mode == "full":
            v = self.curvature.eigvecs
            dev = ((eps @ v) / np.sqrt(self._prec_eigs)) @ v.T
        elif self.curvature.mode == "diag":
            dev = eps / np.sqrt(self.curvature.diag + self.delta)
        else:
            views = self._layer_views(eps)
            dev = self._views_to_flat(
                [
                    _batched_sample(pl, view)
                    for pl, view in zip(self._kfac_prec.layers, views)
                ]
            )
        return self.mean + dev

    # ----- dense reconstructions (small problems and tests) -----

    def dense_covariance(self) -> FloatArray:
        if self.curvature.mode == "full":
            v = self.curvature.eigvecs
            return (v / self._prec_eigs) @ v.T
        if self.curvature.mode == "diag":
            return np.diag(1.0 / (self.curvature.diag + self.delta))
        return np.linalg.inv(self.dense_precision())

    def dense_precision(self) -> FloatArray:
        p = self.num_params
        if self.curvature.mode == "full":
            v = self.curvature.eigvecs
            return (v * self._prec_eigs) @ v.T
        if self.curvature.mode == "diag":
            return np.diag(self.curvature.diag + self.delta)
        out = np.zeros((p, p))
        start = 0
        for pl in self._kfac_prec.layers:
            size = pl.layer.d_out * pl.layer.d_in_aug
            idx = kron_to_flat(pl.layer.d_in_aug - 1, pl.layer.d_out) + start
            out[np.ix_(idx, idx)] = pl.densify()
            start += size
        return out

    def marginal_variance(self) -> FloatArray:
        """Diagonal of the covariance, shape (P,)."""
        if self.curvature.mode == "full":
            v = self.curvature.eigvecs
            return ((v * v) / self._prec_eigs).sum(axis=1)
        if self.curvature.mode == "diag":
            return 1.0 / (self.curvature.diag + self.delta)
        eye = np.eye(self.num_params)
        return np.einsum("ij,ij->i", eye, self.cov_apply(eye))


def _batched_cov_apply(pl, views):
    lay = pl.layer
    if views.ndim == 2:
        return pl.cov_apply(views)
    if pl.dampened:
        flat = views.reshape((-1,) + views.shape[-2:])
        out = np.stack([pl.cov_apply(m) for m in flat])
        return out.reshape(views.shape)
    inner = np.matmul(np.matmul(lay.w_vecs.T, views), lay.q_vecs)
    inner = inner / (np.outer(lay.w_vals, lay.q_vals) + pl.delta)
    return np.matmul(np.matmul(lay.w_vecs, inner), lay.q_vecs.T)


def _batched_sample(pl, views):
    if views.ndim == 2:
        return pl.sample(views)
    flat = views.reshape((-1,) + views.shape[-2:])
    if pl.dampened:
        out = np.stack([pl.sample(m) for m in flat])
    else:
        lay = pl.layer
        inner = np.matmul(np.matmul(lay.w_vecs.T, flat), lay.q_vecs)
        inner = inner / np.sqrt(np.outer(lay.w_vals, lay.q_vals) + pl.delta)
        out = np.matmul(np.matmul(lay.w_vecs, inner), lay.q_vecs.T)
    return out.reshape(views.shape)


def laplace_posterior(
    theta_star: FloatArray,
    curvature,
    delta: float,
    dampened: bool = False,
) -> GaussianPosterior:
    """Gaussian posterior centered at theta* with precision curvature + delta I."""
    return GaussianPosterior(np.array(theta_star, dtype=np.float64), curvature, float(delta), dampened)


def save_posterior(path, post: GaussianPosterior) -> None:
    header = {
        "kind": "posterior",
        "mode": post.curvature.mode,
        "delta": post.delta,
        "dampened": post.dampened,
        "num_params": post.num_params,
    }
    arrays = {"mean": post.mean}
    if post.curvature.mode == "full":
        arrays["matrix"] = post.curvature.matrix
    elif post.curvature.mode == "diag":
        arrays["diag"] = post.curvature.diag
    else:
        header["layer_sizes"] = list(post.curvature.layer_sizes)
        for i, lay in enumerate(post.curvature.layers):
            arrays[f"q_{i}"] = lay.q
            arrays[f"w_{i}"] = lay.w
    _serialize.write_artifact(path, header, arrays)


def load_posterior(path) -> GaussianPosterior:
    header, arrays = _serialize.read_artifact(path)
    if header.get("kind") != "posterior":
        raise ValueError(f"{path} is not a posterior artifact")
    mode = header["mode"]
    if mode == "full":
        curv = FullCurvature(arrays["matrix"])
    elif mode == "diag":
        curv = DiagCurvature(arrays["diag"])
    else:
        sizes = tuple(header["layer_sizes"])
        n_layers = len(sizes) - 1
        layers = [KfacLayer(arrays[f"q_{i}"], arrays[f"w_{i}"]) for i in range(n_layers)]
        curv = KfacCurvature(layers, sizes)
    return GaussianPosterior(arrays["mean"], curv, header["delta"], header["dampened"])
