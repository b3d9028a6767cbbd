"""Gauss-Newton curvature at theta*: full, diagonal, and Kronecker-factored.

All three structures represent (exactly or approximately) the data term
sum_n J_n^T Lambda_n J_n of the posterior precision; the prior precision
delta is added later by the posterior module.

Layer parameters viewed as a matrix: row i collects the incoming weights of
output unit i with the bias as the final column, so V = [W | b] has shape
(D_out, D_in + 1). The Kronecker identity Q (x) W_fac = J^T Lambda J holds
for the column-major (input-major) vec of V; `kron_to_flat` maps that basis
back to the flat parameter slice (weights row-major, then bias).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from linlaplace.network import MlpNetwork

FloatArray = NDArray[np.float64]

__all__ = [
    "FullCurvature",
    "DiagCurvature",
    "KfacCurvature",
    "KfacPrecision",
    "ggn",
    "kfac",
    "kfac_precision",
    "kron_to_flat",
    "layer_matrix",
    "matrix_to_flat",
]

FULL_MODE_CAP = 5000


def kron_to_flat(d_in: int, d_out: int) -> NDArray[np.int64]:
    """Index map from the layer's Kronecker basis to its flat parameter slice.

    Kronecker position k = j * d_out + i (input j including the bias column,
    output i) corresponds to flat position i * d_in + j for j < d_in and to
    d_in * d_out + i for the bias column.
    """
    idx = np.empty((d_in + 1) * d_out, dtype=np.int64)
    for j in range(d_in + 1):
        for i in range(d_out):
            idx[j * d_out + i] = i * d_in + j if j < d_in else d_in * d_out + i
    return idx


def layer_matrix(flat: FloatArray, d_in: int, d_out: int) -> FloatArray:
    """Reshape one layer's flat parameter block into the [W | b] matrix view."""
    flat = np.asarray(flat, dtype=np.float64)
    w = flat[: d_in * d_out].reshape(d_out, d_in)
    b = flat[d_in * d_out :]
    return np.hstack([w, b[:, None]])


def matrix_to_flat(mat: FloatArray) -> FloatArray:
    """Inverse of layer_matrix."""
    d_out, d_in_plus = mat.shape
    return np.concatenate([mat[:, :-1].ravel(), mat[:, -1]])


@dataclass
class FullCurvature:
    """Dense P x P data-term matrix with its eigendecomposition cached.

    Negative eigenvalues below roundoff are clipped to zero on construction
    unless clip is disabled (reference routes may carry indefinite terms).
    """

    matrix: FloatArray
    eigvals: FloatArray = field(init=False)
    eigvecs: FloatArray = field(init=False)
    clip: bool = True

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        m = 0.5 * (m + m.T)
        vals, vecs = scipy.linalg.eigh(m)
        if self.clip and vals.min() < 0.0:
            vals = np.maximum(vals, 0.0)
            m = (vecs * vals) @ vecs.T
            m = 0.5 * (m + m.T)
        self.matrix = m
        self.eigvals = vals if not self.clip else np.maximum(vals, 0.0)
        self.eigvecs = vecs

    @property
    def num_params(self) -> int:
        return self.matrix.shape[0]

    mode = "full"


@dataclass
class DiagCurvature:
    """Exact diagonal of the full data term; entries clipped at zero."""

    diag: FloatArray

    def __post_init__(self):
        self.diag = np.maximum(np.asarray(self.diag, dtype=np.float64), 0.0)

    @property
    def num_params(self) -> int:
        return self.diag.shape[0]

    mode = "diag"


@dataclass
class KfacLayer:
    """One layer's factor pair with cached eigenpairs (eigenvalues clipped at 0)."""

    q: FloatArray  # (D_in+1) x (D_in+1) activation Gram
    w: FloatArray  # D_out x D_out backpropagated output-Hessian factor
    q_vals: FloatArray = field(init=False)
    q_vecs: FloatArray = field(init=False)
    w_vals: FloatArray = field(init=False)
    w_vecs: FloatArray = field(init=False)

    def __post_init__(self):
        self.q = 0.5 * (self.q + self.q.T)
        self.w = 0.5 * (self.w + self.w.T)
        self.q_vals, self.q_vecs = scipy.linalg.eigh(self.q)
        self.w_vals, self.w_vecs = scipy.linalg.eigh(self.w)
        self.q_vals = np.maximum(self.q_vals, 0.0)
        self.w_vals = np.maximum(self.w_vals, 0.0)

    @property
    def d_out(self) -> int:
        return self.w.shape[0]

    @property
    def d_in_aug(self) -> int:
        return self.q.shape[0]


@dataclass
class KfacCurvature:
    """Per-layer Kronecker factor pairs; block-diagonal across layers."""

    layers: list[KfacLayer]
    layer_sizes: tuple[int, ...]

    @property
    def num_params(self) -> int:
        return sum(l.d_out * l.d_in_aug for l in self.layers)

    mode = "kfac"


def _lambda_sqrt(lam: FloatArray) -> FloatArray:
    """Symmetric PSD square roots of stacked C x C matrices."""
    if lam.shape[-1] == 1:
        return np.sqrt(np.maximum(lam, 0.0))
    vals, vecs = np.linalg.eigh(lam)
    vals = np.maximum(vals, 0.0)
    return np.einsum("nij,nj,nkj->nik", vecs, np.sqrt(vals), vecs)


def ggn(
    net: MlpNetwork,
    theta: FloatArray,
    X: FloatArray,
    lik,
    mode: str = "full",
    max_full_params: int = FULL_MODE_CAP,
    chunk: int = 256,
) -> FullCurvature | DiagCurvature:
    """Accumulate sum_n J_n^T Lambda_n J_n (full) or its exact diagonal.

    Accumulation runs in fixed data order, chunked over examples.
    """
    if mode not in ("full", "diag"):
        raise ValueError(f"unknown ggn mode {mode!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise ValueError("ggn needs at least one data point")
    p = net.num_params
    if mode == "full" and p > max_full_params:
        raise ValueError(
            f"full-mode curvature with P={p} exceeds the cap {max_full_params}; use kfac"
        )
    acc = np.zeros((p, p)) if mode == "full" else np.zeros(p)
    for start in range(0, n, chunk):
        xb = X[start : start + chunk]
        f = net.forward(theta, xb)
        lam = lik.noise(f)
        jac = net.jacobian(theta, xb)
        half = np.matmul(_lambda_sqrt(lam), jac)  # (n, C, P)
        flat = half.reshape(-1, p)
        if mode == "full":
            acc += flat.T @ flat
        else:
            acc += np.einsum("kp,kp->p", flat, flat)
    if mode == "full":
        return FullCurvature(acc)
    return DiagCurvature(acc)


def kfac(net: MlpNetwork, theta: FloatArray, X: FloatArray, lik) -> KfacCurvature:
    """Kronecker-factored curvature: Q_l = sum_n a a^T, W_l by backward recursion.

    The output layer seeds the recursion with Lambda(f_n) conjugated by the
    output map's derivative; each earlier layer conjugates by the next weight
    matrix and masks with the activation derivative. For a single data point
    Q_l (x) W_l reproduces the exact GGN block of the layer.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("kfac needs at least one data point")
    acts, pres = net.hidden_states(theta, X)
    f = acts[-1]
    lam = lik.noise(f)
    seed = net._output_seed(pres[-1])
    a_fac = np.matmul(np.matmul(seed.transpose(0, 2, 1), lam), seed)  # (N, D_L, D_L)
    weights = [w for w, _ in net.unflatten(theta)]
    num_layers = net.num_layers
    pairs: list[tuple[FloatArray, FloatArray]] = [None] * num_layers
    for lidx in range(num_layers - 1, -1, -1):
        a_prev = acts[lidx]
        aug = np.hstack([a_prev, np.ones((a_prev.shape[0], 1))])
        q = aug.T @ aug
        pairs[lidx] = (q, a_fac.sum(axis=0))
        if lidx > 0:
            w = weights[lidx]
            d = net._act_deriv(pres[lidx - 1], acts[lidx])
            a_fac = np.matmul(np.matmul(w.T, a_fac), w)
            a_fac = a_fac * d[:, :, None] * d[:, None, :]
    layers = [KfacLayer(q, w_fac) for q, w_fac in pairs]
    return KfacCurvature(layers, net.layer_sizes)


@dataclass
class KfacPrecisionLayer:
    """Per-layer posterior precision in factored form.

    Undampened: exactly Q (x) W + delta I through the shared eigenbasis.
    Dampened: the factor product (Q + sqrt(delta) I) (x) (W + sqrt(delta) I).
    """

    layer: KfacLayer
    delta: float
    dampened: bool
    # dampened factors and their lower Cholesky triangles
    q_damp: FloatArray | None = None
    w_damp: FloatArray | None = None
    q_cholL: FloatArray | None = None
    w_cholL: FloatArray | None = None

    def __post_init__(self):
        if self.dampened:
            root = np.sqrt(self.delta)
            self.q_damp = self.layer.q + root * np.eye(self.layer.d_in_aug)
            self.w_damp = self.layer.w + root * np.eye(self.layer.d_out)
            self.q_cholL = scipy.linalg.cholesky(self.q_damp, lower=True)
            self.w_cholL = scipy.linalg.cholesky(self.w_damp, lower=True)

    def _scale(self) -> FloatArray:
        # precision eigenvalues in the matrix view: (D_out, D_in+1)
        return np.outer(self.layer.w_vals, self.layer.q_vals) + self.delta

    def cov_apply(self, mat: FloatArray) -> FloatArray:
        """Covariance action on a (D_out, D_in+1) matrix view."""
        lay = self.layer
        if self.dampened:
            tmp = scipy.linalg.cho_solve((self.w_cholL, True), mat)
            return scipy.linalg.cho_solve((self.q_cholL, True), tmp.T).T
        inner = lay.w_vecs.T @ mat @ lay.q_vecs
        inner = inner / self._scale()
        return lay.w_vecs @ inner @ lay.q_vecs.T

    def sample(self, eps: FloatArray) -> FloatArray:
        """Map a standard normal layer matrix to a covariance sample."""
        lay = self.layer
        if self.dampened:
            # V = Lw^-T E Lq^-1 has covariance (Qd (x) Wd)^-1
            tmp = scipy.linalg.solve_triangular(self.w_cholL, eps, lower=True, trans="T")
            return scipy.linalg.solve_triangular(self.q_cholL, tmp.T, lower=True, trans="T").T
        inner = lay.w_vecs.T @ eps @ lay.q_vecs
        inner = inner / np.sqrt(self._scale())
        return lay.w_vecs @ inner @ lay.q_vecs.T

    def densify(self) -> FloatArray:
        """Dense precision in the Kronecker basis (tests and small layers only)."""
        lay = self.layer
        if self.dampened:
            return np.kron(self.q_damp, self.w_damp)
        return np.kron(lay.q, lay.w) + self.delta * np.eye(lay.d_out * lay.d_in_aug)

    def logdet_precision(self) -> float:
        if self.dampened:
            lq = np.linalg.slogdet(self.q_damp)[1]
            lw = np.linalg.slogdet(self.w_damp)[1]
            return self.layer.d_out * lq + self.layer.d_in_aug * lw
        return float(np.log(self._scale()).sum())


@dataclass
class KfacPrecision:
    """Posterior precision for all layers; block-diagonal across layers."""

    layers: list[KfacPrecisionLayer]
    delta: float
    dampened: bool


def kfac_precision(curv: KfacCurvature, delta: float, dampened: bool = False) -> KfacPrecision:
    """Combine KFAC factors with the prior precision delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    layers = [KfacPrecisionLayer(l, float(delta), bool(dampened)) for l in curv.layers]
    return KfacPrecision(layers, float(delta), bool(dampened))


def save_curvature(path, curv) -> None:
    """Serialize a curvature estimate; the prior precision stays unset."""
    from linlaplace._serialize import write_artifact

    header = {"kind": "curvature", "mode": curv.mode, "num_params": curv.num_params,
              "delta": None}
    if curv.mode == "full":
        arrays = {"matrix": curv.matrix}
    elif curv.mode == "diag":
        arrays = {"diag": curv.diag}
    elif curv.mode == "kfac":
        header["layer_sizes"] = list(curv.layer_sizes)
        arrays = {}
        for i, layer in enumerate(curv.layers):
            arrays[f"q_{i}"] = layer.q
            arrays[f"w_{i}"] = layer.w
    else:
        raise ValueError(f"unknown curvature mode {curv.mode!r}")
    write_artifact(path, header, arrays)


def load_curvature(path):
    """Inverse of save_curvature."""
    from linlaplace._serialize import read_artifact

    header, arrays = read_artifact(path)
    if header.get("kind") != "curvature":
        raise ValueError(f"{path} does not hold a curvature artifact")
    mode = header["mode"]
    if mode == "full":
        return FullCurvature(arrays["matrix"])
    if mode == "diag":
        return DiagCurvature(arrays["diag"])
    if mode == "kfac":
        sizes = tuple(int(s) for s in header["layer_sizes"])
        layers = []
        for i in range(len(sizes) - 1):
            layers.append(KfacLayer(arrays[f"q_{i}"], arrays[f"w_{i}"]))
        return KfacCurvature(layers, sizes)
    raise ValueError(f"unknown curvature mode {mode!r}")
