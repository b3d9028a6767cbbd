"""Fully connected networks with exact per-example Jacobians.

Parameters live in a single flat vector, ordered layer by layer; within a
layer the weight matrix comes first (row-major, one row per output unit)
followed by the bias. All structured curvature code relies on this order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

__all__ = ["MlpNetwork", "save_params", "load_params"]


def _tanh(z: FloatArray) -> FloatArray:
    return np.tanh(z)


def _tanh_deriv(z: FloatArray, a: FloatArray) -> FloatArray:
    # uses the cached activation: d/dz tanh(z) = 1 - tanh(z)^2
    return 1.0 - a * a


def _relu(z: FloatArray) -> FloatArray:
    return np.maximum(z, 0.0)


def _relu_deriv(z: FloatArray, a: FloatArray) -> FloatArray:
    # subgradient 0 at z == 0
    return (z > 0.0).astype(np.float64)


_ACTIVATIONS = {
    "tanh": (_tanh, _tanh_deriv),
    "relu": (_relu, _relu_deriv),
}


class MlpNetwork:
    """Fully connected network with an affine output layer.

    Args:
        layer_sizes: unit counts per layer, ``[D_in, h_1, ..., C]``.
        activation: hidden nonlinearity, ``"tanh"`` or ``"relu"``.
        output_scale: optional fixed multiplier; when set, the output layer
            applies the hidden activation and multiplies by this constant
            (``f = s * act(W x + b)``) instead of staying affine. Used for
            bounded-logit toy models; not trainable.
    """

    def __init__(
        self,
        layer_sizes: list[int] | tuple[int, ...],
        activation: str = "tanh",
        output_scale: float | None = None,
    ):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output width")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer widths must be positive, got {sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = sizes
        self.activation = activation
        self.output_scale = None if output_scale is None else float(output_scale)
        self._act, self._act_deriv = _ACTIVATIONS[activation]
        self._shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        self.num_params = sum(dout * (din + 1) for dout, din in self._shapes)

    @property
    def num_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self._shapes)

    def layer_slices(self) -> list[slice]:
        """Flat-vector slice of each layer's parameter block."""
        out, start = [], 0
        for dout, din in self._shapes:
            size = dout * (din + 1)
            out.append(slice(start, start + size))
            start += size
        return out

    def init_params(self, seed: int) -> FloatArray:
        """Gaussian fan-in init: W ~ N(0, 1/D_in), biases zero. Deterministic per seed."""
        rng = np.random.default_rng(seed)
        parts = []
        for dout, din in self._shapes:
            w = rng.standard_normal((dout, din)) / np.sqrt(din)
            parts.append(w.ravel())
            parts.append(np.zeros(dout))
        return np.concatenate(parts)

    def unflatten(self, theta: FloatArray) -> list[tuple[FloatArray, FloatArray]]:
        """Split a flat parameter vector into per-layer (W, b) views."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_params,):
            raise ValueError(f"expected theta of shape ({self.num_params},), got {theta.shape}")
        layers, start = [], 0
        for dout, din in self._shapes:
            w = theta[start : start + dout * din].reshape(dout, din)
            start += dout * din
            b = theta[start : start + dout]
            start += dout
            layers.append((w, b))
        return layers

    def flatten(self, layers: list[tuple[FloatArray, FloatArray]]) -> FloatArray:
        parts = []
        for (w, b), (dout, din) in zip(layers, self._shapes):
            if w.shape != (dout, din) or b.shape != (dout,):
                raise ValueError("layer shapes do not match the architecture")
            parts.append(np.asarray(w, dtype=np.float64).ravel())
            parts.append(np.asarray(b, dtype=np.float64))
        return np.concatenate(parts)

    # ----- forward -----

    def _forward_cache(self, theta, X):
        """Forward pass keeping activations and preactivations per layer."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        layers = self.unflatten(theta)
        acts = [X]  # a_0 = input
        pres = []
        a = X
        for idx, (w, b) in enumerate(layers):
            z = a @ w.T + b
            pres.append(z)
            if idx < len(layers) - 1:
                a = self._act(z)
            elif self.output_scale is not None:
                a = self.output_scale * self._act(z)
            else:
                a = z
            acts.append(a)
        return acts[-1], acts, pres

    def forward(self, theta: FloatArray, X: FloatArray) -> FloatArray:
        """Network outputs, shape (N, C)."""
        f, _, _ = self._forward_cache(theta, X)
        return f

    def forward_samples(self, thetas: FloatArray, X: FloatArray, chunk: int = 256) -> FloatArray:
        """Outputs for a stack of parameter vectors, shape (S, N, C)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty((thetas.shape[0], X.shape[0], self.num_outputs))
        for start in range(0, thetas.shape[0], chunk):
            block = thetas[start : start + chunk]
            a = np.broadcast_to(X, (block.shape[0],) + X.shape)
            offset = 0
            for idx, (dout, din) in enumerate(self._shapes):
                w = block[:, offset : offset + dout * din].reshape(-1, dout, din)
                offset += dout * din
                b = block[:, offset : offset + dout]
                offset += dout
                z = a @ np.swapaxes(w, 1, 2) + b[:, None, :]
                if idx < len(self._shapes) - 1:
                    a = self._act(z)
                elif self.output_scale is not None:
                    a = self.output_scale * self._act(z)
                else:
                    a = z
            out[start : start + chunk] = a
        return out

    # ----- derivatives -----

    def _output_seed(self, z_last):
        """dF/dz_L as (N, C, C): identity, or scaled activation derivative."""
        n = z_last.shape[0]
        c = self.num_outputs
        if self.output_scale is None:
            return np.broadcast_to(np.eye(c), (n, c, c)).copy()
        a = self._act(z_last)
        d = self.output_scale * self._act_deriv(z_last, a)
        seed = np.zeros((n, c, c))
        idx = np.arange(c)
        seed[:, idx, idx] = d
        return seed

    def jacobian(self, theta: FloatArray, X: FloatArray) -> FloatArray:
        """Per-example Jacobian dF/dtheta, shape (N, C, P).

        One reverse sweep per output using the cached forward pass; columns
        follow the flat parameter order.
        """
        f, acts, pres = self._forward_cache(theta, X)
        layers = self.unflatten(theta)
        n, c = f.shape[0], self.num_outputs
        jac = np.empty((n, c, self.num_params))
        g = self._output_seed(pres[-1])  # (N, C, D_L)
        slices = self.layer_slices()
        for lidx in range(len(layers) - 1, -1, -1):
            w, _ = layers[lidx]
            a_prev = acts[lidx]
            dout, din = self._shapes[lidx]
            block = jac[:, :, slices[lidx]]
            gw = np.einsum("nci,nj->ncij", g, a_prev)
            block[:, :, : dout * din] = gw.reshape(n, c, dout * din)
            block[:, :, dout * din :] = g
            if lidx > 0:
                # acts[lidx] is the hidden activation of pres[lidx - 1]
                g = (g @ w) * self._act_deriv(pres[lidx - 1], acts[lidx])[:, None, :]
        return jac

    def vjp(self, theta: FloatArray, X: FloatArray, R: FloatArray, cache=None) -> FloatArray:
        """sum_n J_n^T r_n without materializing J, shape (P,).

        R carries one weight row per example, shape (N, C). This is the
        gradient of sum_n r_n . f(x_n) with r treated as constant. Pass the
        (acts, pres) pair from ``hidden_states(theta, X)`` as ``cache`` to
        skip the internal forward pass.
        """
        if cache is None:
            _, acts, pres = self._forward_cache(theta, X)
        else:
            acts, pres = cache
        layers = self.unflatten(theta)
        R = np.asarray(R, dtype=np.float64)
        if self.output_scale is None:
            u = R
        else:
            a_last = self._act(pres[-1])
            u = R * self.output_scale * self._act_deriv(pres[-1], a_last)
        grads = [None] * len(layers)
        for lidx in range(len(layers) - 1, -1, -1):
            w, _ = layers[lidx]
            a_prev = acts[lidx]
            grads[lidx] = (u.T @ a_prev, u.sum(axis=0))
            if lidx > 0:
                u = (u @ w) * self._act_deriv(pres[lidx - 1], acts[lidx])
        return self.flatten(grads)

    def hidden_states(self, theta, X):
        """Activations a_0..a_{L-1} and preactivations z_1..z_L (for curvature)."""
        _, acts, pres = self._forward_cache(theta, X)
        return acts, pres

    def meta(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_scale": self.output_scale,
            "flattening": "layer-major, weights row-major then bias",
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "MlpNetwork":
        return cls(meta["layer_sizes"], meta["activation"], meta.get("output_scale"))


def save_params(path: str | Path, net: MlpNetwork, theta: FloatArray) -> None:
    """Write theta as flat little-endian float64 plus a JSON sidecar (<path>.json)."""
    path = Path(path)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (net.num_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({net.num_params},)")
    path.write_bytes(theta.astype("<f8").tobytes())
    sidecar = dict(net.meta(), num_params=net.num_params, dtype="<f8")
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_params(path: str | Path) -> tuple[MlpNetwork, FloatArray]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    net = MlpNetwork.from_meta(meta)
    theta = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if theta.shape != (net.num_params,):
        raise ValueError(f"parameter file holds {theta.shape[0]} values, expected {net.num_params}")
    return net, theta
