"""Experiment orchestration shared by the CLI and the test suite.

Pipelines: prior-precision sweeps with validation selection, OOD entropy
comparisons, and the 1-d step / 2-d banana protocols. For full-mode
curvature the heavy posterior algebra runs in output space: the precision
J^T B J + delta I is factorized through the NC x NC matrix
I + B^{1/2} (J J^T / delta) B^{1/2}, which is exactly the parameter-space
posterior whenever N*C < P but never materializes a P x P matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.optimize

from linlaplace.curvature import FULL_MODE_CAP, ggn, kfac
from linlaplace.datasets import Dataset, SplitSpec, load_csv, make_toy, split_stratified, standardize
from linlaplace.glm import (
    LinearizedModel,
    NgviConfig,
    NgviState,
    OutputGaussian,
    RefineConfig,
    bnn_predictive,
    glm_predictive,
    glm_refine_laplace,
    glm_refine_ngvi,
    linearize,
    map_predictive,
    ngvi_refine_state,
    predictive_from_samples,
)
from linlaplace.gp import KernelConfig, gp_fit_sod, gp_predictive
from linlaplace.likelihoods import GaussianLikelihood, likelihood_for
from linlaplace.metrics import evaluate, ood_auc, predictive_entropy, variance_decomposition
from linlaplace.network import MlpNetwork
from linlaplace.posterior import laplace_posterior
from linlaplace.reference import GridPosterior, grid_posterior
from linlaplace.training import MapConfig, map_train

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "resolve_dataset",
    "run_cell",
    "run_sweep",
    "run_ood",
    "run_banana",
    "run_toy1d",
    "toy1d_log_joint",
    "toy1d_grid_predictive",
    "laplace_output_state",
]

PREDICTIVE_KINDS = ("map", "bnn", "glm", "gp")
REFINEMENT_KINDS = ("none", "laplace", "ngvi-full", "ngvi-diag")
CURVATURE_MODES = ("full", "diag", "kfac")


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    """One experiment: data, architecture, posterior, predictives, sweep axes."""

    dataset: str = "toy:step1d"
    label_col: int = -1
    hidden: tuple[int, ...] = (50, 50)
    activation: str = "tanh"
    output_scale: float | None = None
    likelihood: str = "auto"
    noise_var: float = 1.0
    learning_rate: float = 1e-3
    num_steps: int = 10_000
    batch_size: int | None = None
    decay_steps: tuple[int, ...] = ()
    decay_factor: float = 0.1
    converge_tol: float | None = None
    curvature_mode: str = "full"
    dampened: bool = False
    predictives: tuple[str, ...] = ("map", "bnn", "glm")
    refinement: str = "none"
    refine_steps: int | None = None
    refine_lr: float | None = None
    delta_grid: tuple[float, ...] = (1.0,)
    num_samples: int = 1000
    gp_subset: int | None = None
    gp_scale: float | str = "auto"
    seeds: tuple[int, ...] = (0,)
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    standardize_features: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        self.predictives = tuple(self.predictives)
        self.delta_grid = tuple(float(d) for d in self.delta_grid)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.ratios = tuple(float(r) for r in self.ratios)

    def validate(self):
        if not self.delta_grid:
            raise ConfigError("delta grid is empty")
        if any(d <= 0.0 for d in self.delta_grid):
            raise ConfigError("all prior precisions must be positive")
        if self.curvature_mode not in CURVATURE_MODES:
            raise ConfigError(f"unknown curvature mode {self.curvature_mode!r}")
        if self.dampened and self.curvature_mode != "kfac":
            raise ConfigError("dampening applies to kfac curvature only")
        for kind in self.predictives:
            if kind not in PREDICTIVE_KINDS:
                raise ConfigError(f"unknown predictive kind {kind!r}")
        if not self.predictives:
            raise ConfigError("at least one predictive kind required")
        if self.refinement not in REFINEMENT_KINDS:
            raise ConfigError(f"unknown refinement kind {self.refinement!r}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if self.num_samples < 1:
            raise ConfigError("num_samples must be at least 1")
        if self.converge_tol is not None and self.converge_tol <= 0.0:
            raise ConfigError("converge_tol must be positive when set")
        if self.gp_scale != "auto":
            try:
                scale = float(self.gp_scale)
            except (TypeError, ValueError):
                raise ConfigError(f"gp_scale must be 'auto' or a number, got {self.gp_scale!r}")
            if scale <= 0.0:
                raise ConfigError("gp_scale must be positive")
        if not self.dataset.startswith("toy:"):
            if not Path(self.dataset).exists():
                raise ConfigError(f"dataset file {self.dataset!r} does not exist")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("hidden", "decay_steps", "predictives", "delta_grid", "seeds", "ratios"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)


def resolve_dataset(config: ExperimentConfig, data: Dataset | None = None) -> Dataset:
    """Load the configured dataset; a preloaded one takes precedence."""
    if data is not None:
        return data
    if config.dataset.startswith("toy:"):
        return make_toy(config.dataset[4:], seed=0)
    return load_csv(config.dataset, label_column=config.label_col)


def _build_model(config: ExperimentConfig, data: Dataset):
    lik = likelihood_for(
        config.likelihood,
        num_classes=data.num_classes if data.is_classification else None,
        noise_var=config.noise_var,
    )
    if data.is_classification:
        latent = lik.latent_dim(data.num_classes)
    else:
        latent = 1 if data.y.ndim == 1 else data.y.shape[1]
    layer_sizes = [data.num_features, *config.hidden, latent]
    net = MlpNetwork(layer_sizes, activation=config.activation, output_scale=config.output_scale)
    return net, lik


def _cell_seeds(split_seed: int, delta_idx: int, count: int = 4) -> list[int]:
    ss = np.random.SeedSequence((int(split_seed), int(delta_idx)))
    return [int(v) for v in ss.generate_state(count)]


def laplace_output_state(linmodel: LinearizedModel, lik, X, delta: float) -> NgviState:
    """Unrefined full-GGN Laplace posterior in output-space form."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    jac = linmodel.jac(X)
    n, c, p = jac.shape
    f0 = linmodel.f0(X)
    return NgviState(
        jac.reshape(n * c, p), f0.ravel(), linmodel.theta_star,
        linmodel.theta_star.copy(), lik.noise(f0), float(delta),
    )


def _state_glm_probs(state: NgviState, lik, linmodel, X, num_samples: int, seed: int):
    jac = linmodel.jac(X)
    mean = state.query_mean(linmodel.f0(X), jac)
    cov = state.query_covariance(jac)
    dist = OutputGaussian(mean, cov)
    if isinstance(lik, GaussianLikelihood):
        return dist.mean, dist.variances() + lik.noise_var
    return lik.predictive_mix(dist.sample(num_samples, seed=seed))


def run_cell(
    config: ExperimentConfig,
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    delta: float,
    split_seed: int,
    delta_idx: int = 0,
) -> dict:
    """Train and evaluate one (delta, seed) cell on prepared splits."""
    net, lik = _build_model(config, train)
    init_seed, bnn_seed, glm_seed, refine_seed = _cell_seeds(split_seed, delta_idx)
    map_cfg = MapConfig(
        learning_rate=config.learning_rate,
        num_steps=config.num_steps,
        batch_size=config.batch_size,
        seed=init_seed,
        decay_steps=config.decay_steps,
        decay_factor=config.decay_factor,
        converge_tol=config.converge_tol,
    )
    theta, _ = map_train(net, lik, train.X, train.y, delta, map_cfg)
    linmodel = linearize(net, theta)
    record: dict = {"delta": delta, "seed": split_seed, "methods": {}}

    use_state = config.curvature_mode == "full"
    state = posterior = None
    if use_state:
        if net.num_params > FULL_MODE_CAP:
            raise ConfigError(
                f"full curvature capped at {FULL_MODE_CAP} parameters, model has {net.num_params}"
            )
        state = laplace_output_state(linmodel, lik, train.X, delta)
    elif {"bnn", "glm"} & set(config.predictives) or config.refinement != "none":
        if config.curvature_mode == "kfac":
            curv = kfac(net, theta, train.X, lik)
        else:
            curv = ggn(net, theta, train.X, lik, mode=config.curvature_mode)
        posterior = laplace_posterior(theta, curv, delta, dampened=config.dampened)

    def eval_on(probs_fn) -> dict:
        out = {}
        for name, ds in (("valid", valid), ("test", test)):
            report = evaluate(probs_fn(ds.X), ds.y)
            out[name] = report.to_dict()
        return out

    for kind in config.predictives:
        if kind == "map":
            record["methods"]["map"] = eval_on(lambda X: map_predictive(net, theta, X, lik))
        elif kind == "bnn":
            if use_state:
                thetas = state.param_samples(config.num_samples, seed=bnn_seed)
                probs_fn = lambda X: predictive_from_samples(net, thetas, X, lik)
            else:
                probs_fn = lambda X: bnn_predictive(
                    net, posterior, X, lik, num_samples=config.num_samples, seed=bnn_seed
                )
            record["methods"]["bnn"] = eval_on(probs_fn)
        elif kind == "glm":
            if use_state:
                probs_fn = lambda X: _state_glm_probs(
                    state, lik, linmodel, X, config.num_samples, glm_seed
                )
            else:
                probs_fn = lambda X: glm_predictive(
                    linmodel, posterior, X, lik, num_samples=config.num_samples, seed=glm_seed
                )
            record["methods"]["glm"] = eval_on(probs_fn)
        elif kind == "gp":
            kc = KernelConfig(
                delta=delta, num_inducing=config.gp_subset, scale=config.gp_scale, seed=glm_seed
            )
            gp_post = gp_fit_sod(linmodel, lik, train.X, train.y, kc)
            record["methods"]["gp"] = eval_on(
                lambda X: gp_predictive(gp_post, lik, X, num_samples=config.num_samples, seed=glm_seed)
            )

    if config.refinement != "none":
        record["methods"]["glm_refine"] = eval_on(
            _refined_probs_fn(config, linmodel, lik, train, delta, refine_seed)
        )
    return record


def _refined_probs_fn(config, linmodel, lik, train, delta, refine_seed):
    if config.refinement == "laplace":
        cfg = RefineConfig(num_steps=config.refine_steps or 1000)
        post = glm_refine_laplace(linmodel, train.X, train.y, lik, delta, cfg)
        return lambda X: glm_predictive(
            linmodel, post, X, lik, num_samples=config.num_samples, seed=refine_seed
        )
    cfg = NgviConfig(
        num_steps=config.refine_steps or 250,
        learning_rate=config.refine_lr,
        seed=refine_seed,
    )
    if config.refinement == "ngvi-full":
        state, _ = ngvi_refine_state(linmodel, train.X, train.y, lik, delta, cfg)
        return lambda X: _state_glm_probs(state, lik, linmodel, X, config.num_samples, refine_seed)
    post, _ = glm_refine_ngvi(linmodel, train.X, train.y, lik, delta, cfg, structure="diag")
    return lambda X: glm_predictive(
        linmodel, post, X, lik, num_samples=config.num_samples, seed=refine_seed
    )


def _splits_for_seed(config: ExperimentConfig, data: Dataset, seed: int):
    spec = SplitSpec(ratios=config.ratios, seed=seed, stratified=data.is_classification)
    train, valid, test = split_stratified(data, spec)
    if config.standardize_features:
        train, valid, test = standardize(train, valid, test)
    return train, valid, test


def run_sweep(config: ExperimentConfig, data: Dataset | None = None) -> dict:
    """Sweep delta x seed cells, select delta by validation NLL, aggregate.

    Cells are independent and evaluated in (delta, seed) order, so a worker
    pool could run them concurrently without changing the report. A failed
    cell is recorded with its error and skipped in the aggregates. When a
    refinement kind is configured, it is evaluated at the validation-selected
    delta of the unrefined GLM rather than on the whole grid.
    """
    config.validate()
    data = resolve_dataset(config, data)
    if not data.is_classification:
        raise ConfigError("run_sweep evaluates classification predictives only")
    splits = {seed: _splits_for_seed(config, data, seed) for seed in config.seeds}
    base_config = _replace(config, refinement="none")
    cells = []
    for di, delta in enumerate(config.delta_grid):
        for seed in config.seeds:
            train, valid, test = splits[seed]
            try:
                cell = run_cell(base_config, train, valid, test, delta, seed, delta_idx=di)
            except Exception as exc:  # cell isolation: record and continue
                cell = {"delta": delta, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
            cells.append(cell)

    methods = sorted({m for c in cells if "error" not in c for m in c["methods"]})
    per_delta: dict[str, list] = {m: [] for m in methods}
    for di, delta in enumerate(config.delta_grid):
        rows = [c for c in cells if c.get("delta") == delta and "error" not in c]
        for m in methods:
            stats = {}
            for split_name in ("valid", "test"):
                nlls = [c["methods"][m][split_name]["nll"] for c in rows if m in c["methods"]]
                accs = [c["methods"][m][split_name]["accuracy"] for c in rows if m in c["methods"]]
                stats[split_name] = {
                    "nll_mean": _mean(nlls),
                    "nll_se": _stderr(nlls),
                    "accuracy_mean": _mean(accs),
                }
            per_delta[m].append({"delta": delta, **stats})

    selected: dict[str, dict] = {}
    for m in methods:
        candidates = [
            (row["valid"]["nll_mean"], row["delta"], di)
            for di, row in enumerate(per_delta[m])
            if row["valid"]["nll_mean"] is not None
        ]
        if not candidates:
            continue
        _, delta_star, di_star = min(candidates)  # ties resolved toward smaller delta
        rows = [c for c in cells if c.get("delta") == delta_star and "error" not in c]
        test_nlls = [c["methods"][m]["test"]["nll"] for c in rows if m in c["methods"]]
        test_accs = [c["methods"][m]["test"]["accuracy"] for c in rows if m in c["methods"]]
        test_eces = [c["methods"][m]["test"]["ece"] for c in rows if m in c["methods"]]
        selected[m] = {
            "delta": delta_star,
            "test_nll_mean": _mean(test_nlls),
            "test_nll_se": _stderr(test_nlls),
            "test_accuracy_mean": _mean(test_accs),
            "test_ece_mean": _mean(test_eces),
            "per_seed_test_nll": test_nlls,
        }

    if config.refinement != "none" and "glm" in selected:
        delta_star = selected["glm"]["delta"]
        di_star = list(config.delta_grid).index(delta_star)
        refined_nlls, refined_accs, refined_eces = [], [], []
        for seed in config.seeds:
            train, valid, test = splits[seed]
            _, _, _, refine_seed = _cell_seeds(seed, di_star)
            net, lik = _build_model(config, train)
            map_cfg = MapConfig(
                learning_rate=config.learning_rate,
                num_steps=config.num_steps,
                batch_size=config.batch_size,
                seed=_cell_seeds(seed, di_star)[0],
                decay_steps=config.decay_steps,
                decay_factor=config.decay_factor,
            )
            theta, _ = map_train(net, lik, train.X, train.y, delta_star, map_cfg)
            linmodel = linearize(net, theta)
            probs_fn = _refined_probs_fn(config, linmodel, lik, train, delta_star, refine_seed)
            report = evaluate(probs_fn(test.X), test.y)
            refined_nlls.append(report.nll)
            refined_accs.append(report.accuracy)
            refined_eces.append(report.ece)
        selected["glm_refine"] = {
            "delta": delta_star,
            "test_nll_mean": _mean(refined_nlls),
            "test_nll_se": _stderr(refined_nlls),
            "test_accuracy_mean": _mean(refined_accs),
            "test_ece_mean": _mean(refined_eces),
            "per_seed_test_nll": refined_nlls,
        }

    report = {
        "config": config.to_dict(),
        "cells": cells,
        "per_delta": per_delta,
        "selected": selected,
        "incomplete_cells": sum(1 for c in cells if "error" in c),
    }
    if config.dataset == "toy:step1d" and not config.hidden:
        report["grid_oracle"] = _toy1d_oracle_fields(config, selected)
    return report


def _replace(config: ExperimentConfig, **kw) -> ExperimentConfig:
    payload = config.to_dict()
    payload.update(kw)
    return ExperimentConfig.from_dict(payload)


def _mean(values):
    return float(np.mean(values)) if values else None


def _stderr(values):
    if not values:
        return None
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def run_ood(config: ExperimentConfig, ood_dataset, data: Dataset | None = None) -> dict:
    """Train on the ID dataset, compare predictive entropies on ID test vs OOD.

    ood_dataset may be an ExperimentConfig, a dataset spec string, or a
    Dataset. The posterior uses the first delta of the grid. Histograms use
    a fixed 30-bin layout over [0, log C].
    """
    config.validate()
    data = resolve_dataset(config, data)
    if isinstance(ood_dataset, ExperimentConfig):
        ood = resolve_dataset(ood_dataset)
    elif isinstance(ood_dataset, Dataset):
        ood = ood_dataset
    else:
        ood = resolve_dataset(_replace(config, dataset=str(ood_dataset)))
    if ood.num_features != data.num_features:
        raise ConfigError(
            f"OOD input dimension {ood.num_features} != ID dimension {data.num_features}"
        )
    if not data.is_classification:
        raise ConfigError("OOD entropy comparison requires a classification ID dataset")
    seed = config.seeds[0]
    train, valid, test = _splits_for_seed(config, data, seed)
    if config.standardize_features:
        # apply the affine transform fit on the ID train split to the OOD set
        raw_train, _, _ = split_stratified(
            data, SplitSpec(ratios=config.ratios, seed=seed, stratified=True)
        )
        mu = raw_train.X.mean(axis=0)
        sd = raw_train.X.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        ood = Dataset((ood.X - mu) / sd, ood.y, ood.num_classes, ood.warnings)
    delta = config.delta_grid[0]
    cell_cfg = _replace(config, refinement="none")
    net, lik = _build_model(cell_cfg, train)
    init_seed, bnn_seed, glm_seed, _ = _cell_seeds(seed, 0)
    map_cfg = MapConfig(
        learning_rate=config.learning_rate,
        num_steps=config.num_steps,
        batch_size=config.batch_size,
        seed=init_seed,
        decay_steps=config.decay_steps,
        decay_factor=config.decay_factor,
        converge_tol=config.converge_tol,
    )
    theta, _ = map_train(net, lik, train.X, train.y, delta, map_cfg)
    linmodel = linearize(net, theta)
    state = laplace_output_state(linmodel, lik, train.X, delta)
    num_classes = data.num_classes
    edges = np.linspace(0.0, np.log(num_classes), 31)
    out: dict = {"delta": delta, "bin_edges": edges.tolist(), "methods": {}}
    for kind in config.predictives:
        if kind == "map":
            probs_fn = lambda X: map_predictive(net, theta, X, lik)
        elif kind == "bnn":
            thetas = state.param_samples(config.num_samples, seed=bnn_seed)
            probs_fn = lambda X: predictive_from_samples(net, thetas, X, lik)
        elif kind == "glm":
            probs_fn = lambda X: _state_glm_probs(state, lik, linmodel, X, config.num_samples, glm_seed)
        else:
            continue
        ent_id = predictive_entropy(probs_fn(test.X))
        ent_ood = predictive_entropy(probs_fn(ood.X))
        out["methods"][kind] = {
            "auc": ood_auc(ent_id, ent_ood),
            "id_entropy_mean": float(ent_id.mean()),
            "ood_entropy_mean": float(ent_ood.mean()),
            "id_hist": np.histogram(np.clip(ent_id, 0.0, edges[-1]), bins=edges)[0].tolist(),
            "ood_hist": np.histogram(np.clip(ent_ood, 0.0, edges[-1]), bins=edges)[0].tolist(),
        }
    return out


# 1-d step protocol: a single tanh unit, f(x) = scale * tanh(w x + b)


def toy1d_log_joint(X, y, delta: float = 1.0, output_scale: float = 5.0):
    """Vectorized log joint and gradient over (w, b) grids for the 1-d toy.

    Returns (log_joint_fn, grad_fn), both accepting (K, 2) parameter rows;
    matches the training-module log joint of the equivalent network exactly.
    """
    x = np.asarray(X, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    sign = 2.0 * y - 1.0

    def log_joint_fn(pts):
        pts = np.atleast_2d(pts)
        z = pts[:, :1] * x[None, :] + pts[:, 1:2]
        f = output_scale * np.tanh(z)
        loglik = -np.logaddexp(0.0, -sign[None, :] * f).sum(axis=1)
        logprior = np.log(delta) - np.log(2.0 * np.pi) - 0.5 * delta * (pts * pts).sum(axis=1)
        return loglik + logprior

    def grad_fn(pts):
        pts = np.atleast_2d(pts)
        z = pts[:, :1] * x[None, :] + pts[:, 1:2]
        t = np.tanh(z)
        f = output_scale * t
        resid = y[None, :] - 1.0 / (1.0 + np.exp(-f))
        dfdz = output_scale * (1.0 - t * t)
        gw = (resid * dfdz * x[None, :]).sum(axis=1) - delta * pts[:, 0]
        gb = (resid * dfdz).sum(axis=1) - delta * pts[:, 1]
        return np.stack([gw, gb], axis=1)

    return log_joint_fn, grad_fn


def toy1d_grid_predictive(grid: GridPosterior, x_grid, output_scale: float = 5.0):
    """Grid-quadrature predictive mean of class 1 over an input grid."""
    x_grid = np.asarray(x_grid, dtype=np.float64).reshape(-1)

    def class1_prob(pts):
        z = pts[:, :1] * x_grid[None, :] + pts[:, 1:2]
        f = output_scale * np.tanh(z)
        return 1.0 / (1.0 + np.exp(-f))

    return grid.expectation(class1_prob)


def _toy1d_laplace_grid(posterior, resolution: int) -> GridPosterior:
    """Quadrature grid over the 2-d Laplace-GGN density itself."""
    prec = posterior.dense_precision()
    mean = posterior.mean
    sign, logdet = np.linalg.slogdet(prec)

    def log_q(pts):
        d = np.atleast_2d(pts) - mean[None, :]
        quad = np.einsum("ki,ij,kj->k", d, prec, d)
        return 0.5 * logdet - np.log(2.0 * np.pi) - 0.5 * quad

    return grid_posterior(log_q, [(-6.0, 6.0), (-6.0, 6.0)], resolution)


def _toy1d_glm_quadrature(qgrid: GridPosterior, theta_star, x_grid, output_scale: float = 5.0):
    """Quadrature of the GLM predictive integral: E_q[sigmoid(f_lin(theta; x))].

    The same expectation the Monte Carlo GLM predictive estimates, so the two
    routes must agree up to sampling error.
    """
    x_grid = np.asarray(x_grid, dtype=np.float64).reshape(-1)
    t0 = np.tanh(theta_star[0] * x_grid + theta_star[1])
    f0 = output_scale * t0
    slope = output_scale * (1.0 - t0 * t0)
    jac = np.stack([slope * x_grid, slope], axis=1)  # (M, 2)

    def class1_prob(pts):
        f_lin = f0[None, :] + (np.atleast_2d(pts) - theta_star[None, :]) @ jac.T
        return 1.0 / (1.0 + np.exp(-f_lin))

    return qgrid.expectation(class1_prob)


def toy1d_map(delta: float = 1.0, seed: int = 0) -> tuple[MlpNetwork, np.ndarray]:
    """Train the 1-d toy model to its mode (gradient ascent plus a polish)."""
    data = make_toy("step1d")
    net = MlpNetwork([1, 1], activation="tanh", output_scale=5.0)
    lik = likelihood_for("bernoulli")
    cfg = MapConfig(learning_rate=0.05, num_steps=1500, seed=seed)
    theta, _ = map_train(net, lik, data.X, data.y, delta, cfg)
    logp_fn, grad_fn = toy1d_log_joint(data.X, data.y, delta)
    res = scipy.optimize.minimize(
        lambda th: -float(logp_fn(th[None])[0]),
        theta,
        jac=lambda th: -grad_fn(th[None])[0],
        method="BFGS",
        options={"gtol": 1e-12, "maxiter": 500},
    )
    return net, res.x


def _toy1d_oracle_fields(config: ExperimentConfig, selected: dict) -> dict:
    delta = selected.get("glm", {}).get("delta", config.delta_grid[0])
    data = make_toy("step1d")
    net, theta = toy1d_map(delta)
    lik = likelihood_for("bernoulli")
    logp_fn, _ = toy1d_log_joint(data.X, data.y, delta)
    grid = grid_posterior(logp_fn, [(-6.0, 6.0), (-6.0, 6.0)], 300)
    x_grid = np.linspace(-7.0, 7.0, 50)
    linmodel = linearize(net, theta)
    state = laplace_output_state(linmodel, lik, data.X, delta)
    glm_probs = _state_glm_probs(state, lik, linmodel, x_grid[:, None], 10_000, seed=0)
    posterior = laplace_posterior(theta, ggn(net, theta, data.X, lik, mode="full"), delta)
    qgrid = _toy1d_laplace_grid(posterior, 300)
    glm_quad = _toy1d_glm_quadrature(qgrid, theta, x_grid)
    return {
        "delta": delta,
        "glm_mean_max_abs_err": float(np.abs(glm_probs[:, 1] - glm_quad).max()),
        "grid_mass_w_negative": grid.mass(lambda pts: pts[:, 0] < 0.0),
    }


def run_toy1d(
    delta: float = 1.0,
    num_samples: int = 1000,
    seed: int = 0,
    grid_resolution: int = 300,
    with_hmc: bool = False,
    hmc_samples: int = 100_000,
) -> dict:
    """Full 1-d step pipeline: MAP, grid oracle, Laplace, predictives.

    Returns a JSON-ready bundle with posterior summaries, preactivation
    quantiles, and predictive curves on a 50-point input grid in [-7, 7].
    """
    from linlaplace.reference import HmcConfig, hmc_sample

    data = make_toy("step1d")
    lik = likelihood_for("bernoulli")
    net, theta = toy1d_map(delta, seed=seed)
    logp_fn, grad_fn = toy1d_log_joint(data.X, data.y, delta)
    grid = grid_posterior(logp_fn, [(-6.0, 6.0), (-6.0, 6.0)], grid_resolution)
    linmodel = linearize(net, theta)
    curv = ggn(net, theta, data.X, lik, mode="full")
    posterior = laplace_posterior(theta, curv, delta)

    x_grid = np.linspace(-7.0, 7.0, 50)
    X_query = x_grid[:, None]
    grid_mean = toy1d_grid_predictive(grid, x_grid)
    glm_probs = glm_predictive(
        linmodel, posterior, X_query, lik, num_samples=num_samples, seed=seed
    )
    map_probs = map_predictive(net, theta, X_query, lik)
    thetas = posterior.sample(num_samples, seed=seed + 1)
    bnn_probs = predictive_from_samples(net, thetas, X_query, lik)

    # quadrature oracle over the Laplace-GGN density: the same expectations the
    # Monte Carlo GLM/BNN predictives estimate, integrated on a dense grid
    qgrid = _toy1d_laplace_grid(posterior, grid_resolution)
    glm_quad = _toy1d_glm_quadrature(qgrid, theta, x_grid)
    bnn_quad = toy1d_grid_predictive(qgrid, x_grid)

    # preactivation w x + b quantiles under the Laplace posterior
    z_samples = thetas[:, :1] * x_grid[None, :] + thetas[:, 1:2]
    quant_levels = [0.05, 0.25, 0.5, 0.75, 0.95]
    quantiles = np.quantile(z_samples, quant_levels, axis=0)

    p_at_x3 = 1.0 / (1.0 + np.exp(-5.0 * np.tanh(thetas[:, 0] * 3.0 + thetas[:, 1])))
    hist, hist_edges = np.histogram(p_at_x3, bins=40, range=(0.0, 1.0))

    bundle = {
        "delta": delta,
        "x_grid": x_grid.tolist(),
        "theta_map": theta.tolist(),
        "predictive_mean": {
            "grid": grid_mean.tolist(),
            "map": map_probs[:, 1].tolist(),
            "glm": glm_probs[:, 1].tolist(),
            "bnn": bnn_probs[:, 1].tolist(),
            "glm_quadrature": glm_quad.tolist(),
            "bnn_quadrature": bnn_quad.tolist(),
        },
        "preactivation_quantiles": {
            "levels": quant_levels,
            "values": quantiles.tolist(),
        },
        "posterior": {
            "laplace_mean": posterior.mean.tolist(),
            "laplace_cov": posterior.dense_covariance().tolist(),
            "grid_mean": grid.mean().tolist(),
            "grid_cov": grid.covariance().tolist(),
            "grid_mass_w_negative": grid.mass(lambda pts: pts[:, 0] < 0.0),
            "laplace_mass_w_negative": _laplace_mass_w_negative(posterior),
        },
        "bnn_p_at_x3_hist": {"edges": hist_edges.tolist(), "counts": hist.tolist()},
    }
    if with_hmc:
        cfg = HmcConfig(num_samples=hmc_samples, seed=seed)
        result = hmc_sample(logp_fn, grad_fn, theta, cfg)
        bundle["hmc"] = {
            "mean": result.samples.mean(axis=0).tolist(),
            "cov": np.cov(result.samples.T).tolist(),
            "acceptance_rate": result.acceptance_rate,
            "mean_energy_error": result.mean_energy_error,
        }
    return bundle


def _laplace_mass_w_negative(posterior) -> float:
    """P(w < 0) under the Gaussian posterior (w is the first coordinate)."""
    from scipy.stats import norm

    mu = posterior.mean[0]
    sd = float(np.sqrt(posterior.marginal_variance()[0]))
    return float(norm.cdf(0.0, loc=mu, scale=sd))


def _point_outside_hull(X, origin, angle: float, margin: float = 4.0):
    """Point along `angle` from `origin` whose distance to the hull of X is `margin`."""
    from scipy.spatial import ConvexHull

    verts = X[ConvexHull(X).vertices]
    edges = list(zip(verts, np.roll(verts, -1, axis=0)))

    def hull_distance(p):
        d = np.inf
        for a, b in edges:
            ab = b - a
            t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
            d = min(d, float(np.linalg.norm(p - (a + t * ab))))
        return d

    direction = np.array([np.cos(angle), np.sin(angle)])
    lo, hi = 0.0, margin + float(np.linalg.norm(X - origin[None, :], axis=1).max())
    while hull_distance(origin + hi * direction) < margin:
        hi *= 2.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if hull_distance(origin + mid * direction) < margin:
            lo = mid
        else:
            hi = mid
    return origin + hi * direction


def run_banana(
    delta: float = 1.0,
    seed: int = 0,
    hidden: tuple[int, ...] = (50, 50),
    num_steps: int = 3000,
    learning_rate: float = 1e-2,
    decay_steps: tuple[int, ...] = (2400, 2800),
    grid_resolution: int = 100,
    num_samples: int = 1000,
    bnn_samples: int = 300,
    train_fraction: float = 0.05,
) -> dict:
    """2-d crescents protocol: small train subset, full-batch MAP, predictive maps.

    Returns predictive mean/entropy grids for MAP, BNN, and GLM predictives
    plus the GLM variance decomposition over a square input grid.
    """
    data = make_toy("banana", seed=seed)
    ratios = (train_fraction, train_fraction, 1.0 - 2.0 * train_fraction)
    spec = SplitSpec(ratios=ratios, seed=seed, stratified=True)
    train, valid, _ = split_stratified(data, spec)
    lik = likelihood_for("bernoulli")
    net = MlpNetwork([2, *hidden, 1], activation="tanh")
    map_cfg = MapConfig(
        learning_rate=learning_rate,
        num_steps=num_steps,
        batch_size=None,
        seed=seed,
        decay_steps=decay_steps,
    )
    theta, _ = map_train(net, lik, train.X, train.y, delta, map_cfg)
    linmodel = linearize(net, theta)
    state = laplace_output_state(linmodel, lik, train.X, delta)

    axis = np.linspace(-4.0, 4.0, grid_resolution)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    grid_pts = np.stack([gx.ravel(), gy.ravel()], axis=1)

    glm_p1 = np.empty(grid_pts.shape[0])
    aleatoric = np.empty(grid_pts.shape[0])
    epistemic = np.empty(grid_pts.shape[0])
    chunk = 1024
    for start in range(0, grid_pts.shape[0], chunk):
        xb = grid_pts[start : start + chunk]
        jac = linmodel.jac(xb)
        mean = state.query_mean(linmodel.f0(xb), jac)
        cov = state.query_covariance(jac)
        f_samples = OutputGaussian(mean, cov).sample(num_samples, seed=seed)
        p_samples = 1.0 / (1.0 + np.exp(-f_samples[:, :, 0]))
        al, ep, _ = variance_decomposition(p_samples)
        sl = slice(start, start + xb.shape[0])
        glm_p1[sl] = p_samples.mean(axis=0)
        aleatoric[sl] = al
        epistemic[sl] = ep

    thetas = state.param_samples(bnn_samples, seed=seed + 1)
    bnn_p1 = np.empty(grid_pts.shape[0])
    for start in range(0, grid_pts.shape[0], 2048):
        xb = grid_pts[start : start + 2048]
        probs = predictive_from_samples(net, thetas, xb, lik, chunk=64)
        bnn_p1[start : start + xb.shape[0]] = probs[:, 1]

    map_p1 = map_predictive(net, theta, grid_pts, lik)[:, 1]

    def binary_entropy(p):
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        return -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p))

    def glm_epistemic_at(x):
        jac = linmodel.jac(x[None])
        mean = state.query_mean(linmodel.f0(x[None]), jac)
        cov = state.query_covariance(jac)
        f = OutputGaussian(mean, cov).sample(num_samples, seed=seed)
        p = 1.0 / (1.0 + np.exp(-f[:, 0, 0]))
        _, ep, _ = variance_decomposition(p)
        return float(ep)

    centroid = train.X.mean(axis=0)
    # probe the epistemic ridge: among points exactly 4 units outside the
    # training hull, the direction where the GLM epistemic map peaks; in
    # saturated directions the sigmoid squashes the growing latent variance
    far_candidates = [
        _point_outside_hull(train.X, centroid, angle, margin=4.0)
        for angle in np.deg2rad(np.arange(0.0, 360.0, 3.0))
    ]
    far_eps = [glm_epistemic_at(p) for p in far_candidates]
    far_point = far_candidates[int(np.argmax(far_eps))]

    shape = (grid_resolution, grid_resolution)
    return {
        "delta": delta,
        "axis": axis.tolist(),
        "train_size": train.num_points,
        "glm_mean": glm_p1.reshape(shape).tolist(),
        "bnn_mean": bnn_p1.reshape(shape).tolist(),
        "map_mean": map_p1.reshape(shape).tolist(),
        "glm_aleatoric": aleatoric.reshape(shape).tolist(),
        "glm_epistemic": epistemic.reshape(shape).tolist(),
        "entropy_means": {
            "map": float(binary_entropy(map_p1).mean()),
            "glm": float(binary_entropy(glm_p1).mean()),
            "bnn": float(binary_entropy(bnn_p1).mean()),
        },
        "epistemic_at_centroid": glm_epistemic_at(centroid),
        "epistemic_far_outside": float(np.max(far_eps)),
        "far_point": far_point.tolist(),
    }
