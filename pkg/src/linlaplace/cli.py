"""Command-line pipeline: train, curvature, predict, refine, evaluate, sweep.

Stages share a run directory: `train` writes config.json and theta.bin,
`curvature` adds curvature.bin, `refine` adds posterior.bin, `predict` and
`evaluate` read whatever is present. Precedence is flag > config file >
default. Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from linlaplace.curvature import ggn, kfac, load_curvature, save_curvature
from linlaplace.experiments import (
    ConfigError,
    ExperimentConfig,
    _build_model,
    _splits_for_seed,
    resolve_dataset,
    run_banana,
    run_ood,
    run_sweep,
    run_toy1d,
)
from linlaplace.glm import (
    NgviConfig,
    RefineConfig,
    bnn_predictive,
    glm_predictive,
    glm_refine_laplace,
    glm_refine_ngvi,
    linearize,
    map_predictive,
)
from linlaplace.gp import KernelConfig, gp_fit_sod, gp_predictive
from linlaplace.metrics import evaluate
from linlaplace.network import MlpNetwork, load_params, save_params
from linlaplace.posterior import NumericalError, laplace_posterior, load_posterior, save_posterior
from linlaplace.training import MapConfig, map_train

__all__ = ["main"]


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _bool_flag(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# (flag destination, config field, converter applied to the flag value)
_CONFIG_FLAGS = [
    ("dataset", "dataset", str),
    ("label_col", "label_col", int),
    ("hidden", "hidden", _int_list),
    ("activation", "activation", str),
    ("output_scale", "output_scale", float),
    ("likelihood", "likelihood", str),
    ("noise_var", "noise_var", float),
    ("lr", "learning_rate", float),
    ("steps", "num_steps", int),
    ("batch_size", "batch_size", int),
    ("decay_steps", "decay_steps", _int_list),
    ("decay_factor", "decay_factor", float),
    ("converge_tol", "converge_tol", float),
    ("curvature_mode", "curvature_mode", str),
    ("dampened", "dampened", _bool_flag),
    ("predictive", "predictives", lambda s: [tok.strip() for tok in s.split(",") if tok.strip()]),
    ("refinement", "refinement", str),
    ("refine_steps", "refine_steps", int),
    ("refine_lr", "refine_lr", float),
    ("delta", "delta_grid", lambda s: [float(s)]),
    ("delta_grid", "delta_grid", _float_list),
    ("samples", "num_samples", int),
    ("gp_subset", "gp_subset", int),
    ("gp_scale", "gp_scale", lambda s: s if s == "auto" else float(s)),
    ("seed", "seeds", lambda s: [int(s)]),
    ("seeds", "seeds", _int_list),
    ("ratios", "ratios", _float_list),
    ("standardize", "standardize_features", _bool_flag),
]


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file; flags override its fields")
    parser.add_argument("--dataset", help="CSV path or toy:<kind>")
    parser.add_argument("--label-col", dest="label_col", type=int, help="label column (default last)")
    parser.add_argument("--hidden", help="hidden layer sizes, comma separated")
    parser.add_argument("--activation", choices=["tanh", "relu"])
    parser.add_argument("--output-scale", dest="output_scale", type=float)
    parser.add_argument("--likelihood", choices=["auto", "gaussian", "bernoulli", "categorical"])
    parser.add_argument("--noise-var", dest="noise_var", type=float)
    parser.add_argument("--lr", type=float, help="MAP learning rate")
    parser.add_argument("--steps", type=int, help="MAP training steps")
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--decay-steps", dest="decay_steps", help="steps at which the lr decays")
    parser.add_argument("--decay-factor", dest="decay_factor", type=float)
    parser.add_argument(
        "--converge-tol",
        dest="converge_tol",
        type=float,
        help="stop MAP training once the log joint plateaus (num-steps stays the cap)",
    )
    parser.add_argument("--curvature", dest="curvature_mode", choices=["full", "diag", "kfac"])
    parser.add_argument("--dampened", help="true/false (kfac only)")
    parser.add_argument("--predictive", help="comma list from map,bnn,glm,gp")
    parser.add_argument(
        "--refinement", choices=["none", "laplace", "ngvi-full", "ngvi-diag"]
    )
    parser.add_argument("--refine-steps", dest="refine_steps", type=int)
    parser.add_argument("--refine-lr", dest="refine_lr", type=float)
    parser.add_argument("--delta", type=str, help="single prior precision")
    parser.add_argument("--delta-grid", dest="delta_grid", help="comma list of prior precisions")
    parser.add_argument("--samples", type=int, help="Monte Carlo samples S")
    parser.add_argument("--gp-subset", dest="gp_subset", type=int, help="GP subset size M")
    parser.add_argument("--gp-scale", dest="gp_scale", help="auto or a positive number")
    parser.add_argument("--seed", type=str)
    parser.add_argument("--seeds", help="comma list of split seeds")
    parser.add_argument("--ratios", help="train,valid,test fractions")
    parser.add_argument("--standardize", help="true/false")


def _merged_config(args, base: dict | None = None) -> ExperimentConfig:
    payload: dict = dict(base or {})
    if getattr(args, "config", None):
        config_path = Path(args.config)
        if not config_path.exists():
            raise ConfigError(f"config file {args.config!r} does not exist")
        try:
            payload.update(json.loads(config_path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
    for flag, field, convert in _CONFIG_FLAGS:
        value = getattr(args, flag, None)
        if value is None:
            continue
        try:
            payload[field] = convert(value) if isinstance(value, str) else value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for --{flag.replace('_', '-')}: {exc}")
    try:
        config = ExperimentConfig.from_dict(payload)
    except TypeError as exc:
        raise ConfigError(str(exc))
    config.validate()
    return config


def _run_dir(args) -> Path:
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    (run / "plots").mkdir(exist_ok=True)
    return run


def _load_run_config(run: Path, args) -> ExperimentConfig:
    config_path = run / "config.json"
    if not config_path.exists():
        raise ConfigError(f"{config_path} not found; run the train stage first")
    base = json.loads(config_path.read_text())
    args.config = None  # the run dir config is the base; flags still override
    return _merged_config(args, base=base)


def _update_report(run: Path, section: str, payload: dict):
    report_path = run / "report.json"
    report = json.loads(report_path.read_text()) if report_path.exists() else {}
    report[section] = payload
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))


def _prepared(config: ExperimentConfig):
    data = resolve_dataset(config)
    seed = config.seeds[0]
    train, valid, test = _splits_for_seed(config, data, seed)
    net, lik = _build_model(config, train)
    return data, train, valid, test, net, lik


def _cmd_train(args) -> int:
    run = _run_dir(args)
    config = _merged_config(args)
    _, train, valid, _, net, lik = _prepared(config)
    delta = config.delta_grid[0]
    map_cfg = MapConfig(
        learning_rate=config.learning_rate,
        num_steps=config.num_steps,
        batch_size=config.batch_size,
        seed=config.seeds[0],
        decay_steps=config.decay_steps,
        decay_factor=config.decay_factor,
        converge_tol=config.converge_tol,
    )
    theta, trace = map_train(net, lik, train.X, train.y, delta, map_cfg)
    save_params(run / "theta.bin", net, theta)
    (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    np.savetxt(
        run / "plots" / "train_trace.csv",
        np.array(trace),
        delimiter=",",
        header="step,log_joint",
        comments="",
    )
    report = {"delta": delta, "final_log_joint": trace[-1][1] if trace else None,
              "num_params": net.num_params, "train_size": train.num_points}
    if train.is_classification:
        probs = map_predictive(net, theta, valid.X, lik)
        report["valid"] = evaluate(probs, valid.y).to_dict()
    _update_report(run, "train", report)
    print(f"trained {net.num_params} parameters; artifacts in {run}")
    return 0


def _cmd_curvature(args) -> int:
    run = _run_dir(args)
    config = _load_run_config(run, args)
    _, train, _, _, net, lik = _prepared(config)
    theta = _load_theta(run, net)
    if config.curvature_mode == "kfac":
        curv = kfac(net, theta, train.X, lik)
        shapes = [[layer.d_in_aug, layer.d_out] for layer in curv.layers]
    else:
        curv = ggn(net, theta, train.X, lik, mode=config.curvature_mode)
        shapes = [curv.num_params]
    save_curvature(run / "curvature.bin", curv)
    (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    _update_report(run, "curvature", {"mode": config.curvature_mode, "shapes": shapes})
    print(f"curvature ({config.curvature_mode}) written to {run / 'curvature.bin'}")
    return 0


def _load_theta(run: Path, net):
    """Stored MAP parameters, checked against the configured architecture."""
    theta_path = run / "theta.bin"
    if not theta_path.exists():
        raise ConfigError(f"{theta_path} not found; run the train stage first")
    stored_net, theta = load_params(theta_path)
    if stored_net.num_params != net.num_params:
        raise ConfigError(
            "stored parameters do not match the configured architecture; retrain"
        )
    return theta


def _posterior_for_run(run: Path, config: ExperimentConfig, net, lik, train):
    """Refined posterior if present, else Laplace from the stored curvature."""
    if (run / "posterior.bin").exists():
        return load_posterior(run / "posterior.bin")
    if not (run / "curvature.bin").exists():
        raise ConfigError(f"{run} has no curvature.bin; run the curvature stage first")
    curv = load_curvature(run / "curvature.bin")
    theta = _load_theta(run, net)
    return laplace_posterior(theta, curv, config.delta_grid[0], dampened=config.dampened)


def _split_by_name(name: str, train, valid, test):
    table = {"train": train, "valid": valid, "test": test}
    if name not in table:
        raise ConfigError(f"unknown split {name!r}")
    return table[name]


def _predict_probs(run: Path, config: ExperimentConfig, kind: str, X, ctx):
    train, net, lik = ctx
    theta = _load_theta(run, net)
    if kind == "map":
        return map_predictive(net, theta, X, lik)
    if kind == "gp":
        kc = KernelConfig(
            delta=config.delta_grid[0],
            num_inducing=config.gp_subset,
            scale=config.gp_scale,
            seed=config.seeds[0],
        )
        gp_post = gp_fit_sod(linearize(net, theta), lik, train.X, train.y, kc)
        return gp_predictive(gp_post, lik, X, num_samples=config.num_samples, seed=config.seeds[0])
    posterior = _posterior_for_run(run, config, net, lik, train)
    if kind == "bnn":
        return bnn_predictive(
            net, posterior, X, lik, num_samples=config.num_samples, seed=config.seeds[0]
        )
    if kind == "glm":
        return glm_predictive(
            linearize(net, theta), posterior, X, lik,
            num_samples=config.num_samples, seed=config.seeds[0],
        )
    raise ConfigError(f"unknown predictive kind {kind!r}")


def _cmd_predict(args) -> int:
    run = _run_dir(args)
    config = _load_run_config(run, args)
    _, train, valid, test, net, lik = _prepared(config)
    ds = _split_by_name(args.split, train, valid, test)
    kind = config.predictives[0]
    probs = _predict_probs(run, config, kind, ds.X, (train, net, lik))
    if isinstance(probs, tuple):  # regression: mean and variance columns
        out = np.column_stack(probs)
        header = "mean,variance"
    else:
        out = probs
        header = ",".join(f"p_class_{c}" for c in range(out.shape[1]))
    dest = run / "plots" / f"predictions_{kind}_{args.split}.csv"
    np.savetxt(dest, out, delimiter=",", header=header, comments="")
    _update_report(run, f"predict_{kind}_{args.split}", {"rows": int(out.shape[0]), "file": str(dest)})
    print(f"{kind} predictions for the {args.split} split written to {dest}")
    return 0


def _cmd_refine(args) -> int:
    run = _run_dir(args)
    config = _load_run_config(run, args)
    if config.refinement == "none":
        raise ConfigError("choose --refinement laplace|ngvi-full|ngvi-diag")
    _, train, _, _, net, lik = _prepared(config)
    theta = _load_theta(run, net)
    linmodel = linearize(net, theta)
    delta = config.delta_grid[0]
    trace: list[float] = []
    if config.refinement == "laplace":
        cfg = RefineConfig(num_steps=config.refine_steps or 1000)
        post = glm_refine_laplace(linmodel, train.X, train.y, lik, delta, cfg)
    else:
        cfg = NgviConfig(
            num_steps=config.refine_steps or 250,
            learning_rate=config.refine_lr,
            seed=config.seeds[0],
        )
        structure = "full" if config.refinement == "ngvi-full" else "diag"
        post, trace = glm_refine_ngvi(linmodel, train.X, train.y, lik, delta, cfg, structure)
    save_posterior(run / "posterior.bin", post)
    (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    payload = {"kind": config.refinement, "delta": delta}
    if trace:
        np.savetxt(
            run / "plots" / "elbo_trace.csv",
            np.column_stack([np.arange(len(trace)), trace]),
            delimiter=",",
            header="iteration,elbo",
            comments="",
        )
        payload["elbo_first"] = trace[0]
        payload["elbo_last"] = trace[-1]
    _update_report(run, "refine", payload)
    print(f"{config.refinement} refinement written to {run / 'posterior.bin'}")
    return 0


def _cmd_evaluate(args) -> int:
    run = _run_dir(args)
    config = _load_run_config(run, args)
    _, train, valid, test, net, lik = _prepared(config)
    ds = _split_by_name(args.split, train, valid, test)
    if not ds.is_classification:
        raise ConfigError("evaluate supports classification datasets")
    payload = {}
    for kind in config.predictives:
        probs = _predict_probs(run, config, kind, ds.X, (train, net, lik))
        payload[kind] = evaluate(probs, ds.y).to_dict()
    _update_report(run, f"evaluate_{args.split}", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    run = _run_dir(args)
    config = _merged_config(args)
    report = run_sweep(config)
    (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (run / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    rows = []
    for method, entries in report["per_delta"].items():
        for entry in entries:
            rows.append(
                [
                    method,
                    entry["delta"],
                    _nan(entry["valid"]["nll_mean"]),
                    _nan(entry["valid"]["nll_se"]),
                    _nan(entry["test"]["nll_mean"]),
                    _nan(entry["test"]["nll_se"]),
                ]
            )
    with open(run / "plots" / "sweep_nll.csv", "w") as fh:
        fh.write("method,delta,valid_nll_mean,valid_nll_se,test_nll_mean,test_nll_se\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    for method, sel in report["selected"].items():
        print(
            f"{method}: delta*={sel['delta']:g} "
            f"test NLL {sel['test_nll_mean']:.4f} +/- {sel['test_nll_se']:.4f}"
        )
    print(f"sweep report written to {run / 'report.json'}")
    return 0


def _nan(value):
    return "nan" if value is None else value


def _cmd_ood(args) -> int:
    run = _run_dir(args)
    config = _merged_config(args)
    report = run_ood(config, args.ood_dataset)
    (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (run / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    edges = np.asarray(report["bin_edges"])
    for method, payload in report["methods"].items():
        np.savetxt(
            run / "plots" / f"ood_hist_{method}.csv",
            np.column_stack([edges[:-1], edges[1:], payload["id_hist"], payload["ood_hist"]]),
            delimiter=",",
            header="bin_lo,bin_hi,id_count,ood_count",
            comments="",
        )
        print(f"{method}: OOD AUC {payload['auc']:.3f}")
    return 0


def _cmd_toy1d(args) -> int:
    run = _run_dir(args)
    bundle = run_toy1d(
        delta=args.toy_delta,
        num_samples=args.samples or 1000,
        seed=int(args.seed) if args.seed is not None else 0,
        grid_resolution=args.grid_res,
        with_hmc=args.with_hmc,
        hmc_samples=args.hmc_samples,
    )
    _update_report(run, "toy1d", bundle)
    means = bundle["predictive_mean"]
    np.savetxt(
        run / "plots" / "predictive_means.csv",
        np.column_stack(
            [
                bundle["x_grid"],
                means["grid"],
                means["map"],
                means["glm"],
                means["bnn"],
                means["glm_quadrature"],
                means["bnn_quadrature"],
            ]
        ),
        delimiter=",",
        header="x,grid,map,glm,bnn,glm_quadrature,bnn_quadrature",
        comments="",
    )
    quant = bundle["preactivation_quantiles"]
    np.savetxt(
        run / "plots" / "preactivation_quantiles.csv",
        np.column_stack([bundle["x_grid"]] + [np.asarray(v) for v in quant["values"]]),
        delimiter=",",
        header="x," + ",".join(f"q{int(100 * l)}" for l in quant["levels"]),
        comments="",
    )
    print(f"toy 1d bundle written to {run / 'report.json'}")
    return 0


def _cmd_banana(args) -> int:
    run = _run_dir(args)
    if args.banana_delta == "auto":
        delta = _select_banana_delta(args)
        print(f"selected delta {delta:g} on the validation split")
    else:
        delta = float(args.banana_delta)
    report = run_banana(
        delta=delta,
        seed=int(args.seed) if args.seed is not None else 0,
        grid_resolution=args.grid_res,
        num_samples=args.samples or 1000,
    )
    _update_report(run, "banana", report)
    axis = np.asarray(report["axis"])
    for key in ("glm_mean", "bnn_mean", "map_mean", "glm_aleatoric", "glm_epistemic"):
        np.savetxt(run / "plots" / f"banana_{key}.csv", np.asarray(report[key]), delimiter=",")
    np.savetxt(run / "plots" / "banana_axis.csv", axis, delimiter=",")
    print(
        "banana entropy means: "
        + ", ".join(f"{k}={v:.3f}" for k, v in report["entropy_means"].items())
    )
    return 0


def _select_banana_delta(args) -> float:
    """Pick the prior precision by MAP validation NLL on a uniform grid."""
    from linlaplace.datasets import SplitSpec, make_toy, split_stratified
    from linlaplace.likelihoods import likelihood_for

    seed = int(args.seed) if args.seed is not None else 0
    data = make_toy("banana", seed=seed)
    spec = SplitSpec(ratios=(0.05, 0.05, 0.90), seed=seed, stratified=True)
    train, valid, _ = split_stratified(data, spec)
    lik = likelihood_for("bernoulli")
    best = (np.inf, 1.0)
    for delta in np.linspace(0.1, 2.0, 10):
        net = MlpNetwork([2, 50, 50, 1], activation="tanh")
        cfg = MapConfig(learning_rate=1e-2, num_steps=3000, seed=seed, decay_steps=(2400, 2800))
        theta, _ = map_train(net, lik, train.X, train.y, float(delta), cfg)
        nll = evaluate(map_predictive(net, theta, valid.X, lik), valid.y).nll
        best = min(best, (nll, float(delta)))
    return best[1]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="linlaplace",
        description="Laplace posterior approximations for fully connected networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("train", "fit the MAP estimate and store run artifacts"),
        ("curvature", "estimate GGN/KFAC curvature at the stored MAP"),
        ("predict", "write predictive probabilities for a split"),
        ("refine", "refine the GLM posterior (laplace or NGVI)"),
        ("evaluate", "compute nll/accuracy/ece for the configured predictives"),
        ("sweep", "delta x seed sweep with validation selection"),
        ("ood", "in- vs out-of-distribution entropy comparison"),
        ("toy1d", "1-d step pipeline with grid/HMC oracles"),
        ("banana", "2-d crescents pipeline with predictive maps"),
    ]:
        p = sub.add_parser(name, help=help_text)
        if name in ("train", "sweep", "ood", "curvature", "predict", "refine", "evaluate"):
            _add_config_flags(p)
        p.add_argument("--out", dest="run", required=(name in ("train", "sweep", "ood", "toy1d", "banana")),
                       help="run directory")
        if name in ("curvature", "predict", "refine", "evaluate"):
            p.add_argument("--run", dest="run_existing", help="existing run directory (alias of --out)")
        if name in ("predict", "evaluate"):
            p.add_argument("--split", default="test", help="train|valid|test")
        if name == "ood":
            p.add_argument("--ood-dataset", dest="ood_dataset", required=True,
                           help="CSV path or toy:<kind> used as the OOD set")
        if name == "toy1d":
            p.add_argument("--delta", dest="toy_delta", type=float, default=1.0)
            p.add_argument("--samples", type=int)
            p.add_argument("--seed", type=str)
            p.add_argument("--grid-res", dest="grid_res", type=int, default=300)
            p.add_argument("--with-hmc", dest="with_hmc", action="store_true")
            p.add_argument("--hmc-samples", dest="hmc_samples", type=int, default=100_000)
        if name == "banana":
            p.add_argument("--delta", dest="banana_delta", default="1.0",
                           help="prior precision, or 'auto' for validation selection")
            p.add_argument("--samples", type=int)
            p.add_argument("--seed", type=str)
            p.add_argument("--grid-res", dest="grid_res", type=int, default=100)

    args = parser.parse_args(argv)
    if getattr(args, "run_existing", None):
        args.run = args.run_existing
    if getattr(args, "run", None) is None:
        print("error: --run (or --out) is required", file=sys.stderr)
        return 2

    handlers = {
        "train": _cmd_train,
        "curvature": _cmd_curvature,
        "predict": _cmd_predict,
        "refine": _cmd_refine,
        "evaluate": _cmd_evaluate,
        "sweep": _cmd_sweep,
        "ood": _cmd_ood,
        "toy1d": _cmd_toy1d,
        "banana": _cmd_banana,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
