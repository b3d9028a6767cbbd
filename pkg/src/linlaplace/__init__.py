"""Laplace-Gauss-Newton posteriors and linearized predictives for MLPs."""

from linlaplace.network import MlpNetwork, load_params, save_params
from linlaplace.likelihoods import (
    BernoulliLikelihood,
    CategoricalLikelihood,
    GaussianLikelihood,
    likelihood_for,
)
from linlaplace.training import MapConfig, log_joint, log_joint_grad, map_train
from linlaplace.curvature import (
    DiagCurvature,
    FullCurvature,
    KfacCurvature,
    KfacLayer,
    ggn,
    kfac,
    load_curvature,
    save_curvature,
)
from linlaplace.posterior import (
    GaussianPosterior,
    NumericalError,
    laplace_posterior,
    load_posterior,
    save_posterior,
)
from linlaplace.glm import (
    LinearizedModel,
    NgviConfig,
    NgviState,
    OutputGaussian,
    RefineConfig,
    bnn_predictive,
    glm_log_joint,
    glm_output_distribution,
    glm_predictive,
    glm_refine_laplace,
    glm_refine_ngvi,
    linearize,
    map_predictive,
    ngvi_refine_state,
    predictive_from_samples,
)
from linlaplace.gp import (
    GpSodPosterior,
    KernelConfig,
    gp_fit_sod,
    gp_latent_distribution,
    gp_predictive,
    kernel,
)
from linlaplace.reference import (
    GridPosterior,
    HmcConfig,
    HmcResult,
    exact_hessian_laplace,
    grid_posterior,
    hmc_sample,
)
from linlaplace.metrics import (
    EvalReport,
    evaluate,
    ood_auc,
    predictive_entropy,
    variance_decomposition,
)
from linlaplace.datasets import (
    Dataset,
    SplitSpec,
    load_csv,
    make_toy,
    split_stratified,
    standardize,
)
from linlaplace.experiments import (
    ConfigError,
    ExperimentConfig,
    laplace_output_state,
    run_banana,
    run_cell,
    run_ood,
    run_sweep,
    run_toy1d,
)

__version__ = "0.1.0"
