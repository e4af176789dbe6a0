from .cpo import CpoResult, compute_cpo, cpo_from_draws
from .laplace import FitConfig, FitError, PosteriorFit, ThetaDraws, fit, sample_theta
from .mcmc import mcmc_oracle
from .model import MODELS, LatentModel, ModelError, ModelSpec, build_latent_model, get_model

__all__ = [
    "CpoResult", "compute_cpo", "cpo_from_draws",
    "FitConfig", "FitError", "PosteriorFit", "ThetaDraws", "fit", "sample_theta",
    "mcmc_oracle",
    "MODELS", "LatentModel", "ModelError", "ModelSpec", "build_latent_model", "get_model",
]
