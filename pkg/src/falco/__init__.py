"""Latent factor analysis for high-dimensional data with dependent samples."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .cbcv import CbcvResult, LeverageError, cbcv_select, loo_loss, sample_haar_rotation
from .covmodel import (
    CovarianceBasis,
    CovarianceModelError,
    SingularReducedCovariance,
    assemble_V,
    rotate_out_nuisance,
)
from .denoise import (
    GeneTest,
    bh_fdr,
    bh_qvalues,
    denoise_gene,
    denoise_genes,
    estimate_Vg,
    test_factor_covariate,
)
from .factor import FactorFit, estimate_subspace, falco_fit, normalize_factors, pca_fit
from .reml import RemlOptions, RemlSolution, reml_denoise, reml_full, reml_gene, reml_projected
from .simgen import (
    SimConfig,
    SimDataset,
    factor_correlation,
    load_preset,
    oracle_quantities,
    simulate,
    subspace_correlation,
)

__all__ = [
    "BACKEND",
    "CbcvResult",
    "CovarianceBasis",
    "CovarianceModelError",
    "FactorFit",
    "GeneTest",
    "LeverageError",
    "RemlOptions",
    "RemlSolution",
    "SimConfig",
    "SimDataset",
    "SingularReducedCovariance",
    "assemble_V",
    "bh_fdr",
    "bh_qvalues",
    "cbcv_select",
    "denoise_gene",
    "denoise_genes",
    "estimate_Vg",
    "estimate_subspace",
    "factor_correlation",
    "falco_fit",
    "load_preset",
    "loo_loss",
    "normalize_factors",
    "oracle_quantities",
    "pca_fit",
    "reml_denoise",
    "reml_full",
    "reml_gene",
    "reml_projected",
    "rotate_out_nuisance",
    "sample_haar_rotation",
    "simulate",
    "subspace_correlation",
    "test_factor_covariate",
]
