"""Federated statistical computation over private per-site datasets.

A master process fits models across sites by exchanging only low-dimensional
aggregates -- score vectors, information matrices, singular-vector
contributions -- while raw records never leave the site that owns them.
Implements the site-stratified Cox proportional hazards model and a
privacy-preserving rank-k SVD, plus the definition, wire-protocol, and
site-governance machinery around them.
"""

from .compdef import (
    COX_MODEL,
    RANK_K_SVD,
    ComputationDefinition,
    ModelFormula,
    available_computations,
    new_computation_id,
    parse_formula,
    read_compdef,
    write_compdef,
)
from .cox import (
    CoxFitResult,
    CoxLocalStats,
    FitOptions,
    SurvivalDataset,
    cox_aggregate,
    cox_fit,
    cox_fit_pooled,
    cox_local_stats,
    cox_summary,
)
from .errors import FedfitError
from .master import HttpTransport, Master, SiteHandle, upload_computation
from .svd import SvdResult, master_run_svd, svd_oracle, svd_rank1_dense

__version__ = "0.1.0"

__all__ = [
    "COX_MODEL",
    "RANK_K_SVD",
    "ComputationDefinition",
    "ModelFormula",
    "available_computations",
    "new_computation_id",
    "parse_formula",
    "read_compdef",
    "write_compdef",
    "CoxFitResult",
    "CoxLocalStats",
    "FitOptions",
    "SurvivalDataset",
    "cox_aggregate",
    "cox_fit",
    "cox_fit_pooled",
    "cox_local_stats",
    "cox_summary",
    "FedfitError",
    "HttpTransport",
    "Master",
    "SiteHandle",
    "upload_computation",
    "SvdResult",
    "master_run_svd",
    "svd_oracle",
    "svd_rank1_dense",
    "__version__",
]
