"""Empirical Bayes variable selection for high-dimensional linear regression."""

__version__ = "0.1.0"

from .columns import ColumnSource, FileColumns, InMemoryColumns, write_column_store
from .diagnostics import RefitReport, ols_refit, student_t_sf
from .em import EmConfig, FitResult, run_em
from .lasso import LassoConfig, lasso_cv_select, lasso_path
from .model import Dataset, LatentState, ModelParams
from .preprocessing import logratio_transform, rescale_minmax, zscore

__all__ = [
    "ColumnSource",
    "Dataset",
    "EmConfig",
    "FileColumns",
    "FitResult",
    "InMemoryColumns",
    "LassoConfig",
    "LatentState",
    "ModelParams",
    "RefitReport",
    "lasso_cv_select",
    "lasso_path",
    "logratio_transform",
    "ols_refit",
    "rescale_minmax",
    "run_em",
    "student_t_sf",
    "write_column_store",
    "zscore",
]
