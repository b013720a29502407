"""Heterogeneous multi-treatment effect estimation, heterogeneity testing and
budget-constrained treatment allocation on top of an honest causal forest."""

from .data import ColumnSpec, Dataset, SampleSplit, assign_pseudo_starts, load_dataset, split_samples
from .dgp import DgpConfig, EffectSpec, Oracle, generate, oracle_summary
from .effects import (Contrast, EffectEstimate, EffectsEngine, WaldResult,
                      all_contrasts, iate_summary, wald_equality, wald_heterogeneity)
from .errors import ConfigError, DataError, NumericError, TreatfxError
from .forest import (Forest, ForestParams, WeightMatrix, common_support_trim,
                     feature_select, fit, tune, variable_importance)

__all__ = [
    "ColumnSpec", "Dataset", "SampleSplit", "assign_pseudo_starts", "load_dataset",
    "split_samples", "DgpConfig", "EffectSpec", "Oracle", "generate", "oracle_summary",
    "Contrast", "EffectEstimate", "EffectsEngine", "WaldResult", "all_contrasts",
    "iate_summary", "wald_equality", "wald_heterogeneity", "ConfigError", "DataError",
    "NumericError", "TreatfxError", "Forest", "ForestParams", "WeightMatrix",
    "common_support_trim", "feature_select", "fit", "tune", "variable_importance",
]

__version__ = "0.1.0"
