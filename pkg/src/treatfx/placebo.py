"""Pseudo-treatment falsification harness: a fresh forest on past-dated data
should find no effect of the future programme on pre-treatment outcomes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .data import Dataset, split_samples
from .effects import EffectsEngine, all_contrasts
from .errors import DataError
from .forest import ForestParams, fit


@dataclass
class PlaceboConfig:
    pseudo_outcome_columns: list = field(default_factory=list)
    arms_under_test: list | None = None    # None = all arms
    alpha: float = 0.01
    split_fractions: tuple = (0.75, 0.25, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise DataError("alpha must be in (0, 1)")


@dataclass
class PlaceboOutcome:
    estimates: list                  # EffectEstimate per contrast
    rejected: dict                   # contrast str -> bool
    verdict: str                     # "pass" | "reject"
    alpha: float
    table: pd.DataFrame              # matrix: PO levels on the diagonal, ATEs below


def placebo_run(past_data: Dataset, config: PlaceboConfig,
                params: ForestParams, columns=None, n_jobs: int = 1) -> PlaceboOutcome:
    """Fit a fresh forest on the past-dated data and test all pairwise
    pseudo-treatment ATEs against zero at the configured level."""
    for c in config.pseudo_outcome_columns:
        if c not in past_data.df.columns:
            raise DataError(f"pseudo outcome column {c!r} missing from the past dataset")
    if config.pseudo_outcome_columns:
        out_col = config.pseudo_outcome_columns[-1]
    else:
        out_col = past_data.outcome_columns[-1]
    if out_col not in past_data.outcome_columns:
        raise DataError(f"pseudo outcome {out_col!r} must carry the outcome role")

    data = past_data
    if config.arms_under_test is not None:
        arms = sorted(int(a) for a in config.arms_under_test)
        mask = np.isin(data.treatment, arms)
        sub = data.df.loc[mask].copy()
        relabel = {a: i for i, a in enumerate(arms)}
        sub[data.treatment_column] = sub[data.treatment_column].map(relabel)
        data = Dataset(sub, data.specs)

    split = split_samples(data, config.split_fractions, config.seed)
    train = data.subset(split.train_ids)
    predict = data.subset(split.predict_ids)
    forest = fit(train, params, columns=columns, n_jobs=n_jobs,
                 split_col=data.outcome_columns.index(out_col))
    engine = EffectsEngine(forest, predict,
                           horizon=data.outcome_columns.index(out_col))

    z = float(stats.norm.ppf(1 - config.alpha / 2))
    estimates, rejected = [], {}
    for c in all_contrasts(data.m_treatments):
        est = engine.ate(c)
        estimates.append(est)
        rejected[str(c)] = bool(abs(est.point) > z * est.se)
    verdict = "reject" if any(rejected.values()) else "pass"

    a = data.m_treatments
    mat = np.full((a, a), np.nan)
    stars = np.full((a, a), "", dtype=object)
    for arm in range(a):
        mat[arm, arm] = engine.po_level(arm).point
    for est in estimates:
        mat[est.contrast.m, est.contrast.l] = est.point
        if rejected[str(est.contrast)]:
            stars[est.contrast.m, est.contrast.l] = "***"
    table = pd.DataFrame(
        [[("" if np.isnan(mat[i, j]) else f"{mat[i, j]:.3f}{stars[i, j]}")
          for j in range(a)] for i in range(a)],
        index=[f"arm {i}" for i in range(a)],
        columns=[f"arm {j}" for j in range(a)],
    )
    return PlaceboOutcome(estimates, rejected, verdict, config.alpha, table)
