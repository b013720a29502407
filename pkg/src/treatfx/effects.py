"""IATE / GATE / ATE estimation with weight-based standard errors and Wald tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import DataError, NumericError
from .forest import Forest

Z_95 = float(stats.norm.ppf(0.975))
RIDGE_SCALE = 1e-8
DEFAULT_GATE_BINS = 10


@dataclass(frozen=True)
class Contrast:
    m: int
    l: int

    def __post_init__(self):
        if self.m == self.l:
            raise DataError("a contrast needs two distinct arms")
        if self.m < 0 or self.l < 0:
            raise DataError("contrast arms must be nonnegative")

    def __str__(self):
        return f"{self.m}-vs-{self.l}"


def all_contrasts(n_arms: int) -> list[Contrast]:
    return [Contrast(m, l) for m in range(1, n_arms) for l in range(m)]


@dataclass
class EffectEstimate:
    contrast: Contrast | None
    level: str                    # "IATE" | "GATE" | "ATE" | "PO"
    point: float
    se: float
    n_eff: int
    population: str = "all"
    group: object = None
    row_id: object = None

    @property
    def t_stat(self) -> float:
        return self.point / self.se if self.se > 0 else np.inf * np.sign(self.point)

    def ci(self, level: float = 0.90):
        z = float(stats.norm.ppf(0.5 + level / 2))
        return self.point - z * self.se, self.point + z * self.se


@dataclass
class IateResult:
    contrast: Contrast
    points: np.ndarray
    ses: np.ndarray
    support: np.ndarray   # rows where both arms are supported
    horizon: int


@dataclass
class WaldResult:
    statistic: float
    df: int
    p_value: float


class EffectsEngine:
    """Shared weight machinery: one forest, one query set, every aggregation level.

    Group and population aggregates average the per-query weights first and
    apply the plug-in variance to the averaged weights, so a single
    inferential mechanism serves IATEs, GATEs and ATEs.
    """

    def __init__(self, forest: Forest, query, horizon: int = -1):
        self.forest = forest
        self.query = query
        self.n_arms = forest.n_arms
        self.n_outcomes = len(forest.outcome_columns)
        self.horizon = int(horizon) % self.n_outcomes
        self.pred = forest.predict_po(query)
        self.wm = forest.weights(query)
        self.nq = len(self.pred.po)
        self.query_d = query.treatment if isinstance(query, Dataset) else None
        # per-query per-arm variance for every outcome column
        self.po_var = np.zeros((self.nq, self.n_arms, self.n_outcomes))
        self._sig_arm = []
        for a in range(self.n_arms):
            sig = forest.sigma2[self.wm.arm_rows[a]]      # (n_arm, H)
            self._sig_arm.append(sig)
            self.po_var[:, a, :] = (self.wm.w[a] ** 2) @ sig

    # -- row-level -------------------------------------------------------

    def iate(self, contrast: Contrast, horizon: int | None = None) -> IateResult:
        h = self.horizon if horizon is None else int(horizon) % self.n_outcomes
        m, l = contrast.m, contrast.l
        self._check_arms(contrast)
        points = self.pred.po[:, m, h] - self.pred.po[:, l, h]
        ses = np.sqrt(self.po_var[:, m, h] + self.po_var[:, l, h])
        support = self.pred.support[:, m] & self.pred.support[:, l]
        return IateResult(contrast, points, ses, support, h)

    def iate_matrix(self, contrasts=None, horizon=None) -> tuple[np.ndarray, list]:
        """n x C matrix of IATE points over supported rows (clustering input)."""
        contrasts = contrasts or all_contrasts(self.n_arms)
        res = [self.iate(c, horizon) for c in contrasts]
        support = np.logical_and.reduce([r.support for r in res])
        mat = np.column_stack([r.points for r in res])
        return mat, contrasts, support

    # -- aggregates ------------------------------------------------------

    def _resolve_population(self, population) -> tuple[np.ndarray, str]:
        if population is None or (isinstance(population, str) and population == "all"):
            return np.ones(self.nq, dtype=bool), "all"
        if isinstance(population, (int, np.integer)):
            if self.query_d is None:
                raise DataError("treated-in-arm population needs a Dataset query")
            return self.query_d == int(population), f"treated-in-{int(population)}"
        mask = np.asarray(population)
        if mask.dtype != bool:
            full = np.zeros(self.nq, dtype=bool)
            full[mask] = True
            mask = full
        return mask, "custom"

    def _check_arms(self, contrast):
        for a in (contrast.m, contrast.l):
            if a >= self.n_arms:
                raise DataError(f"arm {a} outside 0..{self.n_arms - 1}")

    def _mean_weights(self, mask) -> list[np.ndarray]:
        return [self.wm.w[a][mask].mean(axis=0) for a in range(self.n_arms)]

    def _avg_var(self, wbar_m, wbar_l, m, l, h) -> float:
        return float((wbar_m ** 2) @ self._sig_arm[m][:, h]
                     + (wbar_l ** 2) @ self._sig_arm[l][:, h])

    def ate(self, contrast: Contrast, population=None, horizon=None) -> EffectEstimate:
        h = self.horizon if horizon is None else int(horizon) % self.n_outcomes
        self._check_arms(contrast)
        mask, pop_name = self._resolve_population(population)
        r = self.iate(contrast, h)
        mask = mask & r.support
        if not mask.any():
            raise DataError(f"population {pop_name!r} resolves to no supported query rows")
        m, l = contrast.m, contrast.l
        wbar = self._mean_weights(mask)
        se = float(np.sqrt(self._avg_var(wbar[m], wbar[l], m, l, h)))
        return EffectEstimate(contrast, "ATE", float(r.points[mask].mean()), se,
                              int(mask.sum()), population=pop_name)

    def po_level(self, arm: int, population=None, horizon=None) -> EffectEstimate:
        """Average potential-outcome level for one arm (contrast-matrix diagonal)."""
        h = self.horizon if horizon is None else int(horizon) % self.n_outcomes
        mask, pop_name = self._resolve_population(population)
        mask = mask & self.pred.support[:, arm]
        if not mask.any():
            raise DataError(f"no supported rows for arm {arm}")
        wbar = self.wm.w[arm][mask].mean(axis=0)
        var = float((wbar ** 2) @ self._sig_arm[arm][:, h])
        return EffectEstimate(None, "PO", float(self.pred.po[mask, arm, h].mean()),
                              float(np.sqrt(var)), int(mask.sum()), population=pop_name,
                              group=arm)

    def group_labels(self, column: str, n_bins: int = DEFAULT_GATE_BINS):
        """Group labels for a heterogeneity column; continuous columns are
        quantile-binned with bin means as labels."""
        if not isinstance(self.query, Dataset):
            raise DataError("GATE grouping needs a Dataset query")
        spec = self.query.spec(column)
        vals = self.query.df[column].to_numpy(dtype=np.float64)
        if spec.is_categorical:
            return vals
        qs = np.quantile(vals, np.linspace(0, 1, n_bins + 1))
        edges = np.unique(qs)[1:-1]
        bins = np.searchsorted(edges, vals, side="left")
        labels = np.array([vals[bins == b].mean() for b in range(len(edges) + 1)])
        return labels[bins]

    def gate(self, contrast: Contrast, column: str, population=None, horizon=None,
             n_bins: int = DEFAULT_GATE_BINS):
        """GATEs per group level plus their joint covariance matrix.

        Returns (estimates, covariance, gate_minus_ate list, ate estimate).
        """
        h = self.horizon if horizon is None else int(horizon) % self.n_outcomes
        labels = self.group_labels(column, n_bins)
        r = self.iate(contrast, h)
        mask0, pop_name = self._resolve_population(population)
        base = mask0 & r.support
        m, l = contrast.m, contrast.l
        estimates, wbars = [], []
        for z in np.unique(labels[base]):
            mask = base & (labels == z)
            if not mask.any():
                continue
            wbar = self._mean_weights(mask)
            se = float(np.sqrt(self._avg_var(wbar[m], wbar[l], m, l, h)))
            estimates.append(EffectEstimate(contrast, "GATE", float(r.points[mask].mean()),
                                            se, int(mask.sum()), population=pop_name,
                                            group=float(z) if not isinstance(z, str) else z))
            wbars.append(wbar)
        cov = self._group_covariance(wbars, m, l, h)
        ate_est = self.ate(contrast, population, h)
        diffs = [e.point - ate_est.point for e in estimates]
        return estimates, cov, diffs, ate_est

    def _group_covariance(self, wbars, m, l, h) -> np.ndarray:
        k = len(wbars)
        cov = np.zeros((k, k))
        if k == 0:
            return cov
        Wm = np.stack([w[m] for w in wbars])
        Wl = np.stack([w[l] for w in wbars])
        cov += (Wm * self._sig_arm[m][:, h]) @ Wm.T
        cov += (Wl * self._sig_arm[l][:, h]) @ Wl.T
        return cov

    def effect_path(self, contrast: Contrast, population=None) -> list[EffectEstimate]:
        """One ATE per outcome horizon, reusing the same weights throughout."""
        return [self.ate(contrast, population, horizon=hh) for hh in range(self.n_outcomes)]

    def subpopulation_equality(self, contrast: Contrast, horizon=None) -> tuple:
        """ATE per treatment-specific subpopulation plus the equality Wald test."""
        if self.query_d is None:
            raise DataError("subpopulation test needs a Dataset query")
        h = self.horizon if horizon is None else int(horizon) % self.n_outcomes
        r = self.iate(contrast, h)
        m, l = contrast.m, contrast.l
        points, wbars, ests = [], [], []
        for arm in range(self.n_arms):
            mask = (self.query_d == arm) & r.support
            if not mask.any():
                raise DataError(f"no supported query rows observed in arm {arm}")
            wbar = self._mean_weights(mask)
            se = float(np.sqrt(self._avg_var(wbar[m], wbar[l], m, l, h)))
            ests.append(EffectEstimate(contrast, "ATE", float(r.points[mask].mean()), se,
                                       int(mask.sum()), population=f"treated-in-{arm}"))
            points.append(ests[-1].point)
            wbars.append(wbar)
        cov = self._group_covariance(wbars, m, l, h)
        wald = wald_equality(np.asarray(points), cov)
        return ests, wald


def wald_equality(points: np.ndarray, cov: np.ndarray) -> WaldResult:
    """Wald test that all components of ``points`` are equal (Chi2 with K-1 df)."""
    k = len(points)
    if k < 2:
        raise DataError("equality test needs at least two estimates")
    R = np.zeros((k - 1, k))
    for i in range(k - 1):
        R[i, i] = 1.0
        R[i, i + 1] = -1.0
    theta = R @ points
    V = R @ cov @ R.T
    tr = np.trace(V)
    if tr <= 0:
        raise NumericError("degenerate covariance in Wald test")
    ridge = RIDGE_SCALE * tr / (k - 1)
    try:
        sol = np.linalg.solve(V + ridge * np.eye(k - 1), theta)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular covariance in Wald test") from exc
    stat = float(theta @ sol)
    stat = max(stat, 0.0)
    return WaldResult(stat, k - 1, float(stats.chi2.sf(stat, k - 1)))


def wald_heterogeneity(gates: list[EffectEstimate], cov: np.ndarray) -> WaldResult:
    """Equality-of-GATEs Wald test from the estimates and their joint covariance."""
    return wald_equality(np.asarray([g.point for g in gates]), np.asarray(cov))


def iate_summary(points: np.ndarray, ses: np.ndarray, alpha: float = 0.05) -> dict:
    """Distributional summary of a set of IATEs plus a density export."""
    points = np.asarray(points, dtype=np.float64)
    ses = np.asarray(ses, dtype=np.float64)
    if points.size == 0:
        raise DataError("no IATEs to summarize")
    z = float(stats.norm.ppf(1 - alpha / 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ses > 0, points / ses, np.sign(points) * np.inf)
    out = {
        "share_positive": float((points > 0).mean()),
        "share_sig_positive": float((t > z).mean()),
        "std_points": float(points.std()),
        "mean_se": float(ses.mean()),
    }
    lo, hi = points.min(), points.max()
    pad = 0.1 * max(hi - lo, 1e-9)
    grid = np.linspace(lo - pad, hi + pad, 512)
    if points.std() > 0 and len(points) > 1:
        dens = stats.gaussian_kde(points)(grid)
    else:
        dens = np.zeros_like(grid)
        dens[np.argmin(np.abs(grid - points[0]))] = 1.0 / (grid[1] - grid[0])
    out["density_grid"] = grid
    out["density"] = dens
    return out
