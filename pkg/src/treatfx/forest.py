"""Honest multi-treatment causal forest: tuning, fitting, weights, prediction,
variable importance, feature selection and common-support trimming."""

from __future__ import annotations

import hashlib
import json
import pickle
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _trees
from ._trees import Tree, grow_tree, route
from .data import ColumnSpec, Dataset, CONTINUOUS, ORDERED, UNORDERED
from .errors import DataError, NumericError

_KIND_CODE = {CONTINUOUS: _trees.KIND_CONTINUOUS,
              ORDERED: _trees.KIND_ORDERED,
              UNORDERED: _trees.KIND_UNORDERED}

FOREST_FORMAT = "treatfx-forest"
FOREST_VERSION = 1


@dataclass
class ForestParams:
    n_trees: int = 1000
    subsample_fraction: float = 2.0 / 3.0
    honesty_fraction: float = 0.5
    min_leaf_per_arm: int = 5
    mtry: int | None = None
    max_depth: int | None = None
    cs_threshold: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.subsample_fraction <= 1):
            raise DataError("subsample_fraction must be in (0, 1]")
        if not (0 < self.honesty_fraction < 1):
            raise DataError("honesty_fraction must be in (0, 1)")
        if self.min_leaf_per_arm < 1:
            raise DataError("min_leaf_per_arm must be >= 1")
        if self.n_trees < 1:
            raise DataError("n_trees must be >= 1")
        if not (0 <= self.cs_threshold < 0.5):
            raise DataError("cs_threshold must be in [0, 0.5)")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "subsample_fraction": self.subsample_fraction,
            "honesty_fraction": self.honesty_fraction,
            "min_leaf_per_arm": self.min_leaf_per_arm,
            "mtry": self.mtry,
            "max_depth": self.max_depth,
            "cs_threshold": self.cs_threshold,
            "seed": self.seed,
        }


@dataclass
class PoPrediction:
    """Per-query potential-outcome point estimates over all outcome columns."""

    po: np.ndarray        # (nq, A, H)
    support: np.ndarray   # (nq, A) bool
    n_populated: np.ndarray  # (nq, A) trees contributing per arm


@dataclass
class WeightMatrix:
    """Per-arm normalized forest weights over honest training rows.

    ``w[a]`` has one row per query and one column per training row of arm
    ``a`` (global indices in ``arm_rows[a]``).  Rows sum to 1 for supported
    (query, arm) pairs and to 0 otherwise.
    """

    w: list                  # per arm: (nq, n_arm) float64
    arm_rows: list           # per arm: global train row indices
    support: np.ndarray      # (nq, A) bool


def schema_hash(specs: list[ColumnSpec]) -> str:
    payload = json.dumps([s.to_dict() for s in specs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _grow_one(args):
    (t, X, y_split, d, kinds, n_levels, params, n_arms, n) = args
    rng = np.random.default_rng([params.seed, t])
    sub_parts, honest_parts, struct_parts = [], [], []
    for a in range(n_arms):
        ids = np.flatnonzero(d == a)
        k = max(1, int(round(params.subsample_fraction * len(ids))))
        chosen = rng.choice(ids, size=min(k, len(ids)), replace=False)
        chosen = rng.permutation(chosen)
        n_h = int(round(params.honesty_fraction * len(chosen)))
        honest_parts.append(chosen[:n_h])
        struct_parts.append(chosen[n_h:])
        sub_parts.append(chosen)
    struct_idx = np.sort(np.concatenate(struct_parts))
    honest_idx = np.sort(np.concatenate(honest_parts))
    subsample_idx = np.sort(np.concatenate(sub_parts))
    mtry = params.mtry or max(1, int(np.ceil(np.sqrt(X.shape[1]))))
    return grow_tree(
        X[struct_idx], y_split[struct_idx], d[struct_idx],
        X[honest_idx], d[honest_idx],
        kinds, n_levels, struct_idx, honest_idx, subsample_idx,
        params.min_leaf_per_arm, mtry, params.max_depth, n_arms, rng,
    )


class Forest:
    """A fitted honest multi-treatment forest over one training dataset."""

    def __init__(self, params, trees, columns, cov_specs, kinds, n_levels,
                 X_train, y_train, d_train, outcome_columns, split_col):
        self.params = params
        self.trees = trees
        self.columns = columns
        self.cov_specs = cov_specs
        self.kinds = kinds
        self.n_levels = n_levels
        self.X_train = X_train
        self.y_train = y_train
        self.d_train = d_train
        self.outcome_columns = outcome_columns
        self.split_col = split_col
        self.n_arms = int(d_train.max()) + 1
        self.schema_hash = schema_hash(cov_specs)
        self._finalize()

    # -- post-growth statistics -----------------------------------------

    def _finalize(self):
        n, n_cols = self.y_train.shape
        a = self.n_arms
        sig_sum = np.zeros((n, n_cols))
        sig_cnt = np.zeros(n)
        for tree in self.trees:
            cnt = np.zeros((tree.n_leaves, a))
            ysum = np.zeros((tree.n_leaves, a, n_cols))
            leaf_pos = []
            for lf, members in enumerate(tree.leaf_members):
                pos_per_arm = []
                for arm in range(a):
                    m = members[arm]
                    cnt[lf, arm] = len(m)
                    if len(m):
                        ym = self.y_train[m]
                        ysum[lf, arm] = ym.sum(axis=0)
                        resid = ym - ysum[lf, arm] / len(m)
                        sig_sum[m] += resid ** 2
                        sig_cnt[m] += 1
                    pos_per_arm.append(m)
                leaf_pos.append(pos_per_arm)
            tree.cnt = cnt
            tree.ysum = ysum
        with np.errstate(invalid="ignore", divide="ignore"):
            sigma2 = sig_sum / sig_cnt[:, None]
        # rows never honest fall back to their arm's outcome variance
        for arm in range(a):
            rows = np.flatnonzero(self.d_train == arm)
            fallback = self.y_train[rows].var(axis=0)
            miss = rows[sig_cnt[rows] == 0]
            sigma2[miss] = fallback
        self.sigma2 = sigma2

    # -- querying --------------------------------------------------------

    def _query_matrix(self, query) -> np.ndarray:
        if isinstance(query, Dataset):
            if schema_hash(query_cov_specs(query, self.columns)) != self.schema_hash:
                raise DataError("query schema hash differs from training schema")
            return query.matrix(self.columns)
        X = np.asarray(query, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.columns):
            raise DataError(
                f"query has {X.shape[1]} columns, forest was trained on {len(self.columns)}"
            )
        return X

    def predict_po(self, query, columns=None) -> PoPrediction:
        """Potential-outcome point estimates per arm for every query row."""
        X = self._query_matrix(query)
        col_idx = self._outcome_indices(columns)
        nq, a = len(X), self.n_arms
        po_sum = np.zeros((nq, a, len(col_idx)))
        pop = np.zeros((nq, a))
        for tree in self.trees:
            lf = route(tree, X)
            cnt = tree.cnt[lf]                        # (nq, A)
            populated = cnt > 0
            with np.errstate(invalid="ignore", divide="ignore"):
                means = tree.ysum[lf][:, :, col_idx] / cnt[:, :, None]
            po_sum += np.where(populated[:, :, None], means, 0.0)
            pop += populated
        with np.errstate(invalid="ignore", divide="ignore"):
            po = po_sum / pop[:, :, None]
        return PoPrediction(po=po, support=pop > 0, n_populated=pop)

    def weights(self, query) -> WeightMatrix:
        """Normalized per-arm forest weights for every query row."""
        X = self._query_matrix(query)
        nq, a = len(X), self.n_arms
        arm_rows = [np.flatnonzero(self.d_train == arm) for arm in range(a)]
        pos = np.full(len(self.d_train), -1, dtype=np.int64)
        for arm in range(a):
            pos[arm_rows[arm]] = np.arange(len(arm_rows[arm]))
        W = [np.zeros((nq, len(arm_rows[arm]))) for arm in range(a)]
        pop = np.zeros((nq, a))
        for tree in self.trees:
            lf = route(tree, X)
            pop += tree.cnt[lf] > 0
            order = np.argsort(lf, kind="stable")
            leaves, starts = np.unique(lf[order], return_index=True)
            bounds = np.append(starts, nq)
            for li, leaf in enumerate(leaves):
                qs = order[bounds[li]: bounds[li + 1]]
                for arm in range(a):
                    members = tree.leaf_members[leaf][arm]
                    if len(members):
                        W[arm][np.ix_(qs, pos[members])] += 1.0 / len(members)
        for arm in range(a):
            rows = pop[:, arm] > 0
            W[arm][rows] /= pop[rows, arm][:, None]
        return WeightMatrix(w=W, arm_rows=arm_rows, support=pop > 0)

    def _outcome_indices(self, columns):
        if columns is None:
            return np.arange(len(self.outcome_columns))
        idx = []
        for c in columns:
            if isinstance(c, str):
                if c not in self.outcome_columns:
                    raise DataError(f"unknown outcome column {c!r}")
                idx.append(self.outcome_columns.index(c))
            else:
                idx.append(int(c) % len(self.outcome_columns))
        return np.asarray(idx)

    # -- out-of-bag machinery -------------------------------------------

    def oob_predictions(self, X=None) -> np.ndarray:
        """Own-arm outcome prediction per training row from out-of-bag trees."""
        if X is None:
            X = self.X_train
        n = len(X)
        rows = np.arange(n)
        psum = np.zeros(n)
        pcnt = np.zeros(n)
        for tree in self.trees:
            lf = route(tree, X)
            cnt = tree.cnt[lf, self.d_train]
            inbag = np.zeros(n, dtype=bool)
            inbag[tree.subsample_idx] = True
            ok = (~inbag) & (cnt > 0)
            means = np.zeros(n)
            means[ok] = tree.ysum[lf[ok], self.d_train[ok], self.split_col] / cnt[ok]
            psum[ok] += means[ok]
            pcnt[ok] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            return psum / pcnt

    def oob_mse(self, X=None) -> float:
        pred = self.oob_predictions(X)
        ok = np.isfinite(pred)
        if not ok.any():
            raise NumericError("no out-of-bag predictions available")
        y = self.y_train[:, self.split_col]
        return float(np.mean((pred[ok] - y[ok]) ** 2))

    # -- persistence -----------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.params.to_dict(), sort_keys=True).encode())
        h.update(self.schema_hash.encode())
        for tree in self.trees:
            for arr in (tree.feature, tree.threshold, tree.is_cat, tree.cat_mask,
                        tree.left, tree.right, tree.leaf_id, tree.honest_idx,
                        tree.struct_idx):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        payload = {"format": FOREST_FORMAT, "version": FOREST_VERSION,
                   "fingerprint": self.fingerprint(), "forest": self}
        with open(path, "wb") as fh:
            pickle.dump(payload, fh, protocol=4)

    @classmethod
    def load(cls, path) -> "Forest":
        with open(path, "rb") as fh:
            payload = pickle.load(fh)
        if payload.get("format") != FOREST_FORMAT:
            raise DataError(f"{path}: not a forest file")
        if payload.get("version") != FOREST_VERSION:
            raise DataError(f"{path}: unsupported forest version {payload.get('version')}")
        return payload["forest"]


def query_cov_specs(data: Dataset, columns) -> list[ColumnSpec]:
    return [data.spec(c) for c in columns]


def fit(train: Dataset, params: ForestParams, columns=None, split_col=-1,
        n_jobs: int = 1) -> Forest:
    """Fit an honest forest; deterministic in (data, params, seed) regardless
    of worker count."""
    if columns is None:
        columns = [s.name for s in train.covariate_specs()]
    cov_specs = [train.spec(c) for c in columns]
    X = train.matrix(columns)
    y = train.outcomes
    d = train.treatment
    n_arms = train.m_treatments
    counts = np.bincount(d, minlength=n_arms)
    if (counts == 0).any():
        raise DataError(f"arms absent from training data: {np.flatnonzero(counts == 0).tolist()}")
    kinds = np.asarray([_KIND_CODE[s.kind] for s in cov_specs], dtype=np.int64)
    n_levels = np.asarray([len(s.levels) for s in cov_specs], dtype=np.int64)
    split_col = int(split_col) % y.shape[1]

    args = [(t, X, y[:, split_col], d, kinds, n_levels, params, n_arms, train.n)
            for t in range(params.n_trees)]
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            trees = list(ex.map(_grow_one, args))
    else:
        trees = [_grow_one(a) for a in args]
    return Forest(params, trees, list(columns), cov_specs, kinds, n_levels,
                  X, y, d, list(train.outcome_columns), split_col)


def min_feasible_arm_count(train: Dataset, params: ForestParams) -> int:
    counts = np.bincount(train.treatment, minlength=train.m_treatments)
    sub = np.round(params.subsample_fraction * counts)
    honest = np.floor(params.honesty_fraction * sub)
    return int(honest.min())


def tune(train: Dataset, grid: dict, params_base: ForestParams, seed: int,
         columns=None, n_jobs: int = 1):
    """Grid-search (min_leaf_per_arm, mtry) by out-of-bag outcome MSE.

    Ties break toward larger min_leaf, then smaller mtry, for stability.
    Returns (best ForestParams, results list).
    """
    leaf_grid = list(grid.get("min_leaf_per_arm", [params_base.min_leaf_per_arm]))
    mtry_grid = list(grid.get("mtry", [params_base.mtry]))
    if not leaf_grid or not mtry_grid:
        raise DataError("empty tuning grid")
    results = []
    for min_leaf in leaf_grid:
        cand = replace(params_base, min_leaf_per_arm=int(min_leaf), seed=seed)
        if min_leaf > min_feasible_arm_count(train, cand):
            warnings.warn(
                f"tuning: min_leaf_per_arm={min_leaf} infeasible for the smallest arm, skipped"
            )
            continue
        for mtry in mtry_grid:
            cand_m = replace(cand, mtry=None if mtry is None else int(mtry))
            forest = fit(train, cand_m, columns=columns, n_jobs=n_jobs)
            results.append({"min_leaf_per_arm": int(min_leaf),
                            "mtry": mtry, "oob_mse": forest.oob_mse()})
    if not results:
        raise DataError("all tuning grid points are infeasible")
    best = min(results, key=lambda r: (r["oob_mse"], -r["min_leaf_per_arm"],
                                       np.inf if r["mtry"] is None else r["mtry"]))
    return replace(params_base, min_leaf_per_arm=best["min_leaf_per_arm"],
                   mtry=best["mtry"], seed=params_base.seed), results


def variable_importance(forest: Forest, seed: int = 0, n_repeats: int = 5) -> dict:
    """Permutation importance: increase in out-of-bag MSE when a feature
    column is shuffled (average over ``n_repeats`` permutations)."""
    base = forest.oob_mse()
    rng = np.random.default_rng([seed, 2718])
    scores = {}
    for f, name in enumerate(forest.columns):
        deltas = []
        for _ in range(n_repeats):
            Xp = forest.X_train.copy()
            Xp[:, f] = Xp[rng.permutation(len(Xp)), f]
            deltas.append(forest.oob_mse(Xp) - base)
        scores[name] = float(np.mean(deltas))
    return scores


def feature_select(data: Dataset, split, params: ForestParams, pinned=(),
                   columns=None, seed: int = 0, n_jobs: int = 1):
    """Keep covariates with positive permutation importance on the
    feature-selection slice; pinned confounders are always retained."""
    if len(split.feature_select_ids) == 0:
        raise DataError("feature-selection part of the split is empty")
    slice_data = data.subset(split.feature_select_ids)
    forest = fit(slice_data, params, columns=columns, n_jobs=n_jobs)
    scores = variable_importance(forest, seed=seed)
    selected = [c for c in forest.columns if scores[c] > 0 or c in set(pinned)]
    if not selected:
        warnings.warn("feature selection retained nothing; falling back to the full set")
        selected = list(forest.columns)
    return selected, scores


def common_support_trim(data: Dataset, eps: float, seed: int = 0,
                        n_estimators: int = 300, min_samples_leaf: int = 50):
    """Drop rows whose estimated propensity for any arm falls below ``eps``.

    Propensities come from an out-of-bag random-forest classifier on the
    confounders (multinomial leaf frequencies).  Returns
    (kept Dataset, report, kept row ids, propensity matrix).
    """
    if not (0 <= eps < 0.5):
        raise DataError("common-support threshold must be in [0, 0.5)")
    report = {"eps": eps, "dropped_by_arm": {a: 0 for a in range(data.m_treatments)},
              "n_dropped": 0}
    kept_ids = np.arange(data.n)
    if eps == 0:
        return data, report, kept_ids, None
    from sklearn.ensemble import RandomForestClassifier

    cols = data.columns_with_role("confounder")
    X = data.matrix(cols)
    d = data.treatment
    clf = RandomForestClassifier(
        n_estimators=n_estimators, min_samples_leaf=min_samples_leaf,
        oob_score=True, bootstrap=True, random_state=seed, n_jobs=1,
    )
    clf.fit(X, d)
    probs = clf.oob_decision_function_
    bad = ~np.isfinite(probs).all(axis=1)
    if bad.any():
        probs[bad] = clf.predict_proba(X[bad])
    drop = (probs < eps).any(axis=1)
    if drop.any():
        dropped_arms = d[drop]
        for a in range(data.m_treatments):
            report["dropped_by_arm"][a] = int((dropped_arms == a).sum())
    report["n_dropped"] = int(drop.sum())
    kept_ids = np.flatnonzero(~drop)
    kept_counts = np.bincount(d[~drop], minlength=data.m_treatments)
    empty = np.flatnonzero(kept_counts == 0)
    if empty.size:
        raise DataError(f"common-support trimming emptied arms {empty.tolist()}")
    return data.subset(kept_ids), report, kept_ids, probs
