"""k-means++ clustering of joint IATE vectors and descriptive cluster profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import Dataset
from .errors import DataError, NumericError

MAX_LLOYD_ITER = 300
CENTROID_TOL = 1e-8


@dataclass
class ClusterResult:
    k: int
    assignment: np.ndarray      # per-row cluster id, 1..k after relabeling
    centroids: np.ndarray       # k x C, raw (unstandardized) scale
    within_ss: float
    ordering_key: np.ndarray    # mean centroid component per cluster, ascending


def _kmeanspp_init(X: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    first = rng.integers(n)
    centers[0] = X[first]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = X[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(X: np.ndarray, centers: np.ndarray):
    """Lloyd iterations; asserts the within-cluster SS never increases."""
    k = len(centers)
    prev_ss = np.inf
    for _ in range(MAX_LLOYD_ITER):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        ss = float(d2[np.arange(len(X)), assign].sum())
        if ss > prev_ss + 1e-9 * max(1.0, prev_ss):
            raise NumericError("Lloyd iteration increased the within-cluster SS")
        new_centers = centers.copy()
        shift = 0.0
        for j in range(k):
            members = X[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
                shift = max(shift, float(np.abs(new_centers[j] - centers[j]).max()))
        centers = new_centers
        if shift < CENTROID_TOL:
            break
        prev_ss = ss
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    ss = float(d2[np.arange(len(X)), assign].sum())
    return assign, centers, ss


def cluster_iates(iate_matrix: np.ndarray, k: int = 5, seed: int = 0,
                  restarts: int = 10, standardize: bool = True) -> ClusterResult:
    """k-means++ with Lloyd refinement, best of ``restarts`` by within-cluster SS.

    Clusters are relabeled 1..k by ascending mean of the raw centroid
    components, so cluster 1 gathers the least and cluster k the most
    beneficial individuals.
    """
    X_raw = np.asarray(iate_matrix, dtype=np.float64)
    if X_raw.ndim == 1:
        X_raw = X_raw[:, None]
    n = len(X_raw)
    if n < k:
        raise DataError(f"cannot form {k} clusters from {n} rows")
    if standardize:
        sd = X_raw.std(axis=0)
        sd[sd == 0] = 1.0
        X = (X_raw - X_raw.mean(axis=0)) / sd
    else:
        X = X_raw
    # seeding operates on lexicographically sorted rows so that permuting the
    # input permutes the assignment identically
    lex = np.lexsort(X.T[::-1])
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers0 = _kmeanspp_init(X[lex], k, rng)
        assign, centers, ss = _lloyd(X, centers0)
        if best is None or ss < best[2] - 1e-12:
            best = (assign, centers, ss, r)
    assign, _, ss, _ = best
    raw_centroids = np.stack([
        X_raw[assign == j].mean(axis=0) if (assign == j).any() else np.full(X_raw.shape[1], np.nan)
        for j in range(k)
    ])
    key = raw_centroids.mean(axis=1)
    order = np.argsort(key, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(1, k + 1)
    return ClusterResult(
        k=k,
        assignment=relabel[assign],
        centroids=raw_centroids[order],
        within_ss=ss,
        ordering_key=key[order],
    )


def profile_clusters(result: ClusterResult, data: Dataset, variables,
                     iate_matrix=None, contrast_names=None) -> pd.DataFrame:
    """Per-cluster covariate means, observation shares and mean IATEs.

    One row per variable, one column per cluster, shaped like a descriptive
    cluster table with clusters ordered least to most beneficial.
    """
    for v in variables:
        if v not in data.df.columns:
            raise DataError(f"unknown profiling variable {v!r}")
    if len(result.assignment) != data.n:
        raise DataError("cluster assignment length does not match the dataset")
    cols = {f"cluster {j}": result.assignment == j for j in range(1, result.k + 1)}
    rows = {}
    rows["Share of observations (in %)"] = [
        100.0 * m.mean() for m in cols.values()
    ]
    if iate_matrix is not None:
        iate_matrix = np.asarray(iate_matrix)
        names = contrast_names or [f"contrast {c}" for c in range(iate_matrix.shape[1])]
        for ci, name in enumerate(names):
            rows[f"Mean IATE {name}"] = [
                float(iate_matrix[m, ci].mean()) if m.any() else np.nan for m in cols.values()
            ]
    for v in variables:
        vals = data.df[v].to_numpy(dtype=np.float64)
        rows[v] = [float(vals[m].mean()) if m.any() else np.nan for m in cols.values()]
    return pd.DataFrame(rows, index=list(cols.keys())).T
