"""Honest tree growth and vectorized routing for the multi-treatment forest.

Each tree is grown on a structure subsample and populated with a disjoint
honest subsample.  Splits maximize the sum over all arm pairs (m, l) of
``n_L * n_R * (tau_L - tau_R)^2`` where ``tau`` is the structure-half
mean-difference contrast, a multi-arm generalization of the two-arm
heterogeneity criterion.  A split is feasible only if every eligible arm
keeps at least ``min_leaf_per_arm`` rows on both sides of both halves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KIND_CONTINUOUS = 0
KIND_ORDERED = 1
KIND_UNORDERED = 2


@dataclass
class Tree:
    # node arrays
    feature: np.ndarray      # int, -1 for leaves
    threshold: np.ndarray    # float
    is_cat: np.ndarray       # bool, True for unordered subset splits
    cat_mask: np.ndarray     # uint64 bitmask of level codes routed left
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray      # leaf index for leaf nodes, -1 otherwise
    n_leaves: int
    # sample bookkeeping (indices into the training matrix)
    subsample_idx: np.ndarray
    struct_idx: np.ndarray
    honest_idx: np.ndarray
    leaf_members: list = field(default_factory=list)  # per leaf: list per arm of train row idx
    # per-leaf per-arm honest stats, filled by the forest after growth
    cnt: np.ndarray | None = None    # (n_leaves, A)
    ysum: np.ndarray | None = None   # (n_leaves, A, H)


def _scan_threshold(v_s, y_s, d_s, v_h, d_h, arms, min_leaf):
    """Best feasible cut for one (already encoded) feature at one node.

    Returns (criterion, threshold) or None when no feasible cut exists.
    """
    order = np.argsort(v_s, kind="stable")
    v = v_s[order]
    y = y_s[order]
    d = d_s[order]
    change = np.flatnonzero(v[:-1] < v[1:])
    if change.size == 0:
        return None
    n_tot = len(v)
    onehot = (d[:, None] == arms[None, :]).astype(np.float64)
    cum_cnt = np.cumsum(onehot, axis=0)
    cum_sum = np.cumsum(y[:, None] * onehot, axis=0)
    cnt_l = cum_cnt[change]
    sum_l = cum_sum[change]
    cnt_r = cum_cnt[-1] - cnt_l
    sum_r = cum_sum[-1] - sum_l
    thresholds = 0.5 * (v[change] + v[change + 1])

    feasible = (cnt_l >= min_leaf).all(axis=1) & (cnt_r >= min_leaf).all(axis=1)
    for ai, a in enumerate(arms):
        hv = np.sort(v_h[d_h == a])
        hl = np.searchsorted(hv, thresholds)
        feasible &= (hl >= min_leaf) & (len(hv) - hl >= min_leaf)
    if not feasible.any():
        return None

    with np.errstate(divide="ignore", invalid="ignore"):
        mean_l = sum_l / cnt_l
        mean_r = sum_r / cnt_r
    n_l = (change + 1).astype(np.float64)
    n_r = n_tot - n_l
    crit = np.zeros(len(change))
    n_arms = len(arms)
    for i in range(n_arms):
        for j in range(i + 1, n_arms):
            tl = mean_l[:, i] - mean_l[:, j]
            tr = mean_r[:, i] - mean_r[:, j]
            crit += n_l * n_r * (tl - tr) ** 2
    crit[~feasible] = -np.inf
    best = int(np.argmax(crit))
    if not np.isfinite(crit[best]):
        return None
    return float(crit[best]), float(thresholds[best])


def _encode_unordered(v_s, y_s, v_h, n_lev):
    """Rank-encode levels by structure-half outcome mean (CART reduction).

    Levels unseen in the structure half map to +inf so they route right.
    Returns encoded structure values, encoded honest values and the array of
    level codes in rank order.
    """
    codes = v_s.astype(np.int64)
    sums = np.bincount(codes, weights=y_s, minlength=n_lev)
    cnts = np.bincount(codes, minlength=n_lev)
    present = cnts > 0
    with np.errstate(invalid="ignore"):
        means = np.where(present, sums / np.maximum(cnts, 1), np.nan)
    pres_levels = np.flatnonzero(present)
    order = pres_levels[np.argsort(means[pres_levels], kind="stable")]
    rank = np.full(n_lev, np.inf)
    rank[order] = np.arange(len(order), dtype=np.float64)
    enc_s = rank[codes]
    enc_h = rank[v_h.astype(np.int64)]
    return enc_s, enc_h, order


def grow_tree(X_s, y_s, d_s, X_h, d_h, kinds, n_levels, struct_idx, honest_idx,
              subsample_idx, min_leaf, mtry, max_depth, n_arms, rng):
    """Grow one honest tree; leaves hold honest-half train row indices per arm."""
    p = X_s.shape[1]
    # arms eligible to constrain splitting: enough rows in both halves at the root
    eligible = [
        a for a in range(n_arms)
        if (d_s == a).sum() >= min_leaf and (d_h == a).sum() >= min_leaf
    ]
    arms = np.asarray(eligible, dtype=np.int64)

    feature, threshold, is_cat, cat_mask = [], [], [], []
    left, right, leaf_id = [], [], []
    leaf_members = []

    def new_node():
        feature.append(-1)
        threshold.append(np.nan)
        is_cat.append(False)
        cat_mask.append(0)
        left.append(-1)
        right.append(-1)
        leaf_id.append(-1)
        return len(feature) - 1

    # stack of (node_index, struct row positions, honest row positions, depth)
    root = new_node()
    stack = [(root, np.arange(len(d_s)), np.arange(len(d_h)), 0)]
    while stack:
        node, s, h, depth = stack.pop()
        split = None
        if len(arms) >= 2 and (max_depth is None or depth < max_depth) and len(s) >= 2:
            n_try = min(mtry, p)
            feats = np.sort(rng.choice(p, size=n_try, replace=False))
            best = None
            for f in feats:
                v_s = X_s[s, f]
                v_h = X_h[h, f]
                if kinds[f] == KIND_UNORDERED:
                    enc_s, enc_h, order = _encode_unordered(v_s, y_s[s], v_h, n_levels[f])
                    res = _scan_threshold(enc_s, y_s[s], d_s[s], enc_h, d_h[h], arms, min_leaf)
                    if res is not None:
                        crit, thr = res
                        subset = order[: int(np.floor(thr)) + 1]
                        cand = (crit, f, thr, True, subset)
                    else:
                        cand = None
                else:
                    res = _scan_threshold(v_s, y_s[s], d_s[s], v_h, d_h[h], arms, min_leaf)
                    cand = None if res is None else (res[0], f, res[1], False, None)
                if cand is not None and (best is None or cand[0] > best[0]
                                         or (cand[0] == best[0] and cand[1:3] < best[1:3])):
                    best = cand
            split = best
        if split is None:
            leaf_id[node] = len(leaf_members)
            members = [honest_idx[h[d_h[h] == a]] for a in range(n_arms)]
            leaf_members.append(members)
            continue
        crit, f, thr, cat, subset = split
        feature[node] = f
        is_cat[node] = bool(cat)
        if cat:
            mask = 0
            for lv in subset:
                mask |= 1 << int(lv)
            cat_mask[node] = mask
            m64 = np.uint64(mask)
            one = np.uint64(1)
            go_l_s = ((m64 >> X_s[s, f].astype(np.uint64)) & one).astype(bool)
            go_l_h = ((m64 >> X_h[h, f].astype(np.uint64)) & one).astype(bool)
        else:
            threshold[node] = thr
            go_l_s = X_s[s, f] <= thr
            go_l_h = X_h[h, f] <= thr
        nl = new_node()
        nr = new_node()
        left[node] = nl
        right[node] = nr
        # push right first so the left child is processed (and numbered) first
        stack.append((nr, s[~go_l_s], h[~go_l_h], depth + 1))
        stack.append((nl, s[go_l_s], h[go_l_h], depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        is_cat=np.asarray(is_cat, dtype=bool),
        cat_mask=np.asarray(cat_mask, dtype=np.uint64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        leaf_id=np.asarray(leaf_id, dtype=np.int64),
        n_leaves=len(leaf_members),
        subsample_idx=subsample_idx,
        struct_idx=struct_idx,
        honest_idx=honest_idx,
        leaf_members=leaf_members,
    )


def route(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Leaf index for every row of X."""
    n = len(X)
    cur = np.zeros(n, dtype=np.int64)
    while True:
        internal = tree.feature[cur] >= 0
        if not internal.any():
            break
        idx = np.flatnonzero(internal)
        nd = cur[idx]
        f = tree.feature[nd]
        vals = X[idx, f]
        thr_left = vals <= tree.threshold[nd]
        codes = np.clip(vals, 0, 63).astype(np.uint64)
        cat_left = ((tree.cat_mask[nd] >> codes) & np.uint64(1)).astype(bool)
        go_left = np.where(tree.is_cat[nd], cat_left, thr_left)
        cur[idx] = np.where(go_left, tree.left[nd], tree.right[nd])
    return tree.leaf_id[cur]
