"""Exact search for shallow treatment-assignment trees with categorical splits,
level-adaptive approximation grids and capacity constraints."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from ._trees import KIND_UNORDERED
from .allocation import AllocationInput, Capacities
from .errors import DataError, NumericError

MAX_EXACT_SUBSET_LEVELS = 10


@dataclass(frozen=True)
class SplitRule:
    feature: int
    kind: str                  # "threshold" | "subset"
    threshold: float = np.nan
    subset: tuple = ()

    def goes_left(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "threshold":
            return values <= self.threshold
        return np.isin(values, np.asarray(self.subset, dtype=np.float64))


@dataclass
class TreeNode:
    rule: SplitRule | None = None
    arm: int | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.rule is None


@dataclass
class PolicyTree:
    depth: int
    root: TreeNode
    value: float
    feature_names: list = field(default_factory=list)

    def leaves(self) -> list[TreeNode]:
        out = []

        def rec(node):
            if node.is_leaf:
                out.append(node)
            else:
                rec(node.left)
                rec(node.right)

        rec(self.root)
        return out

    def to_dict(self) -> dict:
        def rec(node):
            if node.is_leaf:
                return {"arm": int(node.arm)}
            r = node.rule
            d = {"feature": int(r.feature), "kind": r.kind}
            if r.kind == "threshold":
                d["threshold"] = float(r.threshold)
            else:
                d["subset"] = [int(s) for s in r.subset]
            d["left"] = rec(node.left)
            d["right"] = rec(node.right)
            return d

        return {"depth": self.depth, "value": self.value,
                "feature_names": list(self.feature_names), "root": rec(self.root)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyTree":
        def rec(nd):
            if "arm" in nd:
                return TreeNode(arm=int(nd["arm"]))
            rule = SplitRule(nd["feature"], nd["kind"],
                             nd.get("threshold", np.nan), tuple(nd.get("subset", ())))
            return TreeNode(rule=rule, left=rec(nd["left"]), right=rec(nd["right"]))

        return cls(d["depth"], rec(d["root"]), d["value"], list(d.get("feature_names", [])))


@dataclass
class GridPolicy:
    """Approximation grid: consider every A-th sorted observation as a split.

    Higher tree levels use finer grids (divisor A/2, A/4, A/8 going up);
    ``uniform`` disables the per-level refinement.
    """

    A: int = 1
    uniform: bool = False

    def __post_init__(self):
        if self.A < 1:
            raise DataError("approximation parameter A must be >= 1")

    def divisor(self, level_from_bottom: int) -> int:
        if self.uniform:
            return self.A
        return max(1, int(np.ceil(self.A / 2 ** (level_from_bottom - 1))))


def _threshold_candidates(values: np.ndarray, step: int) -> np.ndarray:
    v = np.sort(values)
    if len(v) < 2:
        return np.empty(0)
    idx = np.arange(step - 1, len(v) - 1, step)
    cand = np.unique(v[idx])
    return cand[cand < v[-1]]


def _subset_candidates(values: np.ndarray, po: np.ndarray) -> list[tuple]:
    levels = np.unique(values).astype(np.int64)
    if len(levels) < 2:
        return []
    if len(levels) <= MAX_EXACT_SUBSET_LEVELS:
        # canonical: every proper subset containing the smallest level
        head, rest = levels[0], levels[1:]
        out = []
        for r in range(len(rest)):
            for comb in combinations(rest, r):
                out.append(tuple(sorted((int(head),) + tuple(int(c) for c in comb))))
        return out
    # many levels: order by mean best-arm gain and scan prefix splits
    gain = po[:, 1:].max(axis=1) - po[:, 0]
    means = [gain[values == lv].mean() for lv in levels]
    order = levels[np.argsort(means, kind="stable")]
    return [tuple(sorted(int(x) for x in order[: i + 1])) for i in range(len(order) - 1)]


def _best_leaf(po_sum: np.ndarray) -> tuple[float, int]:
    arm = int(np.argmax(po_sum))
    return float(po_sum[arm]), arm


def _depth_one_threshold(po: np.ndarray, values: np.ndarray, cand: np.ndarray):
    """Vectorized best (threshold, leaf values) for a single split level."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = np.cumsum(po[order], axis=0)
    tot = cum[-1]
    pos = np.searchsorted(v, cand, side="right") - 1
    ok = (pos >= 0) & (pos < len(v) - 1)
    if not ok.any():
        return None
    cand, pos = cand[ok], pos[ok]
    left = cum[pos]
    right = tot - left
    vals = left.max(axis=1) + right.max(axis=1)
    best = int(np.argmax(vals))
    # deterministic tie-break toward the smaller threshold
    tie = np.flatnonzero(vals == vals[best])
    best = int(tie[np.argmin(cand[tie])])
    return float(vals[best]), float(cand[best]), left[best], right[best]


def search_tree(inp: AllocationInput, X: np.ndarray, kinds, depth: int,
                grid: GridPolicy | None = None, caps: Capacities | None = None,
                seed: int = 0) -> PolicyTree:
    """Search the best assignment tree of the given depth under the grid.

    Without capacities the search is exact over all grid-representable trees.
    With capacities, leaf labels of the best structure are re-solved exactly
    under the caps by branch-and-bound.
    """
    if depth not in (2, 3, 4):
        raise DataError("tree depth must be 2, 3 or 4")
    grid = grid or GridPolicy()
    po = inp.po
    X = np.asarray(X, dtype=np.float64)
    if len(X) != inp.n:
        raise DataError("feature matrix does not match the allocation input")
    kinds = np.asarray(kinds, dtype=np.int64)

    def best(rows: np.ndarray, d: int) -> tuple[float, TreeNode]:
        po_sum = po[rows].sum(axis=0) if len(rows) else np.zeros(inp.n_arms)
        leaf_val, leaf_arm = _best_leaf(po_sum)
        best_val, best_node, best_key = leaf_val, TreeNode(arm=leaf_arm), None
        if d == 0 or len(rows) < 2:
            return best_val, best_node
        step = grid.divisor(d)
        for f in range(X.shape[1]):
            vals = X[rows, f]
            if kinds[f] == KIND_UNORDERED:
                for subset in _subset_candidates(vals, po[rows]):
                    rule = SplitRule(f, "subset", subset=subset)
                    go_l = rule.goes_left(vals)
                    if not go_l.any() or go_l.all():
                        continue
                    vl, nl = best(rows[go_l], d - 1)
                    vr, nr = best(rows[~go_l], d - 1)
                    cand_val = vl + vr
                    key = (f, np.inf, subset)
                    if cand_val > best_val or (cand_val == best_val and
                                               best_key is not None and key < best_key):
                        best_val, best_key = cand_val, key
                        best_node = TreeNode(rule=rule, left=nl, right=nr)
            else:
                cands = _threshold_candidates(vals, step)
                if d == 1 and caps is None and len(cands):
                    res = _depth_one_threshold(po[rows], vals, cands)
                    if res is None:
                        continue
                    cand_val, thr, left_sum, right_sum = res
                    key = (f, thr, ())
                    if cand_val > best_val or (cand_val == best_val and
                                               best_key is not None and key < best_key):
                        vl, al = _best_leaf(left_sum)
                        vr, ar = _best_leaf(right_sum)
                        best_val, best_key = cand_val, key
                        best_node = TreeNode(rule=SplitRule(f, "threshold", thr),
                                             left=TreeNode(arm=al), right=TreeNode(arm=ar))
                    continue
                for thr in cands:
                    go_l = vals <= thr
                    if not go_l.any() or go_l.all():
                        continue
                    vl, nl = best(rows[go_l], d - 1)
                    vr, nr = best(rows[~go_l], d - 1)
                    cand_val = vl + vr
                    key = (f, float(thr), ())
                    if cand_val > best_val or (cand_val == best_val and
                                               best_key is not None and key < best_key):
                        best_val, best_key = cand_val, key
                        best_node = TreeNode(rule=SplitRule(f, "threshold", float(thr)),
                                             left=nl, right=nr)
        return best_val, best_node

    rows = np.arange(inp.n)
    value, root = best(rows, depth)
    tree = PolicyTree(depth, root, value, [])
    if caps is not None:
        caps.check(inp.n, inp.n_arms)
        tree = _relabel_under_caps(tree, inp, X, caps)
    return tree


def _leaf_stats(tree: PolicyTree, inp: AllocationInput, X: np.ndarray):
    leaves = []

    def rec(node, rows):
        if node.is_leaf:
            leaves.append((node, po_sum(rows), len(rows)))
            return
        go_l = node.rule.goes_left(X[rows, node.rule.feature])
        rec(node.left, rows[go_l])
        rec(node.right, rows[~go_l])

    def po_sum(rows):
        return inp.po[rows].sum(axis=0) if len(rows) else np.zeros(inp.n_arms)

    rec(tree.root, np.arange(inp.n))
    return leaves


def _constrained_labels(sums: np.ndarray, counts: np.ndarray, caps: Capacities,
                        n: int, n_arms: int) -> np.ndarray:
    """Exact leaf labelling under capacity constraints by branch-and-bound."""
    L = len(sums)
    order = np.argsort(-(sums.max(axis=1) - sums[:, 0]), kind="stable")
    remaining = np.array([caps.cap(a, n) for a in range(n_arms)], dtype=np.int64)
    total_mode = caps.total_treated is not None
    treated_cap = caps.total_treated if total_mode else None
    # optimistic bound: best unconstrained completion per leaf
    upper = sums.max(axis=1)
    suffix = np.zeros(L + 1)
    for i in range(L - 1, -1, -1):
        suffix[i] = suffix[i + 1] + upper[order[i]]
    best = {"value": -np.inf, "labels": None}

    labels = np.zeros(L, dtype=np.int64)

    def dfs(i, value, rem, treated_left):
        if value + suffix[i] <= best["value"]:
            return
        if i == L:
            best["value"] = value
            best["labels"] = labels.copy()
            return
        lf = order[i]
        arm_order = np.argsort(-sums[lf], kind="stable")
        for a in arm_order:
            c = counts[lf]
            if total_mode:
                if a != 0 and treated_left < c:
                    continue
                labels[lf] = a
                dfs(i + 1, value + sums[lf, a], rem,
                    treated_left - (c if a != 0 else 0))
            else:
                if rem[a] < c:
                    continue
                rem[a] -= c
                labels[lf] = a
                dfs(i + 1, value + sums[lf, a], rem, treated_left)
                rem[a] += c

    start_rem = remaining.copy()
    dfs(0, 0.0, start_rem, treated_cap if total_mode else 0)
    if best["labels"] is None:
        raise NumericError("capacities infeasible even with all-control labelling")
    return best["labels"]


def _relabel_under_caps(tree: PolicyTree, inp: AllocationInput, X: np.ndarray,
                        caps: Capacities) -> PolicyTree:
    leaves = _leaf_stats(tree, inp, X)
    sums = np.stack([s for _, s, _ in leaves])
    counts = np.asarray([c for _, _, c in leaves], dtype=np.int64)
    labels = _constrained_labels(sums, counts, caps, inp.n, inp.n_arms)
    value = 0.0
    for (node, s, _), a in zip(leaves, labels):
        node.arm = int(a)
        value += float(s[a])
    tree.value = value
    return tree


def apply_tree(tree: PolicyTree, X: np.ndarray) -> np.ndarray:
    """Route rows to their leaf's treatment arm."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(X), dtype=np.int64)

    def rec(node, rows):
        if not len(rows):
            return
        if node.is_leaf:
            out[rows] = node.arm
            return
        go_l = node.rule.goes_left(X[rows, node.rule.feature])
        rec(node.left, rows[go_l])
        rec(node.right, rows[~go_l])

    rec(tree.root, np.arange(len(X)))
    return out


def render_tree(tree: PolicyTree, feature_names=None) -> str:
    """Human-readable assignment rule, one condition per line."""
    names = feature_names or tree.feature_names or None

    def fname(f):
        return names[f] if names else f"x[{f}]"

    lines = []

    def rec(node, indent):
        pad = "  " * indent
        if node.is_leaf:
            lines.append(f"{pad}-> treat {node.arm}")
            return
        r = node.rule
        if r.kind == "threshold":
            lines.append(f"{pad}if {fname(r.feature)} <= {r.threshold:.6g}:")
        else:
            inner = ", ".join(str(s) for s in r.subset)
            lines.append(f"{pad}if {fname(r.feature)} in {{{inner}}}:")
        rec(node.left, indent + 1)
        lines.append(f"{pad}else:")
        rec(node.right, indent + 1)

    rec(tree.root, 0)
    return "\n".join(lines)


_SPLIT_RE = re.compile(r"^if (.+?) (<=|in) (.+):$")
_LEAF_RE = re.compile(r"^-> treat (\d+)$")


def parse_rendered_tree(text: str, feature_names: list) -> PolicyTree:
    """Inverse of render_tree, sufficient to reproduce the routing."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    pos = [0]

    def depth_of(ln):
        return (len(ln) - len(ln.lstrip())) // 2

    def rec(indent):
        ln = lines[pos[0]]
        if depth_of(ln) != indent:
            raise DataError(f"malformed tree text at line {pos[0]}")
        body = ln.strip()
        m = _LEAF_RE.match(body)
        if m:
            pos[0] += 1
            return TreeNode(arm=int(m.group(1)))
        m = _SPLIT_RE.match(body)
        if not m:
            raise DataError(f"unparseable line: {body!r}")
        fname, op, rhs = m.groups()
        f = feature_names.index(fname)
        if op == "<=":
            rule = SplitRule(f, "threshold", float(rhs))
        else:
            subset = tuple(int(x) for x in rhs.strip("{} ").split(","))
            rule = SplitRule(f, "subset", subset=subset)
        pos[0] += 1
        left = rec(indent + 1)
        if lines[pos[0]].strip() != "else:":
            raise DataError("missing else branch")
        pos[0] += 1
        right = rec(indent + 1)
        return TreeNode(rule=rule, left=left, right=right)

    root = rec(0)
    depth = 0

    def measure(node, d):
        nonlocal depth
        if node.is_leaf:
            depth = max(depth, d)
        else:
            measure(node.left, d + 1)
            measure(node.right, d + 1)

    measure(root, 0)
    return PolicyTree(depth, root, np.nan, list(feature_names))
