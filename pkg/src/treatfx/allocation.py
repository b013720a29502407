"""Hypothetical programme allocations: rule menu, scoring and exact
budget-constrained optimization via integer min-cost flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import pandas as pd

from .errors import DataError, NumericError

COST_SCALE = 10 ** 6
Z_95 = 1.959963984540054

PRIORITY_RULES = (
    "largest_gain",
    "highest_variance",
    "lowest_np_po",
    "longest_unemployed",
    "highest_effect_vs_np",
)


@dataclass
class AllocationInput:
    po: np.ndarray                       # n x (M+1) predicted potential outcomes
    po_se: np.ndarray | None = None      # n x (M+1)
    observed: np.ndarray | None = None   # per-row observed arm
    observed_outcome: np.ndarray | None = None  # realized outcome for the observed row
    priority_values: np.ndarray | None = None   # e.g. days since last employment
    ever_employed: np.ndarray | None = None

    def __post_init__(self):
        self.po = np.asarray(self.po, dtype=np.float64)
        if self.po.ndim != 2:
            raise DataError("potential-outcome matrix must be n x (M+1)")
        if not np.isfinite(self.po).all():
            raise DataError("potential-outcome matrix contains non-finite values")
        if self.observed is not None:
            self.observed = np.asarray(self.observed, dtype=np.int64)
            if self.observed.min() < 0 or self.observed.max() >= self.n_arms:
                raise DataError("observed arms outside the valid range")

    @property
    def n(self) -> int:
        return self.po.shape[0]

    @property
    def n_arms(self) -> int:
        return self.po.shape[1]


@dataclass
class Capacities:
    """Per-arm caps for programme arms (d >= 1); arm 0 absorbs the remainder.

    ``total_treated`` switches to the alternate mode with a single cap on the
    summed programme count instead of per-arm caps.
    """

    max_count: dict = field(default_factory=dict)   # arm -> cap
    total_treated: int | None = None
    cap_control: int | None = None

    def check(self, n: int, n_arms: int) -> None:
        if self.total_treated is not None:
            if self.total_treated < 0:
                raise DataError("total_treated cap must be nonnegative")
            return
        caps = {int(a): int(c) for a, c in self.max_count.items()}
        for a, c in caps.items():
            if a < 1 or a >= n_arms:
                raise DataError(f"capacity given for invalid arm {a}")
            if c < 0:
                raise DataError(f"capacity for arm {a} must be nonnegative")
        room = sum(caps.get(a, n) for a in range(1, n_arms))
        if self.cap_control is not None:
            if room + self.cap_control < n:
                raise DataError("capacities infeasible: total room below n")
        self.max_count = caps

    def cap(self, arm: int, n: int) -> int:
        if arm == 0:
            return n if self.cap_control is None else int(self.cap_control)
        return int(self.max_count.get(arm, n))

    @classmethod
    def from_assignment(cls, assignment: np.ndarray, n_arms: int) -> "Capacities":
        counts = np.bincount(assignment, minlength=n_arms)
        return cls(max_count={a: int(counts[a]) for a in range(1, n_arms)})


@dataclass
class AllocationResult:
    rule: str
    assignment: np.ndarray
    shares: np.ndarray            # per-arm shares in %
    mean_outcome: float
    switch_share: float | None    # in %, None when no observed allocation given
    gain_for_switchers: float | None  # in %, None when nobody switches


def evaluate(assignment, inp: AllocationInput, rule: str = "custom",
             use_realized: bool = False, per_switcher_average: bool = False) -> AllocationResult:
    """Score an assignment: mean outcome, arm shares, switcher accounting."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if len(assignment) != inp.n:
        raise DataError("assignment length does not match input")
    if assignment.min() < 0 or assignment.max() >= inp.n_arms:
        raise DataError("assignment contains invalid arms")
    if use_realized:
        if inp.observed_outcome is None:
            raise DataError("realized scoring needs observed outcomes")
        mean_outcome = float(np.mean(inp.observed_outcome))
    else:
        mean_outcome = float(inp.po[np.arange(inp.n), assignment].mean())
    shares = 100.0 * np.bincount(assignment, minlength=inp.n_arms) / inp.n
    switch_share = gain = None
    if inp.observed is not None:
        switchers = assignment != inp.observed
        switch_share = 100.0 * switchers.mean()
        if switchers.any():
            new = inp.po[switchers, assignment[switchers]]
            old = inp.po[switchers, inp.observed[switchers]]
            if per_switcher_average:
                with np.errstate(divide="ignore", invalid="ignore"):
                    gain = float(100.0 * np.mean((new - old) / old))
            else:
                denom = old.sum()
                gain = float(100.0 * (new - old).sum() / denom) if denom != 0 else None
    return AllocationResult(rule, assignment, shares, mean_outcome, switch_share, gain)


def allocate_observed(inp: AllocationInput) -> AllocationResult:
    if inp.observed is None:
        raise DataError("no observed allocation available")
    return evaluate(inp.observed, inp, rule="observed",
                    use_realized=inp.observed_outcome is not None)


def allocate_unconstrained(inp: AllocationInput, significant_only: bool = False) -> AllocationResult:
    """Everyone takes the arm with the highest predicted potential outcome.

    With ``significant_only``, a row only leaves its observed arm for the best
    arm whose effect versus the observed arm is significantly positive at the
    two-sided 5% level.
    """
    if not significant_only:
        a = inp.po.argmax(axis=1)
        return evaluate(a, inp, rule="unconstrained")
    if inp.observed is None or inp.po_se is None:
        raise DataError("significant-only reallocation needs observed arms and SEs")
    n = inp.n
    obs = inp.observed
    po_obs = inp.po[np.arange(n), obs]
    se_obs = inp.po_se[np.arange(n), obs]
    diff = inp.po - po_obs[:, None]
    se = np.sqrt(inp.po_se ** 2 + se_obs[:, None] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        sig = diff > Z_95 * se
    masked = np.where(sig, inp.po, -np.inf)
    best = masked.argmax(axis=1)
    a = np.where(np.isfinite(masked.max(axis=1)), best, obs)
    return evaluate(a, inp, rule="unconstrained-significant")


def _greedy_fill(order, inp, caps: Capacities, eligible=None):
    n, n_arms = inp.n, inp.n_arms
    remaining = np.array([caps.cap(a, n) for a in range(n_arms)], dtype=np.int64)
    if caps.total_treated is not None:
        treated_left = int(caps.total_treated)
    assignment = np.zeros(n, dtype=np.int64)
    for i in order:
        arms = np.argsort(-inp.po[i], kind="stable")
        chosen = 0
        for a in arms:
            if eligible is not None and a != 0 and not eligible[i]:
                continue
            if caps.total_treated is not None:
                if a != 0 and treated_left <= 0:
                    continue
            elif remaining[a] <= 0:
                continue
            chosen = a
            break
        assignment[i] = chosen
        if caps.total_treated is not None:
            if chosen != 0:
                treated_left -= 1
        else:
            remaining[chosen] -= 1
    return assignment


def allocate_priority(inp: AllocationInput, rule: str, caps: Capacities,
                      seed: int = 0) -> AllocationResult:
    """Greedy fill: rows in priority order take their best still-open arm."""
    if rule not in PRIORITY_RULES:
        raise DataError(f"unknown priority rule {rule!r}")
    caps.check(inp.n, inp.n_arms)
    if rule == "largest_gain":
        if inp.observed is None:
            raise DataError("largest_gain needs observed arms")
        key = inp.po.max(axis=1) - inp.po[np.arange(inp.n), inp.observed]
    elif rule == "highest_variance":
        key = inp.po.std(axis=1)
    elif rule == "lowest_np_po":
        key = -inp.po[:, 0]
    elif rule == "longest_unemployed":
        if inp.priority_values is None:
            raise DataError("longest_unemployed needs priority values")
        key = np.asarray(inp.priority_values, dtype=np.float64)
    else:  # highest_effect_vs_np
        key = (inp.po[:, 1:] - inp.po[:, [0]]).max(axis=1)
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(inp.n)
    order = shuffled[np.argsort(-key[shuffled], kind="stable")]
    eligible = None
    if rule == "longest_unemployed" and inp.ever_employed is not None:
        eligible = np.asarray(inp.ever_employed, dtype=bool)
    assignment = _greedy_fill(order, inp, caps, eligible)
    return evaluate(assignment, inp, rule=f"priority-{rule}")


def allocate_optimal(inp: AllocationInput, caps: Capacities) -> AllocationResult:
    """Exact capacity-constrained assignment by integer min-cost flow.

    Costs are the negated potential outcomes scaled by 1e6 and rounded, so the
    solution is exact up to n * 5e-7 outcome units.
    """
    caps.check(inp.n, inp.n_arms)
    n, n_arms = inp.n, inp.n_arms
    total_room = sum(caps.cap(a, n) for a in range(n_arms))
    if total_room < n:
        raise NumericError("capacities infeasible: total room below n")
    shift = inp.po.min()
    costs = np.round(-(inp.po - shift) * COST_SCALE).astype(np.int64)
    g = nx.DiGraph()
    g.add_node("sink", demand=n)
    for a in range(n_arms):
        if caps.total_treated is not None and a != 0:
            g.add_edge(f"arm{a}", "pool", capacity=n, weight=0)
        else:
            g.add_edge(f"arm{a}", "sink", capacity=caps.cap(a, n), weight=0)
    if caps.total_treated is not None:
        g.add_edge("pool", "sink", capacity=int(caps.total_treated), weight=0)
    for i in range(n):
        g.add_node(i, demand=-1)
        for a in range(n_arms):
            g.add_edge(i, f"arm{a}", capacity=1, weight=int(costs[i, a]))
    try:
        _, flow = nx.network_simplex(g)
    except nx.NetworkXUnfeasible as exc:
        raise NumericError("min-cost flow infeasible under the given capacities") from exc
    assignment = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for a in range(n_arms):
            if flow[i].get(f"arm{a}", 0) > 0:
                assignment[i] = a
                break
    return evaluate(assignment, inp, rule="optimal")


def allocate_random(inp: AllocationInput, caps: Capacities, seed: int = 0) -> AllocationResult:
    """Uniformly random allocation filling every programme cap exactly."""
    caps.check(inp.n, inp.n_arms)
    n, n_arms = inp.n, inp.n_arms
    pieces = []
    for a in range(1, n_arms):
        pieces.append(np.full(min(caps.cap(a, n), n), a, dtype=np.int64))
    flat = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64)
    if len(flat) > n:
        raise DataError("capacities exceed n for a random fill")
    pool = np.concatenate([flat, np.zeros(n - len(flat), dtype=np.int64)])
    rng = np.random.default_rng(seed)
    return evaluate(rng.permutation(pool), inp, rule="random")


def allocation_table(inp: AllocationInput, caps: Capacities, seed: int = 0,
                     priority_rules=PRIORITY_RULES) -> pd.DataFrame:
    """One row per allocation rule with shares, mean outcome and switcher gain."""
    rows = []
    if inp.observed is not None:
        rows.append(allocate_observed(inp))
        rows.append(allocate_random(inp, caps, seed))
    rows.append(allocate_unconstrained(inp))
    if inp.observed is not None and inp.po_se is not None:
        rows.append(allocate_unconstrained(inp, significant_only=True))
    for rule in priority_rules:
        try:
            rows.append(allocate_priority(inp, rule, caps, seed))
        except DataError:
            continue
    rows.append(allocate_optimal(inp, caps))
    recs = []
    for r in rows:
        rec = {"rule": r.rule}
        for a in range(inp.n_arms):
            rec[f"share_arm{a}_pct"] = r.shares[a]
        rec["mean_outcome"] = r.mean_outcome
        rec["switch_share_pct"] = r.switch_share
        rec["gain_for_switchers_pct"] = "-" if r.gain_for_switchers is None else r.gain_for_switchers
        recs.append(rec)
    return pd.DataFrame(recs)
