"""Typed tabular data model, schema validation, ingestion and sample splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

CONTINUOUS = "continuous"
ORDERED = "ordered"
UNORDERED = "unordered"

ROLES = {"confounder", "heterogeneity", "outcome", "treatment", "id", "priority"}
MAX_UNORDERED_LEVELS = 64


@dataclass(frozen=True)
class ColumnSpec:
    """Schema entry for one column: kind, declared levels and analysis roles."""

    name: str
    kind: str = CONTINUOUS
    levels: tuple = ()
    roles: frozenset = frozenset()

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, ORDERED, UNORDERED):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "roles", frozenset(self.roles))
        bad = self.roles - ROLES
        if bad:
            raise DataError(f"column {self.name!r}: unknown roles {sorted(bad)}")
        if self.kind == UNORDERED and len(self.levels) > MAX_UNORDERED_LEVELS:
            raise DataError(
                f"column {self.name!r}: {len(self.levels)} levels exceeds "
                f"the {MAX_UNORDERED_LEVELS}-level limit for unordered columns"
            )
        if self.kind in (ORDERED, UNORDERED) and not self.levels:
            raise DataError(f"column {self.name!r}: {self.kind} column needs levels")

    @property
    def is_categorical(self) -> bool:
        return self.kind in (ORDERED, UNORDERED)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "levels": list(self.levels),
            "roles": sorted(self.roles),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        return cls(d["name"], d["kind"], tuple(d.get("levels", ())), d.get("roles", ()))


def _validate_schema(specs: list[ColumnSpec]) -> None:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DataError(f"duplicate column names: {dupes}")
    n_treat = sum("treatment" in s.roles for s in specs)
    if n_treat != 1:
        raise DataError(f"schema must declare exactly one treatment column, found {n_treat}")
    if not any("outcome" in s.roles for s in specs):
        raise DataError("schema declares no outcome column")


@dataclass
class Dataset:
    """Validated, immutable columnar dataset with typed covariates.

    Categorical values are stored as integer codes into each spec's ``levels``
    tuple.  Treatment labels are 0..M with 0 the control arm.
    """

    df: pd.DataFrame
    specs: list[ColumnSpec] = field(default_factory=list)
    n_dropped: int = 0

    def __post_init__(self):
        _validate_schema(self.specs)
        missing = [s.name for s in self.specs if s.name not in self.df.columns]
        if missing:
            raise DataError(f"data missing declared columns: {missing}")
        d = self.treatment
        arms = np.unique(d)
        if arms.min() != 0 or not np.array_equal(arms, np.arange(len(arms))):
            raise DataError(
                f"treatment labels must form a contiguous range 0..M, got {arms.tolist()}"
            )
        self.df = self.df.reset_index(drop=True)

    # -- basic accessors -------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.df)

    @property
    def treatment_column(self) -> str:
        return next(s.name for s in self.specs if "treatment" in s.roles)

    @property
    def treatment(self) -> np.ndarray:
        return self.df[self.treatment_column].to_numpy(dtype=np.int64)

    @property
    def m_treatments(self) -> int:
        """Number of arms including the control arm 0."""
        return int(self.treatment.max()) + 1

    @property
    def outcome_columns(self) -> list[str]:
        return [s.name for s in self.specs if "outcome" in s.roles]

    @property
    def outcomes(self) -> np.ndarray:
        return self.df[self.outcome_columns].to_numpy(dtype=np.float64)

    def spec(self, name: str) -> ColumnSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise DataError(f"unknown column {name!r}")

    def columns_with_role(self, role: str) -> list[str]:
        return [s.name for s in self.specs if role in s.roles]

    def covariate_specs(self, roles=("confounder", "heterogeneity")) -> list[ColumnSpec]:
        out = []
        for s in self.specs:
            if s.roles & set(roles):
                out.append(s)
        return out

    def matrix(self, columns: list[str]) -> np.ndarray:
        return self.df[columns].to_numpy(dtype=np.float64)

    def subset(self, row_ids: np.ndarray) -> "Dataset":
        return Dataset(self.df.iloc[np.asarray(row_ids)].reset_index(drop=True), self.specs)

    # -- persistence -----------------------------------------------------

    def save(self, csv_path, schema_path=None) -> None:
        csv_path = Path(csv_path)
        schema_path = Path(schema_path) if schema_path else csv_path.with_suffix(".schema.json")
        out = self.df.copy()
        for s in self.specs:
            if s.kind == UNORDERED:
                out[s.name] = [s.levels[int(c)] for c in out[s.name]]
            elif s.kind == ORDERED:
                out[s.name] = [s.levels[int(c)] for c in out[s.name]]
        out.to_csv(csv_path, index=False)
        schema_path.write_text(
            json.dumps([s.to_dict() for s in self.specs], indent=2) + "\n", encoding="utf-8"
        )


def _encode_column(raw: pd.Series, spec: ColumnSpec):
    """Map declared levels to integer codes; report undeclared values."""
    lookup = {lv: i for i, lv in enumerate(spec.levels)}
    codes = np.empty(len(raw), dtype=np.float64)
    for i, v in enumerate(raw):
        if pd.isna(v):
            codes[i] = np.nan
            continue
        key = v
        if key not in lookup:
            # CSV round-trips may stringify numeric levels
            try:
                key = type(spec.levels[0])(v)
            except (TypeError, ValueError):
                key = v
        if key not in lookup:
            raise DataError(
                f"column {spec.name!r}, row {i}: value {v!r} is not a declared level"
            )
        codes[i] = lookup[key]
    return codes


def load_dataset(csv_path, schema) -> Dataset:
    """Load and validate a CSV against a schema, dropping rows with missing values.

    ``schema`` is a list of ColumnSpec or a path to a schema JSON sidecar.
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"no such file: {csv_path}")
    if isinstance(schema, (str, Path)):
        schema = [ColumnSpec.from_dict(d) for d in json.loads(Path(schema).read_text())]
    _validate_schema(schema)
    raw = pd.read_csv(csv_path)
    names = [s.name for s in schema]
    missing = [n for n in names if n not in raw.columns]
    if missing:
        raise DataError(f"CSV header does not match schema, missing columns: {missing}")
    df = pd.DataFrame(index=raw.index)
    for s in schema:
        if s.is_categorical:
            df[s.name] = _encode_column(raw[s.name], s)
        else:
            df[s.name] = pd.to_numeric(raw[s.name], errors="coerce")
    keep = ~df.isna().any(axis=1)
    n_dropped = int((~keep).sum())
    df = df.loc[keep].reset_index(drop=True)
    if df.empty:
        raise DataError("no rows left after dropping missing values")
    treat_col = next(s.name for s in schema if "treatment" in s.roles)
    df[treat_col] = df[treat_col].astype(np.int64)
    return Dataset(df, list(schema), n_dropped=n_dropped)


@dataclass(frozen=True)
class SampleSplit:
    """Disjoint train / predict / feature-selection row-id sets."""

    train_ids: np.ndarray
    predict_ids: np.ndarray
    feature_select_ids: np.ndarray
    seed: int

    def __post_init__(self):
        parts = [self.train_ids, self.predict_ids, self.feature_select_ids]
        flat = np.concatenate([np.asarray(p) for p in parts])
        if len(np.unique(flat)) != len(flat):
            raise DataError("split parts overlap")


def _part_counts(n_arm: int, fractions) -> list[int]:
    """Largest-remainder apportionment of one arm's rows over the parts."""
    raw = [n_arm * f for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    short = int(round(sum(raw))) - sum(base)
    rema = np.argsort([b - r for b, r in zip(base, raw)], kind="stable")
    for j in rema[:short]:
        base[j] += 1
    return base


def split_samples(data: Dataset, fractions, seed: int) -> SampleSplit:
    """Deterministic treatment-stratified split into train/predict/feature-select."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise DataError(f"fractions must be three nonnegative values summing to <= 1: {fractions}")
    d = data.treatment
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    n_parts = sum(f > 0 for f in fractions)
    for arm in range(data.m_treatments):
        ids = np.flatnonzero(d == arm)
        if len(ids) < n_parts:
            raise DataError(
                f"arm {arm} has {len(ids)} rows, fewer than the {n_parts} requested parts"
            )
        ids = rng.permutation(ids)
        counts = _part_counts(len(ids), fractions)
        # guarantee every arm reaches every nonempty part when counts allow
        for j, f in enumerate(fractions):
            if f > 0 and counts[j] == 0:
                k = int(np.argmax(counts))
                counts[k] -= 1
                counts[j] += 1
        stop = np.cumsum(counts)
        parts[0].append(ids[: stop[0]])
        parts[1].append(ids[stop[0]: stop[1]])
        parts[2].append(ids[stop[1]: stop[2]])
    train, predict, fsel = (np.sort(np.concatenate(p)) for p in parts)
    return SampleSplit(train, predict, fsel, seed)


def assign_pseudo_starts(data: Dataset, column: str, distribution, seed: int) -> Dataset:
    """Give non-participants (arm 0) start dates drawn from the participants' empirical distribution.

    ``distribution`` is either an array of observed start values or a
    ``{value: probability}`` mapping.  Participant rows are left untouched.
    """
    if column not in data.df.columns:
        raise DataError(f"unknown column {column!r}")
    if isinstance(distribution, dict):
        vals = np.asarray(list(distribution.keys()), dtype=np.float64)
        probs = np.asarray(list(distribution.values()), dtype=np.float64)
        if len(vals) == 0:
            raise DataError("empty start-date distribution")
        probs = probs / probs.sum()
    else:
        vals = np.asarray(distribution, dtype=np.float64)
        if len(vals) == 0:
            raise DataError("empty start-date distribution")
        probs = None
    rng = np.random.default_rng(seed)
    mask = data.treatment == 0
    draws = rng.choice(vals, size=int(mask.sum()), p=probs)
    df = data.df.copy()
    df.loc[mask, column] = draws
    return Dataset(df, data.specs, n_dropped=data.n_dropped)
