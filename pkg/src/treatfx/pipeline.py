"""Pipeline orchestration: stage execution from a JSON run configuration,
artifact output and a content-hash manifest for reproducibility checks."""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import allocation as alloc
from . import clusters as clus
from . import policytree as ptree
from . import report
from .data import ColumnSpec, Dataset, SampleSplit, load_dataset, split_samples
from .dgp import DgpConfig, Oracle, generate
from .effects import Contrast, EffectsEngine, all_contrasts, iate_summary, wald_heterogeneity
from .errors import ConfigError, DataError, TreatfxError
from .forest import Forest, ForestParams, common_support_trim, feature_select, fit, tune
from .placebo import PlaceboConfig, placebo_run

STAGES = ("data", "common-support", "split", "select-features", "tune", "fit",
          "effects", "wald", "cluster", "placebo", "allocate", "tree", "report")


def _dict_get(d, key, default=None):
    v = d.get(key, default)
    return default if v is None else v


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.raw, dict):
            raise ConfigError("run config must be a JSON object")
        if "dgp" not in self.raw and "dataset" not in self.raw:
            raise ConfigError("config needs either a 'dgp' or a 'dataset' section")
        self.seed = int(self.raw.get("seed", 0))
        self.threads = int(self.raw.get("threads", 1))
        split = _dict_get(self.raw, "split", {})
        self.split_fractions = tuple(split.get("fractions", (0.55, 0.25, 0.20)))
        self.split_seed = int(split.get("seed", self.seed))
        fr = _dict_get(self.raw, "forest", {})
        try:
            self.forest_params = ForestParams(
                n_trees=int(fr.get("n_trees", 1000)),
                subsample_fraction=float(fr.get("subsample_fraction", 2 / 3)),
                honesty_fraction=float(fr.get("honesty_fraction", 0.5)),
                min_leaf_per_arm=int(fr.get("min_leaf_per_arm", 15)),
                mtry=fr.get("mtry"),
                max_depth=fr.get("max_depth"),
                cs_threshold=float(fr.get("cs_threshold", 0.01)),
                seed=int(fr.get("seed", self.seed)),
            )
        except TreatfxError as exc:
            raise ConfigError(f"forest section: {exc}") from exc
        self.tune_grid = _dict_get(self.raw, "tune_grid", {})
        fs = _dict_get(self.raw, "feature_selection", {})
        self.fs_enabled = bool(fs.get("enabled", False))
        self.fs_n_trees = int(fs.get("n_trees", 200))
        self.fs_pinned = list(fs.get("pinned", ()))
        het = _dict_get(self.raw, "heterogeneity", {})
        self.het_columns = list(het.get("columns", ()))
        self.het_bins = int(het.get("n_bins", 10))
        cl = _dict_get(self.raw, "clusters", {})
        self.cluster_k = int(cl.get("k", 5))
        self.cluster_restarts = int(cl.get("restarts", 10))
        self.cluster_standardize = bool(cl.get("standardize", True))
        self.cluster_variables = list(cl.get("variables", ()))
        pl = _dict_get(self.raw, "placebo", {})
        self.placebo_enabled = bool(pl.get("enabled", "dgp" in self.raw))
        self.placebo_alpha = float(pl.get("alpha", 0.01))
        self.placebo_columns = list(pl.get("pseudo_outcome_columns", ()))
        self.placebo_n_trees = int(pl.get("n_trees", min(200, self.forest_params.n_trees)))
        al = _dict_get(self.raw, "allocation", {})
        self.alloc_caps = al.get("caps", "observed")
        self.alloc_rules = list(al.get("rules", alloc.PRIORITY_RULES))
        self.alloc_priority_column = al.get("priority_column")
        self.alloc_ever_employed_column = al.get("ever_employed_column")
        tr = _dict_get(self.raw, "trees", {})
        self.tree_depths = [int(d) for d in tr.get("depths", (2,))]
        self.tree_A = int(tr.get("A", 20))
        self.tree_uniform = bool(tr.get("uniform", False))
        self.tree_features = list(tr.get("features", ()))
        contrasts = self.raw.get("contrasts", "all")
        self.contrast_spec = contrasts

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        try:
            return cls(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def contrasts(self, n_arms: int) -> list[Contrast]:
        if self.contrast_spec == "all":
            return all_contrasts(n_arms)
        return [Contrast(int(m), int(l)) for m, l in self.contrast_spec]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Pipeline:
    """Executes the analysis stages and records every artifact it writes."""

    def __init__(self, config: RunConfig, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._data = None
        self._oracle = None
        self._split = None
        self._forest = None
        self._engine = None
        self._columns = None
        self._tuned_params = None
        self._alloc_input = None
        self._alloc_caps = None

    # -- artifact helpers ------------------------------------------------

    def _path(self, name) -> Path:
        return self.out / name

    def _write_json(self, name, payload) -> Path:
        p = self._path(name)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonify) + "\n")
        return p

    def _write_csv(self, name, df: pd.DataFrame, index=False) -> Path:
        p = self._path(name)
        df.to_csv(p, index=index)
        return p

    @contextmanager
    def _stage(self, name):
        try:
            yield
        except TreatfxError as exc:
            raise type(exc)(f"stage {name!r}: {exc}") from exc

    # -- lazily loaded state --------------------------------------------

    @property
    def data(self) -> Dataset:
        if self._data is None:
            csv, schema = self._path("dataset.csv"), self._path("dataset.schema.json")
            if not csv.exists():
                raise DataError("dataset artifact missing; run the data stage first")
            self._data = load_dataset(csv, schema)
        return self._data

    @property
    def oracle(self) -> Oracle | None:
        if self._oracle is None and self._path("oracle.json").exists():
            self._oracle = Oracle.from_dict(json.loads(self._path("oracle.json").read_text()))
        return self._oracle

    @property
    def split(self) -> SampleSplit:
        if self._split is None:
            p = self._path("split.json")
            if not p.exists():
                raise DataError("split artifact missing; run the split stage first")
            d = json.loads(p.read_text())
            self._split = SampleSplit(
                np.asarray(d["train_ids"]), np.asarray(d["predict_ids"]),
                np.asarray(d["feature_select_ids"]), d["seed"])
        return self._split

    @property
    def columns(self) -> list[str]:
        if self._columns is None:
            p = self._path("feature_selection.json")
            if p.exists():
                self._columns = json.loads(p.read_text())["selected"]
            else:
                self._columns = [s.name for s in self.data.covariate_specs()]
        return self._columns

    @property
    def tuned_params(self) -> ForestParams:
        if self._tuned_params is None:
            p = self._path("tuning.json")
            params = self.config.forest_params
            if p.exists():
                best = json.loads(p.read_text())["best"]
                from dataclasses import replace
                params = replace(params, min_leaf_per_arm=best["min_leaf_per_arm"],
                                 mtry=best["mtry"])
            self._tuned_params = params
        return self._tuned_params

    @property
    def forest(self) -> Forest:
        if self._forest is None:
            p = self._path("forest.bin")
            if not p.exists():
                raise DataError("forest artifact missing; run the fit stage first")
            self._forest = Forest.load(p)
        return self._forest

    @property
    def engine(self) -> EffectsEngine:
        if self._engine is None:
            self._engine = EffectsEngine(self.forest, self.data.subset(self.split.predict_ids))
        return self._engine

    def _check_columns(self, cols, where):
        known = set(self.data.df.columns)
        for c in cols:
            if c not in known:
                raise ConfigError(f"unknown column {c!r} referenced by {where}")

    # -- stages ----------------------------------------------------------

    def stage_data(self):
        with self._stage("data"):
            cfg = self.config.raw
            if "dgp" in cfg:
                dgp_cfg = DgpConfig(**{**cfg["dgp"], "seed": cfg["dgp"].get("seed", self.config.seed)})
                data, oracle = generate(dgp_cfg)
                self._write_json("oracle.json", oracle.to_dict())
                self._write_json("dgp_config.json", dgp_cfg.to_dict())
                self._oracle = oracle
            else:
                ds = cfg["dataset"]
                data = load_dataset(ds["csv"], ds["schema"])
            data.save(self._path("dataset.csv"), self._path("dataset.schema.json"))
            self._write_json("data_report.json",
                             {"n": data.n, "n_dropped_missing": data.n_dropped,
                              "m_treatments": data.m_treatments})
            self._data = data

    def stage_common_support(self):
        with self._stage("common-support"):
            eps = self.config.forest_params.cs_threshold
            kept, rep, kept_ids, _ = common_support_trim(self.data, eps, seed=self.config.seed)
            self._write_json("common_support.json", rep)
            if rep["n_dropped"]:
                kept.save(self._path("dataset.csv"), self._path("dataset.schema.json"))
                self._data = kept
                self._split = None

    def stage_split(self):
        with self._stage("split"):
            sp = split_samples(self.data, self.config.split_fractions, self.config.split_seed)
            self._write_json("split.json", {
                "train_ids": sp.train_ids.tolist(),
                "predict_ids": sp.predict_ids.tolist(),
                "feature_select_ids": sp.feature_select_ids.tolist(),
                "seed": sp.seed,
            })
            self._split = sp

    def stage_select_features(self):
        with self._stage("select-features"):
            if not self.config.fs_enabled or len(self.split.feature_select_ids) == 0:
                self._columns = [s.name for s in self.data.covariate_specs()]
                self._write_json("feature_selection.json",
                                 {"enabled": False, "selected": self._columns, "scores": {}})
                return
            from dataclasses import replace
            params = replace(self.config.forest_params, n_trees=self.config.fs_n_trees)
            self._check_columns(self.config.fs_pinned, "feature_selection.pinned")
            selected, scores = feature_select(
                self.data, self.split, params, pinned=self.config.fs_pinned,
                seed=self.config.seed, n_jobs=self.config.threads)
            self._write_json("feature_selection.json",
                             {"enabled": True, "selected": selected, "scores": scores})
            self._columns = selected

    def stage_tune(self):
        with self._stage("tune"):
            if not self.config.tune_grid:
                self._tuned_params = self.config.forest_params
                return
            from dataclasses import replace
            base = replace(self.config.forest_params,
                           n_trees=int(self.config.tune_grid.get("n_trees", 100)))
            train = self.data.subset(self.split.train_ids)
            best, results = tune(train, self.config.tune_grid, base,
                                 seed=self.config.seed, columns=self.columns,
                                 n_jobs=self.config.threads)
            self._write_json("tuning.json", {
                "results": results,
                "best": {"min_leaf_per_arm": best.min_leaf_per_arm, "mtry": best.mtry},
            })
            self._tuned_params = replace(self.config.forest_params,
                                         min_leaf_per_arm=best.min_leaf_per_arm,
                                         mtry=best.mtry)

    def stage_fit(self):
        with self._stage("fit"):
            train = self.data.subset(self.split.train_ids)
            forest = fit(train, self.tuned_params, columns=self.columns,
                         n_jobs=self.config.threads)
            forest.save(self._path("forest.bin"))
            self._write_json("forest_info.json", {
                "fingerprint": forest.fingerprint(),
                "n_trees": len(forest.trees),
                "columns": forest.columns,
                "params": forest.params.to_dict(),
            })
            self._forest = forest
            self._engine = None

    def stage_effects(self):
        with self._stage("effects"):
            eng = self.engine
            contrasts = self.config.contrasts(eng.n_arms)
            rows, path_rows = [], []
            for c in contrasts:
                for pop in [None] + list(range(eng.n_arms)):
                    try:
                        est = eng.ate(c, population=pop)
                    except DataError:
                        continue
                    rows.append({"contrast": str(c), "m": c.m, "l": c.l,
                                 "population": est.population, "point": est.point,
                                 "se": est.se, "n_eff": est.n_eff})
                for h, est in enumerate(eng.effect_path(c), start=1):
                    lo, hi = est.ci(0.90)
                    path_rows.append({"contrast": str(c), "horizon": h,
                                      "point": est.point, "se": est.se,
                                      "ci90_lo": lo, "ci90_hi": hi})
            self._write_csv("ates.csv", pd.DataFrame(rows))
            self._write_csv("effect_paths.csv", pd.DataFrame(path_rows))

            po_levels = {a: eng.po_level(a) for a in range(eng.n_arms)}
            ates_all = [eng.ate(c) for c in contrasts]
            mat_rows = []
            for a, est in po_levels.items():
                mat_rows.append({"row_arm": a, "col_arm": a, "kind": "PO",
                                 "point": est.point, "se": est.se, "n_eff": est.n_eff})
            for est in ates_all:
                mat_rows.append({"row_arm": est.contrast.m, "col_arm": est.contrast.l,
                                 "kind": "ATE", "point": est.point, "se": est.se,
                                 "n_eff": est.n_eff})
            self._write_csv("contrast_matrix.csv", pd.DataFrame(mat_rows))
            self._write_csv("contrast_matrix_rendered.csv",
                            report.contrast_matrix_frame(po_levels, ates_all, eng.n_arms),
                            index=True)

            iate_rows, summ_rows, dens_rows = [], [], []
            for c in contrasts:
                r = eng.iate(c)
                for i in np.flatnonzero(r.support):
                    iate_rows.append({"row": int(i), "contrast": str(c),
                                      "point": r.points[i], "se": r.ses[i]})
                summ = iate_summary(r.points[r.support], r.ses[r.support])
                summ_rows.append({"contrast": str(c),
                                  "share_positive": summ["share_positive"],
                                  "share_sig_positive": summ["share_sig_positive"],
                                  "std_points": summ["std_points"],
                                  "mean_se": summ["mean_se"]})
                for g, d in zip(summ["density_grid"], summ["density"]):
                    dens_rows.append({"contrast": str(c), "grid": g, "density": d})
            self._write_csv("iates.csv", pd.DataFrame(iate_rows))
            self._write_csv("iate_summary.csv", pd.DataFrame(summ_rows))
            self._write_csv("iate_density.csv", pd.DataFrame(dens_rows))
            support = eng.pred.support
            self._write_json("effects_support.json", {
                "n_query": int(eng.nq),
                "n_full_support": int(support.all(axis=1).sum()),
                "unsupported_per_arm": {a: int((~support[:, a]).sum())
                                        for a in range(eng.n_arms)},
            })

    def stage_wald(self):
        with self._stage("wald"):
            eng = self.engine
            contrasts = self.config.contrasts(eng.n_arms)
            het_cols = self.config.het_columns or [
                s.name for s in self.data.covariate_specs(roles=("heterogeneity",))]
            self._check_columns(het_cols, "heterogeneity.columns")
            gate_rows, wald_rows = [], []
            for c in contrasts:
                for col in het_cols:
                    gates, cov, diffs, ate_est = eng.gate(c, col, n_bins=self.config.het_bins)
                    if len(gates) < 2:
                        continue
                    for est, diff in zip(gates, diffs):
                        lo, hi = est.ci(0.90)
                        gate_rows.append({"contrast": str(c), "column": col,
                                          "group": est.group, "point": est.point,
                                          "se": est.se, "n_eff": est.n_eff,
                                          "gate_minus_ate": diff, "ate": ate_est.point,
                                          "ci90_lo": lo, "ci90_hi": hi})
                    w = wald_heterogeneity(gates, cov)
                    wald_rows.append({"contrast": str(c), "column": col, "kind": "heterogeneity",
                                      "statistic": w.statistic, "df": w.df,
                                      "p_value_pct": 100.0 * w.p_value})
                ests, w = eng.subpopulation_equality(c)
                wald_rows.append({"contrast": str(c), "column": "treatment-subpopulations",
                                  "kind": "subpopulation-equality",
                                  "statistic": w.statistic, "df": w.df,
                                  "p_value_pct": 100.0 * w.p_value})
            self._write_csv("gates.csv", pd.DataFrame(gate_rows))
            self._write_csv("wald_tests.csv", pd.DataFrame(wald_rows))

    def stage_cluster(self):
        with self._stage("cluster"):
            eng = self.engine
            contrasts = self.config.contrasts(eng.n_arms)
            mat, cons, support = eng.iate_matrix(contrasts)
            rows = np.flatnonzero(support)
            res = clus.cluster_iates(mat[rows], k=self.config.cluster_k,
                                     seed=self.config.seed,
                                     restarts=self.config.cluster_restarts,
                                     standardize=self.config.cluster_standardize)
            query = self.data.subset(self.split.predict_ids).subset(rows)
            variables = self.config.cluster_variables or [
                s.name for s in self.data.covariate_specs()]
            self._check_columns(variables, "clusters.variables")
            profile = clus.profile_clusters(res, query, variables, iate_matrix=mat[rows],
                                            contrast_names=[str(c) for c in cons])
            self._write_csv("cluster_profile.csv", profile, index=True)
            self._write_csv("cluster_assignments.csv",
                            pd.DataFrame({"row": rows, "cluster": res.assignment}))
            self._write_json("cluster_info.json", {
                "k": res.k, "within_ss": res.within_ss,
                "ordering_key": res.ordering_key.tolist(),
            })

    def stage_placebo(self):
        with self._stage("placebo"):
            if not self.config.placebo_enabled:
                return
            from dataclasses import replace
            if "dgp" in self.config.raw and not self.config.placebo_columns:
                # zero-effect twin: same covariates, treatment and noise, no effects
                dgp_cfg = DgpConfig(**{**self.config.raw["dgp"],
                                       "seed": self.config.raw["dgp"].get("seed", self.config.seed)})
                twin = replace_effects_with_zero(dgp_cfg)
                past_data, _ = generate(twin)
                pseudo_cols = past_data.outcome_columns
            else:
                past_data = self.data
                pseudo_cols = self.config.placebo_columns
            params = replace(self.tuned_params, n_trees=self.config.placebo_n_trees)
            pcfg = PlaceboConfig(pseudo_outcome_columns=pseudo_cols,
                                 alpha=self.config.placebo_alpha, seed=self.config.seed)
            outcome = placebo_run(past_data, pcfg, params, n_jobs=self.config.threads)
            self._write_csv("placebo_table.csv", outcome.table, index=True)
            self._write_json("placebo.json", {
                "verdict": outcome.verdict, "alpha": outcome.alpha,
                "rejected": outcome.rejected,
                "estimates": [{"contrast": str(e.contrast), "point": e.point, "se": e.se}
                              for e in outcome.estimates],
            })

    def _allocation_input(self):
        if self._alloc_input is None:
            eng = self.engine
            h = eng.horizon
            support = eng.pred.support.all(axis=1)
            rows = np.flatnonzero(support)
            query = self.data.subset(self.split.predict_ids)
            po = eng.pred.po[rows, :, h]
            po_se = np.sqrt(eng.po_var[rows, :, h])
            observed = query.treatment[rows]
            kwargs = {}
            if self.config.alloc_priority_column:
                self._check_columns([self.config.alloc_priority_column],
                                    "allocation.priority_column")
                kwargs["priority_values"] = query.df[self.config.alloc_priority_column].to_numpy()[rows]
            if self.config.alloc_ever_employed_column:
                self._check_columns([self.config.alloc_ever_employed_column],
                                    "allocation.ever_employed_column")
                kwargs["ever_employed"] = query.df[
                    self.config.alloc_ever_employed_column].to_numpy()[rows].astype(bool)
            inp = alloc.AllocationInput(
                po=po, po_se=po_se, observed=observed,
                observed_outcome=query.outcomes[rows, h], **kwargs)
            if self.config.alloc_caps == "observed":
                caps = alloc.Capacities.from_assignment(observed, inp.n_arms)
            else:
                caps = alloc.Capacities(max_count={int(k): int(v) for k, v
                                                   in dict(self.config.alloc_caps).items()})
            self._alloc_input, self._alloc_caps = inp, caps
        return self._alloc_input, self._alloc_caps

    def stage_allocate(self):
        with self._stage("allocate"):
            inp, caps = self._allocation_input()
            rules = [r for r in self.config.alloc_rules
                     if r in alloc.PRIORITY_RULES]
            table = alloc.allocation_table(inp, caps, seed=self.config.seed,
                                           priority_rules=tuple(rules))
            self._write_csv("allocation.csv", table)

    def stage_tree(self):
        with self._stage("tree"):
            inp, caps = self._allocation_input()
            eng = self.engine
            support = eng.pred.support.all(axis=1)
            rows = np.flatnonzero(support)
            query = self.data.subset(self.split.predict_ids).subset(rows)
            feat_names = self.config.tree_features or [
                s.name for s in self.data.covariate_specs(roles=("heterogeneity",))]
            self._check_columns(feat_names, "trees.features")
            X = query.matrix(feat_names)
            kinds = [0 if not query.spec(c).is_categorical
                     else (2 if query.spec(c).kind == "unordered" else 1)
                     for c in feat_names]
            grid = ptree.GridPolicy(A=self.config.tree_A, uniform=self.config.tree_uniform)
            summary = []
            for depth in self.config.tree_depths:
                tree = ptree.search_tree(inp, X, kinds, depth, grid, caps=caps,
                                         seed=self.config.seed)
                tree.feature_names = feat_names
                self._path(f"policy_tree_depth{depth}.json").write_text(tree.to_json() + "\n")
                self._path(f"policy_tree_depth{depth}.txt").write_text(
                    ptree.render_tree(tree, feat_names) + "\n")
                assign = ptree.apply_tree(tree, X)
                res = alloc.evaluate(assign, inp, rule=f"tree-depth-{depth}")
                summary.append({"depth": depth, "value": tree.value,
                                "mean_outcome": res.mean_outcome,
                                **{f"share_arm{a}_pct": res.shares[a]
                                   for a in range(inp.n_arms)},
                                "switch_share_pct": res.switch_share,
                                "gain_for_switchers_pct": res.gain_for_switchers})
            self._write_csv("policy_trees.csv", pd.DataFrame(summary))

    def stage_report(self):
        with self._stage("report"):
            report.render_all(self.out)

    # -- orchestration ---------------------------------------------------

    def run_all(self) -> dict:
        self.stage_data()
        self.stage_common_support()
        self.stage_split()
        self.stage_select_features()
        self.stage_tune()
        self.stage_fit()
        self.stage_effects()
        self.stage_wald()
        self.stage_cluster()
        self.stage_placebo()
        self.stage_allocate()
        self.stage_tree()
        self.stage_report()
        return self.write_manifest()

    def write_manifest(self) -> dict:
        artifacts = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                artifacts[str(p.relative_to(self.out))] = file_sha256(p)
        manifest = {"config": self.config.raw, "artifacts": artifacts,
                    "n_artifacts": len(artifacts)}
        self._write_json("manifest.json", manifest)
        return manifest


def replace_effects_with_zero(cfg: DgpConfig) -> DgpConfig:
    d = cfg.to_dict()
    d["effect_specs"] = {}
    return DgpConfig(**d)


def _jsonify(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")
