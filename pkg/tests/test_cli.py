"""CLI and pipeline: end-to-end runs, artifacts, determinism, exit codes."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from treatfx.cli import main
from treatfx.pipeline import RunConfig
from treatfx.errors import ConfigError


def tiny_config(**overrides):
    cfg = {
        "seed": 3,
        "dgp": {
            "n": 400, "m_treatments": 3, "noise_sd": 8.0, "horizons": 2,
            "confounding_strength": 0.5,
            "effect_specs": {"1": {"kind": "constant", "value": 10.0},
                             "2": {"kind": "linear", "column": "x2", "slope": 3.0}},
        },
        "split": {"fractions": [0.6, 0.4, 0.0]},
        "forest": {"n_trees": 25, "min_leaf_per_arm": 8, "cs_threshold": 0.01},
        "heterogeneity": {"columns": ["x1"], "n_bins": 4},
        "clusters": {"k": 3, "restarts": 3},
        "placebo": {"n_trees": 15},
        "trees": {"depths": [2], "A": 8},
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(tiny_config()))
    code = main(["run", "--config", str(cfg_path), "--out", str(out / "artifacts")])
    assert code == 0
    return out


class TestRun:
    def test_expected_artifacts_present(self, run_dir):
        art = run_dir / "artifacts"
        expected = [
            "dataset.csv", "dataset.schema.json", "oracle.json", "split.json",
            "common_support.json", "forest.bin", "forest_info.json",
            "ates.csv", "effect_paths.csv", "contrast_matrix.csv",
            "contrast_matrix_rendered.csv", "iates.csv", "iate_summary.csv",
            "iate_density.csv", "gates.csv", "wald_tests.csv",
            "cluster_profile.csv", "cluster_assignments.csv", "cluster_info.json",
            "placebo_table.csv", "placebo.json", "allocation.csv",
            "policy_tree_depth2.json", "policy_tree_depth2.txt",
            "policy_trees.csv", "manifest.json",
            "effect_paths.svg", "gate_diff.svg", "gate_smooth.svg",
            "iate_density.svg",
        ]
        for name in expected:
            assert (art / name).exists(), name

    def test_tables_parse_and_are_finite(self, run_dir):
        art = run_dir / "artifacts"
        ates = pd.read_csv(art / "ates.csv")
        assert {"contrast", "population", "point", "se"} <= set(ates.columns)
        assert np.isfinite(ates["point"]).all()
        assert (ates["se"] > 0).all()
        wald = pd.read_csv(art / "wald_tests.csv")
        assert wald["p_value_pct"].between(0, 100).all()
        allocation = pd.read_csv(art / "allocation.csv")
        assert "optimal" in allocation["rule"].tolist()

    def test_svgs_are_svg(self, run_dir):
        art = run_dir / "artifacts"
        head = (art / "iate_density.svg").read_text()[:500]
        assert "<svg" in head

    def test_manifest_covers_all_artifacts(self, run_dir):
        art = run_dir / "artifacts"
        manifest = json.loads((art / "manifest.json").read_text())
        files = {p.name for p in art.iterdir() if p.name != "manifest.json"}
        assert set(manifest["artifacts"]) == files
        assert manifest["n_artifacts"] == len(files)

    def test_rerun_is_hash_stable(self, run_dir, tmp_path):
        cfg_path = run_dir / "config.json"
        code = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "b")])
        assert code == 0
        m1 = json.loads((run_dir / "artifacts" / "manifest.json").read_text())
        m2 = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert m1["artifacts"] == m2["artifacts"]


class TestStages:
    def test_staged_execution(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(tiny_config()))
        out = str(tmp_path / "art")
        for cmd in ("simulate", "split", "tune", "fit", "effects"):
            assert main([cmd, "--config", str(cfg_path), "--out", out]) == 0
        assert (Path(out) / "ates.csv").exists()

    def test_fit_before_split_fails_cleanly(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(tiny_config()))
        out = str(tmp_path / "art")
        assert main(["simulate", "--config", str(cfg_path), "--out", out]) == 0
        code = main(["fit", "--config", str(cfg_path), "--out", out])
        assert code == 3
        assert "error:" in capsys.readouterr().err


class TestExitCodes:
    def test_malformed_json_is_config_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text("{not json")
        code = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        code = main(["run", "--config", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_config_without_source_section(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"seed": 1}))
        code = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_missing_dataset_file_is_data_error(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(
            {"dataset": {"csv": str(tmp_path / "no.csv"),
                         "schema": str(tmp_path / "no.json")}}))
        code = main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert code == 3


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig({"dgp": {"n": 100}})
        assert cfg.split_fractions == (0.55, 0.25, 0.20)
        assert cfg.forest_params.n_trees == 1000
        assert cfg.cluster_k == 5
        assert cfg.tree_depths == [2]
        assert cfg.placebo_enabled

    def test_contrast_selection(self):
        cfg = RunConfig({"dgp": {}, "contrasts": [[2, 0]]})
        got = cfg.contrasts(3)
        assert len(got) == 1 and got[0].m == 2 and got[0].l == 0
        assert len(RunConfig({"dgp": {}}).contrasts(3)) == 3

    def test_invalid_forest_section(self):
        with pytest.raises(ConfigError):
            RunConfig({"dgp": {}, "forest": {"n_trees": 0}})

    def test_non_object_config(self):
        with pytest.raises(ConfigError):
            RunConfig([1, 2, 3])
