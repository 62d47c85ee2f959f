from __future__ import annotations

import json

import numpy as np
import pytest

from breakiv.cli import main
from breakiv.data import Dataset, write_csv
from breakiv.montecarlo import McConfig, generate_dgp


@pytest.fixture(scope="module")
def mc_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "mc.csv"
    write_csv(generate_dgp(McConfig(T=300, n_iv=4, seed=8), 0), path)
    return str(path)


@pytest.fixture(scope="module")
def stable_csv(tmp_path_factory):
    rng = np.random.default_rng(2)
    T = 240
    z = rng.standard_normal((T, 2))
    x = 0.5 + z.sum(axis=1) + 0.2 * rng.standard_normal(T)
    y = 1.0 + 2.0 * x + 0.2 * rng.standard_normal(T)
    path = tmp_path_factory.mktemp("cli") / "stable.csv"
    write_csv(Dataset.from_arrays(y, x, np.ones((T, 1)), z), path)
    return str(path)


def _json(capsys, argv: list[str]) -> dict:
    assert main([*argv, "--format", "json", "--threads", "1"]) == 0
    return json.loads(capsys.readouterr().out)


class TestEstimate:
    def test_all_estimators(self, mc_csv, capsys):
        out = _json(capsys, ["estimate", "--data", mc_csv, "--break", "120", "--estimator", "all"])
        assert out["break"] == 120
        gmm = np.array(out["estimates"]["gmm"]["std_errors"])
        ts = np.array(out["estimates"]["tsgmm"]["std_errors"])
        assert np.all(ts <= gmm)
        assert min(out["efficiency_eigenvalues"]["gmm_minus_tsgmm"]) > 0

    def test_markdown_lists_each_estimator(self, mc_csv, capsys):
        assert main(["estimate", "--data", mc_csv, "--break", "120", "--estimator", "all"]) == 0
        text = capsys.readouterr().out
        for name in ("### gmm", "### ts2sls", "### tsgmm", "eigenvalues"):
            assert name in text

    def test_scan_finds_planted_break(self, mc_csv, capsys):
        out = _json(capsys, ["estimate", "--data", mc_csv, "--scan"])
        assert abs(out["break"] - 120) <= 3

    def test_missing_break_is_a_usage_error(self, mc_csv, capsys):
        assert main(["estimate", "--data", mc_csv]) == 2
        assert "--break or --scan" in capsys.readouterr().err

    def test_unreadable_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("y,x1,z1_1,ziv_1\n1,2,1,abc\n")
        assert main(["estimate", "--data", str(bad), "--break", "1"]) == 2
        assert "breakiv estimate:" in capsys.readouterr().err

    def test_singular_instruments_exit_code(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        T = 60
        z = rng.standard_normal(T)
        path = tmp_path / "sing.csv"
        write_csv(Dataset.from_arrays(rng.standard_normal(T), z + rng.standard_normal(T),
                                      np.ones((T, 1)), np.column_stack([z, 2 * z])), path)
        assert main(["estimate", "--data", str(path), "--break", "30"]) == 3
        assert "Singular" in capsys.readouterr().err

    def test_unknown_flag(self, mc_csv):
        assert main(["estimate", "--data", mc_csv, "--nope"]) == 2


class TestConfigFile:
    def test_keys_override_flags(self, mc_csv, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"break": 150, "estimator": "gmm", "hac": "bartlett", "bw": 3}))
        out = _json(capsys, ["estimate", "--data", mc_csv, "--break", "120", "--config", str(cfg)])
        assert out["break"] == 150
        assert list(out["estimates"]) == ["gmm"]
        assert out["hac"]["kernel"] == "bartlett"

    @pytest.mark.parametrize("body", [{"brake": 10}, {"break": "ten"}, {"estimator": "ols"}])
    def test_bad_keys_rejected(self, mc_csv, tmp_path, capsys, body):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(body))
        assert main(["estimate", "--data", mc_csv, "--config", str(cfg)]) == 2
        assert "ValidationError" in capsys.readouterr().err


class TestOtherCommands:
    def test_breaktest_simulates_missing_table(self, mc_csv, capsys):
        out = _json(capsys, ["breaktest", "--data", mc_csv, "--paths", "2000", "--grid", "200"])
        assert out["critical_value_source"]["kind"] == "simulated"
        assert out["reject"]["0.05"]
        assert abs(out["estimated_break"] - 120) <= 3

    def test_commontest(self, mc_csv, capsys):
        out = _json(capsys, ["commontest", "--data", mc_csv, "--break", "120"])
        assert out["statistic"] >= 0
        assert 0 <= out["p_value"] <= 1

    def test_pipeline_on_stable_data(self, stable_csv, capsys):
        out = _json(capsys, ["pipeline", "--data", stable_csv, "--paths", "2000", "--grid", "200"])
        assert out["first_stage_breaks"] == out["second_stage_breaks"] == out["common_breaks"] == []

    def test_critvals(self, capsys):
        assert main(["critvals", "--p", "6", "--paths", "1000", "--grid", "200", "--format",
                     "csv", "--threads", "1"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "level,simulated,published"
        assert len(lines) == 4

    def test_mc_writes_every_rendering(self, tmp_path, capsys):
        argv = ["mc", "--T", "150", "--reps", "10", "--n-iv", "2", "--threads", "1",
                "--output-dir", str(tmp_path)]
        assert main(argv) == 0
        assert "theta_TSGMM,1" in capsys.readouterr().out
        assert {p.name for p in tmp_path.iterdir()} == {"mc_cell1.csv", "mc.json", "mc.md"}
        cell = json.loads((tmp_path / "mc.json").read_text())["cells"][0]
        assert [r["estimator"] for r in cell["rows"]][:3] == ["GMM", "TS2SLS", "TSGMM"]
