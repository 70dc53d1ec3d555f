"""End-to-end command-line interface tests (run in-process)."""

import json

import numpy as np
import pytest

from cowlib import cli
from cowlib.toygen import ToySpec, generate_simple

GS_CFG = {"kind": "normal", "params": [0.5, 0.08], "label": "s"}
GB_CFG = {"kind": "exponential", "params": [1.0], "label": "b"}
MODEL_CFG = {"support": [0.0, 1.0], "components": [GS_CFG, GB_CFG],
             "yields": [600.0, 1400.0]}
CONTROL_CFG = {"kind": "exponential", "params": [1.5], "support": [0.0, 3.0]}


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    ds = generate_simple(ToySpec(study="simple", n_events=2000, z=0.3, seed=77))
    path = tmp_path_factory.mktemp("data") / "toy.csv"
    cli.write_csv(str(path), ["m", "t"], ds.data)
    return str(path)


def write_cfg(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestInputErrors:
    def test_missing_config_file(self, capsys):
        assert cli.main(["fit", "--config", "/no/such/file.json"]) == 1
        assert "cannot read" in capsys.readouterr().err

    def test_missing_data_file(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": str(tmp_path / "absent.csv"),
                         "model": MODEL_CFG})
        assert cli.main(["fit", "--config", cfg]) == 1

    def test_malformed_csv_names_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("m,t\n0.5,1.0\n0.6,oops\n")
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": str(bad), "model": MODEL_CFG})
        assert cli.main(["fit", "--config", cfg]) == 1
        assert "line 3" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, data_csv, capsys):
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "model": MODEL_CFG, "bogus": 1})
        assert cli.main(["fit", "--config", cfg]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_pipeline_rejects_classic_weights_with_efficiency(self, tmp_path,
                                                              data_csv,
                                                              capsys):
        eff = write_cfg(tmp_path, "eff.json",
                        {"m_edges": [0.0, 1.0], "t_edges": [0.0, 3.0],
                         "values": [[0.5]]})
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "model": MODEL_CFG,
                         "method": "sweights-B", "control_model": CONTROL_CFG,
                         "cow": {"efficiency": eff}})
        assert cli.main(["pipeline", "--config", cfg]) == 1
        assert "efficiency" in capsys.readouterr().err


class TestNumericalFailures:
    def test_duplicate_cow_basis(self, tmp_path, data_csv, capsys):
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "support": [0.0, 1.0],
                         "basis": [GS_CFG, GS_CFG]})
        assert cli.main(["cow", "--config", cfg]) == 2

    def test_invalid_ensemble(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "c.json", {
            "toy": {"study": "simple", "n_events": 300, "z": 0.3},
            "methods": [{"name": "c", "kind": "cow", "poly_order": 25}],
            "n_toys": 2, "out": str(tmp_path / "r.json")})
        assert cli.main(["toys", "--config", cfg]) == 3


class TestEchoAndSeeds:
    def test_echo_idempotent(self, tmp_path, data_csv, capsys):
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "model": MODEL_CFG})
        assert cli.main(["fit", "--config", cfg, "--echo"]) == 0
        first = capsys.readouterr().out
        cfg2 = tmp_path / "resolved.json"
        cfg2.write_text(first)
        assert cli.main(["fit", "--config", str(cfg2), "--echo"]) == 0
        assert capsys.readouterr().out == first

    def test_seed_env_override(self, tmp_path, data_csv, capsys, monkeypatch):
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "model": MODEL_CFG, "seed": 1})
        monkeypatch.setenv("COWLIB_SEED", "42")
        assert cli.main(["fit", "--config", cfg, "--echo"]) == 0
        assert json.loads(capsys.readouterr().out)["seed"] == 42

    def test_bad_seed_env(self, tmp_path, data_csv, monkeypatch):
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "model": MODEL_CFG})
        monkeypatch.setenv("COWLIB_SEED", "not-an-int")
        assert cli.main(["fit", "--config", cfg]) == 1


class TestHappyPaths:
    def test_fit(self, tmp_path, data_csv):
        out = tmp_path / "fit.json"
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "model": MODEL_CFG,
                         "out": str(out)})
        assert cli.main(["fit", "--config", cfg]) == 0
        res = json.loads(out.read_text())
        assert res["fit"]["converged"]
        assert res["fit"]["params"][0] + res["fit"]["params"][1] == pytest.approx(
            2000.0, rel=1e-9)
        assert "config_hash" in res

    def test_sweights_then_correct(self, tmp_path, data_csv):
        wcsv = tmp_path / "w.csv"
        ssum = tmp_path / "s.json"
        cfg = write_cfg(tmp_path, "sw.json",
                        {"data": data_csv, "model": MODEL_CFG, "variant": "B",
                         "out_weights": str(wcsv), "out_summary": str(ssum)})
        assert cli.main(["sweights", "--config", cfg]) == 0
        summary = json.loads(ssum.read_text())
        assert summary["sum_w_s"] == pytest.approx(
            summary["fit"]["params"][0], rel=1e-10)

        out = tmp_path / "corr.json"
        ccfg = write_cfg(tmp_path, "corr.json",
                         {"data": data_csv, "weights": str(wcsv),
                          "weight_column": "w_s",
                          "control_model": CONTROL_CFG, "out": str(out)})
        assert cli.main(["correct", "--config", ccfg]) == 0
        res = json.loads(out.read_text())
        assert res["fit"]["converged"]
        assert res["n_equivalent"] > 0
        assert res["sum_w"] == pytest.approx(summary["sum_w_s"], rel=1e-12)

    def test_cow(self, tmp_path, data_csv):
        ssum = tmp_path / "cow.json"
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": data_csv, "support": [0.0, 1.0],
                         "basis": [GS_CFG, GB_CFG], "variance": "unity",
                         "out_summary": str(ssum)})
        assert cli.main(["cow", "--config", cfg]) == 0
        res = json.loads(ssum.read_text())
        assert np.asarray(res["W"]).shape == (2, 2)
        assert len(res["sum_w"]) == 2

    def test_check_independence_monotone(self, tmp_path):
        csv_path = tmp_path / "mono.csv"
        x = np.linspace(0, 1, 50)
        cli.write_csv(str(csv_path), ["m", "t"], np.column_stack([x, x ** 2]))
        out = tmp_path / "tau.json"
        cfg = write_cfg(tmp_path, "c.json",
                        {"data": str(csv_path), "out": str(out)})
        assert cli.main(["check-independence", "--config", cfg]) == 0
        res = json.loads(out.read_text())
        assert res["report"]["tau"] == 1.0

    def test_toys_single(self, tmp_path):
        out = tmp_path / "toys.json"
        cfg = write_cfg(tmp_path, "c.json", {
            "toy": {"study": "simple", "n_events": 500, "z": 0.3},
            "methods": [{"name": "swB", "kind": "sweights", "variant": "B",
                         "correction": "none"}],
            "n_toys": 1, "base_seed": 11, "out": str(out)})
        assert cli.main(["toys", "--config", cfg]) == 0
        res = json.loads(out.read_text())
        assert res["report"]["valid"]
        assert res["report"]["aggregates"]["swB"]["n_ok"] == 1

    def test_pipeline_reruns_bit_identical(self, tmp_path, data_csv):
        summary = tmp_path / "sum.json"
        weights = tmp_path / "w.csv"
        cfg = write_cfg(tmp_path, "p.json",
                        {"data": data_csv, "model": MODEL_CFG,
                         "method": "sweights-B",
                         "control_model": CONTROL_CFG,
                         "out_summary": str(summary),
                         "out_weights": str(weights)})

        def run():
            assert cli.main(["pipeline", "--config", cfg]) == 0
            return summary.read_text(), weights.read_text()

        s1, w1 = run()
        s2, w2 = run()
        assert s1 == s2
        assert w1 == w2
        res = json.loads(s1)
        # the per-event-sum identity survives the whole pipeline
        assert res["sum_w"] == pytest.approx(res["m_fit"]["params"][0],
                                             rel=1e-10)
        assert res["sigma_corrected"] < res["sigma_naive"] * 5
        assert res["kendall_tau"]["n"] == 2000
