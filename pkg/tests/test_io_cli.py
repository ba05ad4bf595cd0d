import csv
import json

import numpy as np
import pytest

from override_lab import cli, config, io, scenarios
from override_lab.world_sim import Catalog, generate_dataset


def small_fig1(seed=0):
    return scenarios.fig1(seed).replace(world={"horizon": 3, "interactions_per_step": 10})


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "fig1.yaml"
    config.dump(small_fig1(), path)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestRecordCsv:
    def test_round_trip(self, tmp_path):
        cfg = small_fig1()
        records, truth = generate_dataset(cfg)
        path = tmp_path / "d.csv"
        path.write_bytes(io.records_to_csv(records))
        back = io.read_records(path, Catalog.from_config(cfg))
        assert len(back) == len(records)
        for a, b in zip(records, back):
            assert a.decision == b.decision and a.executed == b.executed
            np.testing.assert_array_equal(a.state.features, b.state.features)
            assert (a.outcome is None) == (b.outcome is None)
            if a.outcome is not None:
                assert a.outcome.quality == b.outcome.quality
        assert io.records_to_csv(back) == path.read_bytes()

    def test_mandated_columns_first(self):
        records, _ = generate_dataset(small_fig1())
        header = io.records_to_csv(records).decode().splitlines()[0].split(",")
        assert header[:11] == io.RECORD_COLUMNS

    def test_json_nan_is_null(self):
        assert json.loads(io.to_json({"x": float("nan"), "y": np.float64(1.5)})) == {"x": None, "y": 1.5}

    def test_unknown_action_rejected(self, tmp_path):
        cfg = small_fig1()
        records, _ = generate_dataset(cfg)
        text = io.records_to_csv(records).decode().replace(",sglt2i,", ",aspirin,", 1)
        path = tmp_path / "d.csv"
        path.write_text(text)
        with pytest.raises(io.DataError, match="aspirin"):
            io.read_records(path, Catalog.from_config(cfg))


class TestSimulate:
    def test_byte_identical_reruns(self, tmp_path, cfg_file):
        assert run("simulate", "--config", cfg_file, "--out", tmp_path / "a") == 0
        assert run("simulate", "--config", cfg_file, "--out", tmp_path / "b") == 0
        for name in ("dataset.csv", "clinicians.csv", "ground_truth.json", "config.yaml"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["outputs"] == mb["outputs"] and ma["config_hash"] == mb["config_hash"]

    def test_manifest_digests_match_files(self, tmp_path, cfg_file):
        run("simulate", "--config", cfg_file, "--out", tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        for entry in m["outputs"]:
            assert io.sha256((tmp_path / entry["path"]).read_bytes()) == entry["sha256"]
        assert m["seed"] == 0 and "numpy" in m["versions"]
        assert m["resolved_config"]["learner"]["ridge"] == config.LearnerConfig().ridge

    def test_seed_flag_overrides_config(self, tmp_path, cfg_file):
        run("simulate", "--config", cfg_file, "--seed", 4, "--out", tmp_path)
        assert config.load(tmp_path / "config.yaml").seed == 4

    def test_env_output_dir(self, tmp_path, cfg_file, monkeypatch):
        monkeypatch.setenv("OVERRIDE_LAB_OUT", str(tmp_path))
        assert run("simulate", "--config", cfg_file) == 0
        assert (tmp_path / "simulate" / "dataset.csv").exists()


class TestExitCodes:
    def test_missing_seed(self, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        path.write_text(config.dumps(small_fig1()).replace("seed: 0\n", ""))
        assert run("simulate", "--config", path, "--out", tmp_path / "o") == 2
        assert "seed" in capsys.readouterr().err

    def test_unknown_scenario(self, tmp_path):
        assert run("simulate", "--scenario", "nope", "--out", tmp_path) == 2

    def test_no_output_dir(self, cfg_file, monkeypatch):
        monkeypatch.delenv("OVERRIDE_LAB_OUT", raising=False)
        assert run("simulate", "--config", cfg_file) == 2

    def test_state_dimension_mismatch(self, tmp_path, cfg_file):
        run("simulate", "--config", cfg_file, "--out", tmp_path / "sim")
        with open(tmp_path / "sim" / "dataset.csv") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            del r["s_2"]
        path = tmp_path / "sim" / "dataset.csv"
        path.write_bytes(io.rows_to_csv(rows))
        assert run("train", "--dataset", tmp_path / "sim", "--out", tmp_path / "t") == 2

    def test_missing_columns(self, tmp_path, cfg_file):
        run("simulate", "--config", cfg_file, "--out", tmp_path / "sim")
        path = tmp_path / "sim" / "dataset.csv"
        rows = io.read_csv_rows(path)
        path.write_bytes(io.rows_to_csv([{k: v for k, v in r.items() if k != "outcome_quality"} for r in rows]))
        assert run("audit", "--dataset", tmp_path / "sim", "--out", tmp_path / "a") == 2

    def test_missing_dataset(self, tmp_path, cfg_file):
        assert run("train", "--dataset", tmp_path / "nothing.csv", "--config", cfg_file, "--out", tmp_path) == 2

    def test_unknown_reproduce_target(self, tmp_path):
        assert run("reproduce", "--scenario", "tiers", "--out", tmp_path) == 2


class TestTrainAudit:
    @pytest.fixture
    def sim_dir(self, tmp_path):
        assert run("simulate", "--scenario", "fig1", "--out", tmp_path / "sim") == 0
        return tmp_path / "sim"

    def test_naive_and_kappa_disagree(self, tmp_path, sim_dir):
        assert run("train", "--dataset", sim_dir, "--weighting", "naive", "--out", tmp_path / "n") == 0
        assert run("train", "--dataset", sim_dir, "--weighting", "kappa", "--out", tmp_path / "k") == 0
        naive = json.loads((tmp_path / "n" / "summary.json").read_text())
        kappa = json.loads((tmp_path / "k" / "summary.json").read_text())
        pick = lambda s: next(r["margin"] for r in s["margins"]  # noqa: E731
                              if r["cluster"] == "hf_stage_c" and r["preferred"] == "referral"
                              and r["dispreferred"] == "sglt2i")
        assert pick(naive) > 0 > pick(kappa)
        assert kappa["anchor"]["passed"]

    def test_zero_rounds_is_cold_start(self, tmp_path, sim_dir):
        assert run("train", "--dataset", sim_dir, "--rounds", 0, "--out", tmp_path / "t") == 0
        s = json.loads((tmp_path / "t" / "summary.json").read_text())
        assert s["iterations"] == 0
        assert all(v == 0 for v in s["theta"])
        means = {r["clinician"]: r["mean"] for r in s["kappa_hat"]}
        assert means["k000"] == pytest.approx(0.3) and means["k049"] == pytest.approx(0.7)

    def test_audit_outputs(self, tmp_path, sim_dir):
        run("train", "--dataset", sim_dir, "--out", tmp_path / "t")
        assert run("audit", "--dataset", sim_dir, "--train", tmp_path / "t", "--out", tmp_path / "a") == 0
        report = json.loads((tmp_path / "a" / "monitor_report.json").read_text())
        assert report["kappa_source"] == "estimated" and report["partition_ok"]
        rows = io.read_csv_rows(tmp_path / "a" / "concordance.csv")
        assert {r["posterior"] for r in rows} == {"classifier", "simulated_type"}
        assert all(r["counterfactual_source"] == "simulator" for r in rows)

    def test_empty_dataset_audit(self, tmp_path, sim_dir):
        path = sim_dir / "dataset.csv"
        path.write_text(path.read_text().splitlines()[0] + "\n")
        assert run("audit", "--dataset", sim_dir, "--out", tmp_path / "a") == 0
        report = json.loads((tmp_path / "a" / "monitor_report.json").read_text())
        assert report["status"] == "no data"
        assert run("train", "--dataset", sim_dir, "--out", tmp_path / "t") == 2


class TestAmplificationTrain:
    def test_anchor_failure_exits_3(self, tmp_path):
        assert run("simulate", "--scenario", "amplification", "--out", tmp_path / "sim") == 0
        assert run("train", "--dataset", tmp_path / "sim", "--out", tmp_path / "t") == 3
        trace = io.read_csv_rows(tmp_path / "t" / "trace.csv")
        assert any(r["event"].startswith("reinit") for r in trace)
        s = json.loads((tmp_path / "t" / "summary.json").read_text())
        assert s["reinits"] == config.LearnerConfig().max_reinits
