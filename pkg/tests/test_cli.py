import json
import shutil
import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from app import cli
from cli.commands import discover_houses, resolve_experiment
from helpers.json_io import read_json, write_json

WINDOW = 64

SCENARIO = {
    "name": "tiny-dishwasher",
    "num_houses": 6,
    "days": 4,
    "noise_sigma_w": 20.0,
    "seed": 1,
    "appliances": [{
        "profile": {"name": "dishwasher", "on_threshold_w": 300, "mean_power_w": 800, "max_ffill_s": 180},
        "signature": {"kind": "multi_phase", "peak_w": 2000, "duration_steps": 30, "activations_per_day": 3.0},
        "num_owners": 6,
    }],
}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("CAMAL_DATA_DIR", "CAMAL_MODEL_DIR", "CAMAL_OUTPUT_DIR"):
        monkeypatch.delenv(name, raising=False)


def invoke(tmp_path, *args):
    result = CliRunner().invoke(cli, ["--log-file", str(tmp_path / "app.log"), *[str(a) for a in args]])
    return result


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("camal")
    scenario = write_json(root / "scenario.json", SCENARIO)
    result = invoke(root, "synth", "--config", scenario, "--out", root / "data")
    assert result.exit_code == 0, result.output
    config = write_json(root / "experiment.json", {
        "data_dir": str(root / "data"),
        "model_dir": str(root / "model"),
        "output_dir": str(root / "reports"),
        "window_length": WINDOW,
        "train": {"kernel_sizes": [3], "trials": 1, "ensemble_size": 1, "max_epochs": 2, "patience": 2,
                  "batch_size": 32, "workers": 1, "progress": False},
    })
    result = invoke(root, "train", "--config", config)
    assert result.exit_code == 0, result.output
    return root


def test_synth_writes_houses_and_manifest(workspace, tmp_path):
    data = workspace / "data"
    manifest = read_json(data / "manifest.json")
    assert len(manifest["houses"]) == 6 and manifest["seed"] == 1
    assert len(list(data.glob("house_*_status.csv"))) == 6
    result = invoke(tmp_path, "synth", "--config", workspace / "scenario.json", "--out", tmp_path / "again")
    assert result.exit_code == 0, result.output
    for name in ("manifest.json", "house_03.csv", "house_03_status.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (data / name).read_bytes()


def test_synth_reports_the_invalid_field(tmp_path):
    scenario = write_json(tmp_path / "bad.json", {**SCENARIO, "num_houses": 0})
    result = invoke(tmp_path, "synth", "--config", scenario, "--out", tmp_path / "out")
    assert result.exit_code == 2
    assert "num_houses" in result.output


def test_train_without_data_dir_is_a_usage_error(tmp_path):
    result = invoke(tmp_path, "train", "--data-dir", tmp_path / "missing", "--model-dir", tmp_path / "model")
    assert result.exit_code == 2
    assert "data_dir" in result.output


def test_train_writes_archive_report_and_manifest(workspace):
    manifest = read_json(workspace / "model" / "manifest.json")
    assert manifest["window_length"] == WINDOW and len(manifest["members"]) == 1
    assert manifest["members"][0]["kernel_size"] == 3
    report = read_json(workspace / "reports" / "training_report.json")
    assert len(report["candidates"]) == 1 and report["candidates"][0]["selected"]
    assert 0.0 <= report["validation_balanced_accuracy"] <= 1.0
    assert sorted(sum(report["houses"].values(), [])) == [f"house_{i:02d}" for i in range(6)]
    run = read_json(workspace / "reports" / "manifest.json")
    assert run["command"] == "train" and run["config"]["window_length"] == WINDOW


def test_train_rerun_from_manifest_is_identical(workspace, tmp_path):
    result = invoke(tmp_path, "train", "--config", workspace / "reports" / "manifest.json",
                    "--model-dir", tmp_path / "model", "--out", tmp_path / "reports")
    assert result.exit_code == 0, result.output
    original = (workspace / "model" / "member_00.camal").read_bytes()
    assert (tmp_path / "model" / "member_00.camal").read_bytes() == original


def test_localize_covers_every_complete_window(workspace, tmp_path):
    out = tmp_path / "pred.csv"
    result = invoke(tmp_path, "localize", workspace / "data" / "house_00.csv", "--model-dir", workspace / "model",
                    "--out", out, "--with-attention", "--plot", tmp_path / "plots")
    assert result.exit_code == 0, result.output
    rows = pd.read_csv(out)
    n_windows = (4 * 1440) // WINDOW
    assert len(rows) == n_windows * WINDOW
    assert list(rows.columns) == ["timestamp", "window", "prob_ens", "status", "est_power_W", "attention"]
    assert set(rows["status"].unique()) <= {0, 1}
    assert (rows["est_power_W"] <= pd.read_csv(workspace / "data" / "house_00.csv")["aggregate_w"][:len(rows)] + 1e-6).all()
    assert (tmp_path / "pred_manifest.json").exists()

    again = tmp_path / "again.csv"
    invoke(tmp_path, "localize", workspace / "data" / "house_00.csv", "--model-dir", workspace / "model",
           "--out", again, "--with-attention")
    assert again.read_bytes() == out.read_bytes()


def test_localize_jsonl_output(workspace, tmp_path):
    out = tmp_path / "pred.jsonl"
    result = invoke(tmp_path, "localize", workspace / "data" / "house_01.csv", "--model-dir", workspace / "model",
                    "--out", out, "--no-attention")
    assert result.exit_code == 0, result.output
    first = json.loads(out.read_text().splitlines()[0])
    assert set(first) == {"timestamp", "window", "prob_ens", "status", "est_power_W"}


def test_localize_all_zero_input_gives_zero_status(workspace, tmp_path):
    csv = tmp_path / "silent.csv"
    pd.DataFrame({"timestamp": np.arange(3 * WINDOW) * 60, "aggregate_w": 0.0}).to_csv(csv, index=False)
    result = invoke(tmp_path, "localize", csv, "--model-dir", workspace / "model", "--out", tmp_path / "p.csv")
    assert result.exit_code == 0, result.output
    rows = pd.read_csv(tmp_path / "p.csv")
    assert len(rows) == 3 * WINDOW
    assert not rows["status"].any() and not rows["est_power_W"].any()


def test_localize_too_short_input_names_the_window_length(workspace, tmp_path):
    csv = tmp_path / "short.csv"
    pd.DataFrame({"timestamp": np.arange(20) * 60, "aggregate_w": 100.0}).to_csv(csv, index=False)
    result = invoke(tmp_path, "localize", csv, "--model-dir", workspace / "model", "--out", tmp_path / "p.csv")
    assert result.exit_code == 1
    assert f"L={WINDOW}" in result.output


def oracle_predictions(truth: pd.DataFrame) -> pd.DataFrame:
    usable = (len(truth) // WINDOW) * WINDOW
    truth = truth.iloc[:usable]
    window = np.arange(usable) // WINDOW
    active = truth.groupby(window)["status"].transform("max").to_numpy()
    return pd.DataFrame({
        "timestamp": truth["timestamp"].to_numpy(),
        "window": window,
        "prob_ens": active.astype(float),
        "status": truth["status"].to_numpy(),
        "est_power_W": truth["appliance_w"].to_numpy(),
    })


def test_evaluate_perfect_predictions(workspace, tmp_path):
    truth_csv = workspace / "data" / "house_02_status.csv"
    predictions = tmp_path / "pred.csv"
    oracle_predictions(pd.read_csv(truth_csv)).to_csv(predictions, index=False)
    result = invoke(tmp_path, "evaluate", "--predictions", predictions, "--truth", truth_csv, "--out", tmp_path / "eval")
    assert result.exit_code == 0, result.output
    report = read_json(tmp_path / "eval" / "metrics.json")
    assert report["f1"] == 1.0 and report["matching_ratio"] == 1.0 and report["mae"] == 0.0
    assert report["balanced_accuracy"] == 1.0
    assert (tmp_path / "eval" / "metrics.txt").exists()


def test_evaluate_silent_predictions(workspace, tmp_path):
    truth_csv = workspace / "data" / "house_02_status.csv"
    frame = oracle_predictions(pd.read_csv(truth_csv))
    frame["status"] = 0
    frame["est_power_W"] = 0.0
    frame.to_csv(tmp_path / "pred.csv", index=False)
    result = invoke(tmp_path, "evaluate", "--predictions", tmp_path / "pred.csv", "--truth", truth_csv,
                    "--out", tmp_path / "eval")
    assert result.exit_code == 0, result.output
    assert read_json(tmp_path / "eval" / "metrics.json")["f1"] == 0.0


def test_evaluate_reports_the_first_misaligned_timestamp(workspace, tmp_path):
    truth_csv = workspace / "data" / "house_02_status.csv"
    frame = oracle_predictions(pd.read_csv(truth_csv))
    frame.loc[5, "timestamp"] = 7
    frame.loc[9, "timestamp"] = 11
    frame.to_csv(tmp_path / "pred.csv", index=False)
    result = invoke(tmp_path, "evaluate", "--predictions", tmp_path / "pred.csv", "--truth", truth_csv,
                    "--out", tmp_path / "eval")
    assert result.exit_code == 1
    assert "timestamp 7 " in result.output


def test_flags_override_environment_and_config(tmp_path, monkeypatch):
    config = write_json(tmp_path / "exp.json", {"data_dir": "from-file", "model_dir": "model-file", "seed": 4,
                                                "train": {"trials": 2}})
    monkeypatch.setenv("CAMAL_DATA_DIR", "from-env")
    cfg = resolve_experiment(str(config), {"model_dir": "model-flag"}, {"trials": None})
    assert cfg.data_dir == "from-env"
    assert cfg.model_dir == "model-flag"
    assert cfg.train.trials == 2 and cfg.train.seed == 4
    cfg = resolve_experiment(str(config), {"data_dir": "from-flag", "seed": 9}, {"trials": 1})
    assert cfg.data_dir == "from-flag" and cfg.train.trials == 1 and cfg.train.seed == 9


MIXED_SCENARIO = {
    **SCENARIO,
    "name": "mixed-dishwasher",
    "appliances": [{**SCENARIO["appliances"][0], "num_owners": 3}],
}

TINY_TRAIN = {"kernel_sizes": [3], "trials": 1, "ensemble_size": 1, "max_epochs": 2, "patience": 2,
              "batch_size": 32, "workers": 1, "progress": False}


@pytest.fixture(scope="module")
def mixed_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("mixed")
    scenario = write_json(root / "scenario.json", MIXED_SCENARIO)
    result = invoke(root, "synth", "--config", scenario, "--out", root / "data")
    assert result.exit_code == 0, result.output
    owners = [h["house_id"] for h in read_json(root / "data" / "manifest.json")["houses"]
              if h["possession"]["dishwasher"]]
    assert len(owners) == 3
    return root


def train_mixed(root, tmp_path, data_dir, *extra):
    config = write_json(tmp_path / "experiment.json", {
        "data_dir": str(data_dir), "model_dir": str(tmp_path / "model"), "output_dir": str(tmp_path / "reports"),
        "window_length": WINDOW, "train": TINY_TRAIN,
    })
    return invoke(tmp_path, "train", "--config", config, *extra)


def owners_of(root):
    return {h["house_id"] for h in read_json(root / "data" / "manifest.json")["houses"] if h["possession"]["dishwasher"]}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_train_with_a_mixed_owner_roster(mixed_data, tmp_path, seed):
    result = train_mixed(mixed_data, tmp_path, mixed_data / "data", "--seed", seed)
    assert result.exit_code == 0, result.output
    houses = read_json(tmp_path / "reports" / "training_report.json")["houses"]
    for part in ("train", "validation", "test"):
        assert set(houses[part]) & owners_of(mixed_data)


def test_train_on_possession_labels(mixed_data, tmp_path):
    result = train_mixed(mixed_data, tmp_path, mixed_data / "data", "--possession-only")
    assert result.exit_code == 0, result.output
    houses = read_json(tmp_path / "reports" / "training_report.json")["houses"]
    owners = owners_of(mixed_data)
    for part in ("train", "validation", "test"):
        assert set(houses[part]) & owners and set(houses[part]) - owners
    assert read_json(tmp_path / "reports" / "manifest.json")["config"]["possession_only"] is True


def test_possession_file_replaces_a_missing_manifest(mixed_data, tmp_path):
    data = tmp_path / "meters"
    data.mkdir()
    possession = {}
    for house in read_json(mixed_data / "data" / "manifest.json")["houses"]:
        (data / house["data"]).write_bytes((mixed_data / "data" / house["data"]).read_bytes())
        (data / house["truth"]).write_bytes((mixed_data / "data" / house["truth"]).read_bytes())
        possession[house["house_id"]] = house["possession"]
    write_json(data / "possession.json", possession)

    houses = discover_houses(data)
    assert [h["house_id"] for h in houses] == sorted(possession)
    assert all(h["possession"] == possession[h["house_id"]] for h in houses)

    result = train_mixed(mixed_data, tmp_path, data, "--possession-only")
    assert result.exit_code == 0, result.output


def test_possession_only_needs_a_label_per_house(mixed_data, tmp_path):
    data = tmp_path / "meters"
    data.mkdir()
    (data / "house_00.csv").write_bytes((mixed_data / "data" / "house_00.csv").read_bytes())
    result = train_mixed(mixed_data, tmp_path, data, "--possession-only")
    assert result.exit_code == 1
    assert "no possession label" in result.output


def test_train_reuses_cached_house_windows(workspace, tmp_path):
    cache = workspace / "reports" / "windows"
    assert sorted(p.name for p in cache.glob("*.npz")) == [f"house_{i:02d}.npz" for i in range(6)]
    shutil.copytree(cache, tmp_path / "reports" / "windows")
    result = invoke(tmp_path, "train", "--config", workspace / "experiment.json", "--model-dir", tmp_path / "model",
                    "--out", tmp_path / "reports")
    assert result.exit_code == 0, result.output
    assert "Loaded cached windows of house house_00" in (tmp_path / "app.log").read_text()
    original = (workspace / "model" / "member_00.camal").read_bytes()
    assert (tmp_path / "model" / "member_00.camal").read_bytes() == original


def test_cached_windows_are_rebuilt_when_settings_change(workspace, tmp_path):
    reports = tmp_path / "reports"
    result = invoke(tmp_path, "train", "--config", workspace / "experiment.json", "--model-dir", tmp_path / "model",
                    "--out", reports)
    assert result.exit_code == 0, result.output
    meta = read_json(reports / "windows" / "house_00.json")
    write_json(reports / "windows" / "house_00.json", {**meta, "window_length": WINDOW + 1})
    (tmp_path / "app.log").unlink()
    result = invoke(tmp_path, "train", "--config", workspace / "experiment.json", "--model-dir", tmp_path / "model",
                    "--out", reports)
    assert result.exit_code == 0, result.output
    log = (tmp_path / "app.log").read_text()
    assert "Loaded cached windows of house house_00" not in log
    assert "Loaded cached windows of house house_01" in log
    assert read_json(reports / "windows" / "house_00.json")["window_length"] == WINDOW


def test_evaluate_reads_appliance_and_threshold_from_config(workspace, tmp_path):
    truth_csv = workspace / "data" / "house_02_status.csv"
    predictions = tmp_path / "pred.csv"
    frame = oracle_predictions(pd.read_csv(truth_csv))
    frame["prob_ens"] = frame["prob_ens"] * 0.8
    frame.to_csv(predictions, index=False)
    config = write_json(tmp_path / "exp.json", {"appliance": "kettle", "output_dir": str(tmp_path / "eval"),
                                                "train": {"detection_threshold": 0.9}})
    result = invoke(tmp_path, "evaluate", "--predictions", predictions, "--truth", truth_csv, "--config", config)
    assert result.exit_code == 0, result.output
    report = read_json(tmp_path / "eval" / "metrics.json")
    assert report["appliance"] == "kettle"
    assert report["detection_counts"]["tp"] == 0
    manifest = read_json(tmp_path / "eval" / "evaluate_manifest.json")
    assert manifest["threshold"] == 0.9 and manifest["config"]["appliance"] == "kettle"

    result = invoke(tmp_path, "evaluate", "--predictions", predictions, "--truth", truth_csv, "--config", config,
                    "--appliance", "dishwasher", "--threshold", 0.5, "--out", tmp_path / "flagged")
    assert result.exit_code == 0, result.output
    report = read_json(tmp_path / "flagged" / "metrics.json")
    assert report["appliance"] == "dishwasher" and report["detection_counts"]["tp"] > 0
