import hashlib
import numpy as np
import pytest

from core.ensemble import Ensemble
from db.archive import (
    ArchiveFiles,
    MODEL_MAGIC,
    load_dataset,
    load_ensemble,
    load_ensemble_manifest,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_dataset,
    save_ensemble,
    save_model,
)
from db.init_profiles import load_profiles, resolve_profile
from helpers.json_io import write_json
from models.config import TrainConfig
from models.errors import DataValidationError


def test_model_survives_a_round_trip(tmp_path, warm_model_factory):
    model = warm_model_factory(kernel_size=4, seed=2)
    model.metadata.epochs_run = 7
    path = save_model(model, tmp_path / "member.camal")
    restored = load_model(path)
    windows = np.random.default_rng(0).uniform(0, 2, (3, 16))
    np.testing.assert_array_equal(restored.predict_proba(windows), model.predict_proba(windows))
    assert restored.kernel_size == 4 and restored.metadata.epochs_run == 7
    assert restored.batches_tracked() == model.batches_tracked()
    assert path.read_bytes()[:8] == MODEL_MAGIC


def test_serialization_is_byte_stable(warm_model_factory):
    digest = hashlib.sha256(model_to_bytes(warm_model_factory(seed=5))).hexdigest()
    assert hashlib.sha256(model_to_bytes(warm_model_factory(seed=5))).hexdigest() == digest


def test_corrupt_model_files_are_rejected(warm_model_factory):
    payload = model_to_bytes(warm_model_factory())
    with pytest.raises(DataValidationError, match="not a model file"):
        model_from_bytes(b"XXXXXXXX" + payload[8:])
    with pytest.raises(DataValidationError, match="trailing"):
        model_from_bytes(payload + b"\x00\x00\x00\x00")


def test_ensemble_archive(tmp_path, warm_model_factory, dishwasher):
    models = [warm_model_factory(kernel_size=k, seed=k) for k in (3, 5)]
    ens = Ensemble(models, [0.4, 0.2], "dishwasher", 16, threshold=0.5)
    save_ensemble(ens, tmp_path, TrainConfig(kernel_sizes=[3, 5], trials=1, ensemble_size=2), dishwasher,
                  extra={"interval_s": 60})
    manifest = load_ensemble_manifest(tmp_path)
    assert [m["kernel_size"] for m in manifest["members"]] == [5, 3]
    assert manifest["profile"]["mean_power_w"] == 800 and manifest["interval_s"] == 60
    assert (tmp_path / ArchiveFiles.MEMBER.format(index=1)).exists()
    restored = load_ensemble(tmp_path)
    windows = np.random.default_rng(1).uniform(0, 2, (4, 16))
    np.testing.assert_array_equal(restored.probability(windows), ens.probability(windows))
    assert restored.validation_losses == [0.2, 0.4]


def test_missing_ensemble_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_ensemble(tmp_path)


def test_dataset_cache(tmp_path, window_factory):
    dataset = window_factory(3, 4)
    restored = load_dataset(save_dataset(dataset, tmp_path / "windows.npz"))
    np.testing.assert_array_equal(restored.windows, dataset.windows)
    np.testing.assert_array_equal(restored.strong_status, dataset.strong_status)
    assert list(restored.house_ids) == list(dataset.house_ids)


def test_profiles_can_be_overridden(tmp_path):
    assert resolve_profile("kettle").mean_power_w == 2000
    assert load_profiles()["electric_vehicle"].max_ffill_s == 5400
    path = write_json(tmp_path / "profiles.json", {"profiles": [
        {"name": "kettle", "on_threshold_w": 400, "mean_power_w": 1800, "max_ffill_s": 60},
        {"name": "heat_pump", "on_threshold_w": 200, "mean_power_w": 1500, "max_ffill_s": 600},
    ]})
    profiles = load_profiles(path)
    assert profiles["kettle"].mean_power_w == 1800
    assert profiles["heat_pump"].on_threshold_w == 200
    assert profiles["dishwasher"].mean_power_w == 800
    with pytest.raises(KeyError, match="unknown appliance"):
        resolve_profile("toaster")
