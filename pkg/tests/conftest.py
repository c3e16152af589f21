import numpy as np
import pytest

from core.resnet import Mode, ResNetModel, build
from models.config import ApplianceProfile, ResNetSpec, TrainConfig
from models.series import PowerSeries, WindowDataset


@pytest.fixture
def dishwasher() -> ApplianceProfile:
    return ApplianceProfile(name="dishwasher", on_threshold_w=300, mean_power_w=800, max_ffill_s=180)


def make_window_dataset(n_pos: int, n_neg: int, length: int = 32, seed: int = 0,
                        house: str = "house_00") -> WindowDataset:
    """Separable windows: positives carry a 2 kW pulse over 8 samples on top of a 200 W base."""
    rng = np.random.default_rng(seed)
    n_windows = n_pos + n_neg
    aggregate = 200.0 + rng.normal(0.0, 10.0, (n_windows, length)).clip(-150, 150)
    status = np.zeros((n_windows, length), dtype=np.int8)
    appliance = np.zeros((n_windows, length))
    for row in range(n_pos):
        start = int(rng.integers(0, length - 8))
        status[row, start:start + 8] = 1
        appliance[row, start:start + 8] = 2000.0
    aggregate += appliance
    order = rng.permutation(n_windows)
    timestamps = (np.arange(n_windows * length, dtype=np.int64) * 60).reshape(n_windows, length)
    return WindowDataset(
        windows=aggregate[order] / 1000.0,
        aggregate_w=aggregate[order],
        timestamps=timestamps,
        house_ids=np.repeat(np.array([house]), n_windows),
        weak_labels=status[order].any(axis=1).astype(np.int8),
        strong_status=status[order],
        appliance_power=appliance[order],
    )


@pytest.fixture
def window_factory():
    return make_window_dataset


def warmed_model(kernel_size: int = 3, seed: int = 0, length: int = 16, dtype=np.float64) -> ResNetModel:
    """Random model whose batch-norm statistics have seen one train-mode batch."""
    model = build(ResNetSpec(kernel_size=kernel_size), seed, dtype)
    batch = np.random.default_rng(seed).uniform(0.0, 2.0, (4, 1, length))
    model.forward(batch, Mode.TRAIN)
    return model


@pytest.fixture
def warm_model_factory():
    return warmed_model


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(
        kernel_sizes=[3],
        trials=1,
        ensemble_size=1,
        max_epochs=3,
        patience=2,
        batch_size=8,
        workers=1,
        progress=False,
        precision="float64",
        seed=0,
    )


def power_series(values, interval_s: int = 60, start: int = 0, house_id: str = "house_00") -> PowerSeries:
    values = np.asarray(values, dtype=float)
    return PowerSeries(
        timestamps=start + np.arange(len(values), dtype=np.int64) * interval_s,
        values=values,
        interval_s=interval_s,
        house_id=house_id,
    )


@pytest.fixture
def series_factory():
    return power_series
