import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Dict, List, Optional, Sequence


class PowerSeries(BaseModel):
    """
    Timestamped power readings of one meter
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    timestamps: np.ndarray = Field(..., description="Epoch seconds (int64)")
    values: np.ndarray = Field(..., description="Power in Watts, NaN marks a missing reading")
    interval_s: float = Field(..., description="Meter interval between consecutive readings (s)")
    house_id: str = Field("house", description="House the meter belongs to")

    @model_validator(mode="after")
    def _aligned(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.ndim != 1 or self.timestamps.shape != self.values.shape:
            raise ValueError(
                f"timestamps {self.timestamps.shape} and values {self.values.shape} must be aligned 1-D arrays"
            )
        return self

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def with_values(self, values: np.ndarray) -> "PowerSeries":
        return PowerSeries(timestamps=self.timestamps, values=values, interval_s=self.interval_s, house_id=self.house_id)


class WindowDataset(BaseModel):
    """
    Tumbling windows of aggregate consumption with optional weak and strong labels.

    ``windows`` holds the kW-scaled network input, ``aggregate_w`` the same values in Watts.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    windows: np.ndarray = Field(..., description="(N, L) aggregate / 1000")
    aggregate_w: np.ndarray = Field(..., description="(N, L) aggregate in Watts")
    timestamps: np.ndarray = Field(..., description="(N, L) epoch seconds")
    house_ids: np.ndarray = Field(..., description="(N,) house of each window")
    weak_labels: Optional[np.ndarray] = Field(None, description="(N,) window labels in {0, 1}")
    strong_status: Optional[np.ndarray] = Field(None, description="(N, L) per-timestamp ground truth")
    appliance_power: Optional[np.ndarray] = Field(None, description="(N, L) appliance power in Watts")

    @model_validator(mode="after")
    def _consistent(self):
        n_windows = self.windows.shape[0]
        if self.windows.ndim != 2:
            raise ValueError(f"windows must be 2-D, got shape {self.windows.shape}")
        for name in ("aggregate_w", "timestamps"):
            if getattr(self, name).shape != self.windows.shape:
                raise ValueError(f"{name} must match windows shape {self.windows.shape}")
        if self.house_ids.shape != (n_windows,):
            raise ValueError("house_ids must hold one entry per window")
        if np.isnan(self.windows).any():
            raise ValueError("windows must not contain missing values")
        if self.weak_labels is not None:
            if self.weak_labels.shape != (n_windows,) or not np.isin(self.weak_labels, (0, 1)).all():
                raise ValueError("weak_labels must be one 0/1 label per window")
        if self.strong_status is not None:
            if self.strong_status.shape != self.windows.shape:
                raise ValueError("strong_status must match windows shape")
            if self.weak_labels is not None and not np.array_equal(
                self.weak_labels.astype(bool), self.strong_status.any(axis=1)
            ):
                raise ValueError("weak_labels must equal the OR of strong_status in each window")
        return self

    def __len__(self) -> int:
        return int(self.windows.shape[0])

    @property
    def window_length(self) -> int:
        return int(self.windows.shape[1])

    def class_counts(self) -> Dict[int, int]:
        if self.weak_labels is None:
            return {}
        return {label: int((self.weak_labels == label).sum()) for label in (0, 1)}

    def subset(self, indices: Sequence[int]) -> "WindowDataset":
        idx = np.asarray(indices, dtype=np.int64)
        optional = {
            name: (getattr(self, name)[idx] if getattr(self, name) is not None else None)
            for name in ("weak_labels", "strong_status", "appliance_power")
        }
        return WindowDataset(
            windows=self.windows[idx],
            aggregate_w=self.aggregate_w[idx],
            timestamps=self.timestamps[idx],
            house_ids=self.house_ids[idx],
            **optional,
        )

    @classmethod
    def concat(cls, parts: List["WindowDataset"]) -> "WindowDataset":
        """Merge per-house datasets; optional arrays survive only when every part has them."""
        if not parts:
            raise ValueError("cannot merge an empty list of datasets")
        merged = {
            name: np.concatenate([getattr(p, name) for p in parts])
            for name in ("windows", "aggregate_w", "timestamps", "house_ids")
        }
        for name in ("weak_labels", "strong_status", "appliance_power"):
            arrays = [getattr(p, name) for p in parts]
            merged[name] = np.concatenate(arrays) if all(a is not None for a in arrays) else None
        return cls(**merged)


class LocalizationResult(BaseModel):
    """
    Output of the localization pipeline for a batch of windows
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    probabilities: np.ndarray = Field(..., description="(N,) ensemble detection probability")
    detected: np.ndarray = Field(..., description="(N,) detection flags")
    status: np.ndarray = Field(..., description="(N, L) binary activation status")
    cam: np.ndarray = Field(..., description="(N, L) normalized ensemble CAM, zeros where undetected")
    attention: np.ndarray = Field(..., description="(N, L) sigmoid attention values, zeros where undetected")
