from pydantic import BaseModel, Field, model_validator
from typing import Dict, List, Optional


class ConfusionCounts(BaseModel):
    """
    Binary confusion counts over the evaluated items
    """
    tp: int = Field(0, ge=0, description="True positives")
    fp: int = Field(0, ge=0, description="False positives")
    tn: int = Field(0, ge=0, description="True negatives")
    fn: int = Field(0, ge=0, description="False negatives")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class StatusScores(BaseModel):
    """
    Localization scores on the ON class
    """
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    f1: float = Field(..., ge=0, le=1)
    counts: ConfusionCounts


class EnergyScores(BaseModel):
    """
    Energy estimation scores (Watts, except the matching ratio)
    """
    mae: float = Field(..., ge=0, description="Mean absolute error (W)")
    rmse: float = Field(..., ge=0, description="Root mean squared error (W)")
    matching_ratio: float = Field(..., ge=0, le=1, description="Sum of minima over sum of maxima")


class MetricsReport(BaseModel):
    """
    Full evaluation report: localization, energy and detection scores
    """
    appliance: str = Field(..., description="Evaluated appliance")
    f1: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    balanced_accuracy: float = Field(..., ge=0, le=1, description="Window-level detection balanced accuracy")
    mae: Optional[float] = Field(None, description="Mean absolute error (W)")
    rmse: Optional[float] = Field(None, description="Root mean squared error (W)")
    matching_ratio: Optional[float] = Field(None, description="Matching ratio")
    counts: ConfusionCounts = Field(..., description="Per-timestamp confusion counts")
    detection_counts: ConfusionCounts = Field(..., description="Per-window detection confusion counts")
    timestamps_evaluated: int = Field(..., ge=0)
    windows_evaluated: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _counts_match(self):
        if self.counts.total != self.timestamps_evaluated:
            raise ValueError("confusion counts must cover every evaluated timestamp")
        if self.detection_counts.total != self.windows_evaluated:
            raise ValueError("detection counts must cover every evaluated window")
        return self


class CandidateResult(BaseModel):
    """
    Outcome of training one ensemble candidate
    """
    kernel_size: int
    trial: int
    seed: int
    epochs_run: int
    best_val_sub_loss: float
    validation_loss: float
    selected: bool = False
    wall_clock_s: float = 0.0


class TrainingReport(BaseModel):
    """
    Summary written next to an ensemble archive
    """
    appliance: str
    candidates: List[CandidateResult] = Field(default=[], description="Every trained candidate in (kernel, trial) order")
    selected: List[Dict[str, int]] = Field(default=[], description="(kernel_size, trial) of the selected members, best first")
    validation_balanced_accuracy: Optional[float] = Field(None, description="Detection balanced accuracy of the ensemble on validation")
    validation_counts: Optional[ConfusionCounts] = None
    houses: Dict[str, List[str]] = Field(default={}, description="House split used for training")
    wall_clock_s: float = 0.0
