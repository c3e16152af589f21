from pydantic import BaseModel, Field, model_validator, field_validator
from typing import List, Optional, Tuple, Literal

DEFAULT_KERNELS: Tuple[int, ...] = (5, 7, 9, 15, 25)
RESNET_FILTERS: Tuple[int, ...] = (64, 128, 128)


class ApplianceProfile(BaseModel):
    """
    Per-appliance constants used for ground truth and power estimation
    """
    name: str = Field(..., description="Appliance name, e.g. dishwasher")
    on_threshold_w: float = Field(..., gt=0, description="Power at or above which the appliance counts as ON (W)")
    mean_power_w: float = Field(..., gt=0, description="Mean ON power P_a used for power estimation (W)")
    max_ffill_s: float = Field(..., ge=0, description="Longest missing run that forward fill may bridge (s)")

    @model_validator(mode="after")
    def _threshold_below_mean(self):
        if self.on_threshold_w > self.mean_power_w:
            raise ValueError(
                f"on_threshold_w ({self.on_threshold_w}) must not exceed mean_power_w ({self.mean_power_w})"
            )
        return self


class ResNetSpec(BaseModel):
    """
    Architecture of one ensemble member, parameterized by a single kernel size
    """
    kernel_size: int = Field(..., ge=1, description="Kernel size k_p shared by every convolution")
    filters: Tuple[int, ...] = Field(RESNET_FILTERS, description="Filters of the three residual blocks")
    blocks: int = Field(3, description="Number of residual blocks")
    convs_per_block: int = Field(3, description="Convolutional blocks inside each residual block")
    num_classes: int = Field(2, description="Number of output classes")
    input_channels: int = Field(1, description="Channels of the input series")

    @model_validator(mode="after")
    def _fixed_architecture(self):
        if tuple(self.filters) != RESNET_FILTERS:
            raise ValueError(f"filters must be {RESNET_FILTERS}, got {tuple(self.filters)}")
        if self.blocks != 3 or self.convs_per_block != 3:
            raise ValueError("the classifier uses exactly 3 residual blocks of 3 convolutional blocks")
        if self.num_classes != 2 or self.input_channels != 1:
            raise ValueError("the classifier is binary over a univariate input")
        return self


class TrainConfig(BaseModel):
    """
    Ensemble training parameters
    """
    kernel_sizes: List[int] = Field(default=list(DEFAULT_KERNELS), description="Kernel set K_p")
    trials: int = Field(3, ge=1, description="Candidates trained per kernel size")
    ensemble_size: int = Field(5, ge=1, description="Number n of selected members")
    max_epochs: int = Field(50, ge=1, description="Epoch budget per candidate")
    patience: int = Field(10, ge=1, description="Early stopping patience on the val-sub loss")
    batch_size: int = Field(64, ge=2, description="Mini-batch size (batch norm needs two samples)")
    learning_rate: float = Field(1e-3, gt=0, description="Adam learning rate")
    val_sub_fraction: float = Field(0.2, gt=0, lt=1, description="Share of the training set held out for early stopping")
    workers: int = Field(4, ge=1, description="Candidates trained concurrently")
    precision: Literal["float32", "float64"] = Field("float32", description="Arithmetic precision of the engine")
    detection_threshold: float = Field(0.5, ge=0, le=1, description="Ensemble probability above which the appliance is detected")
    progress: bool = Field(True, description="Show a progress bar while candidates train")
    seed: int = Field(0, description="Master seed")

    @field_validator("kernel_sizes")
    @classmethod
    def _kernels_positive(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("kernel_sizes must not be empty")
        if any(k < 1 for k in value):
            raise ValueError(f"kernel sizes must be positive, got {value}")
        if len(set(value)) != len(value):
            raise ValueError(f"kernel sizes must be distinct, got {value}")
        return value

    @model_validator(mode="after")
    def _enough_candidates(self):
        if self.ensemble_size > self.candidate_count:
            raise ValueError(
                f"ensemble_size ({self.ensemble_size}) exceeds the {self.candidate_count} trained candidates"
            )
        return self

    @property
    def candidate_count(self) -> int:
        return len(self.kernel_sizes) * self.trials


class LocalizerConfig(BaseModel):
    """
    Options of the CAM-to-status step
    """
    attention: bool = Field(True, description="Multiply the ensemble CAM with the input before binarizing")
    inclusive_threshold: bool = Field(False, description="Use Sigmoid >= 0.5 instead of the strict > 0.5 rule")


class SignatureSpec(BaseModel):
    """
    Shape and usage rate of one synthetic appliance
    """
    kind: Literal["pulse", "multi_phase", "ramp"] = Field("multi_phase", description="Signature family")
    peak_w: float = Field(..., gt=0, description="Peak power (W)")
    duration_steps: int = Field(..., ge=1, description="Activation length in samples")
    phases: List[Tuple[float, float]] = Field(
        default=[(0.6, 1.0), (0.4, 0.5)],
        description="multi_phase only: (share of duration, share of peak) per phase",
    )
    activations_per_day: float = Field(0.7, ge=0, description="Mean number of activations per day")

    @field_validator("phases")
    @classmethod
    def _phases_valid(cls, value: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        if not value:
            raise ValueError("phases must not be empty")
        if any(share <= 0 or level <= 0 or level > 1 for share, level in value):
            raise ValueError("phase shares must be positive and levels in (0, 1]")
        return value

    @property
    def min_power_w(self) -> float:
        """Lowest power the signature reaches while active"""
        if self.kind == "pulse":
            return self.peak_w
        if self.kind == "ramp":
            return self.peak_w / 2
        return self.peak_w * min(level for _, level in self.phases)


class SyntheticAppliance(BaseModel):
    profile: ApplianceProfile
    signature: SignatureSpec
    num_owners: int = Field(..., ge=0, description="Houses owning this appliance")


class SyntheticConfig(BaseModel):
    """
    Declarative synthetic smart-meter scenario
    """
    name: str = Field("easy-dishwasher", description="Scenario name")
    num_houses: int = Field(12, ge=1, description="Number of houses")
    days: int = Field(30, ge=1, description="Days recorded per house")
    interval_s: int = Field(60, gt=0, description="Meter interval (s)")
    start_timestamp: int = Field(1_609_459_200, description="Epoch second of the first sample")
    base_level_w: float = Field(200.0, ge=0, description="Mean base load (W)")
    base_amplitude_w: float = Field(100.0, ge=0, description="Amplitude of the daily base-load sinusoid (W)")
    noise_sigma_w: float = Field(30.0, ge=0, description="Gaussian noise standard deviation (W)")
    diurnal: bool = Field(True, description="Draw activation starts mostly between 7:00 and 22:00")
    appliances: List[SyntheticAppliance] = Field(default_factory=list, description="Appliance roster")
    seed: int = Field(0, description="Master seed")

    @model_validator(mode="after")
    def _roster_fits(self):
        for appliance in self.appliances:
            if appliance.num_owners > self.num_houses:
                raise ValueError(
                    f"appliances.{appliance.profile.name}.num_owners exceeds num_houses ({self.num_houses})"
                )
            if appliance.signature.min_power_w < appliance.profile.on_threshold_w:
                raise ValueError(
                    f"appliances.{appliance.profile.name}.signature drops to {appliance.signature.min_power_w} W, "
                    f"below on_threshold_w ({appliance.profile.on_threshold_w} W)"
                )
        return self

    @classmethod
    def easy_dishwasher(cls, seed: int = 0) -> "SyntheticConfig":
        """12 houses, 6 owning a two-phase 2000 W dishwasher running 90 minutes"""
        return cls(
            seed=seed,
            appliances=[
                SyntheticAppliance(
                    profile=ApplianceProfile(name="dishwasher", on_threshold_w=300, mean_power_w=800, max_ffill_s=180),
                    signature=SignatureSpec(kind="multi_phase", peak_w=2000, duration_steps=90, activations_per_day=0.7),
                    num_owners=6,
                )
            ],
        )


class ExperimentConfig(BaseModel):
    """
    Everything a command needs to reproduce a run
    """
    data_dir: Optional[str] = Field(None, description="Directory holding house CSVs and the dataset manifest")
    model_dir: Optional[str] = Field(None, description="Directory of the ensemble archive")
    output_dir: Optional[str] = Field(None, description="Directory for reports and predictions")
    appliance: str = Field("dishwasher", description="Profile name of the target appliance")
    profiles_file: Optional[str] = Field(None, description="JSON file overriding the built-in profiles")
    train: TrainConfig = Field(default_factory=TrainConfig, description="Ensemble training parameters")
    localizer: LocalizerConfig = Field(default_factory=LocalizerConfig, description="Localization options")
    window_length: int = Field(510, ge=1, description="Tumbling window length L")
    interval_s: int = Field(60, gt=0, description="Resampling interval (s)")
    split_ratios: Tuple[float, float, float] = Field((0.7, 0.1, 0.2), description="Train/validation/test house ratios")
    possession_only: bool = Field(False, description="Train on house possession labels broadcast to every window")
    balance: bool = Field(True, description="Undersample the majority class of the training windows")
    cache_windows: bool = Field(True, description="Keep preprocessed house windows under <output_dir>/windows and reuse them")
    seed: int = Field(0, description="Master seed")

    @field_validator("split_ratios")
    @classmethod
    def _ratios_sum_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r <= 0 for r in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"split_ratios must be positive and sum to 1, got {value}")
        return value
