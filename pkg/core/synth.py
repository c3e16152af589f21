import numpy as np
import pandas as pd
from pathlib import Path
from typing import Dict, List
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from helpers.json_io import write_json
from helpers.seeding import derive_seed, spawn_seeds
from models.config import SignatureSpec, SyntheticConfig

SECONDS_PER_DAY = 86400
DATASET_FORMAT_VERSION = 1
DAYTIME_WEIGHT = 1.0
NIGHT_WEIGHT = 0.2


class HouseSample(BaseModel):
    """
    One generated house with its exact ground truth
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    house_id: str
    timestamps: np.ndarray = Field(..., description="Epoch seconds")
    aggregate_w: np.ndarray = Field(..., description="Base + appliances + noise, clipped at 0")
    base_w: np.ndarray = Field(..., description="Base load")
    noise_w: np.ndarray = Field(..., description="Noise drawn for every sample (before clipping)")
    appliance_w: Dict[str, np.ndarray] = Field(default={}, description="Per-appliance power")
    status: Dict[str, np.ndarray] = Field(default={}, description="Per-appliance ON status")
    activations: Dict[str, List[int]] = Field(default={}, description="Activation start indices")
    possession: Dict[str, int] = Field(default={}, description="1 when the house owns the appliance")


def signature_profile(signature: SignatureSpec) -> np.ndarray:
    """Power drawn over one activation, sample by sample."""
    duration = signature.duration_steps
    if signature.kind == "pulse":
        return np.full(duration, signature.peak_w)
    if signature.kind == "ramp":
        return np.linspace(signature.peak_w / 2, signature.peak_w, duration)
    shares = np.array([share for share, _ in signature.phases], dtype=float)
    bounds = np.rint(np.cumsum(shares) / shares.sum() * duration).astype(int)
    profile = np.empty(duration)
    start = 0
    for (_, level), stop in zip(signature.phases, bounds):
        profile[start:stop] = level * signature.peak_w
        start = stop
    return profile


def start_weights(steps_per_day: int, interval_s: int, diurnal: bool) -> np.ndarray:
    if not diurnal:
        return np.full(steps_per_day, 1.0 / steps_per_day)
    hours = np.arange(steps_per_day) * interval_s / 3600.0
    weights = np.where((hours >= 7) & (hours < 22), DAYTIME_WEIGHT, NIGHT_WEIGHT)
    return weights / weights.sum()


def base_load(timestamps: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    phase = 2 * np.pi * (timestamps % SECONDS_PER_DAY) / SECONDS_PER_DAY
    return np.clip(cfg.base_level_w + cfg.base_amplitude_w * np.sin(phase - np.pi / 2), 0, None)


def draw_activations(rng: np.random.Generator, days: int, steps_per_day: int, rate: float,
                     weights: np.ndarray) -> List[int]:
    starts: List[int] = []
    for day in range(days):
        count = rng.poisson(rate)
        offsets = rng.choice(steps_per_day, size=count, p=weights)
        starts.extend(int(day * steps_per_day + o) for o in offsets)
    return sorted(starts)


def generate_house(cfg: SyntheticConfig, index: int, seed: int, owners: Dict[str, set]) -> HouseSample:
    rng = np.random.default_rng(seed)
    steps_per_day = SECONDS_PER_DAY // cfg.interval_s
    n_steps = steps_per_day * cfg.days
    timestamps = cfg.start_timestamp + np.arange(n_steps, dtype=np.int64) * cfg.interval_s
    base = base_load(timestamps, cfg)
    weights = start_weights(steps_per_day, cfg.interval_s, cfg.diurnal)

    sample = HouseSample(
        house_id=f"house_{index:02d}",
        timestamps=timestamps,
        aggregate_w=np.zeros(n_steps),
        base_w=base,
        noise_w=np.zeros(n_steps),
    )
    total = base.copy()
    for appliance in cfg.appliances:
        name = appliance.profile.name
        owned = index in owners[name]
        power = np.zeros(n_steps)
        starts: List[int] = []
        if owned:
            shape = signature_profile(appliance.signature)
            starts = draw_activations(rng, cfg.days, steps_per_day, appliance.signature.activations_per_day, weights)
            for start in starts:
                stop = min(start + len(shape), n_steps)
                power[start:stop] = np.maximum(power[start:stop], shape[:stop - start])
        sample.appliance_w[name] = power
        sample.status[name] = (power > 0).astype(np.int8)
        sample.activations[name] = starts
        sample.possession[name] = int(owned)
        total += power

    noise = rng.normal(0.0, cfg.noise_sigma_w, n_steps) if cfg.noise_sigma_w > 0 else np.zeros(n_steps)
    sample.noise_w = noise
    sample.aggregate_w = np.clip(total + noise, 0, None)
    return sample


def generate(cfg: SyntheticConfig) -> List[HouseSample]:
    """
    Build every house of the scenario; fully determined by ``cfg.seed``.

    Owners of each appliance are drawn first, then every house gets its own
    pre-assigned seed.
    """
    owners: Dict[str, set] = {}
    for position, appliance in enumerate(cfg.appliances):
        rng = np.random.default_rng(derive_seed(cfg.seed, 1_000_000 + position))
        owners[appliance.profile.name] = set(rng.permutation(cfg.num_houses)[:appliance.num_owners].tolist())
    houses = [
        generate_house(cfg, index, seed, owners)
        for index, seed in enumerate(spawn_seeds(cfg.seed, cfg.num_houses))
    ]
    logger.info(f"Generated scenario {cfg.name}: {cfg.num_houses} houses x {cfg.days} days")
    return houses


def write_dataset(houses: List[HouseSample], cfg: SyntheticConfig, out_dir: Path) -> Path:
    """
    Write ``<house>.csv`` (timestamp, aggregate_w, appliance_w), ``<house>_status.csv``
    (timestamp, status, appliance_w) and ``manifest.json``.

    ``appliance_w``/``status`` refer to the first appliance of the roster; other
    appliances get ``<name>_w`` columns.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = cfg.appliances[0].profile.name if cfg.appliances else None
    entries = []
    for house in houses:
        frame = pd.DataFrame({"timestamp": house.timestamps, "aggregate_w": house.aggregate_w})
        truth = pd.DataFrame({"timestamp": house.timestamps})
        if target:
            frame["appliance_w"] = house.appliance_w[target]
            truth["status"] = house.status[target]
            truth["appliance_w"] = house.appliance_w[target]
        for name, power in house.appliance_w.items():
            if name != target:
                frame[f"{name}_w"] = power
        data_file = f"{house.house_id}.csv"
        truth_file = f"{house.house_id}_status.csv"
        frame.to_csv(out_dir / data_file, index=False, float_format="%.3f", lineterminator="\n")
        truth.to_csv(out_dir / truth_file, index=False, float_format="%.3f", lineterminator="\n")
        entries.append({
            "house_id": house.house_id,
            "data": data_file,
            "truth": truth_file,
            "possession": house.possession,
            "activations": {name: len(starts) for name, starts in house.activations.items()},
        })
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "command": "synth",
        "seed": cfg.seed,
        "target_appliance": target,
        "config": cfg.model_dump(mode="json"),
        "houses": entries,
    }
    path = write_json(out_dir / "manifest.json", manifest)
    logger.info(f"Wrote {len(houses)} houses and manifest to {out_dir}")
    return path
