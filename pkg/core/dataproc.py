import numpy as np
import pandas as pd
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple
from loguru import logger

from models.config import ApplianceProfile
from models.errors import DataValidationError
from models.series import PowerSeries, WindowDataset

KW_SCALE = 1000.0


def read_power_csv(path: Path, house_id: Optional[str] = None) -> Tuple[PowerSeries, Optional[PowerSeries]]:
    """
    Read a ``timestamp,aggregate_w[,appliance_w]`` CSV.

    Timestamps may be epoch seconds or ISO-8601 strings.

    Returns:
        the aggregate series and, when the column exists, the appliance series
    """
    path = Path(path)
    frame = pd.read_csv(path, encoding="utf-8")
    missing = {"timestamp", "aggregate_w"} - set(frame.columns)
    if missing:
        raise DataValidationError(f"{path}: missing column(s) {sorted(missing)}")
    timestamps = parse_timestamps(frame["timestamp"])
    house_id = house_id or path.stem
    interval = native_interval(timestamps)
    aggregate = PowerSeries(timestamps=timestamps, values=frame["aggregate_w"].to_numpy(float),
                            interval_s=interval, house_id=house_id)
    appliance = None
    if "appliance_w" in frame.columns:
        appliance = PowerSeries(timestamps=timestamps, values=frame["appliance_w"].to_numpy(float),
                                interval_s=interval, house_id=house_id)
    logger.info(f"Read {len(frame)} readings for house {house_id} from {path}")
    return aggregate, appliance


def parse_timestamps(column: pd.Series) -> np.ndarray:
    if pd.api.types.is_numeric_dtype(column):
        return column.to_numpy(dtype=np.int64)
    parsed = pd.to_datetime(column, utc=True)
    return (parsed - pd.Timestamp(0, tz="UTC")).dt.total_seconds().to_numpy().astype(np.int64)


def native_interval(timestamps: np.ndarray) -> float:
    if len(timestamps) < 2:
        return 0.0
    return float(np.median(np.diff(timestamps)))


def resample(raw: PowerSeries, interval_s: int) -> PowerSeries:
    """
    Average readings into round ``interval_s`` bins [t, t + interval_s).

    Bins without a reading are missing (NaN).
    """
    if interval_s <= 0:
        raise DataValidationError(f"target interval must be positive, got {interval_s}")
    if len(raw) and (np.diff(raw.timestamps) <= 0).any():
        raise DataValidationError(f"house {raw.house_id}: timestamps are not strictly increasing")
    if 0 < raw.interval_s and interval_s < raw.interval_s:
        logger.warning(f"house {raw.house_id}: resampling {raw.interval_s}s readings to a finer {interval_s}s grid")
    if not len(raw):
        return PowerSeries(timestamps=raw.timestamps, values=raw.values, interval_s=interval_s, house_id=raw.house_id)
    series = pd.Series(raw.values, index=pd.to_datetime(raw.timestamps, unit="s"))
    binned = series.resample(f"{int(interval_s)}s", origin="epoch", label="left", closed="left").mean()
    timestamps = (binned.index - pd.Timestamp(0)).total_seconds().to_numpy().astype(np.int64)
    return PowerSeries(timestamps=timestamps, values=binned.to_numpy(dtype=float),
                       interval_s=float(interval_s), house_id=raw.house_id)


def forward_fill(s: PowerSeries, max_ffill_s: float) -> PowerSeries:
    """
    Fill missing runs lasting at most ``max_ffill_s`` with the last observed value.

    Longer runs stay entirely missing.
    """
    values = pd.Series(s.values)
    missing = values.isna()
    run_id = (~missing).cumsum()
    run_length = missing.groupby(run_id).transform("sum")
    fillable = missing & (run_length * s.interval_s <= max_ffill_s)
    filled = values.where(~fillable, values.ffill())
    return s.with_values(filled.to_numpy(dtype=float))


def derive_status(appliance_power: PowerSeries, profile: ApplianceProfile) -> np.ndarray:
    """ON (1) wherever the appliance draws at least its ON threshold."""
    with np.errstate(invalid="ignore"):
        return (appliance_power.values >= profile.on_threshold_w).astype(np.int8)


def make_windows(agg: PowerSeries, status: Optional[np.ndarray] = None, window_length: int = 510,
                 appliance_power: Optional[PowerSeries] = None) -> WindowDataset:
    """
    Slice a house into non-overlapping windows of ``window_length``.

    The trailing remainder is dropped, windows with a missing aggregate (or
    appliance) value are discarded, and the network input is aggregate / 1000.
    """
    if window_length <= 0:
        raise DataValidationError(f"window length must be positive, got {window_length}")
    n_windows = len(agg) // window_length
    usable = n_windows * window_length

    def tile(array: np.ndarray) -> np.ndarray:
        return np.asarray(array)[:usable].reshape(n_windows, window_length)

    aggregate = tile(agg.values)
    keep = ~np.isnan(aggregate).any(axis=1)
    appliance = None
    if appliance_power is not None:
        appliance = tile(appliance_power.values)
        keep &= ~np.isnan(appliance).any(axis=1)
    strong = tile(status).astype(np.int8) if status is not None else None

    dropped = int(n_windows - keep.sum())
    if dropped:
        logger.debug(f"house {agg.house_id}: discarded {dropped} of {n_windows} windows with missing values")
    aggregate = aggregate[keep]
    return WindowDataset(
        windows=aggregate / KW_SCALE,
        aggregate_w=aggregate,
        timestamps=tile(agg.timestamps)[keep],
        house_ids=np.repeat(np.array([agg.house_id]), int(keep.sum())),
        weak_labels=strong[keep].any(axis=1).astype(np.int8) if strong is not None else None,
        strong_status=strong[keep] if strong is not None else None,
        appliance_power=appliance[keep] if appliance is not None else None,
    )


def broadcast_possession_label(house_series: PowerSeries, possession: int, window_length: int) -> WindowDataset:
    """Every window of the house carries the house's possession label."""
    if possession not in (0, 1):
        raise DataValidationError(f"possession label must be 0 or 1, got {possession}")
    dataset = make_windows(house_series, window_length=window_length)
    dataset.weak_labels = np.full(len(dataset), possession, dtype=np.int8)
    return dataset


def balance_undersample(d: WindowDataset, seed: int) -> WindowDataset:
    """Randomly drop majority-class windows until both classes are equally represented."""
    counts = d.class_counts()
    if not counts or min(counts.values()) == 0:
        raise DataValidationError(f"cannot balance a dataset holding a single class: {counts}")
    rng = np.random.default_rng(seed)
    minority = min(counts, key=lambda label: (counts[label], label))
    keep = [np.flatnonzero(d.weak_labels == minority)]
    majority_idx = np.flatnonzero(d.weak_labels != minority)
    keep.append(rng.choice(majority_idx, size=counts[minority], replace=False))
    selected = np.sort(np.concatenate(keep))
    logger.info(f"Balanced {counts} -> {counts[minority]} windows per class")
    return d.subset(selected)


def house_classes(per_house: Dict[str, WindowDataset]) -> Dict[str, Set[int]]:
    """Weak-label classes present in each house's windows."""
    return {
        house: set(np.unique(d.weak_labels).astype(int).tolist()) if d.weak_labels is not None else set()
        for house, d in per_house.items()
    }


def _classes_of(houses: Iterable[str], classes: Optional[Mapping[str, Set[int]]]) -> Set[int]:
    return set().union(*(classes.get(h, set()) for h in houses)) if classes else set()


def _can_leave(pool: List[str], house: str, classes: Optional[Mapping[str, Set[int]]], wanted: Set[int]) -> bool:
    """Whether the pool still holds every wanted class without ``house``."""
    return wanted <= _classes_of((o for o in pool if o != house), classes)


def _draw_covering(pool: List[str], classes: Mapping[str, Set[int]], wanted: Set[int]) -> List[str]:
    """Houses taken from ``pool`` until ``wanted`` is covered, leaving the rest of the pool covering it too."""
    picked: List[str] = []
    missing = set(wanted)
    while missing:
        candidates = [h for h in pool if classes.get(h, set()) & missing and _can_leave(pool, h, classes, wanted)]
        if not candidates:
            break
        best = max(candidates, key=lambda h: len(classes[h] & missing))
        pool.remove(best)
        picked.append(best)
        missing -= classes[best]
    return picked


def _draw_in_order(pool: List[str], count: int, classes: Optional[Mapping[str, Set[int]]],
                   wanted: Set[int]) -> List[str]:
    picked: List[str] = []
    for house in list(pool):
        if len(picked) >= count:
            break
        if _can_leave(pool, house, classes, wanted):
            pool.remove(house)
            picked.append(house)
    return picked


def split_houses(houses: Sequence[str], ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2),
                 seed: int = 0, classes: Optional[Mapping[str, Set[int]]] = None
                 ) -> Tuple[List[str], List[str], List[str]]:
    """
    Seeded split of house ids into disjoint train / validation / test sets.

    Validation and test sizes are rounded (half up) and take at least one house each.
    With ``classes`` (weak-label classes per house) validation, then test, first
    draw houses until they hold every class, as long as the houses left for
    training still hold every class; they may grow past their ratio to do so.
    """
    houses = list(houses)
    if len(houses) < 3:
        raise DataValidationError(f"need at least 3 houses to split, got {len(houses)}")
    if len(set(houses)) != len(houses):
        raise DataValidationError("house ids must be unique")
    n_houses = len(houses)
    n_val = max(1, int(np.floor(n_houses * ratios[1] + 0.5)))
    n_test = max(1, int(np.floor(n_houses * ratios[2] + 0.5)))
    if n_val + n_test >= n_houses:
        n_val, n_test = 1, 1
    order = np.random.default_rng(seed).permutation(n_houses)
    pool = [houses[i] for i in order]

    wanted = _classes_of(houses, classes)
    validation = _draw_covering(pool, classes, wanted) if wanted else []
    test = _draw_covering(pool, classes, wanted) if wanted else []
    # the ratio split fills what the class cover left open, test first
    test += _draw_in_order(pool, n_test - len(test), classes, wanted)
    validation += _draw_in_order(pool, n_val - len(validation), classes, wanted)
    if not pool:
        raise DataValidationError(f"no house left for training after covering classes {sorted(wanted)}")
    train, validation, test = sorted(pool), sorted(validation), sorted(test)
    for name, part in (("validation", validation), ("test", test)):
        held = _classes_of(part, classes)
        if held != wanted:
            logger.warning(f"{name} houses {part} hold classes {sorted(held)} only")
    logger.info(f"Split {n_houses} houses into {len(train)}/{len(validation)}/{len(test)}")
    return train, validation, test


def preprocess_house(aggregate: PowerSeries, appliance: Optional[PowerSeries], profile: ApplianceProfile,
                     interval_s: int, window_length: int) -> WindowDataset:
    """Resample, forward fill, derive ground truth and window one house."""
    agg = forward_fill(resample(aggregate, interval_s), profile.max_ffill_s)
    if appliance is None:
        return make_windows(agg, window_length=window_length)
    app = forward_fill(resample(appliance, interval_s), profile.max_ffill_s)
    if not np.array_equal(app.timestamps, agg.timestamps):
        raise DataValidationError(f"house {aggregate.house_id}: appliance and aggregate grids differ")
    return make_windows(agg, derive_status(app, profile), window_length, appliance_power=app)


def assemble(per_house: Dict[str, WindowDataset], houses: Iterable[str]) -> Optional[WindowDataset]:
    """Merge the windows of ``houses``; houses without usable windows are skipped."""
    parts = []
    for house in houses:
        dataset = per_house.get(house)
        if dataset is None or len(dataset) == 0:
            logger.warning(f"House {house} has no usable windows and is excluded")
            continue
        parts.append(dataset)
    return WindowDataset.concat(parts) if parts else None
