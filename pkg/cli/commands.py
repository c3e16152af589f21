import functools
import hashlib
import os
import time
import click
import numpy as np
import pandas as pd
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
from loguru import logger
from pydantic import ValidationError

from core.annotator import LocalizationAnnotator
from core.dataproc import (
    assemble,
    broadcast_possession_label,
    balance_undersample,
    forward_fill,
    house_classes,
    make_windows,
    preprocess_house,
    read_power_csv,
    resample,
    split_houses,
)
from core.ensemble import train_ensemble
from core.localizer import Localizer, estimate_power
from core.metrics import build_report, confusion_counts, balanced_accuracy
from core.report_generator import ReportGenerator
from core.synth import generate, write_dataset
from db.archive import (
    MODEL_FORMAT_VERSION,
    DATASET_FORMAT_VERSION,
    ENSEMBLE_FORMAT_VERSION,
    load_ensemble,
    load_dataset,
    load_ensemble_manifest,
    save_dataset,
    save_ensemble,
)
from db.init_profiles import resolve_profile
from helpers.json_io import read_json, write_json
from models.config import ApplianceProfile, ExperimentConfig, LocalizerConfig, SyntheticConfig
from models.errors import CamalError, ConfigurationError, DataValidationError, ShapeError
from models.report import TrainingReport
from models.series import WindowDataset

MANIFEST_FORMAT_VERSION = 1
WINDOW_CACHE_DIR = "windows"
PATH_ENV = {"data_dir": "CAMAL_DATA_DIR", "model_dir": "CAMAL_MODEL_DIR", "output_dir": "CAMAL_OUTPUT_DIR"}


def handle_errors(command):
    """
    Map failures to exit codes: configuration problems exit 2, runtime failures exit 1.
    """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (click.UsageError, click.ClickException):
            raise
        except (ValidationError, ConfigurationError, KeyError) as e:
            logger.error(f"Invalid configuration: {str(e)}")
            raise click.UsageError(str(e))
        except (CamalError, OSError, ValueError) as e:
            logger.error(f"{command.__name__} failed: {str(e)}")
            raise click.ClickException(str(e))
    return wrapper


def _config_payload(config_path: Optional[str]) -> Dict[str, Any]:
    """A bare config document, or the ``config`` section of a command manifest."""
    if not config_path:
        return {}
    path = Path(config_path)
    if not path.exists():
        raise click.UsageError(f"config file not found: {path}")
    payload = read_json(path)
    if "config" in payload and "command" in payload:
        return payload["config"]
    return payload


def resolve_experiment(config_path: Optional[str], overrides: Dict[str, Any],
                       train_overrides: Dict[str, Any]) -> ExperimentConfig:
    """
    Precedence: CLI flag > environment variable (paths only) > config file > defaults.
    """
    payload = _config_payload(config_path)
    for field, env_name in PATH_ENV.items():
        if os.getenv(env_name):
            payload[field] = os.getenv(env_name)
    payload.update({k: v for k, v in overrides.items() if v is not None})
    train = dict(payload.get("train") or {})
    train.update({k: v for k, v in train_overrides.items() if v is not None})
    train["seed"] = payload.get("seed", train.get("seed", 0))
    payload["train"] = train
    return ExperimentConfig.model_validate(payload)


def write_command_manifest(path: Path, command: str, config: Any, extra: Optional[Dict[str, Any]] = None) -> Path:
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "command": command,
        "model_format_version": MODEL_FORMAT_VERSION,
        "ensemble_format_version": ENSEMBLE_FORMAT_VERSION,
        "config": config.model_dump(mode="json") if hasattr(config, "model_dump") else config,
        **(extra or {}),
    }
    return write_json(path, manifest)


def _require_dir(value: Optional[str], name: str) -> Path:
    if not value:
        raise click.UsageError(f"{name} is not set (flag, {PATH_ENV.get(name, '')} or config file)")
    path = Path(value)
    if not path.is_dir():
        raise click.UsageError(f"{name} does not exist: {path}")
    return path


def discover_houses(data_dir: Path) -> List[Dict[str, Any]]:
    """House entries from the dataset manifest, or every non-truth CSV in the directory."""
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        return read_json(manifest_path)["houses"]
    possession_path = data_dir / "possession.json"
    possession = read_json(possession_path) if possession_path.exists() else {}
    return [
        {"house_id": path.stem, "data": path.name, "possession": possession.get(path.stem, {})}
        for path in sorted(data_dir.glob("*.csv")) if not path.stem.endswith("_status")
    ]


def _possession_dataset(aggregate, house: Dict[str, Any], cfg: ExperimentConfig, profile: ApplianceProfile) -> WindowDataset:
    if cfg.appliance not in house.get("possession", {}):
        raise DataValidationError(f"house {house['house_id']} has no possession label for {cfg.appliance}")
    series = forward_fill(resample(aggregate, cfg.interval_s), profile.max_ffill_s)
    return broadcast_possession_label(series, int(house["possession"][cfg.appliance]), cfg.window_length)


def _windows_key(data_file: Path, house: Dict[str, Any], cfg: ExperimentConfig, profile: ApplianceProfile) -> Dict[str, Any]:
    """Everything the windows of one house depend on."""
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "sha256": hashlib.sha256(data_file.read_bytes()).hexdigest(),
        "profile": profile.model_dump(mode="json"),
        "window_length": cfg.window_length,
        "interval_s": cfg.interval_s,
        "possession_only": cfg.possession_only,
        "possession": house.get("possession", {}).get(cfg.appliance) if cfg.possession_only else None,
    }


def house_windows(data_path: Path, house: Dict[str, Any], cfg: ExperimentConfig, profile: ApplianceProfile,
                  cache_dir: Optional[Path] = None) -> WindowDataset:
    """
    Labelled windows of one house, read from ``cache_dir`` when an earlier run
    preprocessed the same file with the same settings.
    """
    house_id = house["house_id"]
    data_file = data_path / house["data"]
    key = _windows_key(data_file, house, cfg, profile)
    if cache_dir is not None:
        cached, meta = cache_dir / f"{house_id}.npz", cache_dir / f"{house_id}.json"
        if cached.exists() and meta.exists() and read_json(meta) == key:
            logger.info(f"Loaded cached windows of house {house_id} from {cached}")
            return load_dataset(cached)

    aggregate, appliance_series = read_power_csv(data_file, house_id)
    if cfg.possession_only:
        dataset = _possession_dataset(aggregate, house, cfg, profile)
    else:
        if appliance_series is None:
            raise DataValidationError(f"house {house_id} has no appliance_w column for window labels")
        dataset = preprocess_house(aggregate, appliance_series, profile, cfg.interval_s, cfg.window_length)

    if cache_dir is not None:
        save_dataset(dataset, cache_dir / f"{house_id}.npz")
        write_json(cache_dir / f"{house_id}.json", key)
    return dataset


def _kernel_list(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(k) for k in value.split(",") if k.strip()]
    except ValueError:
        raise click.BadParameter(f"kernels must be comma separated integers, got '{value}'")


@click.command("synth")
@click.option("--config", "config_path", default=None, help="Scenario JSON (or a synth manifest)")
@click.option("--out", "out_dir", default=None, help="Output directory (default: $CAMAL_DATA_DIR or data/<scenario>)")
@click.option("--seed", type=int, default=None, help="Override the scenario seed")
@handle_errors
def synth_command(config_path: Optional[str], out_dir: Optional[str], seed: Optional[int]):
    """Generate a labelled synthetic smart-meter dataset."""
    payload = _config_payload(config_path)
    cfg = SyntheticConfig.model_validate(payload) if payload else SyntheticConfig.easy_dishwasher()
    if seed is not None:
        cfg = SyntheticConfig.model_validate({**cfg.model_dump(), "seed": seed})
    target = Path(out_dir or os.getenv("CAMAL_DATA_DIR") or Path("data") / cfg.name)
    houses = generate(cfg)
    manifest = write_dataset(houses, cfg, target)
    click.echo(f"Wrote {len(houses)} houses to {target} ({manifest.name})")


@click.command("train")
@click.option("--config", "config_path", default=None, help="Experiment JSON (or a train manifest)")
@click.option("--data-dir", default=None, help="Dataset directory")
@click.option("--model-dir", default=None, help="Where to write the ensemble archive")
@click.option("--out", "output_dir", default=None, help="Where to write the training report and manifest")
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--appliance", default=None, help="Target appliance profile")
@click.option("--kernels", default=None, help="Comma separated kernel sizes")
@click.option("--trials", type=int, default=None, help="Candidates per kernel size")
@click.option("--ensemble-size", type=int, default=None, help="Number of selected members")
@click.option("--max-epochs", type=int, default=None, help="Epoch budget per candidate")
@click.option("--workers", type=int, default=None, help="Candidates trained concurrently")
@click.option("--possession-only/--window-labels", default=None, help="Train on broadcast possession labels")
@click.option("--cache-windows/--no-cache-windows", default=None, help="Reuse preprocessed house windows across runs")
@handle_errors
def train_command(config_path, data_dir, model_dir, output_dir, seed, appliance, kernels, trials,
                  ensemble_size, max_epochs, workers, possession_only, cache_windows):
    """Train and select a ResNet ensemble (one appliance)."""
    started = time.perf_counter()
    cfg = resolve_experiment(
        config_path,
        {"data_dir": data_dir, "model_dir": model_dir, "output_dir": output_dir, "seed": seed,
         "appliance": appliance, "possession_only": possession_only, "cache_windows": cache_windows},
        {"kernel_sizes": _kernel_list(kernels), "trials": trials, "ensemble_size": ensemble_size,
         "max_epochs": max_epochs, "workers": workers},
    )
    data_path = _require_dir(cfg.data_dir, "data_dir")
    if not cfg.model_dir:
        raise click.UsageError("model_dir is not set")
    profile = resolve_profile(cfg.appliance, cfg.profiles_file)
    houses = discover_houses(data_path)
    out_path = Path(cfg.output_dir or cfg.model_dir)
    cache_dir = out_path / WINDOW_CACHE_DIR if cfg.cache_windows else None

    per_house = {house["house_id"]: house_windows(data_path, house, cfg, profile, cache_dir) for house in houses}

    usable = {h: d for h, d in per_house.items() if len(d) > 0}
    for house_id in sorted(set(per_house) - set(usable)):
        logger.warning(f"House {house_id} has no usable windows and is excluded from the split")
    train_houses, val_houses, test_houses = split_houses(sorted(usable), cfg.split_ratios, cfg.seed,
                                                         classes=house_classes(usable))
    train_set = assemble(per_house, train_houses)
    validation = assemble(per_house, val_houses)
    if train_set is None or validation is None:
        raise DataValidationError(f"no usable windows in the training houses {train_houses} or validation houses {val_houses}")
    if cfg.balance:
        train_set = balance_undersample(train_set, cfg.seed)

    ensemble, candidates = train_ensemble(train_set, validation, cfg.train, appliance=cfg.appliance)
    detected, _ = ensemble.detect(validation.windows)
    counts = confusion_counts(detected, validation.weak_labels)

    save_ensemble(ensemble, Path(cfg.model_dir), cfg.train, profile, extra={
        "interval_s": cfg.interval_s,
        "houses": {"train": train_houses, "validation": val_houses, "test": test_houses},
    })
    report = TrainingReport(
        appliance=cfg.appliance,
        candidates=candidates,
        selected=[{"kernel_size": c.kernel_size, "trial": c.trial}
                  for c in sorted((c for c in candidates if c.selected),
                                  key=lambda c: (c.validation_loss, c.kernel_size, c.trial))],
        validation_balanced_accuracy=balanced_accuracy(counts),
        validation_counts=counts,
        houses={"train": train_houses, "validation": val_houses, "test": test_houses},
        wall_clock_s=time.perf_counter() - started,
    )
    ReportGenerator().export_training(report, out_path)
    write_command_manifest(out_path / "manifest.json", "train", cfg)
    click.echo(
        f"Ensemble of {len(ensemble)} saved to {cfg.model_dir}; "
        f"validation balanced accuracy {report.validation_balanced_accuracy:.3f}"
    )


def localize_file(model_dir: Path, input_csv: Path, localizer_cfg: LocalizerConfig,
                  with_attention: bool = False) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """Run the full localization pipeline on one house CSV."""
    ensemble = load_ensemble(model_dir)
    manifest = load_ensemble_manifest(model_dir)
    if not manifest.get("profile"):
        raise DataValidationError(f"{model_dir}: ensemble manifest carries no appliance profile")
    profile = ApplianceProfile(**manifest["profile"])
    interval_s = int(manifest.get("interval_s", 60))

    aggregate, _ = read_power_csv(input_csv)
    series = forward_fill(resample(aggregate, interval_s), profile.max_ffill_s)
    dataset = make_windows(series, window_length=ensemble.window_length)
    if len(dataset) == 0:
        raise ShapeError(
            f"{input_csv}: no complete window without gaps; the ensemble expects L={ensemble.window_length} "
            f"samples at {interval_s}s"
        )
    result = Localizer(ensemble, localizer_cfg).localize_batch(dataset.windows)
    power = estimate_power(result.status, profile, dataset.aggregate_w)

    n_windows, length = dataset.windows.shape
    frame = pd.DataFrame({
        "timestamp": dataset.timestamps.ravel(),
        "window": np.repeat(np.arange(n_windows), length),
        "prob_ens": np.repeat(result.probabilities, length),
        "status": result.status.ravel().astype(int),
        "est_power_W": power.ravel(),
    })
    if with_attention:
        frame["attention"] = result.attention.ravel()
    context = {"dataset": dataset, "result": result, "profile": profile, "ensemble": ensemble}
    return frame, context


def write_rows(frame: pd.DataFrame, out_file: Path) -> Path:
    out_file.parent.mkdir(parents=True, exist_ok=True)
    if out_file.suffix == ".jsonl":
        frame.to_json(out_file, orient="records", lines=True, double_precision=10)
    else:
        frame.to_csv(out_file, index=False, float_format="%.6f", lineterminator="\n")
    return out_file


def read_rows(path: Path) -> pd.DataFrame:
    path = Path(path)
    if path.suffix == ".jsonl":
        return pd.read_json(path, orient="records", lines=True)
    return pd.read_csv(path)


@click.command("localize")
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--model-dir", default=None, help="Ensemble archive directory (default: $CAMAL_MODEL_DIR)")
@click.option("--out", "out_file", required=True, help="Output .csv or .jsonl")
@click.option("--config", "config_path", default=None, help="Experiment JSON providing localizer options")
@click.option("--no-attention", is_flag=True, default=False, help="Binarize the ensemble CAM without the input weighting")
@click.option("--inclusive", is_flag=True, default=False, help="Use Sigmoid >= 0.5 instead of > 0.5")
@click.option("--with-attention", is_flag=True, default=False, help="Add the sigmoid attention values as soft labels")
@click.option("--plot", "plot_dir", default=None, help="Write a PNG overlay per detected window into this directory")
@handle_errors
def localize_command(input_csv, model_dir, out_file, config_path, no_attention, inclusive, with_attention, plot_dir):
    """Detect and localize the appliance in a house CSV."""
    cfg = resolve_experiment(config_path, {"model_dir": model_dir}, {})
    model_path = _require_dir(cfg.model_dir, "model_dir")
    localizer_cfg = cfg.localizer
    if no_attention or inclusive:
        localizer_cfg = LocalizerConfig(
            attention=localizer_cfg.attention and not no_attention,
            inclusive_threshold=localizer_cfg.inclusive_threshold or inclusive,
        )
    frame, context = localize_file(model_path, Path(input_csv), localizer_cfg, with_attention)
    out_path = write_rows(frame, Path(out_file))

    if plot_dir:
        annotator = LocalizationAnnotator()
        plots = Path(plot_dir)
        plots.mkdir(parents=True, exist_ok=True)
        dataset, result = context["dataset"], context["result"]
        for index in np.flatnonzero(result.detected):
            png = annotator.annotate_window(dataset.aggregate_w[index], result.status[index], result.cam[index],
                                            float(result.probabilities[index]), title=f"window {index}")
            (plots / f"window_{index:04d}.png").write_bytes(png)
        logger.info(f"Wrote {int(result.detected.sum())} overlay(s) to {plots}")

    write_command_manifest(out_path.with_name(f"{out_path.stem}_manifest.json"), "localize", cfg, {
        "input": str(input_csv),
        "localizer": localizer_cfg.model_dump(),
        "with_attention": with_attention,
    })
    click.echo(f"Wrote {len(frame)} rows to {out_path}")


def align_truth(predictions: pd.DataFrame, truth: pd.DataFrame, profile: Optional[ApplianceProfile]) -> pd.DataFrame:
    """Attach truth status (and power when available) to every prediction row."""
    if "status" not in truth.columns:
        if "appliance_w" not in truth.columns or profile is None:
            raise DataValidationError("truth needs a status column or appliance_w plus a profile")
        truth = truth.assign(status=(truth["appliance_w"] >= profile.on_threshold_w).astype(int))
    truth = truth.set_index("timestamp")
    missing = ~predictions["timestamp"].isin(truth.index)
    if missing.any():
        first = predictions.loc[missing.idxmax(), "timestamp"]
        raise DataValidationError(f"prediction timestamp {first} has no ground truth row")
    aligned = predictions.copy()
    aligned["true_status"] = truth.loc[predictions["timestamp"], "status"].to_numpy()
    if "appliance_w" in truth.columns:
        aligned["true_power_w"] = truth.loc[predictions["timestamp"], "appliance_w"].to_numpy()
    return aligned


@click.command("evaluate")
@click.option("--predictions", required=True, type=click.Path(exists=True, dir_okay=False), help="Output of localize")
@click.option("--truth", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV with timestamp and status and/or appliance_w")
@click.option("--out", "out_dir", default=None, help="Report directory (default: $CAMAL_OUTPUT_DIR or .)")
@click.option("--config", "config_path", default=None, help="Experiment JSON providing appliance, profiles and threshold")
@click.option("--appliance", default=None, help="Profile used when truth has no status column (default: dishwasher)")
@click.option("--profiles-file", default=None, help="JSON file overriding the built-in profiles")
@click.option("--threshold", type=float, default=None, help="Detection threshold on prob_ens (default: 0.5)")
@handle_errors
def evaluate_command(predictions, truth, out_dir, config_path, appliance, profiles_file, threshold):
    """Score localization, energy estimation and detection."""
    cfg = resolve_experiment(
        config_path,
        {"output_dir": out_dir, "appliance": appliance, "profiles_file": profiles_file},
        {"detection_threshold": threshold},
    )
    threshold = cfg.train.detection_threshold
    profile = resolve_profile(cfg.appliance, cfg.profiles_file)
    rows = align_truth(read_rows(Path(predictions)), read_rows(Path(truth)), profile)
    windows = rows.groupby("window", sort=True)
    window_pred = (windows["prob_ens"].first() > threshold).to_numpy()
    window_truth = (windows["true_status"].max() > 0).to_numpy()
    report = build_report(
        cfg.appliance,
        rows["status"].to_numpy(),
        rows["true_status"].to_numpy(),
        window_pred,
        window_truth,
        rows["est_power_W"].to_numpy() if "true_power_w" in rows else None,
        rows["true_power_w"].to_numpy() if "true_power_w" in rows else None,
    )
    target = Path(cfg.output_dir or ".")
    ReportGenerator().export(report, target)
    write_command_manifest(target / "evaluate_manifest.json", "evaluate", cfg, {
        "predictions": str(predictions), "truth": str(truth), "threshold": threshold,
    })
    click.echo(ReportGenerator().render_text(report))
