"""
Binary containers for models, ensembles and window datasets.

Model file layout (all integers little-endian):

    8 bytes   magic  b"CAMALRN\\0"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header (sorted keys): format_version, spec, seed,
              training, byte_order, dtype, batches_tracked, arrays=[{name, shape}]
    ...       raw little-endian arrays, in header order

Array order follows the network: for each residual block, each conv block's
conv weight, conv bias, bn gamma, bn beta, bn running mean, bn running var,
then the shortcut (if any); finally head weight and head bias.
"""

import json
import struct
import numpy as np
from pathlib import Path
from typing import Any, Dict, Optional
from loguru import logger

from core.ensemble import Ensemble
from core.resnet import ResNetModel, TrainingMetadata
from helpers.json_io import read_json, write_json
from models.config import ApplianceProfile, ResNetSpec, TrainConfig
from models.errors import DataValidationError
from models.series import WindowDataset

MODEL_MAGIC = b"CAMALRN\x00"
MODEL_FORMAT_VERSION = 1
ENSEMBLE_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1


class ArchiveFiles:
    MANIFEST = "manifest.json"
    MEMBER = "member_{index:02d}.camal"
    TRAINING_REPORT = "training_report.json"


def model_to_bytes(model: ResNetModel) -> bytes:
    state = model.state_arrays()
    dtype = np.dtype(model.dtype).newbyteorder("<")
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": model.spec.model_dump(mode="json"),
        "seed": model.metadata.seed,
        "training": model.metadata.model_dump(mode="json"),
        "byte_order": "little",
        "dtype": np.dtype(model.dtype).name,
        "batches_tracked": model.batches_tracked(),
        "arrays": [{"name": name, "shape": list(array.shape)} for name, array in state.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MODEL_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    chunks.extend(np.ascontiguousarray(array, dtype=dtype).tobytes() for array in state.values())
    return b"".join(chunks)


def model_from_bytes(payload: bytes, source: str = "<bytes>") -> ResNetModel:
    if payload[:8] != MODEL_MAGIC:
        raise DataValidationError(f"{source}: not a model file")
    (header_len,) = struct.unpack("<I", payload[8:12])
    header = json.loads(payload[12:12 + header_len].decode("utf-8"))
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataValidationError(f"{source}: unsupported model format {header.get('format_version')}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    offset = 12 + header_len
    state: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        state[entry["name"]] = array.reshape(entry["shape"])
        offset += count * dtype.itemsize
    if offset != len(payload):
        raise DataValidationError(f"{source}: {len(payload) - offset} trailing bytes after the arrays")
    model = ResNetModel(ResNetSpec(**header["spec"]), header["seed"], np.dtype(header["dtype"]))
    model.metadata = TrainingMetadata(**header["training"])
    model.load_state_arrays(state, header["batches_tracked"])
    return model


def save_model(model: ResNetModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path: Path) -> ResNetModel:
    path = Path(path)
    return model_from_bytes(path.read_bytes(), str(path))


def save_ensemble(ensemble: Ensemble, directory: Path, config: Optional[TrainConfig] = None,
                  profile: Optional[ApplianceProfile] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write one model file per member plus a manifest describing the ensemble.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = []
    for index, (model, loss) in enumerate(zip(ensemble.models, ensemble.validation_losses)):
        filename = ArchiveFiles.MEMBER.format(index=index)
        save_model(model, directory / filename)
        members.append({
            "file": filename,
            "kernel_size": model.kernel_size,
            "trial": model.metadata.trial,
            "seed": model.metadata.seed,
            "validation_loss": loss,
        })
    manifest = {
        "format_version": ENSEMBLE_FORMAT_VERSION,
        "appliance": ensemble.appliance,
        "window_length": ensemble.window_length,
        "threshold": ensemble.threshold,
        "members": members,
        "config": config.model_dump(mode="json") if config else None,
        "profile": profile.model_dump(mode="json") if profile else None,
        **(extra or {}),
    }
    write_json(directory / ArchiveFiles.MANIFEST, manifest)
    logger.info(f"Saved {len(members)}-member ensemble for {ensemble.appliance} to {directory}")
    return directory


def load_ensemble(directory: Path) -> Ensemble:
    directory = Path(directory)
    manifest_path = directory / ArchiveFiles.MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{directory}: no ensemble manifest found")
    manifest = read_json(manifest_path)
    if manifest.get("format_version") != ENSEMBLE_FORMAT_VERSION:
        raise DataValidationError(f"{manifest_path}: unsupported ensemble format {manifest.get('format_version')}")
    models = [load_model(directory / member["file"]) for member in manifest["members"]]
    losses = [member["validation_loss"] for member in manifest["members"]]
    return Ensemble(models, losses, manifest["appliance"], manifest["window_length"], manifest["threshold"])


def load_ensemble_manifest(directory: Path) -> Dict[str, Any]:
    return read_json(Path(directory) / ArchiveFiles.MANIFEST)


def save_dataset(dataset: WindowDataset, path: Path) -> Path:
    """Versioned uncompressed npz cache of a window dataset."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "format_version": np.array(DATASET_FORMAT_VERSION),
        "windows": dataset.windows,
        "aggregate_w": dataset.aggregate_w,
        "timestamps": dataset.timestamps,
        "house_ids": dataset.house_ids.astype(np.str_),
    }
    for name in ("weak_labels", "strong_status", "appliance_power"):
        if getattr(dataset, name) is not None:
            arrays[name] = getattr(dataset, name)
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    return path


def load_dataset(path: Path) -> WindowDataset:
    with np.load(Path(path), allow_pickle=False) as stored:
        if int(stored["format_version"]) != DATASET_FORMAT_VERSION:
            raise DataValidationError(f"{path}: unsupported dataset format {int(stored['format_version'])}")
        fields = {name: stored[name] for name in stored.files if name != "format_version"}
    return WindowDataset(**fields)
