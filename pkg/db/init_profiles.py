from pathlib import Path
from typing import Dict, List, Optional
from loguru import logger

from helpers.json_io import read_json
from models.config import ApplianceProfile


def get_default_profiles() -> List[Dict[str, float]]:
    """
    Returns the reference appliance parameters (ON threshold, mean ON power,
    forward-fill limit of the datasets the appliance is usually studied on)
    """
    return [
        {"name": "dishwasher", "on_threshold_w": 300, "mean_power_w": 800, "max_ffill_s": 180},
        {"name": "washing_machine", "on_threshold_w": 300, "mean_power_w": 500, "max_ffill_s": 180},
        {"name": "microwave", "on_threshold_w": 200, "mean_power_w": 1000, "max_ffill_s": 180},
        {"name": "kettle", "on_threshold_w": 500, "mean_power_w": 2000, "max_ffill_s": 180},
        {"name": "shower", "on_threshold_w": 1000, "mean_power_w": 8000, "max_ffill_s": 1800},
        {"name": "electric_vehicle", "on_threshold_w": 1000, "mean_power_w": 4000, "max_ffill_s": 5400},
    ]


def load_profiles(path: Optional[Path] = None) -> Dict[str, ApplianceProfile]:
    """
    Built-in profiles, overridden entry by entry by a JSON profile file.

    The file holds either a list of profiles or ``{"profiles": [...]}``.
    """
    profiles = {entry["name"]: ApplianceProfile(**entry) for entry in get_default_profiles()}
    if path is None:
        return profiles
    try:
        payload = read_json(Path(path))
        entries = payload["profiles"] if isinstance(payload, dict) else payload
        for entry in entries:
            profile = ApplianceProfile(**entry)
            profiles[profile.name] = profile
        logger.info(f"Loaded {len(entries)} appliance profile(s) from {path}")
    except Exception as e:
        logger.error(f"Error loading profiles from {path}: {str(e)}")
        raise
    return profiles


def resolve_profile(name: str, path: Optional[Path] = None) -> ApplianceProfile:
    profiles = load_profiles(path)
    if name not in profiles:
        raise KeyError(f"unknown appliance profile '{name}' (known: {', '.join(sorted(profiles))})")
    return profiles[name]
