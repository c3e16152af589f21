import json
import numpy as np
from pathlib import Path
from typing import Any, Dict
from pydantic import BaseModel


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy scalars/arrays and pydantic models into plain JSON types.

    Args:
        value: Any nested structure of dicts, lists, numpy values or models

    Returns:
        The same structure built from JSON-serializable values
    """
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump(mode="json"))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(payload: Any) -> str:
    # sorted keys keep reruns byte-identical
    return json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n"


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload), encoding="utf-8")
    return path


def read_json(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: could not parse JSON: {e}") from e
