import json, os, threading
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from config import cfg
from core.errors import ProblemFileError
from core.torusfield import FourierField

_LOCK = threading.Lock()

REPORT = "report.json"
TIMINGS = "timings.json"
SOLUTION = "solution.json"


def make_serializable(data: Any) -> Any:
    """Plain builtins for json.dumps: numpy, pandas, enums, nested containers"""
    if isinstance(data, dict):
        return {str(k): make_serializable(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [make_serializable(v) for v in data]
    if isinstance(data, np.ndarray):
        return make_serializable(data.tolist())
    if isinstance(data, (np.integer, np.bool_)):
        return data.item()
    if isinstance(data, np.floating):
        return make_serializable(float(data))
    if isinstance(data, pd.DataFrame):
        return make_serializable(data.to_dict(orient="records"))
    if isinstance(data, Enum):
        return data.value
    if isinstance(data, float) and not np.isfinite(data):
        return str(data)
    return data


def dumps(document: Dict) -> str:
    return json.dumps(make_serializable(document), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _path(out_dir: Optional[str], name: str) -> str:
    return os.path.join(out_dir or cfg.out_dir, name)


def get_document(name: str, out_dir: str = None) -> Optional[Dict]:
    path = _path(out_dir, name)
    with _LOCK:
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)


def put_document(name: str, document: Dict, out_dir: str = None) -> str:
    path = _path(out_dir, name)
    text = dumps(document)
    with _LOCK:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return path


def write_csv(name: str, frame: pd.DataFrame, out_dir: str = None) -> str:
    """Fixed headers, one row per sample, 17 significant digits"""
    path = _path(out_dir, name)
    with _LOCK:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        frame.to_csv(path, index=False, float_format=f"%.{cfg.csv_digits}g")
    return path


def save_solution(field: FourierField, summary: Dict, problem_hash: str, out_dir: str = None) -> str:
    return put_document(SOLUTION, {"problem_hash": problem_hash, "field": field.to_dict(), "solve": summary}, out_dir)


def load_solution(problem_hash: str, out_dir: str = None) -> Optional[FourierField]:
    """The solved field from a previous run on the same problem, or None"""
    doc = get_document(SOLUTION, out_dir)
    if doc is None:
        return None
    if doc.get("problem_hash") != problem_hash:
        raise ProblemFileError(f"{_path(out_dir, SOLUTION)} belongs to a different problem")
    return FourierField.from_dict(doc["field"])
