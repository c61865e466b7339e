import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.core.logger import get_application_logger

FLOAT_FORMAT = "%.17g"


class ArtifactError(Exception):
    """Custom exception for artefact writing errors."""
    pass


def _to_builtin(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_builtin(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


def canonical_json(data: Any) -> str:
    """Sorted-key, indent-2 JSON text; the same data always gives the same bytes."""
    return json.dumps(_to_builtin(data), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_json(data: Any, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(canonical_json(data), encoding="utf-8")
    except OSError as e:
        get_application_logger().error(f"Failed to write JSON artefact {path}: {e}", exc_info=True)
        raise ArtifactError(f"Could not write {path}: {e}")
    return path


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Could not read {path}: {e}") from e


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Writes a DataFrame without index using a round-trippable float format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        get_application_logger().error(f"Failed to write CSV artefact {path}: {e}", exc_info=True)
        raise ArtifactError(f"Could not write {path}: {e}")
    return path


def samples_frame(samples: np.ndarray, names: Sequence[str], extra: Optional[Dict[str, np.ndarray]] = None) -> pd.DataFrame:
    """One row per draw, one column per parameter (plus optional extra columns)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    frame = pd.DataFrame(samples, columns=list(names))
    for key, column in (extra or {}).items():
        frame[key] = np.asarray(column)
    return frame


def read_samples(path: Path, names: Sequence[str]) -> np.ndarray:
    """Reads the parameter columns of a samples CSV back into an (n, p) array."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Samples file not found: {path}")
    frame = pd.read_csv(path)
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise ArtifactError(f"Samples file {path} lacks columns {missing}.")
    return frame[list(names)].to_numpy(dtype=np.float64)


def histogram_frame(values: np.ndarray, bins: Any = "auto") -> pd.DataFrame:
    """(bin_edge, count) rows; the final edge carries a count of 0."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return pd.DataFrame({"bin_edge": edges, "count": np.append(counts, 0)})


class ArtifactIndex:
    """Collects the files a stage writes and emits them as `index.json`."""

    def __init__(self, root: Path, stage: str):
        self.root = Path(root)
        self.stage = stage
        self.entries: List[Dict[str, str]] = []

    def add(self, path: Path, kind: str, description: str = "") -> Path:
        self.entries.append({
            "path": Path(path).relative_to(self.root).as_posix(),
            "kind": kind,
            "description": description,
        })
        return path

    def csv(self, frame: pd.DataFrame, name: str, kind: str, description: str = "") -> Path:
        return self.add(write_csv(frame, self.root / name), kind, description)

    def json(self, data: Any, name: str, kind: str, description: str = "") -> Path:
        return self.add(write_json(data, self.root / name), kind, description)

    def write(self) -> Path:
        entries = sorted(self.entries, key=lambda e: e["path"])
        return write_json({"stage": self.stage, "artifacts": entries}, self.root / "index.json")
