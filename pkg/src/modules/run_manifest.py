import json
import platform
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

from src import __version__
from src.core.logger import get_application_logger
from src.utils.artifacts import canonical_json, config_hash

MANIFEST_FILE = "manifest.json"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "torch", "numba", "joblib", "jsonschema")
STATUSES = ("running", "completed", "failed", "budget_exhausted")


class RunManifestError(Exception):
    """Custom exception for run manifest errors."""
    pass


def library_versions() -> Dict[str, Optional[str]]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """
    Keeps `manifest.json` in a run directory.

    The manifest holds everything needed to re-run a stage exactly (resolved
    config, its hash, master seed, tool and library versions) plus one history
    record per stage executed in that directory. Timestamps live only here so
    every other artefact stays byte-reproducible.
    """

    def __init__(self, run_dir: Path):
        self.logger = get_application_logger()
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.run_dir / MANIFEST_FILE
        self.data: Dict[str, Any] = {}
        self._load_manifest()

    def _load_manifest(self):
        """Loads an existing manifest so later stages append to its history."""
        if self.manifest_path.exists():
            try:
                with open(self.manifest_path, "r", encoding="utf-8") as f:
                    self.data = json.load(f)
                self.logger.info(f"Manifest loaded from {self.manifest_path}. "
                                 f"{len(self.data.get('history', []))} stage record(s) found.")
            except json.JSONDecodeError as e:
                self.logger.error(f"Error decoding manifest {self.manifest_path}: {e}", exc_info=True)
                self.logger.warning("Manifest corrupted or invalid. Starting a fresh one.")
                self.data = {}
        self.data.setdefault("history", [])

    def _save_manifest(self):
        try:
            with open(self.manifest_path, "w", encoding="utf-8", newline="\n") as f:
                f.write(canonical_json(self.data))
            self.logger.debug(f"Manifest saved to {self.manifest_path}.")
        except OSError as e:
            self.logger.error(f"Failed to save manifest to {self.manifest_path}: {e}", exc_info=True)
            raise RunManifestError(f"Could not save manifest: {e}")

    def start_stage(self, stage: str, config: Dict[str, Any], seed: int):
        """Records the resolved config of a stage about to run."""
        self.data.update({
            "tool": "sbi-toolkit",
            "tool_version": __version__,
            "python_version": platform.python_version(),
            "library_versions": library_versions(),
            "config": config,
            "config_hash": config_hash(config),
            "seed": int(seed),
            "stage": stage,
            "status": "running",
            "total_simulations": 0,
        })
        self.data.setdefault("created_at", _now())
        self.data["updated_at"] = _now()
        self.data["history"].append({"stage": stage, "status": "running", "started_at": _now()})
        self._save_manifest()
        self.logger.info(f"Stage '{stage}' started in {self.run_dir} (config hash {self.data['config_hash'][:12]}).")

    def finish_stage(self, status: str, total_simulations: int, details: Optional[Dict[str, Any]] = None):
        if status not in STATUSES:
            raise RunManifestError(f"Unknown run status '{status}'. Valid: {list(STATUSES)}")
        if not self.data["history"]:
            raise RunManifestError("finish_stage called before start_stage.")
        self.data["status"] = status
        self.data["total_simulations"] = int(total_simulations)
        self.data["updated_at"] = _now()
        record = self.data["history"][-1]
        record.update({"status": status, "finished_at": _now(), "total_simulations": int(total_simulations),
                       "details": details or {}})
        self._save_manifest()
        self.logger.info(f"Stage '{record['stage']}' finished with status '{status}' "
                         f"after {total_simulations} simulation(s).")

    def get_history(self, stage: Optional[str] = None) -> List[Dict[str, Any]]:
        history = self.data.get("history", [])
        if stage:
            return [entry for entry in history if entry.get("stage") == stage]
        return list(history)
