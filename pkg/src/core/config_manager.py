import copy
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional

# Get the application logger instance
from src.core.logger import get_application_logger

RUN_SECTIONS = ("smc_abc", "bsl", "neural", "mcmc", "diagnostics", "models")


class ConfigManagerError(Exception):
    """Custom exception for configuration management errors."""
    pass


class ConfigManager:
    """
    Manages toolkit-wide default settings.
    Implements a singleton pattern to ensure a single source of truth for settings.
    Settings are stored and loaded from a JSON file; run configurations are
    merged over the algorithm and model sections kept here.
    """
    _instance = None
    _initialized = False

    def __new__(cls, *args, **kwargs):
        """Ensures that only one instance of ConfigManager exists (Singleton pattern)."""
        if cls._instance is None:
            cls._instance = super(ConfigManager, cls).__new__(cls)
        return cls._instance

    def __init__(self, config_dir: str = "config", config_file_name: str = "settings.json"):
        """
        Initializes the ConfigManager.

        Args:
            config_dir (str): Directory holding the settings file.
            config_file_name (str): The name of the settings JSON file.
        """
        if self._initialized:
            return

        self.logger = get_application_logger()
        self.config_dir = Path(config_dir)
        self.config_file_path = self.config_dir / config_file_name
        self.settings: Dict[str, Any] = {}

        self._load_config()
        self._initialized = True
        self.logger.info(f"ConfigManager initialized. Configuration file: {self.config_file_path}")

    def _load_config(self):
        """
        Loads settings from the JSON file, filling in any section the file lacks.
        If the file does not exist or is corrupt, it initializes with default settings.
        """
        self.config_dir.mkdir(parents=True, exist_ok=True)

        if self.config_file_path.exists():
            try:
                with open(self.config_file_path, 'r', encoding='utf-8') as f:
                    loaded = json.load(f)
                self.settings = deep_merge(self._get_default_settings(), loaded)
                self.logger.info(f"Configuration loaded from {self.config_file_path}")
            except json.JSONDecodeError as e:
                self.logger.error(f"Error decoding JSON from config file {self.config_file_path}: {e}", exc_info=True)
                self.settings = self._get_default_settings()
                self.logger.warning("Falling back to default settings due to JSON decode error.")
                self._save_config()
        else:
            self.logger.warning(f"Configuration file not found: {self.config_file_path}. Initializing with default settings.")
            self.settings = self._get_default_settings()
            self._save_config()

    def _save_config(self):
        """Saves the current settings to the JSON file."""
        try:
            with open(self.config_file_path, 'w', encoding='utf-8') as f:
                json.dump(self.settings, f, indent=4, sort_keys=True)
            self.logger.info(f"Configuration saved to {self.config_file_path}")
        except OSError as e:
            self.logger.error(f"Failed to save configuration to {self.config_file_path}: {e}", exc_info=True)
            raise ConfigManagerError(f"Could not save configuration: {e}")

    def _get_default_settings(self) -> Dict[str, Any]:
        """
        Returns the default settings. Algorithm and model sections come straight
        from the engine config dataclasses so the published constants live in
        one place.
        """
        from src.modules.bsl import BslConfig
        from src.modules.bvcbm import BvcbmParams
        from src.modules.cnde import TrainingConfig
        from src.modules.diagnostics import DEFAULT_LEVELS
        from src.modules.invasion import InvasionConfig
        from src.modules.mcmc import McmcConfig
        from src.modules.neural_inference import NeuralConfig
        from src.modules.smc_abc import SmcConfig
        from src.modules.toy_gaussian import ToyGaussianConfig

        bsl = asdict(BslConfig())
        bsl.pop("proposal_cov")
        return _jsonable({
            "app_settings": {
                "log_dir": "logs",
                "log_level": "INFO",
                "output_root": "runs",
                "threads": 1,
                "max_retries": 5,
            },
            "smc_abc": asdict(SmcConfig()),
            "bsl": bsl,
            "neural": {**asdict(TrainingConfig()), **asdict(NeuralConfig())},
            "mcmc": asdict(McmcConfig()),
            "diagnostics": {
                "cost_simulations": 1000,
                "predictive_simulations": 1000,
                "levels": list(DEFAULT_LEVELS),
                "coverage_floor": 0.5,
                "normality": False,
                "normality_m": 1000,
                "tune_m": False,
                "tune_m_candidates": [25, 50, 100, 200, 400],
                "tune_m_reps": 50,
            },
            "models": {
                "toy-gaussian": asdict(ToyGaussianConfig()),
                "bvcbm": {**asdict(BvcbmParams()), "true_theta": [300.0, 16.0, 100.0]},
                "invasion": asdict(InvasionConfig()),
            },
        })

    def run_defaults(self) -> Dict[str, Any]:
        """The sections a run configuration is merged over, plus run-level knobs."""
        defaults = {section: copy.deepcopy(self.settings[section]) for section in RUN_SECTIONS}
        defaults.update({
            "seed": 0,
            "threads": self.get_setting("app_settings.threads", 1),
            "max_retries": self.get_setting("app_settings.max_retries", 5),
        })
        return defaults

    def get_setting(self, key: str, default: Any = None) -> Any:
        """
        Retrieves a setting using a dot-separated key (e.g., "smc_abc.a").

        Args:
            key (str): The dot-separated key for the setting.
            default (Any, optional): The value to return if the key is not found.

        Returns:
            Any: The value of the setting, or the default value if not found.
        """
        parts = key.split('.')
        current_level = self.settings
        for part in parts:
            if isinstance(current_level, dict) and part in current_level:
                current_level = current_level[part]
            else:
                self.logger.warning(f"Configuration key '{key}' not found. Returning default value: {default}")
                return default
        return current_level

    def set_setting(self, key: str, value: Any):
        """
        Sets a setting using a dot-separated key (e.g., "bsl.m") and saves the file.

        Args:
            key (str): The dot-separated key for the setting.
            value (Any): The value to set.
        """
        parts = key.split('.')
        current_level = self.settings
        for part in parts[:-1]:
            if part not in current_level:
                current_level[part] = {}
            elif not isinstance(current_level[part], dict):
                self.logger.error(f"Cannot set setting '{key}'. Intermediate key '{part}' is not a dictionary.")
                raise ConfigManagerError(f"Cannot set setting '{key}'. Intermediate key '{part}' is not a dictionary.")
            current_level = current_level[part]
        current_level[parts[-1]] = value
        self.logger.info(f"Setting '{key}' updated to '{value}'.")
        self._save_config()


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively overlays `override` on a copy of `base`; lists are replaced, not merged."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


# Global instance for easy access throughout the application
_app_config_manager_instance: Optional[ConfigManager] = None


def get_application_config(config_dir: str = "config") -> ConfigManager:
    """
    Convenience function to get the global ConfigManager instance.
    Ensures it's initialized only once with the specified config directory.
    """
    global _app_config_manager_instance
    if _app_config_manager_instance is None:
        _app_config_manager_instance = ConfigManager(config_dir=config_dir)
    return _app_config_manager_instance
