"""
Config Manager utility for loading run settings from data/, key=value files
and the environment.
"""

import json
import os

from dotenv import load_dotenv

ENV_PREFIX = "VFMM_"


class ConfigManager:
    """
    Utility class for loading run settings.

    Sources, lowest precedence first: data/config.json sections,
    an optional key=value file, then VFMM_<FIELD> environment variables
    (a .env file in the working directory is read first).
    """

    def __init__(self, data_dir="data"):
        """
        Initialize ConfigManager.

        Args:
            data_dir: Directory containing config.json and acceptance.json
        """
        self.data_dir = data_dir
        self._config = None
        self._acceptance = None
        self._env_loaded = False

    def get_config(self):
        """
        Load and return the JSON defaults.

        Returns:
            dict: Configuration dictionary (sectioned)
        """
        if self._config is None:
            self._config = self._load_json_file("config.json")
        return self._config

    def get_acceptance(self):
        """
        Load tolerances and reference constants used by the acceptance tests.

        Returns:
            dict: Acceptance dictionary
        """
        if self._acceptance is None:
            self._acceptance = self._load_json_file("acceptance.json")
        return self._acceptance

    def get_defaults(self, sections=("engine", "flow", "partition", "output")):
        """
        Flatten the run sections of config.json into one field -> value dict.

        Returns:
            dict: Flat defaults
        """
        config = self.get_config()
        flat = {}
        for section in sections:
            flat.update(config.get(section, {}))
        return flat

    def get_timeout(self, timeout_type="receive"):
        """
        Get timeout value from configuration.

        Args:
            timeout_type: Type of timeout (receive)

        Returns:
            float: Timeout in seconds
        """
        return float(self.get_config().get("timeout", {}).get(timeout_type, 120.0))

    def get_env_overrides(self, field_names):
        """
        Values of VFMM_<FIELD> environment variables for the given fields.

        Returns:
            dict: field -> raw string value
        """
        if not self._env_loaded:
            load_dotenv(override=False)
            self._env_loaded = True
        overrides = {}
        for name in field_names:
            value = os.environ.get(ENV_PREFIX + name.upper())
            if value is not None:
                overrides[name] = value
        return overrides

    @staticmethod
    def parse_key_value_file(path):
        """
        Parse a plain ``key = value`` file ('#' starts a comment).

        Args:
            path: File path

        Returns:
            dict: key -> raw string value
        """
        values = {}
        with open(path, "r", encoding="utf-8") as f:
            for number, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{number}: expected key=value, got {raw.strip()!r}")
                key, value = line.split("=", 1)
                values[key.strip().replace("-", "_")] = value.strip()
        return values

    def _load_json_file(self, filename):
        """
        Load a JSON file from the data directory.

        Args:
            filename: Name of the JSON file

        Returns:
            dict: Parsed JSON data
        """
        file_path = os.path.join(self.data_dir, filename)

        if not os.path.exists(file_path):
            raise FileNotFoundError(f"Config file not found: {file_path}")

        with open(file_path, "r") as f:
            return json.load(f)


# Singleton instance
_config_manager = None


def get_config_manager(data_dir=None):
    """
    Get the singleton ConfigManager instance.

    Args:
        data_dir: Data directory (defaults to the package data/ directory)

    Returns:
        ConfigManager: Singleton instance
    """
    global _config_manager
    if _config_manager is None:
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        _config_manager = ConfigManager(data_dir or os.path.join(root, "data"))
    return _config_manager
