#!/usr/bin/env python3
"""
Configuration Loader for enkf-lab
Loads and validates experiment presets and single-update problem files
(YAML or JSON), and reads environment settings from .env
"""

import json
import os
import re
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from enkf_lab.exceptions import ConfigError
from enkf_lab.experiments import ExperimentSpec

THREADS_ENV = "ENKF_LAB_THREADS"
UPDATE_METHODS = ("po", "etkf", "eakf", "loc-po", "loc-sr", "eki", "leki")

# PyYAML follows YAML 1.1 and reads "1e-5" as a string
_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")

# Keys whose values (scalars, vectors or matrices) are numeric
NUMERIC_FIELDS = frozenset({
    "A", "N", "N_ref", "R_q", "T", "alpha", "bandwidth", "c", "c1", "c2", "c_values", "cov",
    "coupling", "d", "eigenvalues", "ensemble", "gamma", "k", "master_seed", "matrix", "max",
    "mean", "min", "n_grid", "noise_scale", "phi", "q", "r2", "r2_gamma", "radius", "radius_pp",
    "rho_pp", "rho_up", "scale", "seed", "seeds", "shift", "slack", "spectral_radius", "t",
    "target", "tol", "value", "values", "variance", "y",
})


def _to_number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _coerce_numbers(value: Any, key: Optional[str] = None) -> Any:
    if isinstance(value, dict):
        return {k: _coerce_numbers(item, k) for k, item in value.items()}
    if isinstance(value, list):
        return [_coerce_numbers(item, key) for item in value]
    if key in NUMERIC_FIELDS and isinstance(value, str) and _NUMBER.match(value.strip()):
        return _to_number(value.strip())
    return value


def _read_file(config_path: str) -> Dict[str, Any]:
    ext = os.path.splitext(config_path)[1].lower()
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            if ext == ".json":
                data = json.load(f)
            elif ext in (".yaml", ".yml"):
                data = yaml.safe_load(f)
            else:
                raise ConfigError(f"Unsupported config format '{ext}' (use .yaml, .yml or .json)", field="file")
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Could not parse {config_path}: {e}", field="file") from e
    except OSError as e:
        raise ConfigError(f"Could not read {config_path}: {e}", field="file") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path} must contain a mapping at the top level", field="file")
    return data


class Config:
    """Configuration for one run: either an `experiment` preset or an `update` request"""

    def __init__(self, config_path: str):
        """Load configuration from a YAML or JSON file"""
        if not os.path.exists(config_path):
            raise ConfigError(f"Configuration file not found: {config_path}. "
                              f"Copy config.example.yaml and customize it.", field="file")
        self.path = config_path
        self.config = _coerce_numbers(_read_file(config_path))
        self._validate()

    def _validate(self):
        """Validate required configuration fields"""
        if ("experiment" in self.config) == ("update" in self.config):
            raise ConfigError("Config needs exactly one top-level section: 'experiment' or 'update'",
                              field="experiment | update")

        if self.kind == "experiment":
            required_fields = [
                ('experiment', 'id'),
                ('experiment', 'kind'),
                ('experiment', 'n_grid'),
                ('experiment', 'seeds'),
            ]
        else:
            required_fields = [
                ('update', 'method'),
                ('update', 'problem', 'gamma'),
                ('update', 'problem', 'y'),
            ]
            forward_kind = self.get('update', 'forward', 'kind', default='linear')
            if forward_kind == 'linear':
                required_fields.append(('update', 'problem', 'A'))

        for field_path in required_fields:
            current = self.config
            for key in field_path:
                if not isinstance(current, dict) or key not in current or current[key] is None:
                    raise ConfigError("Missing required configuration", field=' -> '.join(field_path))
                current = current[key]

        if self.kind == "update":
            method = self.config['update']['method']
            if method not in UPDATE_METHODS:
                raise ConfigError(f"Unknown method '{method}', expected one of {UPDATE_METHODS}",
                                  field="update -> method")
            if 'ensemble' not in self.config['update'] and 'prior' not in self.config['update']:
                raise ConfigError("Give either an ensemble or a prior with N", field="update -> ensemble")

    @property
    def kind(self) -> str:
        """'experiment' or 'update'"""
        return "experiment" if "experiment" in self.config else "update"

    @property
    def update(self) -> Dict[str, Any]:
        """The single-update request"""
        return self.config.get('update', {})

    def experiment_spec(self, master_seed: Optional[int] = None, seeds: Optional[int] = None,
                        output: Optional[str] = None) -> ExperimentSpec:
        """Experiment section as an ExperimentSpec, with CLI overrides applied"""
        data = dict(self.config['experiment'])
        if master_seed is not None:
            data['master_seed'] = master_seed
        if seeds is not None:
            data['seeds'] = seeds
        if output is not None:
            data['output'] = output
        return ExperimentSpec.from_dict(data)

    def get(self, *keys, default=None):
        """Get nested configuration value"""
        current = self.config
        for key in keys:
            if isinstance(current, dict) and key in current:
                current = current[key]
            else:
                return default
        return current

    def __repr__(self):
        return f"Config(path={self.path}, kind={self.kind})"


def load_config(config_path: str) -> Config:
    """Load configuration from file"""
    return Config(config_path)


def load_presets(paths: List[str]) -> List[ExperimentSpec]:
    """Load several experiment presets"""
    specs = []
    for path in paths:
        config = load_config(path)
        if config.kind != "experiment":
            raise ConfigError(f"{path} is not an experiment preset", field="experiment")
        specs.append(config.experiment_spec())
    return specs


def get_threads(default: int = 1) -> int:
    """Trial parallelism from ENKF_LAB_THREADS (after loading .env)"""
    load_dotenv()
    raw = os.getenv(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got '{raw}'", field=THREADS_ENV)
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got '{raw}'", field=THREADS_ENV)
    return threads
