#!/usr/bin/env python3
"""
Settings Manager for TomoStage
Loads an experiment configuration, applies command-line overrides and
hands out validated specs for each part of the pipeline.
Precedence: --set flags > config file > defaults.
"""

import copy
import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from ct_tools.classical_tool import PRESETS, ClassicalParams, default_grid
from ct_tools.datamodel import PersistenceError, ValidationError
from ct_tools.degrade_tool import DegradeSpec
from ct_tools.multistage_tool import STAGE_CHANNELS
from ct_tools.phantom_tool import FoamSpec
from ct_tools.regressor.model import RegressorSpec
from ct_tools.regressor.train import TrainConfig

logger = logging.getLogger(__name__)


def _train_defaults(epochs: int, rotate: bool) -> Dict[str, Any]:
    return {
        "epochs": epochs,
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "patience": 10,
        "time_budget": 600.0,
        "hflip": True,
        "vflip": True,
        "rotate": rotate,
        "validation_fraction": 0.2,
        "samples_per_epoch": None,
    }


class ExperimentSettings:
    def __init__(self, config_path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None):
        # Default settings
        self.default_settings = {
            "run": {
                "seed": 0,
            },
            "phantom": {
                "size": 128,
                "bubbles": 300,
                "r_min": 2.0,
                "r_max": 8.0,
                "cylinder_fraction": 0.95,
                "max_attempts": 100000,
            },
            "geometry": {
                "n_hq": 256,
                "factor": 4,
            },
            "degrade": {
                "I0": 100.0,
                "absorption_target": 0.5,
                "P_ring": 0.1,
                "sigma_ring": 0.005,
                "P_proj": 0.1,
                "P_zinger": 0.001,
                "v_zinger": 5.0,
                "noise": True,
            },
            "dataset": {
                "n_train": 2,
                "simulated_reference": False,
            },
            # sinograms are not square, so stage s trains with flips only
            "train": {
                "p": _train_defaults(200, True),
                "s": _train_defaults(200, False),
                "r": _train_defaults(500, True),
                "post": _train_defaults(500, True),
            },
            "regressor": {
                "hidden_layers": 4,
                "width": 16,
                "residual": True,
                "post_width": None,
            },
            "classical": {
                "grid": "presets",
                "workers": 1,
            },
            "infer": {
                "previews": ["pgm"],
            },
            "bench": {
                "repeats": 1,
            },
            "compare": {
                "seeds": [0, 1, 2],
                "settings": {
                    "full": {"I0": 100.0, "P_ring": 0.1, "P_zinger": 0.001},
                    "noise": {"I0": 100.0, "P_ring": 0.0, "P_zinger": 0.0},
                    "rings": {"I0": 100.0, "P_ring": 0.4, "P_zinger": 0.0},
                },
            },
        }

        self.config_path = Path(config_path) if config_path else None
        self.settings = self.load_settings()
        for item in overrides:
            self.apply_override(item)
        if seed is not None:
            self.set("run", "seed", seed)

    def load_settings(self) -> Dict[str, Any]:
        """Load the config file merged over the defaults, or the defaults alone."""
        settings = copy.deepcopy(self.default_settings)
        if self.config_path is None:
            return settings
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                loaded_settings = json.load(f)
        except FileNotFoundError as e:
            raise PersistenceError(f"config file not found: {self.config_path}") from e
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file {self.config_path} is not valid JSON: {e}") from e
        except OSError as e:
            raise PersistenceError(f"cannot read config file {self.config_path}: {e}") from e
        if not isinstance(loaded_settings, dict):
            raise ValidationError("config file must hold a JSON object")
        self._check_known(settings, loaded_settings, "")
        self._deep_update(settings, loaded_settings)
        if "settings" in loaded_settings.get("compare", {}):
            settings["compare"]["settings"] = loaded_settings["compare"]["settings"]
        logger.debug(f"Loaded settings from {self.config_path}")
        return settings

    def save_settings(self, path: Path) -> Path:
        """Write the resolved settings as JSON."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.settings, indent=2, sort_keys=True), encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot write settings to {path}: {e}") from e
        return path

    def get(self, category: str, key: str = None):
        """Get a setting value"""
        if key is None:
            return self.settings.get(category, {})
        return self.settings.get(category, {}).get(key)

    def set(self, category: str, key: str, value: Any) -> None:
        self.set_path(f"{category}.{key}", value)

    def set_path(self, dotted: str, value: Any) -> None:
        """Set a nested value; every path component but free-form mappings must already exist."""
        parts = dotted.split(".")
        if any(not p for p in parts) or len(parts) < 2:
            raise ValidationError(f"config field must look like section.key, got {dotted!r}")
        node = self.settings
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ValidationError(f"unknown config field {'.'.join(parts[:i + 1])!r}")
            node = node[part]
        if not isinstance(node, dict):
            raise ValidationError(f"config field {'.'.join(parts[:-1])!r} is not a section")
        if parts[-1] not in node and not self._free_form(parts[:-1]):
            raise ValidationError(f"unknown config field {dotted!r}")
        node[parts[-1]] = value

    def apply_override(self, item: str) -> None:
        """Apply one --set section.key=value flag; the value is parsed as JSON when possible."""
        if "=" not in item:
            raise ValidationError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        self.set_path(dotted.strip(), value)

    @staticmethod
    def _free_form(path: List[str]) -> bool:
        return path[:2] == ["compare", "settings"]

    def _check_known(self, base: Dict[str, Any], update: Dict[str, Any], prefix: str) -> None:
        for key, value in update.items():
            name = f"{prefix}{key}"
            if self._free_form(name.split(".")[:2]) and name.count(".") >= 1:
                continue
            if key not in base:
                raise ValidationError(f"unknown config field {name!r}")
            if isinstance(base[key], dict) and isinstance(value, dict):
                self._check_known(base[key], value, name + ".")

    def _deep_update(self, base_dict: Dict, update_dict: Dict):
        """Recursively update nested dictionaries"""
        for key, value in update_dict.items():
            if key in base_dict and isinstance(base_dict[key], dict) and isinstance(value, dict):
                self._deep_update(base_dict[key], value)
            else:
                base_dict[key] = value

    # Typed views

    @property
    def seed(self) -> int:
        return _typed("run.seed", self.get("run", "seed"), 0)

    def _build(self, cls, section: str, values: Dict[str, Any], **extra):
        defaults = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in defaults:
                raise ValidationError(f"unknown config field {section}.{key!r}")
            kwargs[key] = _typed(f"{section}.{key}", value, defaults[key])
        kwargs.update(extra)
        return cls(**kwargs).validate()

    def foam_spec(self, seed_offset: int = 0) -> FoamSpec:
        return self._build(FoamSpec, "phantom", self.get("phantom"), seed=self.seed + seed_offset)

    def degrade_spec(self, overrides: Optional[Dict[str, Any]] = None, section: str = "degrade",
                     seed_offset: int = 0) -> DegradeSpec:
        values = dict(self.get("degrade"))
        values.update(overrides or {})
        return self._build(DegradeSpec, section, values, seed=self.seed + seed_offset)

    def train_config(self, stage: str) -> TrainConfig:
        stages = self.get("train")
        if stage not in stages:
            raise ValidationError(f"unknown training stage {stage!r}; expected one of {sorted(stages)}")
        return self._build(TrainConfig, f"train.{stage}", stages[stage], seed=self.seed)

    def stage_configs(self) -> Dict[str, TrainConfig]:
        return {stage: self.train_config(stage) for stage in STAGE_CHANNELS}

    def regressor_spec(self, stage: str) -> RegressorSpec:
        if stage not in STAGE_CHANNELS:
            raise ValidationError(f"unknown regressor stage {stage!r}")
        reg = self.get("regressor")
        return RegressorSpec(
            in_channels=STAGE_CHANNELS[stage],
            hidden_layers=_typed("regressor.hidden_layers", reg["hidden_layers"], 4),
            width=_typed("regressor.width", reg["width"], 16),
            residual=_typed("regressor.residual", reg["residual"], True),
        ).validate()

    def stage_specs(self) -> Dict[str, RegressorSpec]:
        return {stage: self.regressor_spec(stage) for stage in STAGE_CHANNELS}

    @property
    def post_width(self) -> Optional[int]:
        return _typed("regressor.post_width", self.get("regressor", "post_width"), None, int)

    @property
    def n_hq(self) -> int:
        return _typed("geometry.n_hq", self.get("geometry", "n_hq"), 0)

    @property
    def factor(self) -> int:
        factor = _typed("geometry.factor", self.get("geometry", "factor"), 0)
        if factor < 1 or self.n_hq % factor:
            raise ValidationError(f"geometry.factor must be a positive divisor of geometry.n_hq, got {factor}")
        return factor

    def classical_grid(self) -> List[ClassicalParams]:
        choice = self.get("classical", "grid")
        if choice == "presets":
            return list(PRESETS.values())
        if choice == "default":
            return default_grid()
        if choice in PRESETS:
            return [PRESETS[choice]]
        if isinstance(choice, list):
            return [ClassicalParams.from_dict(item) for item in choice]
        raise ValidationError(
            f"classical.grid must be 'presets', 'default', a preset name {sorted(PRESETS)} or a list, got {choice!r}"
        )

    def compare_settings(self) -> Dict[str, DegradeSpec]:
        raw = self.get("compare", "settings")
        if not isinstance(raw, dict) or not raw:
            raise ValidationError("compare.settings must be a non-empty object")
        return {
            name: self.degrade_spec(values, section=f"compare.settings.{name}")
            for name, values in raw.items()
        }

    def compare_seeds(self) -> List[int]:
        seeds = self.get("compare", "seeds")
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ValidationError(f"compare.seeds must be a non-empty list of non-negative integers, got {seeds!r}")
        return seeds

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.settings)


def _typed(name: str, value: Any, default: Any, kind: Optional[type] = None) -> Any:
    """Check value against the type of its default, naming the field on mismatch."""
    kind = kind or (type(default) if default is not None else int)
    if value is None:
        if default is None:
            return None
        raise ValidationError(f"{name} must not be null")
    if kind is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{name} must be true or false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{name} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ValidationError(f"{name} must be a string, got {value!r}")
        return value
    return value
